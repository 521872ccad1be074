#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/error.hpp"
#include "cf/harness.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "cf/sampler.hpp"
#include "cf/schedule.hpp"
#include "cf/trainer.hpp"
#include "doctest.h"

using namespace cf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("cf_harness_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.patch_size = 1;
  cfg.grid_side = 3;
  cfg.token_dim = 2;
  cfg.n_classes = 2;
  cfg.n_class_tokens = 1;
  return cfg;
}

ToyDataset tiny_data(std::uint64_t seed) {
  DataConfig dc;
  dc.n = 60;
  dc.noise_sigma = 0.25;
  dc.corr = 0.5;
  dc.held_out_frac = 0.25;
  Rng rng(seed);
  return make_toy_dataset(dc, 3, 2, 2, rng);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("per-step probe matches the zero-predictor expectation") {
  const ModelConfig cfg = tiny_model();
  Rng init_rng(3000);
  const ModelParams params = init_params(cfg, init_rng);  // zero head: eps_hat == 0
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  const ToyDataset data = tiny_data(3001);

  const std::vector<double> loss = per_step_val_loss(cfg, params, sched, data, 3, 8, 77, 2);
  REQUIRE(loss.size() == 3);
  // With a zero predictor the per-row loss is |eps|^2, mean token_dim.
  // ~300 draws per step put 5 sigma around 0.6.
  for (double v : loss) CHECK(std::abs(v - 2.0) < 0.6);
}

TEST_CASE("per-step probe is bitwise thread-invariant") {
  const ModelConfig cfg = tiny_model();
  Rng init_rng(3002);
  const ModelParams params = init_params(cfg, init_rng);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  const ToyDataset data = tiny_data(3003);

  const std::vector<double> one = per_step_val_loss(cfg, params, sched, data, 4, 2, 9, 1);
  const std::vector<double> four = per_step_val_loss(cfg, params, sched, data, 4, 2, 9, 4);
  CHECK(one == four);
}

TEST_CASE("per-step probe validation") {
  const ModelConfig cfg = tiny_model();
  Rng init_rng(3004);
  const ModelParams params = init_params(cfg, init_rng);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  ToyDataset data = tiny_data(3005);

  CHECK_THROWS_AS(per_step_val_loss(cfg, params, sched, data, 0, 1, 0, 1), ParameterError);
  CHECK_THROWS_AS(per_step_val_loss(cfg, params, sched, data, 10, 1, 0, 1), ParameterError);
  CHECK_THROWS_AS(per_step_val_loss(cfg, params, sched, data, 2, 0, 0, 1), ParameterError);
  data.held_x.clear();
  CHECK_THROWS_AS(per_step_val_loss(cfg, params, sched, data, 2, 1, 0, 1), ParameterError);
}

TEST_CASE("sample sets are thread-invariant and per-image seeded") {
  const ModelConfig cfg = tiny_model();
  Rng init_rng(3006);
  ModelParams params = init_params(cfg, init_rng);
  for (Index r = 0; r < params.head_w.rows(); ++r)
    for (Index c = 0; c < params.head_w.cols(); ++c) params.head_w(r, c) = 0.2 * init_rng.normal();
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  SampleRequest base;
  base.s_eval = 2;
  base.ddpm_steps = 3;
  base.class_id = 1;

  const Mat one = sample_set(cfg, params, sched, base, 5, 42, 1);
  const Mat four = sample_set(cfg, params, sched, base, 5, 42, 4);
  CHECK(one == four);
  REQUIRE(one.rows() == 5);
  REQUIRE(one.cols() == cfg.tokens() * cfg.token_dim);

  // Row i is exactly the single draw at seed mix_seed(seed, i).
  SampleRequest row_req = base;
  row_req.seed = mix_seed(42, 2);
  const Mat grid = generate(cfg, params, sched, row_req);
  for (Index r = 0; r < cfg.tokens(); ++r)
    for (Index c = 0; c < cfg.token_dim; ++c)
      CHECK(one(2, r * cfg.token_dim + c) == grid(r, c));

  CHECK_THROWS_AS(sample_set(cfg, params, sched, base, 0, 42, 1), ParameterError);
}

TEST_CASE("mmd entries are reproducible and detect separation") {
  Rng rng(3007);
  Mat a(30, 4), b(30, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal() + 2.0;

  const MmdEntry e1 = mmd_entry("probe", a, b, 50, 11);
  const MmdEntry e2 = mmd_entry("probe", a, b, 50, 11);
  CHECK(e1.name == "probe");
  CHECK(e1.u_stat == e2.u_stat);
  CHECK(e1.p_value == e2.p_value);
  CHECK(e1.null_q99 == e2.null_q99);
  CHECK(e1.bandwidth > 0.0);
  CHECK(e1.u_stat > 0.1);
  CHECK(e1.p_value >= 1.0 / 51.0);
  CHECK(e1.p_value <= 1.0 / 51.0 + 1e-12);  // no permutation should reach the gap
  CHECK(e1.u_stat > e1.null_q99);
}

TEST_CASE("ablation grid trains cells, survives failures, and writes reports") {
  const ModelConfig cfg = tiny_model();
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  const ToyDataset data = tiny_data(3008);

  TrainConfig base;
  base.batch_size = 2;
  base.total_steps = 2;
  base.warmup_steps = 1;
  base.base_lr = 1e-3;
  base.class_drop = 0.0;
  base.log_every = 1;
  base.checkpoint_every = 0;
  base.seed = 5;

  AblationOptions opts;
  opts.cells = {AblationCell{"s=2", 2, 1.0}, AblationCell{"gamma=0.9", 0, 0.9},
                AblationCell{"s=20", 20, 1.0}};  // 20 > tokens: must fail, not abort
  opts.s_evals = {1, 2};
  opts.eval_samples = 6;
  opts.eval_ddpm_steps = 3;
  opts.mmd_permutations = 19;
  opts.probe_s = 2;
  opts.probe_t_draws = 1;
  opts.eval_class = 0;
  opts.kappa_plans = 40;

  TempDir tmp;
  const fs::path out = tmp.path / "grid";
  const std::vector<EvalReport> reports = run_ablation(cfg, base, sched, data, opts, 2, out);
  REQUIRE(reports.size() == 3);
  CHECK(reports[0].ok);
  CHECK(reports[1].ok);
  CHECK(!reports[2].ok);
  CHECK(!reports[2].error.empty());

  // Fixed S = 2: every plan contributes exactly two group sizes summing
  // to the token count.
  long long n_sizes = 0, token_sum = 0;
  for (std::size_t k = 0; k < reports[0].kappa_hist.size(); ++k) {
    n_sizes += reports[0].kappa_hist[k];
    token_sum += static_cast<long long>(k) * reports[0].kappa_hist[k];
  }
  CHECK(n_sizes == 2 * opts.kappa_plans);
  CHECK(token_sum == opts.kappa_plans * cfg.tokens());

  long long gamma_tokens = 0;
  for (std::size_t k = 0; k < reports[1].kappa_hist.size(); ++k)
    gamma_tokens += static_cast<long long>(k) * reports[1].kappa_hist[k];
  CHECK(gamma_tokens == opts.kappa_plans * cfg.tokens());

  REQUIRE(reports[0].mmd.size() == 2);
  CHECK(reports[0].mmd[0].name == "s_eval=1");
  CHECK(reports[0].mmd[1].name == "s_eval=2");
  CHECK(reports[0].per_step_loss.size() == 2);
  CHECK(reports[0].train_steps == std::vector<double>{1.0, 2.0});

  CHECK(fs::exists(out / "s=2" / "checkpoint.cfkt"));
  CHECK(fs::exists(out / "s=2" / "metrics.tsv"));
  CHECK(fs::exists(out / "ablation.tsv"));
  CHECK(fs::exists(out / "per_step_loss.tsv"));
  CHECK(fs::exists(out / "loss_curves.svg"));
  CHECK(fs::exists(out / "per_step_loss.svg"));
  CHECK(fs::exists(out / "mmd_by_s_eval.svg"));
  CHECK(fs::exists(out / "kappa_hist.svg"));
  CHECK(slurp(out / "ablation.tsv").find("FAILED") != std::string::npos);
  CHECK(slurp(out / "loss_curves.svg").rfind("<svg", 0) == 0);

  // The whole grid is a pure function of its inputs.
  const fs::path out2 = tmp.path / "grid2";
  run_ablation(cfg, base, sched, data, opts, 1, out2);
  CHECK(slurp(out / "ablation.tsv") == slurp(out2 / "ablation.tsv"));
  CHECK(slurp(out / "per_step_loss.tsv") == slurp(out2 / "per_step_loss.tsv"));
}
