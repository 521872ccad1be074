#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/error.hpp"
#include "cf/io.hpp"
#include "cf/rng.hpp"
#include "cf/trainer.hpp"
#include "doctest.h"

using namespace cf;
namespace fs = std::filesystem;

namespace {

ModelConfig desk_model() {
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

TrainConfig desk_train() {
  TrainConfig tc;
  tc.batch_size = 4;
  tc.total_steps = 3;
  tc.warmup_steps = 2;
  tc.base_lr = 1e-3;
  tc.gamma = 0.9;
  tc.lambda = 2.0;
  tc.class_drop = 0.1;
  tc.ema_decay = 0.99;
  tc.seed = 11;
  tc.log_every = 1;
  return tc;
}

ToyDataset desk_data(const ModelConfig& mc, Index n = 24) {
  DataConfig dc;
  dc.n = n;
  Rng rng(derive_rng(3, Stream::kDataset));
  return make_toy_dataset(dc, mc.grid_side, mc.token_dim, mc.n_classes, rng);
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  std::vector<const Mat*> av, bv;
  a.for_each([&](const std::string&, const Mat& m) { av.push_back(&m); });
  b.for_each([&](const std::string&, const Mat& m) { bv.push_back(&m); });
  if (av.size() != bv.size()) return false;
  for (std::size_t i = 0; i < av.size(); ++i)
    if (!(*av[i] == *bv[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("sample_t modes draw the documented counts and ranges") {
  const Index T = 50;
  SUBCASE("shared: one draw for every group") {
    Rng rng(900);
    const std::vector<Index> t = sample_t(TimeSampling::kShared, 4, 2, T, rng);
    REQUIRE(t.size() == 4);
    for (Index v : t) {
      CHECK(v == t[0]);
      CHECK(v >= 1);
      CHECK(v <= T);
    }
    // Exactly one raw draw consumed.
    Rng shadow(900);
    shadow.next_u64();
    CHECK(rng.next_u64() == shadow.next_u64());
  }
  SUBCASE("per-group: independent draws") {
    Rng rng(901);
    const std::vector<Index> t = sample_t(TimeSampling::kPerGroupRandom, 6, 2, T, rng);
    REQUIRE(t.size() == 6);
    bool distinct = false;
    for (std::size_t i = 1; i < t.size(); ++i) distinct = distinct || t[i] != t[0];
    CHECK(distinct);
    for (Index v : t) {
      CHECK(v >= 1);
      CHECK(v <= T);
    }
  }
  SUBCASE("multi-t: k entries per group, s-major") {
    Rng rng(902);
    const std::vector<Index> t = sample_t(TimeSampling::kMultiT, 3, 4, T, rng);
    REQUIRE(t.size() == 12);
  }
  SUBCASE("t covers the full 1..T range") {
    Rng rng(903);
    std::vector<bool> seen(static_cast<std::size_t>(T + 1), false);
    for (int i = 0; i < 3000; ++i)
      for (Index v : sample_t(TimeSampling::kShared, 1, 2, T, rng))
        seen[static_cast<std::size_t>(v)] = true;
    for (Index v = 1; v <= T; ++v) CHECK(seen[static_cast<std::size_t>(v)]);
    CHECK(!seen[0]);
  }
}

TEST_CASE("make_batch is a pure function of (seed, step)") {
  const ModelConfig mc = desk_model();
  const TrainConfig tc = desk_train();
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(20, ScheduleKind::kLinear, 1e-4, 2e-2);

  const std::vector<TrainItem> a = make_batch(data, mc, tc, sched, 5);
  const std::vector<TrainItem> b = make_batch(data, mc, tc, sched, 5);
  const std::vector<TrainItem> c = make_batch(data, mc, tc, sched, 6);
  REQUIRE(a.size() == static_cast<std::size_t>(tc.batch_size));
  REQUIRE(b.size() == a.size());
  bool same = true, diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i].x0 == b[i].x0 && a[i].eps == b[i].eps &&
           a[i].class_id == b[i].class_id && a[i].plan.cuts == b[i].plan.cuts &&
           a[i].plan.perm == b[i].plan.perm && a[i].t_per_group == b[i].t_per_group;
    diff = diff || !(a[i].x0 == c[i].x0) || a[i].plan.cuts != c[i].plan.cuts ||
           a[i].t_per_group != c[i].t_per_group;
  }
  CHECK(same);
  CHECK(diff);

  for (const TrainItem& item : a) {
    item.plan.validate();
    CHECK(item.x0.rows() == mc.tokens());
    CHECK(item.eps.rows() == item.repeat * mc.tokens());
    CHECK(item.t_per_group.size() ==
          static_cast<std::size_t>(item.plan.num_steps * item.repeat));
    CHECK(item.class_id >= 0);
    CHECK(item.class_id <= mc.n_classes);  // null class allowed
  }
}

TEST_CASE("fixed_num_steps pins every plan") {
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.fixed_num_steps = 1;
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(20, ScheduleKind::kLinear, 1e-4, 2e-2);
  for (Index step = 0; step < 3; ++step)
    for (const TrainItem& item : make_batch(data, mc, tc, sched, step))
      CHECK(item.plan.num_steps == 1);
  tc.fixed_num_steps = 4;
  for (const TrainItem& item : make_batch(data, mc, tc, sched, 0))
    CHECK(item.plan.num_steps == 4);
}

TEST_CASE("class_drop replaces labels with the null class at the configured rate") {
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.batch_size = 64;
  tc.class_drop = 0.25;
  const ToyDataset data = desk_data(mc, 64);
  const NoiseSchedule sched = make_schedule(20, ScheduleKind::kLinear, 1e-4, 2e-2);
  Index dropped = 0, total = 0;
  for (Index step = 0; step < 40; ++step)
    for (const TrainItem& item : make_batch(data, mc, tc, sched, step)) {
      ++total;
      if (item.class_id == mc.null_class()) ++dropped;
    }
  const double frac = static_cast<double>(dropped) / static_cast<double>(total);
  CHECK(frac > 0.18);
  CHECK(frac < 0.32);

  tc.class_drop = 0.0;
  for (const TrainItem& item : make_batch(data, mc, tc, sched, 0))
    CHECK(item.class_id != mc.null_class());
}

TEST_CASE("assemble_sequence lays rows out to match the plan") {
  const ModelConfig mc = desk_model();
  const NoiseSchedule sched = NoiseSchedule({0.1, 0.2, 0.3, 0.4});
  Rng rng(905);

  TrainItem item;
  item.plan = sample_plan(mc.tokens(), 3, OrderSpec{TokenOrder::kRandom, 4}, rng);
  item.class_id = 1;
  item.x0 = Mat(mc.tokens(), mc.token_dim);
  for (Index i = 0; i < item.x0.size(); ++i) item.x0.data()[i] = rng.normal();
  item.t_per_group = {4, 2, 3};
  item.repeat = 1;
  item.eps = Mat(mc.tokens(), mc.token_dim);
  for (Index i = 0; i < item.eps.size(); ++i) item.eps.data()[i] = rng.normal();

  const AssembledSequence seq = assemble_sequence(item, mc, sched, 2.0);
  const std::vector<Index>& cuts = item.plan.cuts;
  const Index ctx_len = cuts[2];  // groups 0 and 1 serve as context

  REQUIRE(seq.clean_ctx.rows() == ctx_len);
  REQUIRE(seq.noisy.rows() == mc.tokens());
  REQUIRE(seq.mask.size() == mc.n_cond() + ctx_len + mc.tokens());

  // Context rows are the clean tokens of groups 0..S-2 in slot order.
  for (Index slot = 0; slot < ctx_len; ++slot) {
    const Index pos = item.plan.perm[static_cast<std::size_t>(slot)];
    CHECK(seq.ctx_positions[static_cast<std::size_t>(slot)] == pos);
    for (Index c = 0; c < mc.token_dim; ++c)
      CHECK(seq.clean_ctx(slot, c) == item.x0(pos, c));
  }

  // Noisy rows: group s runs over its slots with that group's t; values
  // follow the forward marginal with the drawn eps.
  const ARWeighting w = ar_weights(3, 2.0);
  for (Index s = 0; s < 3; ++s) {
    const Index t = item.t_per_group[static_cast<std::size_t>(s)];
    const double a = std::sqrt(sched.alpha_bar(t));
    const double b = std::sqrt(1.0 - sched.alpha_bar(t));
    for (Index slot = cuts[s]; slot < cuts[s + 1]; ++slot) {
      const Index pos = item.plan.perm[static_cast<std::size_t>(slot)];
      CHECK(seq.noisy_positions[static_cast<std::size_t>(slot)] == pos);
      CHECK(seq.t_per_noisy[static_cast<std::size_t>(slot)] == t);
      CHECK(seq.row_weights[static_cast<std::size_t>(slot)] ==
            doctest::Approx(w.weights[static_cast<std::size_t>(s)]).epsilon(1e-15));
      for (Index c = 0; c < mc.token_dim; ++c) {
        const double want = a * item.x0(pos, c) + b * seq.target_eps(slot, c);
        CHECK(seq.noisy(slot, c) == doctest::Approx(want).epsilon(1e-14));
        CHECK(seq.target_eps(slot, c) == item.eps(slot, c));
      }
    }
  }
}

TEST_CASE("assemble_sequence with repeat places copies s-major") {
  const ModelConfig mc = desk_model();
  const NoiseSchedule sched = NoiseSchedule({0.1, 0.2, 0.3, 0.4});
  Rng rng(906);

  TrainItem item;
  item.plan = sample_plan(mc.tokens(), 2, OrderSpec{TokenOrder::kRaster, 4}, rng);
  item.class_id = 0;
  item.x0 = Mat(mc.tokens(), mc.token_dim);
  for (Index i = 0; i < item.x0.size(); ++i) item.x0.data()[i] = rng.normal();
  item.repeat = 2;
  item.t_per_group = {1, 3, 2, 4};  // (s=0,j=0), (s=0,j=1), (s=1,j=0), (s=1,j=1)
  item.eps = Mat(2 * mc.tokens(), mc.token_dim);
  for (Index i = 0; i < item.eps.size(); ++i) item.eps.data()[i] = rng.normal();

  const AssembledSequence seq = assemble_sequence(item, mc, sched, 1.0);
  const std::vector<Index> sizes = item.plan.group_sizes();
  REQUIRE(seq.noisy.rows() == 2 * mc.tokens());

  Index row = 0;
  for (Index s = 0; s < 2; ++s)
    for (Index j = 0; j < 2; ++j)
      for (Index slot = item.plan.cuts[s]; slot < item.plan.cuts[s + 1]; ++slot, ++row) {
        CHECK(seq.t_per_noisy[static_cast<std::size_t>(row)] ==
              item.t_per_group[static_cast<std::size_t>(s * 2 + j)]);
        CHECK(seq.noisy_positions[static_cast<std::size_t>(row)] ==
              item.plan.perm[static_cast<std::size_t>(slot)]);
      }
  // Mask matches the repeated builder with conditions in front.
  const AttentionMask want = prepend_condition(build_mask_repeated(sizes, 2), mc.n_cond());
  CHECK(seq.mask == want);
}

TEST_CASE("train_step is bitwise identical across thread counts") {
  const ModelConfig mc = desk_model();
  const TrainConfig tc = desk_train();
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  TrainState s1 = init_train_state(mc, tc);
  TrainState s4 = init_train_state(mc, tc);
  CHECK(params_equal(s1.params, s4.params));

  for (Index step = 0; step < 3; ++step) {
    const std::vector<TrainItem> batch = make_batch(data, mc, tc, sched, step);
    const StepMetrics m1 = train_step(s1, batch, mc, tc, sched, 1);
    const StepMetrics m4 = train_step(s4, batch, mc, tc, sched, 4);
    CHECK(m1.loss == m4.loss);
    CHECK(m1.grad_norm == m4.grad_norm);
    CHECK(m1.lr == m4.lr);
  }
  CHECK(params_equal(s1.params, s4.params));
  CHECK(params_equal(s1.ema, s4.ema));
  CHECK(params_equal(s1.m, s4.m));
  CHECK(params_equal(s1.v, s4.v));
}

TEST_CASE("warmup scales the learning rate linearly then holds the base") {
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.warmup_steps = 4;
  tc.total_steps = 6;
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  TrainState state = init_train_state(mc, tc);
  std::vector<double> lrs;
  for (Index step = 0; step < 6; ++step) {
    const std::vector<TrainItem> batch = make_batch(data, mc, tc, sched, step);
    lrs.push_back(train_step(state, batch, mc, tc, sched, 1).lr);
  }
  CHECK(lrs[0] == doctest::Approx(tc.base_lr * 1.0 / 4.0).epsilon(1e-15));
  CHECK(lrs[1] == doctest::Approx(tc.base_lr * 2.0 / 4.0).epsilon(1e-15));
  CHECK(lrs[2] == doctest::Approx(tc.base_lr * 3.0 / 4.0).epsilon(1e-15));
  CHECK(lrs[3] == doctest::Approx(tc.base_lr).epsilon(1e-15));
  CHECK(lrs[4] == doctest::Approx(tc.base_lr).epsilon(1e-15));
  CHECK(lrs[5] == doctest::Approx(tc.base_lr).epsilon(1e-15));
  CHECK(state.step == 6);
}

TEST_CASE("initial loss sits near the untrained expectation") {
  // Zero head predicts zero noise, so the per-row squared error is the
  // norm of unit-normal eps: E[loss] = mean row weight * token_dim.
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.batch_size = 32;
  tc.lambda = 1.0;  // flat weights make the expectation exactly token_dim
  const ToyDataset data = desk_data(mc, 64);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  TrainState state = init_train_state(mc, tc);
  const std::vector<TrainItem> batch = make_batch(data, mc, tc, sched, 0);
  const StepMetrics m = train_step(state, batch, mc, tc, sched, 1);
  CHECK(m.loss > 0.6 * static_cast<double>(mc.token_dim));
  CHECK(m.loss < 1.6 * static_cast<double>(mc.token_dim));
  CHECK(m.grad_norm > 0.0);
}

TEST_CASE("ema tracks parameters with the configured decay") {
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.ema_decay = 0.5;
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  TrainState state = init_train_state(mc, tc);
  CHECK(params_equal(state.params, state.ema));
  const ModelParams before = state.params;

  const std::vector<TrainItem> batch = make_batch(data, mc, tc, sched, 0);
  train_step(state, batch, mc, tc, sched, 1);

  // ema' = d * before + (1 - d) * params'.
  std::vector<const Mat*> b0, p1, e1;
  before.for_each([&](const std::string&, const Mat& m) { b0.push_back(&m); });
  state.params.for_each([&](const std::string&, const Mat& m) { p1.push_back(&m); });
  state.ema.for_each([&](const std::string&, const Mat& m) { e1.push_back(&m); });
  for (std::size_t i = 0; i < b0.size(); ++i)
    for (Index r = 0; r < b0[i]->rows(); ++r)
      for (Index c = 0; c < b0[i]->cols(); ++c) {
        const double want = 0.5 * (*b0[i])(r, c) + 0.5 * (*p1[i])(r, c);
        CHECK((*e1[i])(r, c) == doctest::Approx(want).epsilon(1e-12));
      }
}

TEST_CASE("train_loop logs, checkpoints, and resumes deterministically") {
  const ModelConfig mc = desk_model();
  TrainConfig tc = desk_train();
  tc.total_steps = 4;
  tc.log_every = 2;
  tc.checkpoint_every = 2;
  const ToyDataset data = desk_data(mc);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  const fs::path dir = fs::temp_directory_path() /
                       ("cf_trainer_test_" +
                        std::to_string(std::random_device{}() % 1000000));
  fs::create_directories(dir);

  {
    TrainState state = init_train_state(mc, tc);
    MetricsLog log(dir / "metrics.tsv");
    const StepMetrics last = train_loop(state, data, mc, tc, sched, 2, dir, &log);
    CHECK(state.step == 4);
    CHECK(last.loss > 0.0);
  }

  CHECK(fs::exists(dir / "checkpoint_2.cfkt"));
  // The final step is covered by checkpoint.cfkt, not a numbered file.
  CHECK(!fs::exists(dir / "checkpoint_4.cfkt"));
  CHECK(fs::exists(dir / "checkpoint.cfkt"));

  const std::vector<MetricsRow> rows = read_metrics(dir / "metrics.tsv");
  REQUIRE(!rows.empty());
  std::vector<Index> loss_steps;
  for (const MetricsRow& r : rows)
    if (r.key == "loss") loss_steps.push_back(r.step);
  CHECK(loss_steps == std::vector<Index>{2, 4});

  // The final checkpoint holds both raw and EMA parameters.
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.cfkt");
  CHECK(ck.has_ema);
  CHECK(ck.config.dim == mc.dim);

  fs::remove_all(dir);
}

TEST_CASE("train config validation") {
  const Index tokens = 9;
  TrainConfig tc = desk_train();
  CHECK_NOTHROW(tc.validate(tokens));
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.gamma = 1.5;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.fixed_num_steps = tokens + 1;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.lambda = 0.5;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.ema_decay = 1.5;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.class_drop = -0.1;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
  tc = desk_train();
  tc.t_sampling = TimeSampling::kMultiT;
  tc.multi_t_k = 0;
  CHECK_THROWS_AS(tc.validate(tokens), ParameterError);
}
