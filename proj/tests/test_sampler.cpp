#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "cf/error.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "cf/sampler.hpp"
#include "cf/schedule.hpp"
#include "doctest.h"

using namespace cf;

namespace {

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

ModelParams live_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams p = init_params(cfg, rng);
  for (Index r = 0; r < p.head_w.rows(); ++r)
    for (Index c = 0; c < p.head_w.cols(); ++c) p.head_w(r, c) = 0.2 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("respace at full length is the identity") {
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  const RespacedSchedule rsp = respace(sched, 10);
  REQUIRE(rsp.sched.steps() == 10);
  for (Index t = 1; t <= 10; ++t) {
    CHECK(rsp.sched.beta(t) == sched.beta(t));
    CHECK(rsp.t_map[static_cast<std::size_t>(t - 1)] == t);
  }
}

TEST_CASE("respace keeps both endpoints and matches marginals") {
  const NoiseSchedule sched = make_schedule(100, ScheduleKind::kLinear, 1e-4, 2e-2);
  const RespacedSchedule rsp = respace(sched, 7);
  REQUIRE(rsp.t_map.size() == 7);
  CHECK(rsp.t_map.front() == 1);
  CHECK(rsp.t_map.back() == 100);
  for (std::size_t j = 1; j < 7; ++j) CHECK(rsp.t_map[j] > rsp.t_map[j - 1]);
  // The respaced cumulative products reproduce the original marginals at
  // the kept steps.
  for (Index j = 1; j <= 7; ++j)
    CHECK(rsp.sched.alpha_bar(j) ==
          doctest::Approx(sched.alpha_bar(rsp.t_map[static_cast<std::size_t>(j - 1)]))
              .epsilon(1e-12));

  const RespacedSchedule one = respace(sched, 1);
  REQUIRE(one.t_map.size() == 1);
  CHECK(one.t_map[0] == 100);
  CHECK(one.sched.beta(1) == doctest::Approx(1.0 - sched.alpha_bar(100)).epsilon(1e-12));

  CHECK_THROWS_AS(respace(sched, 0), ParameterError);
  CHECK_THROWS_AS(respace(sched, 101), ParameterError);
}

TEST_CASE("cfg_combine identities are exact") {
  Mat cond(2, 3), uncond(2, 3);
  Rng rng(1000);
  for (Index i = 0; i < cond.size(); ++i) {
    cond.data()[i] = rng.normal();
    uncond.data()[i] = rng.normal();
  }

  CHECK(cfg_combine(cond, uncond, 1.0, 5, std::nullopt) == cond);
  CHECK(cfg_combine(cond, uncond, 0.0, 5, std::nullopt) == uncond);

  const Mat mixed = cfg_combine(cond, uncond, 2.0, 5, std::nullopt);
  for (Index i = 0; i < cond.size(); ++i)
    CHECK(mixed.data()[i] ==
          doctest::Approx(uncond.data()[i] + 2.0 * (cond.data()[i] - uncond.data()[i]))
              .epsilon(1e-15));

  // Interval gating: guidance only strictly inside (low, high).
  const std::optional<std::pair<Index, Index>> iv(std::in_place, 3, 7);
  CHECK(cfg_combine(cond, uncond, 2.0, 3, iv) == cond);   // at the edge: off
  CHECK(cfg_combine(cond, uncond, 2.0, 7, iv) == cond);   // at the edge: off
  CHECK(cfg_combine(cond, uncond, 2.0, 8, iv) == cond);   // outside: off
  CHECK(cfg_combine(cond, uncond, 2.0, 5, iv) == mixed);  // inside: on

  Mat bad(3, 2);
  CHECK_THROWS_AS(cfg_combine(cond, bad, 1.0, 1, std::nullopt), ShapeError);
}

TEST_CASE("generate is deterministic in the seed and fills every position") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1100);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  SampleRequest req;
  req.s_eval = 3;
  req.ddpm_steps = 5;
  req.class_id = 1;
  req.seed = 9;
  const Mat a = generate(cfg, p, sched, req);
  const Mat b = generate(cfg, p, sched, req);
  CHECK(a == b);
  REQUIRE(a.rows() == cfg.tokens());
  REQUIRE(a.cols() == cfg.token_dim);
  for (Index r = 0; r < a.rows(); ++r) {
    bool live = false;
    for (Index c = 0; c < a.cols(); ++c) live = live || a(r, c) != 0.0;
    CHECK(live);
  }

  req.seed = 10;
  const Mat c = generate(cfg, p, sched, req);
  CHECK(!(a == c));
}

TEST_CASE("ddpm_steps zero equals the full schedule") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1101);
  const NoiseSchedule sched = make_schedule(8, ScheduleKind::kLinear, 1e-4, 2e-2);
  SampleRequest req;
  req.s_eval = 2;
  req.seed = 4;
  req.ddpm_steps = 0;
  const Mat a = generate(cfg, p, sched, req);
  req.ddpm_steps = 8;
  const Mat b = generate(cfg, p, sched, req);
  CHECK(a == b);
}

TEST_CASE("cached and uncached sampling paths agree") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1102);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  SampleRequest req;
  req.s_eval = 4;
  req.ddpm_steps = 5;
  req.class_id = 0;
  req.seed = 21;
  req.use_cache = true;
  const Mat cached = generate(cfg, p, sched, req);
  req.use_cache = false;
  const Mat direct = generate(cfg, p, sched, req);
  REQUIRE(cached.rows() == direct.rows());
  for (Index r = 0; r < cached.rows(); ++r)
    for (Index c = 0; c < cached.cols(); ++c)
      CHECK(cached(r, c) == doctest::Approx(direct(r, c)).epsilon(1e-8));
}

TEST_CASE("guidance scale and reverse variance change the output") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1103);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  SampleRequest req;
  req.s_eval = 2;
  req.ddpm_steps = 4;
  req.class_id = 1;
  req.seed = 33;
  const Mat base = generate(cfg, p, sched, req);

  SampleRequest guided = req;
  guided.cfg_scale = 3.0;
  CHECK(!(generate(cfg, p, sched, guided) == base));

  SampleRequest beta_var = req;
  beta_var.variance = ReverseVariance::kBeta;
  CHECK(!(generate(cfg, p, sched, beta_var) == base));
}

TEST_CASE("guidance outside the interval reduces to the conditional path") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1104);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  SampleRequest req;
  req.s_eval = 2;
  req.ddpm_steps = 4;
  req.seed = 17;
  const Mat plain = generate(cfg, p, sched, req);

  // An interval that excludes every sampled t gates guidance off entirely,
  // so the scaled run must match the unguided one bit for bit.
  SampleRequest gated = req;
  gated.cfg_scale = 5.0;
  gated.cfg_interval.emplace(sched.steps(), sched.steps() + 1);
  const Mat same = generate(cfg, p, sched, gated);
  CHECK(same == plain);
}

TEST_CASE("sample request validation") {
  const ModelConfig cfg = tiny_model();
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  SampleRequest req;
  CHECK_NOTHROW(req.validate(cfg, sched));
  req.s_eval = cfg.tokens() + 1;
  CHECK_THROWS_AS(req.validate(cfg, sched), ParameterError);
  req = SampleRequest{};
  req.ddpm_steps = 11;
  CHECK_THROWS_AS(req.validate(cfg, sched), ParameterError);
  req = SampleRequest{};
  req.cfg_scale = -0.5;
  CHECK_THROWS_AS(req.validate(cfg, sched), ParameterError);
  req = SampleRequest{};
  req.cfg_interval.emplace(5, 5);
  CHECK_THROWS_AS(req.validate(cfg, sched), ParameterError);
  req = SampleRequest{};
  req.class_id = cfg.n_classes + 1;
  CHECK_THROWS_AS(req.validate(cfg, sched), ParameterError);
}

TEST_CASE("edit keeps masked-in tokens bit for bit and regenerates the rest") {
  const ModelConfig cfg = tiny_model();
  const ModelParams p = live_params(cfg, 1105);
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);

  Mat source(cfg.tokens(), cfg.token_dim);
  Rng rng(1200);
  for (Index i = 0; i < source.size(); ++i) source.data()[i] = rng.normal();

  EditRequest req;
  req.source = source;
  req.keep.assign(static_cast<std::size_t>(cfg.tokens()), 0);
  req.keep[0] = req.keep[3] = req.keep[4] = req.keep[8] = 1;
  req.ddpm_steps = 4;
  req.class_id = 1;
  req.seed = 77;

  const Mat out = edit(cfg, p, sched, req);
  for (Index pos = 0; pos < cfg.tokens(); ++pos) {
    if (req.keep[static_cast<std::size_t>(pos)]) {
      for (Index c = 0; c < cfg.token_dim; ++c) CHECK(out(pos, c) == source(pos, c));
    } else {
      bool changed = false;
      for (Index c = 0; c < cfg.token_dim; ++c) changed = changed || out(pos, c) != source(pos, c);
      CHECK(changed);
    }
  }

  // Multiple regen groups keep the same contract.
  EditRequest multi = req;
  multi.regen_groups = 3;
  const Mat out3 = edit(cfg, p, sched, multi);
  for (Index pos = 0; pos < cfg.tokens(); ++pos)
    if (req.keep[static_cast<std::size_t>(pos)])
      for (Index c = 0; c < cfg.token_dim; ++c) CHECK(out3(pos, c) == source(pos, c));
  CHECK(!(out3 == out));
}

TEST_CASE("edit request validation") {
  const ModelConfig cfg = tiny_model();
  const NoiseSchedule sched = make_schedule(10, ScheduleKind::kLinear, 1e-4, 2e-2);
  EditRequest req;
  req.source = Mat(cfg.tokens(), cfg.token_dim);
  req.keep.assign(static_cast<std::size_t>(cfg.tokens()), 0);
  req.keep[0] = 1;
  CHECK_NOTHROW(req.validate(cfg, sched));

  EditRequest bad = req;
  bad.keep.assign(bad.keep.size(), 0);
  CHECK_THROWS_AS(bad.validate(cfg, sched), ParameterError);
  bad = req;
  bad.keep.assign(bad.keep.size(), 1);
  CHECK_THROWS_AS(bad.validate(cfg, sched), ParameterError);
  bad = req;
  bad.regen_groups = cfg.tokens();  // only tokens - 1 are masked
  CHECK_THROWS_AS(bad.validate(cfg, sched), ParameterError);
  bad = req;
  bad.source = Mat(2, 2);
  CHECK_THROWS_AS(bad.validate(cfg, sched), ShapeError);
}
