#include <cmath>
#include <vector>

#include "cf/error.hpp"
#include "cf/mat.hpp"
#include "cf/rng.hpp"
#include "cf/schedule.hpp"
#include "doctest.h"

using namespace cf;

namespace {

NoiseSchedule toy_schedule() { return NoiseSchedule({0.1, 0.2, 0.3, 0.4}); }

}  // namespace

TEST_CASE("alpha_bar matches hand-computed products") {
  const NoiseSchedule s = toy_schedule();
  CHECK(s.steps() == 4);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(s.alpha_bar(3) == doctest::Approx(0.504).epsilon(1e-15));
  CHECK(s.alpha_bar(4) == doctest::Approx(0.3024).epsilon(1e-15));
}

TEST_CASE("alpha_bar satisfies the product recurrence on the default schedule") {
  const NoiseSchedule s = make_default_schedule();
  CHECK(s.steps() == 1000);
  for (Index t = 1; t <= s.steps(); ++t) {
    const double expect = s.alpha_bar(t - 1) * s.alpha(t);
    CHECK(std::abs(s.alpha_bar(t) - expect) <= 1e-12 * std::abs(expect));
    CHECK(s.alpha(t) == doctest::Approx(1.0 - s.beta(t)).epsilon(1e-15));
  }
  // Linear endpoints are hit exactly.
  CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(s.beta(1000) == doctest::Approx(2e-2).epsilon(1e-15));
}

TEST_CASE("posterior variance matches the closed form") {
  const NoiseSchedule s = toy_schedule();
  for (Index t = 1; t <= s.steps(); ++t) {
    const double expect =
        s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
    CHECK(s.posterior_var(t) == doctest::Approx(expect).epsilon(1e-15));
  }
}

TEST_CASE("schedule rejects bad betas and bad step indices") {
  CHECK_THROWS_AS(NoiseSchedule({0.1, 1.0}), ParameterError);
  CHECK_THROWS_AS(NoiseSchedule({0.0}), ParameterError);
  CHECK_THROWS_AS(NoiseSchedule({}), ParameterError);
  const NoiseSchedule s = toy_schedule();
  CHECK_THROWS_AS(s.beta(0), ParameterError);
  CHECK_THROWS_AS(s.beta(5), ParameterError);
  CHECK_THROWS_AS(s.alpha_bar(5), ParameterError);
  CHECK_NOTHROW(s.alpha_bar(0));
}

TEST_CASE("add_noise reproduces a frozen scalar value") {
  const NoiseSchedule s = toy_schedule();
  Mat x0(1, 1);
  x0(0, 0) = 1.5;
  Mat eps(1, 1);
  eps(0, 0) = 0.2;
  // t = 2: sqrt(0.72) * 1.5 + sqrt(0.28) * 0.2
  const Mat xt = add_noise(x0, 2, eps, s);
  CHECK(xt(0, 0) == doctest::Approx(1.3786222585783694).epsilon(1e-15));
}

TEST_CASE("row-wise add_noise agrees with the scalar form per row") {
  const NoiseSchedule s = toy_schedule();
  Rng rng(77);
  Mat x0(4, 3), eps(4, 3);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 3; ++c) {
      x0(r, c) = rng.normal();
      eps(r, c) = rng.normal();
    }
  const std::vector<Index> ts = {1, 3, 2, 4};
  const Mat got = add_noise(x0, ts, eps, s);
  for (Index r = 0; r < 4; ++r) {
    Mat row_x0(1, 3), row_eps(1, 3);
    for (Index c = 0; c < 3; ++c) {
      row_x0(0, c) = x0(r, c);
      row_eps(0, c) = eps(r, c);
    }
    const Mat want = add_noise(row_x0, ts[static_cast<std::size_t>(r)], row_eps, s);
    for (Index c = 0; c < 3; ++c) CHECK(got(r, c) == want(0, c));
  }
}

TEST_CASE("add_noise marginals match N(sqrt(abar) x0, 1 - abar) by Monte Carlo") {
  const NoiseSchedule s = make_schedule(100, ScheduleKind::kLinear, 1e-4, 2e-2);
  const double x0v = 0.7;
  const int n = 100000;
  for (const Index t : {Index{1}, Index{50}, Index{100}}) {
    Rng rng(mix_seed(900, static_cast<std::uint64_t>(t)));
    Mat x0(1, 1), eps(1, 1);
    x0(0, 0) = x0v;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
      eps(0, 0) = rng.normal();
      const double v = add_noise(x0, t, eps, s)(0, 0);
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double want_mean = std::sqrt(s.alpha_bar(t)) * x0v;
    const double want_sd = std::sqrt(1.0 - s.alpha_bar(t));
    CHECK(std::abs(mean - want_mean) <= 0.01 * (std::abs(want_mean) + want_sd));
    CHECK(std::abs(std::sqrt(var) - want_sd) <= 0.01 * want_sd + 1e-9);
  }
}

TEST_CASE("ddpm_step mean matches the closed form and t=1 draws no noise") {
  const NoiseSchedule s = toy_schedule();
  Mat xt(2, 2), eps_hat(2, 2);
  Rng fill(13);
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < 2; ++c) {
      xt(r, c) = fill.normal();
      eps_hat(r, c) = fill.normal();
    }

  SUBCASE("t = 1 is deterministic and consumes no rng state") {
    Rng rng(5);
    const std::uint64_t before = Rng(5).next_u64();
    const Mat out = ddpm_step(xt, eps_hat, 1, s, rng);
    CHECK(rng.next_u64() == before);  // untouched stream
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(1));
    const double coef = s.beta(1) / std::sqrt(1.0 - s.alpha_bar(1));
    for (Index r = 0; r < 2; ++r)
      for (Index c = 0; c < 2; ++c) {
        const double mu = inv_sqrt_alpha * (xt(r, c) - coef * eps_hat(r, c));
        CHECK(out(r, c) == doctest::Approx(mu).epsilon(1e-15));
      }
  }

  SUBCASE("t > 1 adds noise with the posterior variance") {
    const Index t = 3;
    Rng rng(5);
    Rng shadow(5);
    const Mat out = ddpm_step(xt, eps_hat, t, s, rng);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    const double sd = std::sqrt(s.posterior_var(t));
    for (Index r = 0; r < 2; ++r)
      for (Index c = 0; c < 2; ++c) {
        const double mu = inv_sqrt_alpha * (xt(r, c) - coef * eps_hat(r, c));
        const double want = mu + sd * shadow.normal();
        CHECK(out(r, c) == doctest::Approx(want).epsilon(1e-14));
      }
  }

  SUBCASE("beta variance swaps in beta_t") {
    const Index t = 2;
    Rng rng(5);
    Rng shadow(5);
    const Mat out = ddpm_step(xt, eps_hat, t, s, rng, ReverseVariance::kBeta);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    const double sd = std::sqrt(s.beta(t));
    for (Index r = 0; r < 2; ++r)
      for (Index c = 0; c < 2; ++c) {
        const double mu = inv_sqrt_alpha * (xt(r, c) - coef * eps_hat(r, c));
        const double want = mu + sd * shadow.normal();
        CHECK(out(r, c) == doctest::Approx(want).epsilon(1e-14));
      }
  }
}

TEST_CASE("ddpm_step noise order is row major") {
  // The noise values consumed must land in row-major order so that the
  // result is independent of internal evaluation strategy.
  const NoiseSchedule s = toy_schedule();
  Mat xt(2, 2);
  Mat eps_hat(2, 2);
  Rng rng(21);
  const Mat out = ddpm_step(xt, eps_hat, 2, s, rng);
  Rng shadow(21);
  const double sd = std::sqrt(s.posterior_var(2));
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < 2; ++c)
      CHECK(out(r, c) == doctest::Approx(sd * shadow.normal()).epsilon(1e-14));
}
