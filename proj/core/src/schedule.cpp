#include "cf/schedule.hpp"

#include <cassert>
#include <cmath>
#include <string>

#include "cf/error.hpp"

namespace cf {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  const Index T = static_cast<Index>(betas_.size());
  if (T < 1) throw ParameterError("schedule.steps: must be >= 1");
  alphas_.resize(betas_.size());
  alpha_bars_.resize(betas_.size() + 1);
  posterior_vars_.resize(betas_.size());
  alpha_bars_[0] = 1.0;
  for (Index t = 1; t <= T; ++t) {
    double b = betas_[t - 1];
    if (!(b > 0.0 && b < 1.0))
      throw ParameterError("schedule.beta[" + std::to_string(t) + "]: must lie in (0, 1), got " +
                           std::to_string(b));
    alphas_[t - 1] = 1.0 - b;
    alpha_bars_[t] = alpha_bars_[t - 1] * alphas_[t - 1];
    // Strict decrease holds because every alpha is in (0, 1); the only
    // failure mode is underflow to zero at absurd T.
    assert(alpha_bars_[t] > 0.0 && alpha_bars_[t] < alpha_bars_[t - 1]);
    posterior_vars_[t - 1] = b * (1.0 - alpha_bars_[t - 1]) / (1.0 - alpha_bars_[t]);
  }
}

Index NoiseSchedule::check_t(Index t) const {
  if (t < 1 || t > steps())
    throw ParameterError("t: must lie in [1, " + std::to_string(steps()) + "], got " +
                         std::to_string(t));
  return t;
}

double NoiseSchedule::alpha_bar(Index t) const {
  if (t < 0 || t > steps())
    throw ParameterError("t: must lie in [0, " + std::to_string(steps()) + "], got " +
                         std::to_string(t));
  return alpha_bars_[t];
}

NoiseSchedule make_schedule(Index steps, ScheduleKind kind, double beta_start,
                            double beta_end) {
  if (steps < 1) throw ParameterError("schedule.steps: must be >= 1");
  if (!(beta_start > 0.0 && beta_start < 1.0))
    throw ParameterError("schedule.beta_start: must lie in (0, 1)");
  if (!(beta_end > 0.0 && beta_end < 1.0))
    throw ParameterError("schedule.beta_end: must lie in (0, 1)");
  if (beta_end < beta_start)
    throw ParameterError("schedule.beta_end: must be >= schedule.beta_start");
  if (kind != ScheduleKind::kLinear) throw ParameterError("schedule.kind: unknown kind");

  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (Index i = 0; i < steps; ++i)
      betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                  static_cast<double>(steps - 1);
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule make_default_schedule() {
  return make_schedule(1000, ScheduleKind::kLinear, 1e-4, 2e-2);
}

Mat add_noise(const Mat& x0, Index t, const Mat& eps, const NoiseSchedule& sched) {
  if (!x0.same_shape(eps)) throw ShapeError("add_noise: x0 and eps shapes differ");
  const double a = std::sqrt(sched.alpha_bar(t));
  const double b = std::sqrt(1.0 - sched.alpha_bar(t));
  Mat out(x0.rows(), x0.cols());
  // Same expression shape as the per-row overload so the two agree bitwise.
  for (Index r = 0; r < x0.rows(); ++r)
    for (Index c = 0; c < x0.cols(); ++c) out(r, c) = a * x0(r, c) + b * eps(r, c);
  return out;
}

Mat add_noise(const Mat& x0, const std::vector<Index>& t_per_row, const Mat& eps,
              const NoiseSchedule& sched) {
  if (!x0.same_shape(eps)) throw ShapeError("add_noise: x0 and eps shapes differ");
  if (static_cast<Index>(t_per_row.size()) != x0.rows())
    throw ShapeError("add_noise: t_per_row length must equal x0 rows");
  Mat out(x0.rows(), x0.cols());
  for (Index r = 0; r < x0.rows(); ++r) {
    const double a = std::sqrt(sched.alpha_bar(t_per_row[r]));
    const double b = std::sqrt(1.0 - sched.alpha_bar(t_per_row[r]));
    for (Index c = 0; c < x0.cols(); ++c) out(r, c) = a * x0(r, c) + b * eps(r, c);
  }
  return out;
}

Mat ddpm_step(const Mat& x_t, const Mat& eps_hat, Index t, const NoiseSchedule& sched,
              Rng& rng, ReverseVariance variance) {
  if (!x_t.same_shape(eps_hat)) throw ShapeError("ddpm_step: x_t and eps_hat shapes differ");
  const double beta = sched.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));

  Mat out(x_t.rows(), x_t.cols());
  out.map() = inv_sqrt_alpha * (x_t.map() - coef * eps_hat.map());
  if (t == 1) return out;  // final step is the posterior mean, no draw

  const double var =
      variance == ReverseVariance::kPosterior ? sched.posterior_var(t) : beta;
  const double sigma = std::sqrt(var);
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < out.cols(); ++c) out(r, c) += sigma * rng.normal();
  return out;
}

}  // namespace cf
