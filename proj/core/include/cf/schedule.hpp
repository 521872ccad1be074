#pragma once

#include <vector>

#include "cf/mat.hpp"
#include "cf/rng.hpp"

namespace cf {

enum class ScheduleKind { kLinear };

// Variance of the reverse transition: the forward posterior
// beta_t * (1 - abar_{t-1}) / (1 - abar_t), or beta_t itself.
enum class ReverseVariance { kPosterior, kBeta };

// Precomputed coefficients of a T-step Gaussian forward process
//   q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I).
// Steps are 1-based: beta(t) for t in [1, T]; alpha_bar(t) for t in [0, T]
// with alpha_bar(0) == 1 exactly (the clean state).
class NoiseSchedule {
 public:
  // Takes explicit per-step betas; each must lie in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas);

  Index steps() const { return static_cast<Index>(betas_.size()); }
  double beta(Index t) const { return betas_[check_t(t) - 1]; }
  double alpha(Index t) const { return alphas_[check_t(t) - 1]; }
  double alpha_bar(Index t) const;  // t in [0, T]
  double posterior_var(Index t) const { return posterior_vars_[check_t(t) - 1]; }

  const std::vector<double>& betas() const { return betas_; }

 private:
  Index check_t(Index t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;  // alpha_bars_[t] = abar_t, index 0..T
  std::vector<double> posterior_vars_;
};

// Builds the named schedule. Linear interpolates beta_start..beta_end
// inclusive over T steps (a single step uses beta_start).
NoiseSchedule make_schedule(Index steps, ScheduleKind kind, double beta_start,
                            double beta_end);

// Canonical full-scale schedule: linear, T = 1000, 1e-4..2e-2.
NoiseSchedule make_default_schedule();

// Marginal jump to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Mat add_noise(const Mat& x0, Index t, const Mat& eps, const NoiseSchedule& sched);

// Row-wise variant; row r jumps to t_per_row[r]. Used when AR groups of a
// sequence carry different diffusion steps.
Mat add_noise(const Mat& x0, const std::vector<Index>& t_per_row, const Mat& eps,
              const NoiseSchedule& sched);

// One reverse transition x_t -> x_{t-1} given the noise prediction:
//   mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
// plus Gaussian noise with the configured variance. The t == 1 step is
// deterministic and consumes no randomness.
Mat ddpm_step(const Mat& x_t, const Mat& eps_hat, Index t, const NoiseSchedule& sched,
              Rng& rng, ReverseVariance variance = ReverseVariance::kPosterior);

}  // namespace cf
