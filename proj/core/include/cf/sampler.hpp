#pragma once

#include <optional>
#include <utility>

#include "cf/factorization.hpp"
#include "cf/model.hpp"
#include "cf/schedule.hpp"

namespace cf {

// Shortened reverse schedule. The coefficient set is recomputed on the
// kept subsequence; t_map[j - 1] is the original step index the model is
// conditioned on at respaced level j. Requesting the full length returns
// the original coefficients unchanged.
struct RespacedSchedule {
  NoiseSchedule sched;
  std::vector<Index> t_map;
};
RespacedSchedule respace(const NoiseSchedule& sched, Index n_steps);

// Classifier-free guidance combination
//   uncond + scale * (cond - uncond)
// applied only when t lies strictly inside the optional (t_low, t_high)
// window; outside it the conditional prediction passes through. Scale 1
// returns cond and scale 0 returns uncond exactly, with no arithmetic.
Mat cfg_combine(const Mat& cond, const Mat& uncond, double scale, Index t,
                const std::optional<std::pair<Index, Index>>& interval);

struct SampleRequest {
  Index s_eval = 1;
  Index ddpm_steps = 0;  // 0 uses the full schedule
  double cfg_scale = 1.0;
  std::optional<std::pair<Index, Index>> cfg_interval;
  OrderSpec order{};
  Index class_id = 0;
  ReverseVariance variance = ReverseVariance::kPosterior;
  std::uint64_t seed = 0;
  // Reuses per-layer context keys/values across the inner reverse loop;
  // off switches to full-sequence forwards (same math, reference path).
  bool use_cache = true;

  void validate(const ModelConfig& cfg, const NoiseSchedule& sched) const;
};

// Draws one token grid (tokens() x token_dim, grid order). AR groups come
// from the near-equal eval split of s_eval steps; each group runs its own
// reverse chain conditioned on the groups already generated.
Mat generate(const ModelConfig& cfg, const ModelParams& params, const NoiseSchedule& sched,
             const SampleRequest& req);

struct EditRequest {
  Mat source;                      // tokens() x token_dim, grid order
  std::vector<std::uint8_t> keep;  // per position; nonzero survives untouched
  Index class_id = 0;
  Index ddpm_steps = 0;
  double cfg_scale = 1.0;
  std::optional<std::pair<Index, Index>> cfg_interval;
  Index regen_groups = 1;  // masked positions as one group, or several
  ReverseVariance variance = ReverseVariance::kPosterior;
  std::uint64_t seed = 0;
  bool use_cache = true;

  void validate(const ModelConfig& cfg, const NoiseSchedule& sched) const;
};

// Regenerates the masked positions conditioned on the kept ones (and the
// requested class), treating the kept set as the first AR group. Kept
// tokens are copied through bit for bit.
Mat edit(const ModelConfig& cfg, const ModelParams& params, const NoiseSchedule& sched,
         const EditRequest& req);

}  // namespace cf
