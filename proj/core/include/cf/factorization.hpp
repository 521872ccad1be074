#pragma once

#include <vector>

#include "cf/mat.hpp"
#include "cf/rng.hpp"

namespace cf {

enum class TokenOrder { kRandom, kRaster, kBlockRaster, kDilated };

struct OrderSpec {
  TokenOrder order = TokenOrder::kRandom;
  Index block = 4;  // block side for kBlockRaster, ignored otherwise
};

// A sampled factorization of one sequence: a token permutation plus the
// AR-step group boundaries over permuted slots. Group s (0-based) owns
// slots [cuts[s], cuts[s+1]); perm[slot] is the grid position served by
// that slot.
struct FactorizationPlan {
  Index total_tokens = 0;
  Index num_steps = 0;
  std::vector<Index> perm;      // slot -> grid position, bijection on [0, L)
  std::vector<Index> cuts;      // 0 = cuts[0] < ... < cuts[S] = L
  std::vector<Index> group_of;  // slot -> 0-based AR step, derived from cuts

  Index group_size(Index s) const { return cuts[s + 1] - cuts[s]; }
  std::vector<Index> group_sizes() const;
  std::vector<Index> inverse_perm() const;  // grid position -> slot

  // Throws if any structural invariant is broken.
  void validate() const;
};

// Draws the number of AR steps from the truncated geometric law
// P(S = s) proportional to gamma^(s-1) on [1, total_tokens].
// gamma == 0 always yields 1; gamma == 1 is uniform.
Index sample_num_steps(Index total_tokens, double gamma, Rng& rng);

// Permutation for the given ordering; consumes rng only for kRandom.
// kBlockRaster requires a square grid with spec.block dividing the side;
// kDilated interleaves with stride num_steps.
std::vector<Index> make_order(Index total_tokens, Index num_steps, const OrderSpec& spec,
                              Rng& rng);

// Random plan: num_steps - 1 distinct interior cuts drawn uniformly
// without replacement, plus the ordering above.
FactorizationPlan sample_plan(Index total_tokens, Index num_steps, const OrderSpec& spec,
                              Rng& rng);

// Deterministic near-equal split: every group has floor(L/S) tokens and
// the remainder goes to the earliest groups. rng is consumed only by a
// kRandom ordering.
FactorizationPlan make_eval_plan(Index total_tokens, Index num_steps,
                                 const OrderSpec& spec, Rng& rng);

// Per-step loss weights, linear decay from lambda at s = 1 to 1 at s = S.
struct ARWeighting {
  double lambda = 2.0;
  std::vector<double> weights;
};
ARWeighting ar_weights(Index num_steps, double lambda);

// Simulates n_plans independent plans and returns counts of group sizes;
// result[k] is the number of groups with exactly k tokens, k in [0, L].
std::vector<long long> kappa_histogram(Index n_plans, Index total_tokens, double gamma,
                                       Rng& rng);

}  // namespace cf
