#include "cf/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cf/error.hpp"

namespace cf {

std::vector<Index> FactorizationPlan::group_sizes() const {
  std::vector<Index> sizes(static_cast<std::size_t>(num_steps));
  for (Index s = 0; s < num_steps; ++s) sizes[s] = group_size(s);
  return sizes;
}

std::vector<Index> FactorizationPlan::inverse_perm() const {
  std::vector<Index> inv(perm.size());
  for (std::size_t slot = 0; slot < perm.size(); ++slot)
    inv[static_cast<std::size_t>(perm[slot])] = static_cast<Index>(slot);
  return inv;
}

void FactorizationPlan::validate() const {
  const Index L = total_tokens;
  const Index S = num_steps;
  if (L < 1) throw ParameterError("plan.total_tokens: must be >= 1");
  if (S < 1 || S > L) throw ParameterError("plan.num_steps: must lie in [1, total_tokens]");
  if (static_cast<Index>(cuts.size()) != S + 1)
    throw ShapeError("plan.cuts: expected num_steps + 1 entries");
  if (cuts.front() != 0 || cuts.back() != L)
    throw ParameterError("plan.cuts: must start at 0 and end at total_tokens");
  for (Index s = 0; s < S; ++s)
    if (cuts[s] >= cuts[s + 1]) throw ParameterError("plan.cuts: must be strictly increasing");
  if (static_cast<Index>(perm.size()) != L)
    throw ShapeError("plan.perm: expected total_tokens entries");
  std::vector<bool> seen(static_cast<std::size_t>(L), false);
  for (Index p : perm) {
    if (p < 0 || p >= L || seen[static_cast<std::size_t>(p)])
      throw ParameterError("plan.perm: not a bijection on [0, total_tokens)");
    seen[static_cast<std::size_t>(p)] = true;
  }
  if (static_cast<Index>(group_of.size()) != L)
    throw ShapeError("plan.group_of: expected total_tokens entries");
  for (Index s = 0; s < S; ++s)
    for (Index slot = cuts[s]; slot < cuts[s + 1]; ++slot)
      if (group_of[static_cast<std::size_t>(slot)] != s)
        throw ParameterError("plan.group_of: inconsistent with cuts");
}

Index sample_num_steps(Index total_tokens, double gamma, Rng& rng) {
  const Index L = total_tokens;
  if (L < 1) throw ParameterError("total_tokens: must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ParameterError("gamma: must lie in [0, 1], got " + std::to_string(gamma));
  if (gamma == 0.0 || L == 1) return 1;
  if (gamma == 1.0) return 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(L)));

  // Inverse-CDF walk over the truncated support. O(L), exact by
  // construction against the normalized weights.
  const double u = rng.uniform();
  double z = 0.0, w = 1.0;
  for (Index s = 1; s <= L; ++s, w *= gamma) z += w;
  double target = u * z;
  double acc = 0.0;
  w = 1.0;
  for (Index s = 1; s <= L; ++s, w *= gamma) {
    acc += w;
    if (target < acc) return s;
  }
  return L;  // guard against accumulated rounding at u near 1
}

namespace {

std::vector<Index> raster_order(Index L) {
  std::vector<Index> p(static_cast<std::size_t>(L));
  std::iota(p.begin(), p.end(), Index{0});
  return p;
}

Index grid_side_of(Index L, const char* what) {
  auto side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(L))));
  if (side * side != L)
    throw ParameterError(std::string(what) + ": total_tokens must be a perfect square, got " +
                         std::to_string(L));
  return side;
}

}  // namespace

std::vector<Index> make_order(Index total_tokens, Index num_steps, const OrderSpec& spec,
                              Rng& rng) {
  const Index L = total_tokens;
  if (L < 1) throw ParameterError("total_tokens: must be >= 1");
  switch (spec.order) {
    case TokenOrder::kRaster:
      return raster_order(L);
    case TokenOrder::kRandom: {
      auto p = raster_order(L);
      rng.shuffle(p);
      return p;
    }
    case TokenOrder::kBlockRaster: {
      const Index side = grid_side_of(L, "order.block_raster");
      const Index b = spec.block;
      if (b < 1 || side % b != 0)
        throw ParameterError("order.block: must divide the grid side " + std::to_string(side) +
                             ", got " + std::to_string(b));
      std::vector<Index> p;
      p.reserve(static_cast<std::size_t>(L));
      for (Index br = 0; br < side; br += b)
        for (Index bc = 0; bc < side; bc += b)
          for (Index r = br; r < br + b; ++r)
            for (Index c = bc; c < bc + b; ++c) p.push_back(r * side + c);
      return p;
    }
    case TokenOrder::kDilated: {
      // Stride-S interleave: residue classes mod num_steps, each in
      // ascending position order. Collapses to raster when num_steps == 1.
      const Index S = num_steps;
      if (S < 1) throw ParameterError("num_steps: must be >= 1");
      std::vector<Index> p;
      p.reserve(static_cast<std::size_t>(L));
      for (Index r = 0; r < S && r < L; ++r)
        for (Index pos = r; pos < L; pos += S) p.push_back(pos);
      return p;
    }
  }
  throw ParameterError("order: unknown token order");
}

namespace {

FactorizationPlan finish_plan(Index L, Index S, std::vector<Index> cuts,
                              std::vector<Index> perm) {
  FactorizationPlan plan;
  plan.total_tokens = L;
  plan.num_steps = S;
  plan.cuts = std::move(cuts);
  plan.perm = std::move(perm);
  plan.group_of.resize(static_cast<std::size_t>(L));
  for (Index s = 0; s < S; ++s)
    for (Index slot = plan.cuts[s]; slot < plan.cuts[s + 1]; ++slot)
      plan.group_of[static_cast<std::size_t>(slot)] = s;
  plan.validate();
  return plan;
}

}  // namespace

FactorizationPlan sample_plan(Index total_tokens, Index num_steps, const OrderSpec& spec,
                              Rng& rng) {
  const Index L = total_tokens;
  const Index S = num_steps;
  if (L < 1) throw ParameterError("total_tokens: must be >= 1");
  if (S < 1 || S > L)
    throw ParameterError("num_steps: must lie in [1, " + std::to_string(L) + "], got " +
                         std::to_string(S));

  // S - 1 distinct interior boundaries from {1, .., L-1}: partial
  // Fisher-Yates over the candidate list, then sort.
  std::vector<Index> interior(static_cast<std::size_t>(L - 1));
  std::iota(interior.begin(), interior.end(), Index{1});
  std::vector<Index> cuts;
  cuts.reserve(static_cast<std::size_t>(S + 1));
  cuts.push_back(0);
  for (Index k = 0; k < S - 1; ++k) {
    std::size_t remaining = interior.size() - static_cast<std::size_t>(k);
    std::size_t j = static_cast<std::size_t>(k) + static_cast<std::size_t>(rng.below(remaining));
    std::swap(interior[static_cast<std::size_t>(k)], interior[j]);
    cuts.push_back(interior[static_cast<std::size_t>(k)]);
  }
  cuts.push_back(L);
  std::sort(cuts.begin(), cuts.end());

  auto perm = make_order(L, S, spec, rng);
  return finish_plan(L, S, std::move(cuts), std::move(perm));
}

FactorizationPlan make_eval_plan(Index total_tokens, Index num_steps, const OrderSpec& spec,
                                 Rng& rng) {
  const Index L = total_tokens;
  const Index S = num_steps;
  if (L < 1) throw ParameterError("total_tokens: must be >= 1");
  if (S < 1 || S > L)
    throw ParameterError("num_steps: must lie in [1, " + std::to_string(L) + "], got " +
                         std::to_string(S));

  std::vector<Index> cuts(static_cast<std::size_t>(S + 1), 0);
  const Index base = L / S;
  const Index extra = L % S;
  for (Index s = 0; s < S; ++s) cuts[s + 1] = cuts[s] + base + (s < extra ? 1 : 0);

  auto perm = make_order(L, S, spec, rng);
  return finish_plan(L, S, std::move(cuts), std::move(perm));
}

ARWeighting ar_weights(Index num_steps, double lambda) {
  if (num_steps < 1) throw ParameterError("num_steps: must be >= 1");
  if (!(lambda >= 1.0)) throw ParameterError("lambda: must be >= 1");
  ARWeighting w;
  w.lambda = lambda;
  w.weights.resize(static_cast<std::size_t>(num_steps));
  if (num_steps == 1) {
    w.weights[0] = lambda;
    return w;
  }
  for (Index s = 1; s <= num_steps; ++s)
    w.weights[s - 1] = lambda - (lambda - 1.0) * static_cast<double>(s - 1) /
                                    static_cast<double>(num_steps - 1);
  return w;
}

std::vector<long long> kappa_histogram(Index n_plans, Index total_tokens, double gamma,
                                       Rng& rng) {
  const Index L = total_tokens;
  if (n_plans < 1) throw ParameterError("n_plans: must be >= 1");
  std::vector<long long> hist(static_cast<std::size_t>(L + 1), 0);
  const OrderSpec raster{TokenOrder::kRaster, 0};
  for (Index i = 0; i < n_plans; ++i) {
    Index S = sample_num_steps(L, gamma, rng);
    auto plan = sample_plan(L, S, raster, rng);
    for (Index s = 0; s < S; ++s) ++hist[static_cast<std::size_t>(plan.group_size(s))];
  }
  return hist;
}

}  // namespace cf
