#include "cf/sampler.hpp"

#include <cassert>
#include <string>

#include "cf/error.hpp"
#include "cf/io.hpp"

namespace cf {

RespacedSchedule respace(const NoiseSchedule& sched, Index n_steps) {
  const Index T = sched.steps();
  if (n_steps < 1 || n_steps > T)
    throw ParameterError("sample.ddpm_steps: must lie in [1, " + std::to_string(T) +
                         "], got " + std::to_string(n_steps));
  if (n_steps == T) {
    // Identity: original coefficients, untouched.
    std::vector<Index> t_map(static_cast<std::size_t>(T));
    for (Index t = 1; t <= T; ++t) t_map[static_cast<std::size_t>(t - 1)] = t;
    return RespacedSchedule{sched, std::move(t_map)};
  }

  // Evenly spaced subsequence including both endpoints (integer floor
  // arithmetic; gaps are at least one step since n_steps <= T).
  std::vector<Index> t_map;
  t_map.reserve(static_cast<std::size_t>(n_steps));
  if (n_steps == 1) {
    t_map.push_back(T);
  } else {
    for (Index j = 0; j < n_steps; ++j)
      t_map.push_back(1 + j * (T - 1) / (n_steps - 1));
  }

  std::vector<double> betas(static_cast<std::size_t>(n_steps));
  double prev_abar = 1.0;
  for (Index j = 0; j < n_steps; ++j) {
    const double abar = sched.alpha_bar(t_map[static_cast<std::size_t>(j)]);
    betas[static_cast<std::size_t>(j)] = 1.0 - abar / prev_abar;
    prev_abar = abar;
  }
  return RespacedSchedule{NoiseSchedule(std::move(betas)), std::move(t_map)};
}

Mat cfg_combine(const Mat& cond, const Mat& uncond, double scale, Index t,
                const std::optional<std::pair<Index, Index>>& interval) {
  if (!cond.same_shape(uncond)) throw ShapeError("cfg_combine: cond/uncond shapes differ");
  const bool active = !interval || (t > interval->first && t < interval->second);
  if (!active || scale == 1.0) return cond;
  if (scale == 0.0) return uncond;
  Mat out(cond.rows(), cond.cols());
  out.map() = uncond.map() + scale * (cond.map() - uncond.map());
  return out;
}

namespace {

void validate_common(const ModelConfig& cfg, const NoiseSchedule& sched, Index ddpm_steps,
                     double cfg_scale,
                     const std::optional<std::pair<Index, Index>>& interval, Index class_id) {
  cfg.validate();
  if (ddpm_steps < 0 || ddpm_steps > sched.steps())
    throw ParameterError("sample.ddpm_steps: must lie in [0, " +
                         std::to_string(sched.steps()) + "]");
  if (!(cfg_scale >= 0.0)) throw ParameterError("sample.cfg_scale: must be >= 0");
  if (interval && interval->first >= interval->second)
    throw ParameterError("sample.cfg_interval: t_low must be below t_high");
  if (class_id < 0 || class_id > cfg.n_classes)
    throw ParameterError("sample.class_id: must lie in [0, " + std::to_string(cfg.n_classes) +
                         "]");
}

// Runs the reverse chains for groups [first_gen_group, S) of the given
// plan, writing generated tokens into out at their grid positions.
// Groups before first_gen_group must already be present in out.
void run_group_chains(Mat& out, const std::vector<Index>& perm, const std::vector<Index>& cuts,
                      Index first_gen_group, const ModelConfig& cfg, const ModelParams& params,
                      const NoiseSchedule& sched, Index ddpm_steps, double cfg_scale,
                      const std::optional<std::pair<Index, Index>>& interval, Index class_id,
                      ReverseVariance variance, bool use_cache, std::uint64_t seed) {
  const auto S = static_cast<Index>(cuts.size()) - 1;
  const RespacedSchedule rsp = respace(sched, ddpm_steps == 0 ? sched.steps() : ddpm_steps);
  Rng init_rng = derive_rng(seed, Stream::kSampleInit);
  Rng step_rng = derive_rng(seed, Stream::kSampleStep);

  for (Index s = first_gen_group; s < S; ++s) {
    const Index ctx_len = cuts[s];
    const Index k_s = cuts[s + 1] - cuts[s];

    Mat ctx(ctx_len, cfg.token_dim);
    std::vector<Index> ctx_positions(static_cast<std::size_t>(ctx_len));
    for (Index slot = 0; slot < ctx_len; ++slot) {
      const Index pos = perm[static_cast<std::size_t>(slot)];
      ctx.map().row(slot) = out.map().row(pos);
      ctx_positions[static_cast<std::size_t>(slot)] = pos;
    }
    std::vector<Index> clean_sizes;
    for (Index g = 0; g < s; ++g) clean_sizes.push_back(cuts[g + 1] - cuts[g]);

    std::vector<Index> positions(static_cast<std::size_t>(k_s));
    for (Index i = 0; i < k_s; ++i)
      positions[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(cuts[s] + i)];

    Mat x(k_s, cfg.token_dim);
    for (Index r = 0; r < x.rows(); ++r)
      for (Index c = 0; c < x.cols(); ++c) x(r, c) = init_rng.normal();

    ContextCache cache_c, cache_u;
    AttentionMask step_mask;
    if (use_cache) {
      cache_c = precompute_context(cfg, params, ctx, ctx_positions, clean_sizes, class_id);
      if (cfg_scale != 1.0)
        cache_u =
            precompute_context(cfg, params, ctx, ctx_positions, clean_sizes, cfg.null_class());
    } else {
      step_mask = prepend_condition(build_step_mask(clean_sizes, k_s), cfg.n_cond());
    }
    const std::uint64_t ctx_checksum =
        fnv1a64(ctx.data(), static_cast<std::size_t>(ctx.size()) * sizeof(double));

    for (Index j = rsp.sched.steps(); j >= 1; --j) {
      const Index t_model = rsp.t_map[static_cast<std::size_t>(j - 1)];
      const std::vector<Index> ts(static_cast<std::size_t>(k_s), t_model);

      auto predict = [&](Index cls) {
        if (use_cache)
          return forward_cached(cfg, params, cls == class_id ? cache_c : cache_u, x, positions,
                                ts);
        ForwardInput in;
        in.clean_ctx = ctx_len > 0 ? &ctx : nullptr;
        in.ctx_positions = ctx_positions;
        in.noisy = &x;
        in.noisy_positions = positions;
        in.t_per_noisy = ts;
        in.class_id = cls;
        in.mask = &step_mask;
        return forward(cfg, params, in);
      };

      Mat eps = predict(class_id);
      const bool guided =
          cfg_scale != 1.0 && (!interval || (t_model > interval->first &&
                                             t_model < interval->second));
      if (guided) {
        Mat eps_u = predict(cfg.null_class());
        eps = cfg_combine(eps, eps_u, cfg_scale, t_model, interval);
      }
      x = ddpm_step(x, eps, j, rsp.sched, step_rng, variance);

      // Conditioning rows must never move while a group denoises.
      assert(fnv1a64(ctx.data(), static_cast<std::size_t>(ctx.size()) * sizeof(double)) ==
             ctx_checksum);
      (void)ctx_checksum;
    }

    for (Index i = 0; i < k_s; ++i)
      out.map().row(positions[static_cast<std::size_t>(i)]) = x.map().row(i);
  }
}

}  // namespace

void SampleRequest::validate(const ModelConfig& cfg, const NoiseSchedule& sched) const {
  validate_common(cfg, sched, ddpm_steps, cfg_scale, cfg_interval, class_id);
  if (s_eval < 1 || s_eval > cfg.tokens())
    throw ParameterError("sample.s_eval: must lie in [1, " + std::to_string(cfg.tokens()) +
                         "], got " + std::to_string(s_eval));
}

Mat generate(const ModelConfig& cfg, const ModelParams& params, const NoiseSchedule& sched,
             const SampleRequest& req) {
  req.validate(cfg, sched);
  Rng perm_rng = derive_rng(req.seed, Stream::kPlanPerm);
  const FactorizationPlan plan =
      make_eval_plan(cfg.tokens(), req.s_eval, req.order, perm_rng);

  Mat out(cfg.tokens(), cfg.token_dim);
  run_group_chains(out, plan.perm, plan.cuts, 0, cfg, params, sched, req.ddpm_steps,
                   req.cfg_scale, req.cfg_interval, req.class_id, req.variance, req.use_cache,
                   req.seed);
  return out;
}

void EditRequest::validate(const ModelConfig& cfg, const NoiseSchedule& sched) const {
  validate_common(cfg, sched, ddpm_steps, cfg_scale, cfg_interval, class_id);
  if (source.rows() != cfg.tokens() || source.cols() != cfg.token_dim)
    throw ShapeError("edit.source: expected tokens() x token_dim");
  if (static_cast<Index>(keep.size()) != cfg.tokens())
    throw ShapeError("edit.keep: expected one entry per token");
  Index kept = 0;
  for (std::uint8_t k : keep) kept += k ? 1 : 0;
  if (kept == 0) throw ParameterError("edit.keep: must keep at least one token");
  if (kept == cfg.tokens()) throw ParameterError("edit.keep: must mask at least one token");
  const Index masked = cfg.tokens() - kept;
  if (regen_groups < 1 || regen_groups > masked)
    throw ParameterError("edit.regen_groups: must lie in [1, " + std::to_string(masked) + "]");
}

Mat edit(const ModelConfig& cfg, const ModelParams& params, const NoiseSchedule& sched,
         const EditRequest& req) {
  req.validate(cfg, sched);
  const Index L = cfg.tokens();

  // Kept positions form the first (clean) group in grid order; masked
  // positions follow, split near-equally over regen_groups.
  std::vector<Index> perm;
  perm.reserve(static_cast<std::size_t>(L));
  for (Index p = 0; p < L; ++p)
    if (req.keep[static_cast<std::size_t>(p)]) perm.push_back(p);
  const Index kept = static_cast<Index>(perm.size());
  for (Index p = 0; p < L; ++p)
    if (!req.keep[static_cast<std::size_t>(p)]) perm.push_back(p);
  const Index masked = L - kept;

  std::vector<Index> cuts{0, kept};
  const Index base = masked / req.regen_groups;
  const Index extra = masked % req.regen_groups;
  for (Index g = 0; g < req.regen_groups; ++g)
    cuts.push_back(cuts.back() + base + (g < extra ? 1 : 0));

  Mat out = req.source;
  run_group_chains(out, perm, cuts, 1, cfg, params, sched, req.ddpm_steps, req.cfg_scale,
                   req.cfg_interval, req.class_id, req.variance, req.use_cache, req.seed);
  return out;
}

}  // namespace cf
