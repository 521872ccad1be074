#include "cf/model.hpp"

#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "cf/error.hpp"

namespace cf {

void ModelConfig::validate() const {
  if (dim < 2 || dim % 2 != 0) throw ParameterError("model.dim: must be a positive even number");
  if (n_heads < 1 || dim % n_heads != 0)
    throw ParameterError("model.heads: must divide model.dim");
  if (pos_embed == PosEmbedKind::kSinusoidal2d && dim % 4 != 0)
    throw ParameterError("model.dim: must be divisible by 4 for sinusoidal position embeddings");
  if (n_layers < 1) throw ParameterError("model.layers: must be >= 1");
  if (patch_size < 1) throw ParameterError("model.patch_size: must be >= 1");
  if (grid_side < 1) throw ParameterError("model.grid_side: must be >= 1");
  if (token_dim < 1) throw ParameterError("model.token_dim: must be >= 1");
  if (n_classes < 1) throw ParameterError("model.classes: must be >= 1");
  if (n_class_tokens < 1) throw ParameterError("model.class_tokens: must be >= 1");
  if (class_token_repeat < 1) throw ParameterError("model.class_token_repeat: must be >= 1");
}

namespace {

template <class P, class F>
void visit_params(P& p, F&& fn) {
  fn("token_proj.w", p.token_proj_w);
  fn("token_proj.b", p.token_proj_b);
  fn("pos.table", p.pos_table);
  fn("time.w1", p.time_w1);
  fn("time.b1", p.time_b1);
  fn("time.w2", p.time_w2);
  fn("time.b2", p.time_b2);
  fn("class.table", p.class_table);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    fn(pre + "ln1.gain", b.ln1_gain);
    fn(pre + "ln1.bias", b.ln1_bias);
    fn(pre + "attn.wq", b.wq);
    fn(pre + "attn.bq", b.bq);
    fn(pre + "attn.wk", b.wk);
    fn(pre + "attn.bk", b.bk);
    fn(pre + "attn.wv", b.wv);
    fn(pre + "attn.bv", b.bv);
    fn(pre + "attn.wo", b.wo);
    fn(pre + "attn.bo", b.bo);
    fn(pre + "attn.q_gain", b.q_gain);
    fn(pre + "attn.k_gain", b.k_gain);
    fn(pre + "ln2.gain", b.ln2_gain);
    fn(pre + "ln2.bias", b.ln2_bias);
    fn(pre + "mlp.w1", b.mlp_w1);
    fn(pre + "mlp.b1", b.mlp_b1);
    fn(pre + "mlp.w2", b.mlp_w2);
    fn(pre + "mlp.b2", b.mlp_b2);
  }
  fn("final.gain", p.final_gain);
  fn("final.bias", p.final_bias);
  fn("head.w", p.head_w);
  fn("head.b", p.head_b);
}

void fill_normal(Mat& m, double stddev, Rng& rng) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = stddev * rng.normal();
}

double glorot_std(Index fan_in, Index fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

Index ModelParams::param_count() const {
  Index n = 0;
  for_each([&n](const std::string&, const Mat& m) { n += m.size(); });
  return n;
}

void ModelParams::for_each(const std::function<void(const std::string&, Mat&)>& fn) {
  visit_params(*this, [&fn](const std::string& name, Mat& m) {
    if (!m.empty()) fn(name, m);
  });
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Mat&)>& fn) const {
  visit_params(*this, [&fn](const std::string& name, const Mat& m) {
    if (!m.empty()) fn(name, m);
  });
}

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index d = cfg.dim;
  ModelParams p;

  // Random tensors draw in this fixed order; deterministic tensors
  // (biases, gains, zero head) consume nothing.
  p.token_proj_w = Mat(cfg.token_dim, d);
  fill_normal(p.token_proj_w, glorot_std(cfg.token_dim, d), rng);
  p.token_proj_b = Mat(1, d);

  if (cfg.pos_embed == PosEmbedKind::kLearnable) {
    p.pos_table = Mat(cfg.tokens(), d);
    fill_normal(p.pos_table, 0.02, rng);
  }

  p.time_w1 = Mat(d, d);
  fill_normal(p.time_w1, glorot_std(d, d), rng);
  p.time_b1 = Mat(1, d);
  p.time_w2 = Mat(d, d);
  fill_normal(p.time_w2, glorot_std(d, d), rng);
  p.time_b2 = Mat(1, d);

  p.class_table = Mat((cfg.n_classes + 1) * cfg.n_class_tokens, d);
  fill_normal(p.class_table, 0.02, rng);

  p.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_gain = Mat(1, d, 1.0);
    b.ln1_bias = Mat(1, d);
    b.wq = Mat(d, d);
    fill_normal(b.wq, glorot_std(d, d), rng);
    b.bq = Mat(1, d);
    b.wk = Mat(d, d);
    fill_normal(b.wk, glorot_std(d, d), rng);
    b.bk = Mat(1, d);
    b.wv = Mat(d, d);
    fill_normal(b.wv, glorot_std(d, d), rng);
    b.bv = Mat(1, d);
    b.wo = Mat(d, d);
    fill_normal(b.wo, glorot_std(d, d), rng);
    b.bo = Mat(1, d);
    if (cfg.qk_norm) {
      b.q_gain = Mat(1, d, 1.0);
      b.k_gain = Mat(1, d, 1.0);
    }
    b.ln2_gain = Mat(1, d, 1.0);
    b.ln2_bias = Mat(1, d);
    b.mlp_w1 = Mat(d, 4 * d);
    fill_normal(b.mlp_w1, glorot_std(d, 4 * d), rng);
    b.mlp_b1 = Mat(1, 4 * d);
    b.mlp_w2 = Mat(4 * d, d);
    fill_normal(b.mlp_w2, glorot_std(4 * d, d), rng);
    b.mlp_b2 = Mat(1, d);
  }

  p.final_gain = Mat(1, d, 1.0);
  p.final_bias = Mat(1, d);
  // Zero head: the fresh model predicts zero noise everywhere.
  p.head_w = Mat(d, cfg.token_dim);
  p.head_b = Mat(1, cfg.token_dim);
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.for_each([](const std::string&, Mat& m) { m.fill(0.0); });
  return z;
}

Mat sinusoidal_pos_table(Index grid_side, Index dim) {
  if (dim % 4 != 0) throw ParameterError("model.dim: must be divisible by 4");
  const Index quarter = dim / 4;
  Mat table(grid_side * grid_side, dim);
  for (Index r = 0; r < grid_side; ++r)
    for (Index c = 0; c < grid_side; ++c) {
      double* row = table.row(r * grid_side + c);
      for (Index k = 0; k < quarter; ++k) {
        const double omega =
            std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
        row[k] = std::sin(static_cast<double>(r) * omega);
        row[quarter + k] = std::cos(static_cast<double>(r) * omega);
        row[2 * quarter + k] = std::sin(static_cast<double>(c) * omega);
        row[3 * quarter + k] = std::cos(static_cast<double>(c) * omega);
      }
    }
  return table;
}

Mat time_features(const std::vector<Index>& t, Index dim) {
  if (dim % 2 != 0) throw ParameterError("model.dim: must be even for time features");
  const Index half = dim / 2;
  Mat feats(static_cast<Index>(t.size()), dim);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double* row = feats.row(static_cast<Index>(i));
    for (Index k = 0; k < half; ++k) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[i]) * freq;
      row[k] = std::cos(arg);
      row[half + k] = std::sin(arg);
    }
  }
  return feats;
}

Mat patchify(const Mat& image, Index patch_size, Index channels) {
  const Index p = patch_size, C = channels;
  if (p < 1 || C < 1) throw ParameterError("patchify: patch_size and channels must be >= 1");
  if (image.cols() % C != 0) throw ShapeError("patchify: image width not a multiple of channels");
  const Index H = image.rows(), W = image.cols() / C;
  if (H % p != 0 || W % p != 0)
    throw ShapeError("patchify: image sides must be multiples of patch_size");
  const Index gh = H / p, gw = W / p;
  Mat tokens(gh * gw, p * p * C);
  for (Index gr = 0; gr < gh; ++gr)
    for (Index gc = 0; gc < gw; ++gc) {
      double* row = tokens.row(gr * gw + gc);
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j)
          for (Index ch = 0; ch < C; ++ch)
            row[(i * p + j) * C + ch] = image(gr * p + i, (gc * p + j) * C + ch);
    }
  return tokens;
}

Mat unpatchify(const Mat& tokens, Index grid_side, Index patch_size, Index channels) {
  const Index p = patch_size, C = channels, g = grid_side;
  if (tokens.rows() != g * g) throw ShapeError("unpatchify: token count != grid_side^2");
  if (tokens.cols() != p * p * C)
    throw ShapeError("unpatchify: token_dim != patch_size^2 * channels");
  Mat image(g * p, g * p * C);
  for (Index gr = 0; gr < g; ++gr)
    for (Index gc = 0; gc < g; ++gc) {
      const double* row = tokens.row(gr * g + gc);
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j)
          for (Index ch = 0; ch < C; ++ch)
            image(gr * p + i, (gc * p + j) * C + ch) = row[(i * p + j) * C + ch];
    }
  return image;
}

namespace {

std::vector<Index> condition_row_ids(const ModelConfig& cfg, Index class_id) {
  if (class_id < 0 || class_id > cfg.n_classes)
    throw ParameterError("class_id: must lie in [0, " + std::to_string(cfg.n_classes) +
                         "], got " + std::to_string(class_id));
  std::vector<Index> ids;
  ids.reserve(static_cast<std::size_t>(cfg.n_cond()));
  for (Index i = 0; i < cfg.n_class_tokens; ++i)
    for (Index r = 0; r < cfg.class_token_repeat; ++r)
      ids.push_back(class_id * cfg.n_class_tokens + i);
  return ids;
}

void check_positions(const std::vector<Index>& positions, Index total, const char* what) {
  for (Index p : positions)
    if (p < 0 || p >= total)
      throw ParameterError(std::string(what) + ": position " + std::to_string(p) +
                           " outside [0, " + std::to_string(total) + ")");
}

Mat gather_rows(const Mat& table, const std::vector<Index>& ids) {
  Mat out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.map().row(static_cast<Index>(i)) = table.map().row(ids[i]);
  return out;
}

}  // namespace

Graph::Id build_forward(Graph& g, const ModelConfig& cfg, const ModelParams& params,
                        ModelParams* grads, const ForwardInput& in) {
  cfg.validate();
  if (!in.noisy || in.noisy->rows() < 1) throw ShapeError("forward: noisy tokens required");
  if (in.noisy->cols() != cfg.token_dim)
    throw ShapeError("forward: noisy token_dim mismatch");
  const Index n_noisy = in.noisy->rows();
  if (static_cast<Index>(in.noisy_positions.size()) != n_noisy ||
      static_cast<Index>(in.t_per_noisy.size()) != n_noisy)
    throw ShapeError("forward: noisy_positions/t_per_noisy length mismatch");
  const Index ctx_len = in.clean_ctx ? in.clean_ctx->rows() : 0;
  if (ctx_len > 0 && in.clean_ctx->cols() != cfg.token_dim)
    throw ShapeError("forward: context token_dim mismatch");
  if (static_cast<Index>(in.ctx_positions.size()) != ctx_len)
    throw ShapeError("forward: ctx_positions length mismatch");
  check_positions(in.ctx_positions, cfg.tokens(), "ctx_positions");
  check_positions(in.noisy_positions, cfg.tokens(), "noisy_positions");
  for (Index t : in.t_per_noisy)
    if (t < 1) throw ParameterError("t_per_noisy: diffusion steps are 1-based");
  if (!in.mask) throw ShapeError("forward: mask required");
  if (in.mask->size() != cfg.n_cond() + ctx_len + n_noisy)
    throw ShapeError("forward: mask size != condition + context + noisy rows");

  auto P = [&](const Mat& v, Mat ModelParams::* field) {
    return g.param(v, grads ? &(grads->*field) : nullptr);
  };
  auto PB = [&](std::size_t i, const Mat& v, Mat BlockParams::* field) {
    return g.param(v, grads ? &(grads->blocks[i].*field) : nullptr);
  };

  const Graph::Id proj_w = P(params.token_proj_w, &ModelParams::token_proj_w);
  const Graph::Id proj_b = P(params.token_proj_b, &ModelParams::token_proj_b);

  // Position rows for a set of grid positions, as a graph node.
  Graph::Id pos_param = -1;
  Mat sin_table;
  if (cfg.pos_embed == PosEmbedKind::kLearnable) {
    pos_param = P(params.pos_table, &ModelParams::pos_table);
  } else {
    sin_table = sinusoidal_pos_table(cfg.grid_side, cfg.dim);
  }
  auto pos_rows = [&](const std::vector<Index>& positions) {
    if (cfg.pos_embed == PosEmbedKind::kLearnable)
      return g.rows_lookup(pos_param, positions);
    return g.input(gather_rows(sin_table, positions));
  };

  // Condition rows: class-table lookups, label n_classes meaning "none".
  const Graph::Id class_table = P(params.class_table, &ModelParams::class_table);
  const Graph::Id cond = g.rows_lookup(class_table, condition_row_ids(cfg, in.class_id));

  std::vector<Graph::Id> parts{cond};

  if (ctx_len > 0) {
    Graph::Id ctx = g.linear(g.input(*in.clean_ctx), proj_w, proj_b);
    parts.push_back(g.add(ctx, pos_rows(in.ctx_positions)));
  }

  // Noisy rows carry the diffusion-step embedding; clean rows do not.
  Graph::Id noisy = g.linear(g.input(*in.noisy), proj_w, proj_b);
  noisy = g.add(noisy, pos_rows(in.noisy_positions));
  {
    Graph::Id tf = g.input(time_features(in.t_per_noisy, cfg.dim));
    Graph::Id h = g.linear(tf, P(params.time_w1, &ModelParams::time_w1),
                           P(params.time_b1, &ModelParams::time_b1));
    h = g.gelu(h);
    h = g.linear(h, P(params.time_w2, &ModelParams::time_w2),
                 P(params.time_b2, &ModelParams::time_b2));
    noisy = g.add(noisy, h);
  }
  parts.push_back(noisy);

  Graph::Id seq = g.concat_rows(parts);

  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const BlockParams& b = params.blocks[i];
    Graph::Id h = g.layer_norm(seq, PB(i, b.ln1_gain, &BlockParams::ln1_gain),
                               PB(i, b.ln1_bias, &BlockParams::ln1_bias));
    Graph::Id q = g.linear(h, PB(i, b.wq, &BlockParams::wq), PB(i, b.bq, &BlockParams::bq));
    Graph::Id k = g.linear(h, PB(i, b.wk, &BlockParams::wk), PB(i, b.bk, &BlockParams::bk));
    Graph::Id v = g.linear(h, PB(i, b.wv, &BlockParams::wv), PB(i, b.bv, &BlockParams::bv));
    if (cfg.qk_norm) {
      q = g.head_rms_norm(q, PB(i, b.q_gain, &BlockParams::q_gain), cfg.n_heads);
      k = g.head_rms_norm(k, PB(i, b.k_gain, &BlockParams::k_gain), cfg.n_heads);
    }
    Graph::Id attn = g.masked_attention(q, k, v, *in.mask, cfg.n_heads);
    attn = g.linear(attn, PB(i, b.wo, &BlockParams::wo), PB(i, b.bo, &BlockParams::bo));
    seq = g.add(seq, attn);

    Graph::Id h2 = g.layer_norm(seq, PB(i, b.ln2_gain, &BlockParams::ln2_gain),
                                PB(i, b.ln2_bias, &BlockParams::ln2_bias));
    Graph::Id m = g.linear(h2, PB(i, b.mlp_w1, &BlockParams::mlp_w1),
                           PB(i, b.mlp_b1, &BlockParams::mlp_b1));
    m = g.gelu(m);
    m = g.linear(m, PB(i, b.mlp_w2, &BlockParams::mlp_w2),
                 PB(i, b.mlp_b2, &BlockParams::mlp_b2));
    seq = g.add(seq, m);
  }

  Graph::Id final_h = g.layer_norm(seq, P(params.final_gain, &ModelParams::final_gain),
                                   P(params.final_bias, &ModelParams::final_bias));
  Graph::Id noisy_h = g.slice_rows(final_h, cfg.n_cond() + ctx_len, n_noisy);
  return g.linear(noisy_h, P(params.head_w, &ModelParams::head_w),
                  P(params.head_b, &ModelParams::head_b));
}

Mat forward(const ModelConfig& cfg, const ModelParams& params, const ForwardInput& in) {
  Graph g;
  return g.value_copy(build_forward(g, cfg, params, nullptr, in));
}

// Plain (graph-free) kernels for the cached sampling path. Loop structure
// mirrors the graph ops so both paths agree to rounding.
namespace {

Mat ln_rows(const Mat& x, const Mat& gain, const Mat& bias, double eps = 1e-5) {
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.map().row(r).mean();
    const double var = (x.map().row(r).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + eps);
    out.map().row(r).array() =
        ((x.map().row(r).array() - mu) * rstd) * gain.map().row(0).array() +
        bias.map().row(0).array();
  }
  return out;
}

void rms_heads_inplace(Mat& x, const Mat& gain, Index n_heads, double eps = 1e-6) {
  const Index hd = x.cols() / n_heads;
  for (Index r = 0; r < x.rows(); ++r)
    for (Index h = 0; h < n_heads; ++h) {
      auto seg = x.map().row(r).segment(h * hd, hd);
      const double m = std::sqrt(seg.array().square().mean() + eps);
      seg = (seg.array() / m) * gain.map().row(0).segment(h * hd, hd).array();
    }
}

Mat linear_plain(const Mat& x, const Mat& w, const Mat& b) {
  Mat out(x.rows(), w.cols());
  out.map().noalias() = x.map() * w.map();
  out.map().rowwise() += b.map().row(0);
  return out;
}

void gelu_inplace(Mat& x) {
  constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
  double* d = x.data();
  for (Index i = 0; i < x.size(); ++i) d[i] = 0.5 * d[i] * (1.0 + std::erf(d[i] * kInvSqrt2));
}

// Queries attend the given keys/values; mask may be null (all visible)
// and otherwise must be square over rows(q) == rows(keys).
Mat attn_cross(const Mat& q, const Mat& keys, const Mat& vals, const AttentionMask* mask,
               Index n_heads) {
  const Index n = q.rows(), m = keys.rows(), c = q.cols();
  const Index hd = c / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  assert(!mask || (mask->size() == n && m == n));
  Mat out(n, c);
  EigenRowMat s(n, m);
  for (Index h = 0; h < n_heads; ++h) {
    auto qh = q.map().middleCols(h * hd, hd);
    auto kh = keys.map().middleCols(h * hd, hd);
    auto vh = vals.map().middleCols(h * hd, hd);
    s.noalias() = scale * (qh * kh.transpose());
    for (Index r = 0; r < n; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < m; ++j)
        if (!mask || !mask->blocked(r, j)) mx = std::max(mx, s(r, j));
      assert(std::isfinite(mx));
      double z = 0.0;
      for (Index j = 0; j < m; ++j) {
        if (mask && mask->blocked(r, j)) {
          s(r, j) = 0.0;
        } else {
          s(r, j) = std::exp(s(r, j) - mx);
          z += s(r, j);
        }
      }
      s.row(r) /= z;
    }
    out.map().middleCols(h * hd, hd).noalias() = s * vh;
  }
  return out;
}

Mat embed_tokens(const ModelConfig& cfg, const ModelParams& params, const Mat& tokens,
                 const std::vector<Index>& positions, const Mat& pos_table) {
  Mat x = linear_plain(tokens, params.token_proj_w, params.token_proj_b);
  for (Index r = 0; r < x.rows(); ++r)
    x.map().row(r) += pos_table.map().row(positions[static_cast<std::size_t>(r)]);
  (void)cfg;
  return x;
}

Mat pos_table_of(const ModelConfig& cfg, const ModelParams& params) {
  return cfg.pos_embed == PosEmbedKind::kLearnable
             ? params.pos_table
             : sinusoidal_pos_table(cfg.grid_side, cfg.dim);
}

}  // namespace

ContextCache precompute_context(const ModelConfig& cfg, const ModelParams& params,
                                const Mat& clean_ctx,
                                const std::vector<Index>& ctx_positions,
                                const std::vector<Index>& clean_sizes, Index class_id) {
  cfg.validate();
  Index clean_total = 0;
  for (Index s : clean_sizes) clean_total += s;
  if (clean_ctx.rows() != clean_total ||
      static_cast<Index>(ctx_positions.size()) != clean_total)
    throw ShapeError("precompute_context: clean_sizes inconsistent with context rows");
  check_positions(ctx_positions, cfg.tokens(), "ctx_positions");

  const AttentionMask mask =
      clean_sizes.empty()
          ? AttentionMask(cfg.n_cond(), false)
          : prepend_condition(build_context_mask(clean_sizes), cfg.n_cond());

  const Mat pos_table = pos_table_of(cfg, params);
  Mat x(cfg.n_cond() + clean_total, cfg.dim);
  {
    const Mat cond = gather_rows(params.class_table, condition_row_ids(cfg, class_id));
    x.map().topRows(cfg.n_cond()) = cond.map();
    if (clean_total > 0) {
      Mat ctx = embed_tokens(cfg, params, clean_ctx, ctx_positions, pos_table);
      x.map().bottomRows(clean_total) = ctx.map();
    }
  }

  ContextCache cache;
  cache.n_ctx = x.rows();
  cache.keys.reserve(params.blocks.size());
  cache.vals.reserve(params.blocks.size());
  for (const BlockParams& b : params.blocks) {
    Mat h = ln_rows(x, b.ln1_gain, b.ln1_bias);
    Mat q = linear_plain(h, b.wq, b.bq);
    Mat k = linear_plain(h, b.wk, b.bk);
    Mat v = linear_plain(h, b.wv, b.bv);
    if (cfg.qk_norm) {
      rms_heads_inplace(q, b.q_gain, cfg.n_heads);
      rms_heads_inplace(k, b.k_gain, cfg.n_heads);
    }
    cache.keys.push_back(k);
    cache.vals.push_back(v);

    Mat attn = attn_cross(q, k, v, &mask, cfg.n_heads);
    x.map() += linear_plain(attn, b.wo, b.bo).map();
    Mat h2 = ln_rows(x, b.ln2_gain, b.ln2_bias);
    Mat m = linear_plain(h2, b.mlp_w1, b.mlp_b1);
    gelu_inplace(m);
    x.map() += linear_plain(m, b.mlp_w2, b.mlp_b2).map();
  }
  return cache;
}

Mat forward_cached(const ModelConfig& cfg, const ModelParams& params,
                   const ContextCache& cache, const Mat& noisy,
                   const std::vector<Index>& noisy_positions,
                   const std::vector<Index>& t_per_noisy) {
  if (cache.keys.size() != params.blocks.size())
    throw ShapeError("forward_cached: cache depth != model depth");
  if (noisy.cols() != cfg.token_dim) throw ShapeError("forward_cached: token_dim mismatch");
  const Index n = noisy.rows();
  if (static_cast<Index>(noisy_positions.size()) != n ||
      static_cast<Index>(t_per_noisy.size()) != n)
    throw ShapeError("forward_cached: positions/t length mismatch");
  check_positions(noisy_positions, cfg.tokens(), "noisy_positions");

  const Mat pos_table = pos_table_of(cfg, params);
  Mat x = embed_tokens(cfg, params, noisy, noisy_positions, pos_table);
  {
    Mat tf = time_features(t_per_noisy, cfg.dim);
    Mat h = linear_plain(tf, params.time_w1, params.time_b1);
    gelu_inplace(h);
    x.map() += linear_plain(h, params.time_w2, params.time_b2).map();
  }

  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const BlockParams& b = params.blocks[i];
    Mat h = ln_rows(x, b.ln1_gain, b.ln1_bias);
    Mat q = linear_plain(h, b.wq, b.bq);
    Mat k = linear_plain(h, b.wk, b.bk);
    Mat v = linear_plain(h, b.wv, b.bv);
    if (cfg.qk_norm) {
      rms_heads_inplace(q, b.q_gain, cfg.n_heads);
      rms_heads_inplace(k, b.k_gain, cfg.n_heads);
    }
    // Cached context first, then the group's own rows: the same key order
    // the full-sequence layout produces.
    Mat keys(cache.n_ctx + n, cfg.dim);
    Mat vals(cache.n_ctx + n, cfg.dim);
    keys.map().topRows(cache.n_ctx) = cache.keys[i].map();
    keys.map().bottomRows(n) = k.map();
    vals.map().topRows(cache.n_ctx) = cache.vals[i].map();
    vals.map().bottomRows(n) = v.map();

    Mat attn = attn_cross(q, keys, vals, nullptr, cfg.n_heads);
    x.map() += linear_plain(attn, b.wo, b.bo).map();
    Mat h2 = ln_rows(x, b.ln2_gain, b.ln2_bias);
    Mat m = linear_plain(h2, b.mlp_w1, b.mlp_b1);
    gelu_inplace(m);
    x.map() += linear_plain(m, b.mlp_w2, b.mlp_b2).map();
  }

  Mat fh = ln_rows(x, params.final_gain, params.final_bias);
  return linear_plain(fh, params.head_w, params.head_b);
}

}  // namespace cf
