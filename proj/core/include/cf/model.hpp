#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cf/causal_mask.hpp"
#include "cf/graph.hpp"
#include "cf/mat.hpp"
#include "cf/rng.hpp"

namespace cf {

enum class PosEmbedKind { kSinusoidal2d, kLearnable };

struct ModelConfig {
  Index dim = 128;
  Index n_layers = 4;
  Index n_heads = 4;
  Index patch_size = 2;
  Index grid_side = 8;
  Index token_dim = 4;
  Index n_classes = 2;
  Index n_class_tokens = 4;
  Index class_token_repeat = 1;
  PosEmbedKind pos_embed = PosEmbedKind::kSinusoidal2d;
  bool qk_norm = true;

  Index tokens() const { return grid_side * grid_side; }
  Index n_cond() const { return n_class_tokens * class_token_repeat; }
  // Extra class-table row block used when the label is dropped.
  Index null_class() const { return n_classes; }
  void validate() const;
};

struct BlockParams {
  Mat ln1_gain, ln1_bias;
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
  Mat q_gain, k_gain;
  Mat ln2_gain, ln2_bias;
  Mat mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelParams {
  Mat token_proj_w, token_proj_b;
  Mat pos_table;  // learnable embeddings only; empty when sinusoidal
  Mat time_w1, time_b1, time_w2, time_b2;
  Mat class_table;  // (n_classes + 1) * n_class_tokens rows
  std::vector<BlockParams> blocks;
  Mat final_gain, final_bias;
  Mat head_w, head_b;

  Index param_count() const;
  // Visits every tensor in a fixed order with its checkpoint name.
  void for_each(const std::function<void(const std::string&, Mat&)>& fn);
  void for_each(const std::function<void(const std::string&, const Mat&)>& fn) const;
};

// Fresh parameters. The output head starts at zero so an untrained model
// predicts zero noise; norm gains start at one; weights draw from
// centered normals in a fixed declaration order.
ModelParams init_params(const ModelConfig& cfg, Rng& rng);
ModelParams zeros_like(const ModelParams& p);

// Fixed two-axis sine-cosine table over grid positions, one row per
// position in raster order. dim must be divisible by 4.
Mat sinusoidal_pos_table(Index grid_side, Index dim);

// Sinusoidal features of diffusion steps, one row per entry.
Mat time_features(const std::vector<Index>& t, Index dim);

// Image layout: (H, W * channels) with channels interleaved per pixel.
// Tokens are p x p patches flattened as (i, j, channel), one row per
// patch in raster order. The two maps are exact inverses.
Mat patchify(const Mat& image, Index patch_size, Index channels);
Mat unpatchify(const Mat& tokens, Index grid_side, Index patch_size, Index channels);

struct ForwardInput {
  const Mat* clean_ctx = nullptr;  // ctx_len x token_dim; null means no context
  std::vector<Index> ctx_positions;
  const Mat* noisy = nullptr;  // n_noisy x token_dim
  std::vector<Index> noisy_positions;
  std::vector<Index> t_per_noisy;
  Index class_id = 0;
  const AttentionMask* mask = nullptr;  // covers condition + ctx + noisy rows
};

// Builds the denoiser on g and returns the node holding the noise
// prediction for the noisy rows (n_noisy x token_dim). grads may be null
// for inference-only graphs.
Graph::Id build_forward(Graph& g, const ModelConfig& cfg, const ModelParams& params,
                        ModelParams* grads, const ForwardInput& in);

// One-shot inference wrapper over build_forward.
Mat forward(const ModelConfig& cfg, const ModelParams& params, const ForwardInput& in);

// Per-layer keys and values of the [condition + clean context] rows,
// computed once per AR step and reused across the reverse-diffusion loop.
// Keys are stored after QK normalization, exactly as attention consumes
// them.
struct ContextCache {
  Index n_ctx = 0;
  std::vector<Mat> keys;
  std::vector<Mat> vals;
};

// clean_sizes gives the AR group structure of the context rows, which
// fixes their mutual visibility; clean_ctx may be empty together with
// clean_sizes for the first AR step.
ContextCache precompute_context(const ModelConfig& cfg, const ModelParams& params,
                                const Mat& clean_ctx,
                                const std::vector<Index>& ctx_positions,
                                const std::vector<Index>& clean_sizes, Index class_id);

// Denoiser forward for one noisy group against a prepared context. All
// keys are visible to every noisy row, matching the single-step mask.
Mat forward_cached(const ModelConfig& cfg, const ModelParams& params,
                   const ContextCache& cache, const Mat& noisy,
                   const std::vector<Index>& noisy_positions,
                   const std::vector<Index>& t_per_noisy);

}  // namespace cf
