#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/factorization.hpp"
#include "cf/io.hpp"
#include "cf/model.hpp"
#include "cf/schedule.hpp"

namespace cf {

enum class TimeSampling { kShared, kPerGroupRandom, kMultiT };

struct TrainConfig {
  Index batch_size = 128;
  Index total_steps = 2000;
  Index warmup_steps = 100;
  double base_lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double gamma = 0.9;
  Index fixed_num_steps = 0;  // > 0 pins S instead of drawing it
  double lambda = 2.0;
  OrderSpec order{};
  TimeSampling t_sampling = TimeSampling::kShared;
  Index multi_t_k = 2;
  double ema_decay = 0.9999;
  double class_drop = 0.1;
  std::uint64_t seed = 0;
  Index log_every = 10;
  Index checkpoint_every = 0;  // 0 writes only the final checkpoint

  void validate(Index total_tokens) const;
};

// One training example with its factorization, diffusion steps, and
// forward-process noise already drawn. For multi-t sampling each group is
// duplicated `repeat` times; t_per_group and eps rows run s-major over
// (group, copy).
struct TrainItem {
  FactorizationPlan plan;
  Index class_id = 0;  // null class when the label was dropped
  Mat x0;              // tokens() x token_dim, grid order
  std::vector<Index> t_per_group;
  Mat eps;  // one row per assembled noisy row
  Index repeat = 1;
};

// Model-ready view of one item: context and noisy rows, per-row targets
// and weights, and the matching attention mask (conditions included).
struct AssembledSequence {
  Mat clean_ctx;
  std::vector<Index> ctx_positions;
  Mat noisy;
  std::vector<Index> noisy_positions;
  std::vector<Index> t_per_noisy;
  Mat target_eps;
  std::vector<double> row_weights;
  AttentionMask mask;
};

struct TrainState {
  ModelParams params;
  ModelParams ema;
  ModelParams m;  // Adam first moments
  ModelParams v;  // Adam second moments
  Index step = 0;
};

struct StepMetrics {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// Diffusion steps for one plan: one shared draw, one per group, or
// multi_t_k independent draws per group (s-major).
std::vector<Index> sample_t(TimeSampling mode, Index num_steps, Index multi_t_k,
                            Index schedule_steps, Rng& rng);

// Parameters from the run seed's init stream; EMA starts as a copy,
// moments at zero.
TrainState init_train_state(const ModelConfig& model_cfg, const TrainConfig& train_cfg);

// Draws the batch for one optimizer step. Every stochastic choice comes
// from a stream keyed by (seed, purpose, step, item), so batches are
// reproducible in isolation.
std::vector<TrainItem> make_batch(const ToyDataset& data, const ModelConfig& model_cfg,
                                  const TrainConfig& train_cfg, const NoiseSchedule& sched,
                                  Index step);

AssembledSequence assemble_sequence(const TrainItem& item, const ModelConfig& model_cfg,
                                    const NoiseSchedule& sched, double lambda);

// One AdamW step over the batch. The loss is the weight-scaled squared
// error summed over noisy rows and channels, divided by the total noisy
// row count of the batch. Gradients accumulate over a fixed chunk grid
// regardless of thread count, so results are bitwise reproducible.
// Throws NumericError on a non-finite loss.
StepMetrics train_step(TrainState& state, const std::vector<TrainItem>& batch,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const NoiseSchedule& sched, int n_threads);

// Full loop: batches, steps, metrics, checkpoints. Writes
// checkpoint_<step>.cfkt files plus a final checkpoint.cfkt under run_dir
// when it is set. Returns metrics of the last step.
StepMetrics train_loop(TrainState& state, const ToyDataset& data,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const NoiseSchedule& sched, int n_threads,
                       const std::optional<std::filesystem::path>& run_dir,
                       MetricsLog* log);

}  // namespace cf
