#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/metrics.hpp"
#include "cf/sampler.hpp"
#include "cf/trainer.hpp"

namespace cf {

// Experiment drivers: per-step validation probes, sample-set generation,
// and the fixed-S / decay-ratio ablation grid with its report files.

struct MmdEntry {
  std::string name;
  double u_stat = 0.0;
  double v_stat = 0.0;
  double bandwidth = 0.0;
  double p_value = 1.0;
  double null_q99 = 0.0;
};

struct EvalReport {
  std::string cell;
  bool ok = false;
  std::string error;  // set when the cell failed; other fields may be partial
  std::vector<double> train_steps;
  std::vector<double> train_loss;
  std::vector<double> per_step_loss;   // probe loss per AR step index
  std::vector<long long> kappa_hist;   // group-size counts under the cell's law
  std::vector<MmdEntry> mmd;           // one entry per evaluated s_eval
};

// Average denoising loss per AR step position under fixed-S probe plans,
// over the held-out split and t_draws independent (plan, t, noise) draws
// per example. Entry s is the mean channel-summed squared error of the
// rows generated at AR step s+1.
std::vector<double> per_step_val_loss(const ModelConfig& model_cfg, const ModelParams& params,
                                      const NoiseSchedule& sched, const ToyDataset& data,
                                      Index s_probe, Index t_draws, std::uint64_t seed,
                                      int n_threads);

// n_images independent draws from the model, one row per flattened token
// grid. Image i uses seed mix_seed(seed, i), so the set is reproducible
// and images can generate in parallel without affecting results.
Mat sample_set(const ModelConfig& model_cfg, const ModelParams& params,
               const NoiseSchedule& sched, const SampleRequest& base, Index n_images,
               std::uint64_t seed, int n_threads);

// MMD permutation test of samples against a reference set, packaged for
// reports.
MmdEntry mmd_entry(const std::string& name, const Mat& samples, const Mat& reference,
                   Index n_permutations, std::uint64_t seed);

struct AblationCell {
  std::string name;
  Index fixed_s = 0;   // > 0 pins S during training
  double gamma = 1.0;  // used when fixed_s == 0
};

struct AblationOptions {
  std::vector<AblationCell> cells;
  std::vector<Index> s_evals{1, 2, 4, 8};
  Index eval_samples = 100;
  Index eval_ddpm_steps = 25;
  Index mmd_permutations = 200;
  Index probe_s = 8;
  Index probe_t_draws = 8;
  Index eval_class = 0;
  Index kappa_plans = 20000;
};

// Trains one cell per entry at the given base configuration (gamma or
// fixed S overridden per cell), then evaluates MMD across s_evals against
// the held-out eval class, the per-step probe, and the cell's group-size
// law. A failing cell records its error and the grid continues. Each cell
// gets its own seed and subdirectory of out_dir.
std::vector<EvalReport> run_ablation(const ModelConfig& model_cfg, const TrainConfig& base_train,
                                     const NoiseSchedule& sched, const ToyDataset& data,
                                     const AblationOptions& opts, int n_threads,
                                     const std::filesystem::path& out_dir);

// ablation.tsv, per_step_loss.tsv, and the SVG charts for the grid.
void write_ablation_outputs(const std::filesystem::path& dir,
                            const std::vector<EvalReport>& reports);

}  // namespace cf
