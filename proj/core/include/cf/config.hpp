#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/harness.hpp"
#include "cf/sampler.hpp"
#include "cf/schedule.hpp"
#include "cf/trainer.hpp"

namespace cf {

// Flat dotted-key run configuration. Every tunable of the library appears
// here with its default, so a resolved config fully describes a run.

struct RunConfig {
  std::string run_name = "run";
  std::string output_dir = "runs";
  std::uint64_t seed = 0;

  ModelConfig model;

  // Full-length forward process: alpha_bar(T) ~ 4e-5, so reverse chains
  // may start from pure noise. Respace at sampling time instead of
  // shortening the training schedule.
  Index schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  TrainConfig train;  // train.seed is overwritten with the run seed on resolve

  DataConfig data;

  SampleRequest sample;  // cfg interval and seed are managed by the fields below
  Index cfg_t_low = 0;   // either nonzero arms the guidance interval
  Index cfg_t_high = 0;
  Index sample_n_images = 16;
  double px_lo = -3.0;  // token range mapped onto [0, 255] for image dumps
  double px_hi = 3.0;

  AblationOptions harness;  // cells/s_evals parsed from the strings below
  std::string harness_cells = "s=1,s=2,s=4,s=8,gamma=1.0,gamma=0.9";
  std::string harness_s_evals = "1,2,4,8";

  NoiseSchedule make_noise_schedule() const;
  std::filesystem::path run_dir() const;

  // Cross-field checks; throws ParameterError naming the offending key.
  void validate() const;
};

// Defaults, then the file's keys (missing or empty file sections are
// fine), then the overrides, then validate(). File syntax: one
// `key = value` per line, `#` starts a comment, unknown keys are errors.
RunConfig load_config(const std::optional<std::filesystem::path>& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides);

// Sets one key on an already-parsed config; same registry as the file
// parser. Throws ParameterError for unknown keys or unparseable values.
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical text form: every key, sorted, with round-trip-stable values.
std::string render_config(const RunConfig& cfg);

// render_config written to dir/config.resolved.
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir);

// "s=1,gamma=0.9" style cell list; names are the tokens themselves.
std::vector<AblationCell> parse_cells(const std::string& text);
std::vector<Index> parse_index_list(const std::string& text);

}  // namespace cf
