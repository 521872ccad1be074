#include "cf/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "cf/error.hpp"
#include "cf/svg.hpp"

namespace cf {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Shortest decimal that parses back to the same double, so resolved
// configs stay human-readable without losing precision.
std::string fmt_real(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& type,
                            const std::string& got) {
  throw ParameterError("config key '" + key + "': expected " + type + ", got '" + got + "'");
}

Index parse_int_value(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) bad_value(key, "integer", s);
    return static_cast<Index>(v);
  } catch (const ParameterError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "integer", s);
  }
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size() || s.front() == '-') bad_value(key, "unsigned integer", s);
    return v;
  } catch (const ParameterError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "unsigned integer", s);
  }
}

double parse_real_value(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) bad_value(key, "real", s);
    return v;
  } catch (const ParameterError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "real", s);
  }
}

bool parse_bool_value(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  bad_value(key, "boolean", s);
}

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using Registry = std::vector<KeyDef>;

template <class Acc>
void add_int(Registry& reg, std::string name, Acc acc) {
  reg.push_back(KeyDef{
      name,
      [name, acc](RunConfig& c, const std::string& s) { acc(c) = parse_int_value(name, s); },
      [acc](const RunConfig& c) { return std::to_string(acc(c)); }});
}

template <class Acc>
void add_u64(Registry& reg, std::string name, Acc acc) {
  reg.push_back(KeyDef{
      name,
      [name, acc](RunConfig& c, const std::string& s) { acc(c) = parse_u64_value(name, s); },
      [acc](const RunConfig& c) { return std::to_string(acc(c)); }});
}

template <class Acc>
void add_real(Registry& reg, std::string name, Acc acc) {
  reg.push_back(KeyDef{
      name,
      [name, acc](RunConfig& c, const std::string& s) { acc(c) = parse_real_value(name, s); },
      [acc](const RunConfig& c) { return fmt_real(acc(c)); }});
}

template <class Acc>
void add_bool(Registry& reg, std::string name, Acc acc) {
  reg.push_back(KeyDef{
      name,
      [name, acc](RunConfig& c, const std::string& s) { acc(c) = parse_bool_value(name, s); },
      [acc](const RunConfig& c) { return acc(c) ? "true" : "false"; }});
}

template <class Acc>
void add_string(Registry& reg, std::string name, Acc acc) {
  reg.push_back(KeyDef{name, [acc](RunConfig& c, const std::string& s) { acc(c) = s; },
                       [acc](const RunConfig& c) { return acc(c); }});
}

template <class E, class Acc>
void add_enum(Registry& reg, std::string name, Acc acc,
              std::vector<std::pair<std::string, E>> values) {
  std::string options;
  for (const auto& v : values) {
    if (!options.empty()) options += "|";
    options += v.first;
  }
  reg.push_back(KeyDef{
      name,
      [name, acc, values, options](RunConfig& c, const std::string& s) {
        for (const auto& v : values)
          if (v.first == s) {
            acc(c) = v.second;
            return;
          }
        bad_value(name, "one of " + options, s);
      },
      [acc, values](const RunConfig& c) {
        for (const auto& v : values)
          if (v.second == acc(c)) return v.first;
        return std::string("?");
      }});
}

Registry build_registry() {
  Registry reg;
  add_string(reg, "run_name", [](auto& c) -> auto& { return c.run_name; });
  add_string(reg, "output_dir", [](auto& c) -> auto& { return c.output_dir; });
  add_u64(reg, "seed", [](auto& c) -> auto& { return c.seed; });

  add_int(reg, "model.dim", [](auto& c) -> auto& { return c.model.dim; });
  add_int(reg, "model.n_layers", [](auto& c) -> auto& { return c.model.n_layers; });
  add_int(reg, "model.n_heads", [](auto& c) -> auto& { return c.model.n_heads; });
  add_int(reg, "model.patch_size", [](auto& c) -> auto& { return c.model.patch_size; });
  add_int(reg, "model.grid_side", [](auto& c) -> auto& { return c.model.grid_side; });
  add_int(reg, "model.token_dim", [](auto& c) -> auto& { return c.model.token_dim; });
  add_int(reg, "model.n_classes", [](auto& c) -> auto& { return c.model.n_classes; });
  add_int(reg, "model.n_class_tokens", [](auto& c) -> auto& { return c.model.n_class_tokens; });
  add_int(reg, "model.class_token_repeat",
          [](auto& c) -> auto& { return c.model.class_token_repeat; });
  add_enum<PosEmbedKind>(reg, "model.pos_embed", [](auto& c) -> auto& { return c.model.pos_embed; },
           {{std::string("sinusoidal2d"), PosEmbedKind::kSinusoidal2d},
            {std::string("learnable"), PosEmbedKind::kLearnable}});
  add_bool(reg, "model.qk_norm", [](auto& c) -> auto& { return c.model.qk_norm; });

  add_int(reg, "schedule.steps", [](auto& c) -> auto& { return c.schedule_steps; });
  add_real(reg, "schedule.beta_start", [](auto& c) -> auto& { return c.beta_start; });
  add_real(reg, "schedule.beta_end", [](auto& c) -> auto& { return c.beta_end; });

  add_int(reg, "train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; });
  add_int(reg, "train.total_steps", [](auto& c) -> auto& { return c.train.total_steps; });
  add_int(reg, "train.warmup_steps", [](auto& c) -> auto& { return c.train.warmup_steps; });
  add_real(reg, "train.base_lr", [](auto& c) -> auto& { return c.train.base_lr; });
  add_real(reg, "train.adam_beta1", [](auto& c) -> auto& { return c.train.adam_beta1; });
  add_real(reg, "train.adam_beta2", [](auto& c) -> auto& { return c.train.adam_beta2; });
  add_real(reg, "train.adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; });
  add_real(reg, "train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
  add_real(reg, "train.gamma", [](auto& c) -> auto& { return c.train.gamma; });
  add_int(reg, "train.fixed_num_steps", [](auto& c) -> auto& { return c.train.fixed_num_steps; });
  add_real(reg, "train.lambda", [](auto& c) -> auto& { return c.train.lambda; });
  add_enum<TokenOrder>(reg, "train.order", [](auto& c) -> auto& { return c.train.order.order; },
           {{std::string("random"), TokenOrder::kRandom},
            {std::string("raster"), TokenOrder::kRaster},
            {std::string("block_raster"), TokenOrder::kBlockRaster},
            {std::string("dilated"), TokenOrder::kDilated}});
  add_int(reg, "train.block", [](auto& c) -> auto& { return c.train.order.block; });
  add_enum<TimeSampling>(reg, "train.t_sampling", [](auto& c) -> auto& { return c.train.t_sampling; },
           {{std::string("shared"), TimeSampling::kShared},
            {std::string("per_group"), TimeSampling::kPerGroupRandom},
            {std::string("multi_t"), TimeSampling::kMultiT}});
  add_int(reg, "train.multi_t_k", [](auto& c) -> auto& { return c.train.multi_t_k; });
  add_real(reg, "train.ema_decay", [](auto& c) -> auto& { return c.train.ema_decay; });
  add_real(reg, "train.class_drop", [](auto& c) -> auto& { return c.train.class_drop; });
  add_int(reg, "train.log_every", [](auto& c) -> auto& { return c.train.log_every; });
  add_int(reg, "train.checkpoint_every",
          [](auto& c) -> auto& { return c.train.checkpoint_every; });

  add_enum<DatasetKind>(reg, "data.kind", [](auto& c) -> auto& { return c.data.kind; },
           {{std::string("gaussian_mixture_grid"), DatasetKind::kGaussianMixtureGrid},
            {std::string("shapes"), DatasetKind::kShapes}});
  add_int(reg, "data.n", [](auto& c) -> auto& { return c.data.n; });
  add_real(reg, "data.noise_sigma", [](auto& c) -> auto& { return c.data.noise_sigma; });
  add_real(reg, "data.corr", [](auto& c) -> auto& { return c.data.corr; });
  add_real(reg, "data.held_out_frac", [](auto& c) -> auto& { return c.data.held_out_frac; });

  add_int(reg, "sample.s_eval", [](auto& c) -> auto& { return c.sample.s_eval; });
  add_int(reg, "sample.ddpm_steps", [](auto& c) -> auto& { return c.sample.ddpm_steps; });
  add_real(reg, "sample.cfg_scale", [](auto& c) -> auto& { return c.sample.cfg_scale; });
  add_int(reg, "sample.cfg_t_low", [](auto& c) -> auto& { return c.cfg_t_low; });
  add_int(reg, "sample.cfg_t_high", [](auto& c) -> auto& { return c.cfg_t_high; });
  add_int(reg, "sample.class_id", [](auto& c) -> auto& { return c.sample.class_id; });
  add_enum<ReverseVariance>(reg, "sample.variance", [](auto& c) -> auto& { return c.sample.variance; },
           {{std::string("posterior"), ReverseVariance::kPosterior},
            {std::string("beta"), ReverseVariance::kBeta}});
  add_bool(reg, "sample.use_cache", [](auto& c) -> auto& { return c.sample.use_cache; });
  add_enum<TokenOrder>(reg, "sample.order", [](auto& c) -> auto& { return c.sample.order.order; },
           {{std::string("random"), TokenOrder::kRandom},
            {std::string("raster"), TokenOrder::kRaster},
            {std::string("block_raster"), TokenOrder::kBlockRaster},
            {std::string("dilated"), TokenOrder::kDilated}});
  add_int(reg, "sample.block", [](auto& c) -> auto& { return c.sample.order.block; });
  add_int(reg, "sample.n_images", [](auto& c) -> auto& { return c.sample_n_images; });
  add_real(reg, "sample.px_lo", [](auto& c) -> auto& { return c.px_lo; });
  add_real(reg, "sample.px_hi", [](auto& c) -> auto& { return c.px_hi; });

  add_string(reg, "harness.cells", [](auto& c) -> auto& { return c.harness_cells; });
  add_string(reg, "harness.s_evals", [](auto& c) -> auto& { return c.harness_s_evals; });
  add_int(reg, "harness.eval_samples", [](auto& c) -> auto& { return c.harness.eval_samples; });
  add_int(reg, "harness.eval_ddpm_steps",
          [](auto& c) -> auto& { return c.harness.eval_ddpm_steps; });
  add_int(reg, "harness.mmd_permutations",
          [](auto& c) -> auto& { return c.harness.mmd_permutations; });
  add_int(reg, "harness.probe_s", [](auto& c) -> auto& { return c.harness.probe_s; });
  add_int(reg, "harness.probe_t_draws", [](auto& c) -> auto& { return c.harness.probe_t_draws; });
  add_int(reg, "harness.eval_class", [](auto& c) -> auto& { return c.harness.eval_class; });
  add_int(reg, "harness.kappa_plans", [](auto& c) -> auto& { return c.harness.kappa_plans; });

  std::sort(reg.begin(), reg.end(),
            [](const KeyDef& a, const KeyDef& b) { return a.name < b.name; });
  return reg;
}

const Registry& registry() {
  static const Registry reg = build_registry();
  return reg;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ParameterError(msg);
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const KeyDef& def : registry())
    if (def.name == key) {
      def.set(cfg, value);
      return;
    }
  throw ParameterError("unknown config key '" + key + "'");
}

std::vector<AblationCell> parse_cells(const std::string& text) {
  std::vector<AblationCell> cells;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    token = trim(token);
    if (token.empty()) continue;
    AblationCell cell;
    cell.name = token;
    if (token.rfind("s=", 0) == 0) {
      cell.fixed_s = parse_int_value("harness.cells", token.substr(2));
      require(cell.fixed_s >= 1, "harness.cells: fixed S must be >= 1 in '" + token + "'");
    } else if (token.rfind("gamma=", 0) == 0) {
      cell.gamma = parse_real_value("harness.cells", token.substr(6));
      require(cell.gamma >= 0.0 && cell.gamma <= 1.0,
              "harness.cells: gamma must lie in [0, 1] in '" + token + "'");
    } else {
      throw ParameterError("harness.cells: cell token '" + token +
                           "' is neither s=<int> nor gamma=<real>");
    }
    cells.push_back(std::move(cell));
  }
  require(!cells.empty(), "harness.cells: no cells given");
  return cells;
}

std::vector<Index> parse_index_list(const std::string& text) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    token = trim(token);
    if (token.empty()) continue;
    out.push_back(parse_int_value("harness.s_evals", token));
  }
  require(!out.empty(), "harness.s_evals: empty list");
  return out;
}

NoiseSchedule RunConfig::make_noise_schedule() const {
  return make_schedule(schedule_steps, ScheduleKind::kLinear, beta_start, beta_end);
}

std::filesystem::path RunConfig::run_dir() const {
  return std::filesystem::path(output_dir) / run_name;
}

void RunConfig::validate() const {
  require(!run_name.empty(), "run_name: must not be empty");
  require(run_name.find('/') == std::string::npos && run_name.find("..") == std::string::npos,
          "run_name: must be a plain directory name");
  require(!output_dir.empty(), "output_dir: must not be empty");

  model.validate();
  require(schedule_steps >= 1, "schedule.steps: must be >= 1");
  require(beta_start > 0.0 && beta_start < 1.0, "schedule.beta_start: must lie in (0, 1)");
  require(beta_end > 0.0 && beta_end < 1.0, "schedule.beta_end: must lie in (0, 1)");
  require(beta_start <= beta_end, "schedule.beta_start: must be <= schedule.beta_end");
  train.validate(model.tokens());
  data.validate();

  require(sample.s_eval >= 1 && sample.s_eval <= model.tokens(),
          "sample.s_eval: must lie in [1, model tokens]");
  require(sample.ddpm_steps >= 0 && sample.ddpm_steps <= schedule_steps,
          "sample.ddpm_steps: must lie in [0, schedule.steps]");
  require(sample.class_id >= 0 && sample.class_id <= model.n_classes,
          "sample.class_id: must lie in [0, model.n_classes] (the null class included)");
  if (cfg_t_low != 0 || cfg_t_high != 0) {
    require(cfg_t_low >= 0 && cfg_t_high > cfg_t_low,
            "sample.cfg_t_low: interval needs 0 <= t_low < t_high");
    require(cfg_t_high <= schedule_steps + 1, "sample.cfg_t_high: beyond the schedule");
  }
  require(sample_n_images >= 1, "sample.n_images: must be >= 1");
  require(px_lo < px_hi, "sample.px_lo: must be < sample.px_hi");

  const std::vector<AblationCell> cells = parse_cells(harness_cells);
  for (const AblationCell& c : cells)
    if (c.fixed_s > 0)
      require(c.fixed_s <= model.tokens(), "harness.cells: fixed S exceeds model tokens");
  for (Index s : parse_index_list(harness_s_evals))
    require(s >= 1 && s <= model.tokens(), "harness.s_evals: entries must lie in [1, tokens]");
  require(harness.eval_samples >= 2, "harness.eval_samples: must be >= 2");
  require(harness.eval_ddpm_steps >= 0 && harness.eval_ddpm_steps <= schedule_steps,
          "harness.eval_ddpm_steps: must lie in [0, schedule.steps]");
  require(harness.mmd_permutations >= 1, "harness.mmd_permutations: must be >= 1");
  require(harness.probe_s >= 1 && harness.probe_s <= model.tokens(),
          "harness.probe_s: must lie in [1, model tokens]");
  require(harness.probe_t_draws >= 1, "harness.probe_t_draws: must be >= 1");
  require(harness.eval_class >= 0 && harness.eval_class < model.n_classes,
          "harness.eval_class: must name a real class");
  require(harness.kappa_plans >= 1, "harness.kappa_plans: must be >= 1");
}

RunConfig load_config(const std::optional<std::filesystem::path>& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw IoError("cannot open config file: " + file->string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParameterError(file->string() + ":" + std::to_string(lineno) +
                             ": expected 'key = value'");
      apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  for (const auto& [key, value] : overrides) apply_config_entry(cfg, key, value);

  // Derived fields: streams key off the run seed, and the structured
  // harness grid mirrors its string form.
  cfg.train.seed = cfg.seed;
  cfg.sample.seed = cfg.seed;
  cfg.sample.cfg_interval =
      (cfg.cfg_t_low != 0 || cfg.cfg_t_high != 0)
          ? std::optional<std::pair<Index, Index>>(std::in_place, cfg.cfg_t_low, cfg.cfg_t_high)
          : std::nullopt;
  cfg.validate();
  cfg.harness.cells = parse_cells(cfg.harness_cells);
  cfg.harness.s_evals = parse_index_list(cfg.harness_s_evals);
  return cfg;
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const KeyDef& def : registry()) out += def.name + " = " + def.get(cfg) + "\n";
  return out;
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file((dir / "config.resolved").string(), render_config(cfg));
}

}  // namespace cf
