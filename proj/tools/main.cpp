#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "cf/causal_mask.hpp"
#include "cf/config.hpp"
#include "cf/error.hpp"
#include "cf/harness.hpp"
#include "cf/io.hpp"
#include "cf/sampler.hpp"
#include "cf/svg.hpp"
#include "cf/threading.hpp"
#include "cf/trainer.hpp"

namespace fs = std::filesystem;

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

struct CommonArgs {
  std::optional<std::string> config_path;
  std::vector<std::string> sets;
  Overrides extra;  // sugar flags, applied after --set
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  cmd->add_option("--set", args.sets, "override as key=value (repeatable)")
      ->take_all()
      ->expected(0, -1);
}

cf::RunConfig resolve_config(const CommonArgs& args) {
  Overrides overrides;
  for (const std::string& s : args.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw cf::ParameterError("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& kv : args.extra) overrides.push_back(kv);
  std::optional<fs::path> file;
  if (args.config_path) file = fs::path(*args.config_path);
  return cf::load_config(file, overrides);
}

cf::ToyDataset build_dataset(const cf::RunConfig& cfg) {
  cf::Rng rng = cf::derive_rng(cfg.seed, cf::Stream::kDataset);
  return cf::make_toy_dataset(cfg.data, cfg.model.grid_side, cfg.model.token_dim,
                              cfg.model.n_classes, rng);
}

// Reshapes one flattened sample row back into a token grid.
cf::Mat row_to_grid(const cf::Mat& rows, cf::Index i, cf::Index tokens, cf::Index token_dim) {
  cf::Mat grid(tokens, token_dim);
  const double* src = rows.row(i);
  for (cf::Index r = 0; r < tokens; ++r)
    for (cf::Index c = 0; c < token_dim; ++c) grid(r, c) = src[r * token_dim + c];
  return grid;
}

// PGM for single-channel tokens, PPM for three channels, nothing else.
void dump_image(const fs::path& stem, const cf::Mat& grid, const cf::ModelConfig& mc,
                double lo, double hi) {
  const cf::Index p = mc.patch_size;
  if (mc.token_dim % (p * p) != 0) return;
  const cf::Index channels = mc.token_dim / (p * p);
  if (channels != 1 && channels != 3) return;
  const cf::Mat image = cf::unpatchify(grid, mc.grid_side, p, channels);
  const cf::Index side = mc.grid_side * p;
  const std::vector<std::uint8_t> bytes = cf::tokens_to_gray(image, lo, hi);
  if (channels == 1)
    cf::write_pgm(fs::path(stem.string() + ".pgm"), side, side, bytes);
  else
    cf::write_ppm(fs::path(stem.string() + ".ppm"), side, side, bytes);
}

cf::Checkpoint load_required_checkpoint(const std::string& path, bool use_ema) {
  if (path.empty()) throw cf::ParameterError("--checkpoint is required");
  if (!fs::exists(path)) throw cf::ParameterError("checkpoint not found: " + path);
  cf::Checkpoint ckpt = cf::load_checkpoint(path);
  if (use_ema) {
    if (!ckpt.has_ema) throw cf::ParameterError("checkpoint has no EMA tensors: " + path);
    ckpt.params = ckpt.ema;
  }
  return ckpt;
}

int cmd_train(const CommonArgs& args) {
  const cf::RunConfig cfg = resolve_config(args);
  const fs::path dir = cfg.run_dir();
  fs::create_directories(dir);
  cf::write_resolved_config(cfg, dir);

  const cf::ToyDataset data = build_dataset(cfg);
  const cf::NoiseSchedule sched = cfg.make_noise_schedule();
  const int threads = cf::thread_count_from_env();

  cf::TrainState state = cf::init_train_state(cfg.model, cfg.train);
  cf::StepMetrics last;
  {
    cf::MetricsLog log(dir / "metrics.tsv");
    last = cf::train_loop(state, data, cfg.model, cfg.train, sched, threads, dir, &log);
  }
  cf::write_manifest(dir);
  std::printf("trained %lld steps, final loss %.6f -> %s\n",
              static_cast<long long>(cfg.train.total_steps), last.loss, dir.string().c_str());
  return 0;
}

int cmd_sample(const CommonArgs& args, const std::string& checkpoint, bool use_ema) {
  cf::RunConfig cfg = resolve_config(args);
  const cf::Checkpoint ckpt = load_required_checkpoint(checkpoint, use_ema);
  cfg.model = ckpt.config;
  cfg.validate();  // sample ranges against the checkpoint's model

  const fs::path dir = cfg.run_dir();
  fs::create_directories(dir / "samples");
  cf::write_resolved_config(cfg, dir);

  const cf::NoiseSchedule sched = cfg.make_noise_schedule();
  const int threads = cf::thread_count_from_env();
  const cf::Mat rows = cf::sample_set(cfg.model, ckpt.params, sched, cfg.sample,
                                      cfg.sample_n_images, cfg.seed, threads);

  const auto tokens = cfg.model.tokens();
  cf::write_tensor(dir / "samples" / "samples.cftn",
                   {static_cast<std::uint64_t>(rows.rows()), static_cast<std::uint64_t>(tokens),
                    static_cast<std::uint64_t>(cfg.model.token_dim)},
                   rows.data(), cf::TensorDtype::kF64);
  {
    cf::MetricsLog log(dir / "metrics.tsv");
    for (cf::Index i = 0; i < rows.rows(); ++i) {
      const cf::Mat grid = row_to_grid(rows, i, tokens, cfg.model.token_dim);
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%04lld", static_cast<long long>(i));
      cf::write_tensor(dir / "samples" / (std::string(name) + ".cftn"),
                       {static_cast<std::uint64_t>(tokens),
                        static_cast<std::uint64_t>(cfg.model.token_dim)},
                       grid.data(), cf::TensorDtype::kF64);
      dump_image(dir / "samples" / name, grid, cfg.model, cfg.px_lo, cfg.px_hi);
      double mean = 0.0;
      for (cf::Index k = 0; k < rows.cols(); ++k) mean += rows.row(i)[k];
      log.append(i, "sample.mean", mean / static_cast<double>(rows.cols()));
    }
  }
  cf::write_manifest(dir);
  std::printf("wrote %lld samples -> %s\n", static_cast<long long>(rows.rows()),
              (dir / "samples").string().c_str());
  return 0;
}

int cmd_edit(const CommonArgs& args, const std::string& checkpoint, bool use_ema,
             const std::string& source_path, const std::string& keep_range,
             cf::Index regen_groups) {
  cf::RunConfig cfg = resolve_config(args);
  const cf::Checkpoint ckpt = load_required_checkpoint(checkpoint, use_ema);
  cfg.model = ckpt.config;
  cfg.validate();

  if (!fs::exists(source_path)) throw cf::ParameterError("source tensor not found: " + source_path);
  const cf::TensorData src = cf::read_tensor(source_path);
  const auto tokens = cfg.model.tokens();
  if (src.count() != static_cast<std::uint64_t>(tokens * cfg.model.token_dim))
    throw cf::ShapeError("source tensor does not match the model's token grid");
  cf::Mat source(tokens, cfg.model.token_dim);
  for (cf::Index i = 0; i < tokens * cfg.model.token_dim; ++i)
    source.data()[i] = src.values[static_cast<std::size_t>(i)];

  const auto colon = keep_range.find(':');
  if (colon == std::string::npos)
    throw cf::ParameterError("--keep expects a:b (grid positions [a, b) survive)");
  const auto a = static_cast<cf::Index>(std::stoll(keep_range.substr(0, colon)));
  const auto b = static_cast<cf::Index>(std::stoll(keep_range.substr(colon + 1)));
  if (a < 0 || b <= a || b > tokens)
    throw cf::ParameterError("--keep range out of bounds for the token grid");

  cf::EditRequest req;
  req.source = source;
  req.keep.assign(static_cast<std::size_t>(tokens), 0);
  for (cf::Index i = a; i < b; ++i) req.keep[static_cast<std::size_t>(i)] = 1;
  req.class_id = cfg.sample.class_id;
  req.ddpm_steps = cfg.sample.ddpm_steps;
  req.cfg_scale = cfg.sample.cfg_scale;
  req.cfg_interval = cfg.sample.cfg_interval;
  req.regen_groups = regen_groups;
  req.variance = cfg.sample.variance;
  req.seed = cfg.seed;
  req.use_cache = cfg.sample.use_cache;

  const fs::path dir = cfg.run_dir();
  fs::create_directories(dir / "edits");
  cf::write_resolved_config(cfg, dir);

  const cf::NoiseSchedule sched = cfg.make_noise_schedule();
  const cf::Mat out = cf::edit(cfg.model, ckpt.params, sched, req);
  cf::write_tensor(dir / "edits" / "edited.cftn",
                   {static_cast<std::uint64_t>(tokens),
                    static_cast<std::uint64_t>(cfg.model.token_dim)},
                   out.data(), cf::TensorDtype::kF64);
  dump_image(dir / "edits" / "source", source, cfg.model, cfg.px_lo, cfg.px_hi);
  dump_image(dir / "edits" / "edited", out, cfg.model, cfg.px_lo, cfg.px_hi);
  {
    cf::MetricsLog log(dir / "metrics.tsv");
    double mean = 0.0;
    for (cf::Index i = 0; i < tokens * cfg.model.token_dim; ++i) mean += out.data()[i];
    log.append(0, "edit.mean", mean / static_cast<double>(tokens * cfg.model.token_dim));
  }
  cf::write_manifest(dir);
  std::printf("edited grid -> %s\n", (dir / "edits" / "edited.cftn").string().c_str());
  return 0;
}

int cmd_analyze_masks(const std::string& groups_csv, cf::Index repeat, cf::Index n_cond) {
  std::vector<cf::Index> sizes;
  std::stringstream ss(groups_csv);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) sizes.push_back(static_cast<cf::Index>(std::stoll(tok)));
  if (sizes.empty()) throw cf::ParameterError("--groups expects a comma list of group sizes");
  cf::AttentionMask mask = cf::build_mask_repeated(sizes, repeat);
  if (n_cond > 0) mask = cf::prepend_condition(mask, n_cond);
  std::fputs(cf::render_mask(mask).c_str(), stdout);
  return 0;
}

int cmd_analyze_kappa(cf::Index tokens, double gamma, cf::Index plans, std::uint64_t seed,
                      const std::string& out_tsv) {
  cf::Rng rng = cf::derive_rng(seed, cf::Stream::kPlanSteps);
  const std::vector<long long> hist = cf::kappa_histogram(plans, tokens, gamma, rng);
  long long total = 0, small = 0;
  const cf::Index cutoff = std::max<cf::Index>(tokens / 16, 1);
  for (std::size_t k = 1; k < hist.size(); ++k) {
    total += hist[k];
    if (static_cast<cf::Index>(k) <= cutoff) small += hist[k];
  }
  std::printf("plans %lld  tokens %lld  gamma %.3f\n", static_cast<long long>(plans),
              static_cast<long long>(tokens), gamma);
  std::printf("groups %lld  size<=%lld: %lld (%.2f%%)\n", total, static_cast<long long>(cutoff),
              small, 100.0 * static_cast<double>(small) / static_cast<double>(total));
  if (!out_tsv.empty()) {
    std::string text = "size\tcount\n";
    for (std::size_t k = 0; k < hist.size(); ++k)
      text += std::to_string(k) + "\t" + std::to_string(hist[k]) + "\n";
    cf::write_text_file(out_tsv, text);
  }
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  const cf::RunConfig cfg = resolve_config(args);
  const fs::path dir = cfg.run_dir();
  fs::create_directories(dir);
  cf::write_resolved_config(cfg, dir);

  const cf::ToyDataset data = build_dataset(cfg);
  const cf::NoiseSchedule sched = cfg.make_noise_schedule();
  const int threads = cf::thread_count_from_env();

  cf::TrainConfig base = cfg.train;
  const std::vector<cf::EvalReport> reports =
      cf::run_ablation(cfg.model, base, sched, data, cfg.harness, threads, dir / "ablation");

  for (const cf::EvalReport& r : reports) {
    if (!r.ok) {
      std::printf("%-12s FAILED: %s\n", r.cell.c_str(), r.error.c_str());
      continue;
    }
    std::string line = r.cell;
    line.resize(12, ' ');
    for (const cf::MmdEntry& e : r.mmd) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "  %s u=%.5f p=%.3f", e.name.c_str(), e.u_stat, e.p_value);
      line += buf;
    }
    std::printf("%s\n", line.c_str());
  }
  cf::write_manifest(dir);
  return 0;
}

int cmd_plot(const std::string& metrics_path, const std::vector<std::string>& keys,
             const std::string& out_path, bool log_y) {
  if (!fs::exists(metrics_path))
    throw cf::ParameterError("metrics file not found: " + metrics_path);
  const std::vector<cf::MetricsRow> rows = cf::read_metrics(metrics_path);
  std::vector<cf::Series> series;
  for (const std::string& key : keys) {
    cf::Series s;
    s.label = key;
    for (const cf::MetricsRow& r : rows)
      if (r.key == key) {
        s.x.push_back(static_cast<double>(r.step));
        s.y.push_back(r.value);
      }
    if (s.x.empty()) throw cf::ParameterError("metrics key not present: " + key);
    series.push_back(std::move(s));
  }
  cf::ChartOptions opts;
  opts.title = fs::path(metrics_path).filename().string();
  opts.x_label = "step";
  opts.log_y = log_y;
  cf::write_text_file(out_path, cf::render_line_chart(series, opts));
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CausalFusion: dual-factorized autoregressive diffusion at desk scale"};
  app.require_subcommand(1);

  CommonArgs train_args;
  std::string train_gamma, train_lambda, train_order, train_steps, train_fixed_s;
  CLI::App* train = app.add_subcommand("train", "train a model from a run config");
  add_common(train, train_args);
  train->add_option("--gamma", train_gamma, "AR-step decay ratio (train.gamma)");
  train->add_option("--lambda", train_lambda, "first-step loss weight (train.lambda)");
  train->add_option("--order", train_order, "token order: random|raster|block_raster|dilated");
  train->add_option("--train-steps", train_steps, "optimizer steps (train.total_steps)");
  train->add_option("--fixed-s", train_fixed_s, "pin the AR step count (train.fixed_num_steps)");

  CommonArgs sample_args;
  std::string sample_ckpt, sample_s_eval, sample_ddpm, sample_cfg_scale, sample_class;
  bool sample_ema = false;
  CLI::App* sample = app.add_subcommand("sample", "generate token grids from a checkpoint");
  add_common(sample, sample_args);
  sample->add_option("--checkpoint", sample_ckpt, "model checkpoint path");
  sample->add_flag("--ema", sample_ema, "sample the EMA weights");
  sample->add_option("--s-eval", sample_s_eval, "AR steps at inference (sample.s_eval)");
  sample->add_option("--ddpm-steps", sample_ddpm, "respaced reverse steps (sample.ddpm_steps)");
  sample->add_option("--cfg-scale", sample_cfg_scale, "guidance scale (sample.cfg_scale)");
  sample->add_option("--class-id", sample_class, "condition class (sample.class_id)");

  CommonArgs edit_args;
  std::string edit_ckpt, edit_source, edit_keep = "0:1";
  bool edit_ema = false;
  cf::Index edit_regen = 1;
  CLI::App* edit = app.add_subcommand("edit", "regenerate the masked part of a token grid");
  add_common(edit, edit_args);
  edit->add_option("--checkpoint", edit_ckpt, "model checkpoint path");
  edit->add_flag("--ema", edit_ema, "use the EMA weights");
  edit->add_option("--source", edit_source, "CFTN tensor with the source grid")->required();
  edit->add_option("--keep", edit_keep, "grid positions a:b kept from the source")->required();
  edit->add_option("--regen-groups", edit_regen, "AR groups over the regenerated part");

  CLI::App* analyze = app.add_subcommand("analyze", "inspect masks and factorization laws");
  analyze->require_subcommand(1);
  std::string mask_groups;
  cf::Index mask_repeat = 1, mask_cond = 0;
  CLI::App* masks = analyze->add_subcommand("masks", "print the attention mask grid");
  masks->add_option("--groups", mask_groups, "comma list of AR group sizes")->required();
  masks->add_option("--repeat", mask_repeat, "noisy copies per group (multi-t)");
  masks->add_option("--cond", mask_cond, "condition tokens to prepend");
  cf::Index kappa_tokens = 256, kappa_plans = 100000;
  double kappa_gamma = 1.0;
  std::uint64_t kappa_seed = 0;
  std::string kappa_out;
  CLI::App* kappa = analyze->add_subcommand("kappa", "group-size histogram of the AR-step law");
  kappa->add_option("--tokens", kappa_tokens, "sequence length");
  kappa->add_option("--gamma", kappa_gamma, "decay ratio");
  kappa->add_option("--plans", kappa_plans, "number of simulated plans");
  kappa->add_option("--seed", kappa_seed, "simulation seed");
  kappa->add_option("--out", kappa_out, "write the histogram as TSV");

  CommonArgs ablate_args;
  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  add_common(ablate, ablate_args);

  std::string plot_metrics, plot_out = "plot.svg";
  std::vector<std::string> plot_keys{"loss"};
  bool plot_log = false;
  CLI::App* plot = app.add_subcommand("plot", "render metrics keys as an SVG line chart");
  plot->add_option("--metrics", plot_metrics, "metrics.tsv path")->required();
  plot->add_option("--key", plot_keys, "metrics key (repeatable)");
  plot->add_option("--out", plot_out, "output SVG path");
  plot->add_flag("--log-y", plot_log, "logarithmic y axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and friends return 0 through CLI11; real parse errors are
    // config errors by the exit-code contract.
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      if (!train_gamma.empty()) train_args.extra.emplace_back("train.gamma", train_gamma);
      if (!train_lambda.empty()) train_args.extra.emplace_back("train.lambda", train_lambda);
      if (!train_order.empty()) train_args.extra.emplace_back("train.order", train_order);
      if (!train_steps.empty()) train_args.extra.emplace_back("train.total_steps", train_steps);
      if (!train_fixed_s.empty())
        train_args.extra.emplace_back("train.fixed_num_steps", train_fixed_s);
      return cmd_train(train_args);
    }
    if (sample->parsed()) {
      if (!sample_s_eval.empty()) sample_args.extra.emplace_back("sample.s_eval", sample_s_eval);
      if (!sample_ddpm.empty()) sample_args.extra.emplace_back("sample.ddpm_steps", sample_ddpm);
      if (!sample_cfg_scale.empty())
        sample_args.extra.emplace_back("sample.cfg_scale", sample_cfg_scale);
      if (!sample_class.empty()) sample_args.extra.emplace_back("sample.class_id", sample_class);
      return cmd_sample(sample_args, sample_ckpt, sample_ema);
    }
    if (edit->parsed()) return cmd_edit(edit_args, edit_ckpt, edit_ema, edit_source, edit_keep, edit_regen);
    if (masks->parsed()) return cmd_analyze_masks(mask_groups, mask_repeat, mask_cond);
    if (kappa->parsed())
      return cmd_analyze_kappa(kappa_tokens, kappa_gamma, kappa_plans, kappa_seed, kappa_out);
    if (ablate->parsed()) return cmd_ablate(ablate_args);
    if (plot->parsed()) return cmd_plot(plot_metrics, plot_keys, plot_out, plot_log);
    return 1;
  } catch (const cf::ParameterError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const cf::ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
