#include "cf/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>

#include "cf/error.hpp"
#include "cf/io.hpp"
#include "cf/svg.hpp"
#include "cf/threading.hpp"

namespace cf {

namespace {

// Evaluation streams are keyed away from training streams by a fixed tag
// so a probe never replays a training batch's draws.
constexpr std::uint64_t kEvalTag = 0x455641;

}  // namespace

std::vector<double> per_step_val_loss(const ModelConfig& model_cfg, const ModelParams& params,
                                      const NoiseSchedule& sched, const ToyDataset& data,
                                      Index s_probe, Index t_draws, std::uint64_t seed,
                                      int n_threads) {
  const Index l = model_cfg.tokens();
  if (s_probe < 1 || s_probe > l) throw ParameterError("per_step_val_loss: s_probe out of range");
  if (t_draws < 1) throw ParameterError("per_step_val_loss: t_draws must be >= 1");
  if (data.held_x.empty()) throw ParameterError("per_step_val_loss: empty held-out split");
  const auto n_ex = static_cast<Index>(data.held_x.size());

  // Per-example accumulators, reduced in index order afterwards so the
  // result is independent of the thread schedule.
  std::vector<std::vector<double>> sums(static_cast<std::size_t>(n_ex),
                                        std::vector<double>(static_cast<std::size_t>(s_probe), 0.0));
  std::vector<std::vector<double>> counts = sums;

  parallel_chunks(n_threads, n_ex, [&](Index ei) {
    const Mat& x0 = data.held_x[static_cast<std::size_t>(ei)];
    const Index cls = data.held_y[static_cast<std::size_t>(ei)];
    for (Index d = 0; d < t_draws; ++d) {
      const auto a = static_cast<std::uint64_t>(ei);
      const auto b = mix_seed(kEvalTag, static_cast<std::uint64_t>(d));
      Rng plan_rng = derive_rng(seed, Stream::kPlanCuts, a, b);
      Rng t_rng = derive_rng(seed, Stream::kTimeDraw, a, b);
      Rng eps_rng = derive_rng(seed, Stream::kNoiseDraw, a, b);

      TrainItem item;
      item.plan = sample_plan(l, s_probe, OrderSpec{}, plan_rng);
      item.class_id = cls;
      item.x0 = x0;
      item.t_per_group = sample_t(TimeSampling::kPerGroupRandom, s_probe, 1, sched.steps(), t_rng);
      item.eps = Mat(l, model_cfg.token_dim);
      for (Index r = 0; r < l; ++r)
        for (Index c = 0; c < model_cfg.token_dim; ++c) item.eps(r, c) = eps_rng.normal();

      const AssembledSequence seq = assemble_sequence(item, model_cfg, sched, 1.0);
      ForwardInput in;
      in.clean_ctx = seq.clean_ctx.rows() > 0 ? &seq.clean_ctx : nullptr;
      in.ctx_positions = seq.ctx_positions;
      in.noisy = &seq.noisy;
      in.noisy_positions = seq.noisy_positions;
      in.t_per_noisy = seq.t_per_noisy;
      in.class_id = item.class_id;
      in.mask = &seq.mask;
      const Mat eps_hat = forward(model_cfg, params, in);

      // Noisy rows are s-major, so the group of row r is recovered from
      // the plan's group sizes in order.
      const std::vector<Index> sizes = item.plan.group_sizes();
      Index row = 0;
      for (Index s = 0; s < s_probe; ++s) {
        for (Index k = 0; k < sizes[static_cast<std::size_t>(s)]; ++k, ++row) {
          double sq = 0.0;
          for (Index c = 0; c < model_cfg.token_dim; ++c) {
            const double diff = eps_hat(row, c) - seq.target_eps(row, c);
            sq += diff * diff;
          }
          sums[static_cast<std::size_t>(ei)][static_cast<std::size_t>(s)] += sq;
          counts[static_cast<std::size_t>(ei)][static_cast<std::size_t>(s)] += 1.0;
        }
      }
    }
  });

  std::vector<double> total(static_cast<std::size_t>(s_probe), 0.0);
  std::vector<double> n(static_cast<std::size_t>(s_probe), 0.0);
  for (Index ei = 0; ei < n_ex; ++ei)
    for (Index s = 0; s < s_probe; ++s) {
      total[static_cast<std::size_t>(s)] += sums[static_cast<std::size_t>(ei)][static_cast<std::size_t>(s)];
      n[static_cast<std::size_t>(s)] += counts[static_cast<std::size_t>(ei)][static_cast<std::size_t>(s)];
    }
  std::vector<double> out(static_cast<std::size_t>(s_probe), 0.0);
  for (Index s = 0; s < s_probe; ++s)
    out[static_cast<std::size_t>(s)] = total[static_cast<std::size_t>(s)] / n[static_cast<std::size_t>(s)];
  return out;
}

Mat sample_set(const ModelConfig& model_cfg, const ModelParams& params,
               const NoiseSchedule& sched, const SampleRequest& base, Index n_images,
               std::uint64_t seed, int n_threads) {
  if (n_images < 1) throw ParameterError("sample_set: n_images must be >= 1");
  const Index l = model_cfg.tokens();
  Mat out(n_images, l * model_cfg.token_dim);
  parallel_chunks(n_threads, n_images, [&](Index i) {
    SampleRequest req = base;
    req.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    const Mat grid = generate(model_cfg, params, sched, req);
    double* row = out.row(i);
    for (Index r = 0; r < l; ++r)
      for (Index c = 0; c < model_cfg.token_dim; ++c) row[r * model_cfg.token_dim + c] = grid(r, c);
  });
  return out;
}

MmdEntry mmd_entry(const std::string& name, const Mat& samples, const Mat& reference,
                   Index n_permutations, std::uint64_t seed) {
  Rng rng = derive_rng(seed, Stream::kPermTest);
  const MmdTest test = mmd_permutation_test(samples, reference, n_permutations, 0.0, rng);
  MmdEntry e;
  e.name = name;
  e.u_stat = test.observed.u_stat;
  e.v_stat = test.observed.v_stat;
  e.bandwidth = test.observed.bandwidth;
  e.p_value = test.p_value;
  e.null_q99 = test.null_quantile(0.99);
  return e;
}

std::vector<EvalReport> run_ablation(const ModelConfig& model_cfg, const TrainConfig& base_train,
                                     const NoiseSchedule& sched, const ToyDataset& data,
                                     const AblationOptions& opts, int n_threads,
                                     const std::filesystem::path& out_dir) {
  if (opts.cells.empty()) throw ParameterError("run_ablation: no cells");
  if (opts.eval_class < 0 || opts.eval_class >= data.n_classes)
    throw ParameterError("run_ablation: eval_class out of range");
  std::filesystem::create_directories(out_dir);
  const Mat held_ref = flatten_class(data.held_x, data.held_y, opts.eval_class);

  std::vector<EvalReport> reports;
  reports.reserve(opts.cells.size());
  for (std::size_t ci = 0; ci < opts.cells.size(); ++ci) {
    const AblationCell& cell = opts.cells[ci];
    EvalReport rep;
    rep.cell = cell.name;
    const std::filesystem::path cell_dir = out_dir / cell.name;
    try {
      std::filesystem::create_directories(cell_dir);
      TrainConfig tc = base_train;
      tc.fixed_num_steps = cell.fixed_s;
      tc.gamma = cell.gamma;
      // Cell isolation: the seed depends on the cell name, not its grid
      // position, so adding cells never changes existing results.
      tc.seed = mix_seed(base_train.seed, fnv1a64(cell.name.data(), cell.name.size()));
      tc.validate(model_cfg.tokens());

      TrainState state = init_train_state(model_cfg, tc);
      {
        MetricsLog log(cell_dir / "metrics.tsv");
        train_loop(state, data, model_cfg, tc, sched, n_threads, cell_dir, &log);
      }
      for (const MetricsRow& row : read_metrics(cell_dir / "metrics.tsv"))
        if (row.key == "loss") {
          rep.train_steps.push_back(static_cast<double>(row.step));
          rep.train_loss.push_back(row.value);
        }

      rep.per_step_loss = per_step_val_loss(model_cfg, state.params, sched, data, opts.probe_s,
                                            opts.probe_t_draws, mix_seed(tc.seed, kEvalTag),
                                            n_threads);

      {
        Rng kappa_rng = derive_rng(tc.seed, Stream::kPlanSteps, kEvalTag);
        if (cell.fixed_s > 0) {
          // Fixed S: every plan has exactly fixed_s groups.
          rep.kappa_hist.assign(static_cast<std::size_t>(model_cfg.tokens()) + 1, 0);
          for (Index p = 0; p < opts.kappa_plans; ++p) {
            FactorizationPlan plan =
                sample_plan(model_cfg.tokens(), cell.fixed_s, OrderSpec{}, kappa_rng);
            for (Index sz : plan.group_sizes()) ++rep.kappa_hist[static_cast<std::size_t>(sz)];
          }
        } else {
          rep.kappa_hist = kappa_histogram(opts.kappa_plans, model_cfg.tokens(), cell.gamma,
                                           kappa_rng);
        }
      }

      for (Index s_eval : opts.s_evals) {
        SampleRequest req;
        req.s_eval = s_eval;
        req.ddpm_steps = opts.eval_ddpm_steps;
        req.class_id = opts.eval_class;
        const Mat samples =
            sample_set(model_cfg, state.params, sched, req, opts.eval_samples,
                       mix_seed(tc.seed, kEvalTag, static_cast<std::uint64_t>(s_eval)), n_threads);
        char name[32];
        std::snprintf(name, sizeof(name), "s_eval=%lld", static_cast<long long>(s_eval));
        rep.mmd.push_back(mmd_entry(name, samples, held_ref, opts.mmd_permutations,
                                    mix_seed(tc.seed, kEvalTag, static_cast<std::uint64_t>(s_eval), 1)));
      }
      rep.ok = true;
    } catch (const std::exception& ex) {
      rep.ok = false;
      rep.error = ex.what();
    }
    reports.push_back(std::move(rep));
  }
  write_ablation_outputs(out_dir, reports);
  return reports;
}

void write_ablation_outputs(const std::filesystem::path& dir,
                            const std::vector<EvalReport>& reports) {
  std::filesystem::create_directories(dir);

  std::string tsv = "cell\ts_eval\tmmd_u\tmmd_v\tbandwidth\tp_value\tnull_q99\n";
  for (const EvalReport& r : reports) {
    if (!r.ok) {
      tsv += r.cell + "\t-\tFAILED\t" + r.error + "\t-\t-\t-\n";
      continue;
    }
    for (const MmdEntry& e : r.mmd) {
      char line[256];
      std::snprintf(line, sizeof(line), "%s\t%s\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n",
                    r.cell.c_str(), e.name.c_str(), e.u_stat, e.v_stat, e.bandwidth, e.p_value,
                    e.null_q99);
      tsv += line;
    }
  }
  write_text_file((dir / "ablation.tsv").string(), tsv);

  std::string probe = "cell\tar_step\tval_loss\n";
  for (const EvalReport& r : reports) {
    if (!r.ok) continue;
    for (std::size_t s = 0; s < r.per_step_loss.size(); ++s) {
      char line[128];
      std::snprintf(line, sizeof(line), "%s\t%zu\t%.17g\n", r.cell.c_str(), s + 1,
                    r.per_step_loss[s]);
      probe += line;
    }
  }
  write_text_file((dir / "per_step_loss.tsv").string(), probe);

  {
    std::vector<Series> curves;
    for (const EvalReport& r : reports) {
      if (!r.ok || r.train_steps.empty()) continue;
      curves.push_back(Series{r.cell, r.train_steps, r.train_loss});
    }
    if (!curves.empty()) {
      ChartOptions o;
      o.title = "training loss";
      o.x_label = "step";
      o.y_label = "loss";
      o.log_y = true;
      write_text_file((dir / "loss_curves.svg").string(), render_line_chart(curves, o));
    }
  }
  {
    std::vector<Series> curves;
    for (const EvalReport& r : reports) {
      if (!r.ok || r.per_step_loss.empty()) continue;
      Series s;
      s.label = r.cell;
      for (std::size_t i = 0; i < r.per_step_loss.size(); ++i) {
        s.x.push_back(static_cast<double>(i + 1));
        s.y.push_back(r.per_step_loss[i]);
      }
      curves.push_back(std::move(s));
    }
    if (!curves.empty()) {
      ChartOptions o;
      o.title = "validation loss by AR step";
      o.x_label = "AR step";
      o.y_label = "loss";
      write_text_file((dir / "per_step_loss.svg").string(), render_line_chart(curves, o));
    }
  }
  {
    std::vector<Series> curves;
    for (const EvalReport& r : reports) {
      if (!r.ok || r.mmd.empty()) continue;
      Series s;
      s.label = r.cell;
      for (std::size_t i = 0; i < r.mmd.size(); ++i) {
        s.x.push_back(static_cast<double>(i + 1));
        s.y.push_back(std::max(r.mmd[i].u_stat, 0.0));
      }
      curves.push_back(std::move(s));
    }
    if (!curves.empty()) {
      ChartOptions o;
      o.title = "MMD^2 by evaluation AR steps";
      o.x_label = "s_eval index";
      o.y_label = "MMD^2 (U)";
      write_text_file((dir / "mmd_by_s_eval.svg").string(), render_line_chart(curves, o));
    }
  }
  {
    // Group-size histograms as one bar chart per cell would be noisy;
    // a line chart over sizes reads better at L = 64.
    std::vector<Series> curves;
    for (const EvalReport& r : reports) {
      if (!r.ok || r.kappa_hist.empty()) continue;
      Series s;
      s.label = r.cell;
      for (std::size_t k = 1; k < r.kappa_hist.size(); ++k) {
        s.x.push_back(static_cast<double>(k));
        s.y.push_back(static_cast<double>(r.kappa_hist[k]));
      }
      curves.push_back(std::move(s));
    }
    if (!curves.empty()) {
      ChartOptions o;
      o.title = "group size histogram";
      o.x_label = "|kappa|";
      o.y_label = "count";
      write_text_file((dir / "kappa_hist.svg").string(), render_line_chart(curves, o));
    }
  }
}

}  // namespace cf
