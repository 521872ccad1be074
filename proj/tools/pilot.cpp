// Measurement harness behind the committed constants in
// tests/pilot_constants.hpp: times training steps and runs the recovery
// and ablation experiments once, printing the numbers the thresholds were
// frozen from. Not part of the test suite.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "cf/dataset.hpp"
#include "cf/harness.hpp"
#include "cf/metrics.hpp"
#include "cf/sampler.hpp"
#include "cf/schedule.hpp"
#include "cf/threading.hpp"
#include "cf/trainer.hpp"

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double arg_real(int argc, char** argv, const char* name, double fallback) {
  for (int i = 2; i + 1 < argc; ++i)
    if (std::strcmp(argv[i], name) == 0) return std::atof(argv[i + 1]);
  return fallback;
}

long long arg_int(int argc, char** argv, const char* name, long long fallback) {
  for (int i = 2; i + 1 < argc; ++i)
    if (std::strcmp(argv[i], name) == 0) return std::atoll(argv[i + 1]);
  return fallback;
}

cf::ModelConfig recovery_model() {
  cf::ModelConfig m;  // the desk default: dim 128, 4 layers, 8x8 grid
  return m;
}

cf::ModelConfig cell_model(cf::Index dim, cf::Index layers) {
  cf::ModelConfig m;
  m.dim = dim;
  m.n_layers = layers;
  return m;
}

cf::ToyDataset standard_dataset(const cf::ModelConfig& m, std::uint64_t seed) {
  cf::DataConfig dc;
  cf::Rng rng = cf::derive_rng(seed, cf::Stream::kDataset);
  return cf::make_toy_dataset(dc, m.grid_side, m.token_dim, m.n_classes, rng);
}

cf::TrainConfig base_train(cf::Index batch, cf::Index steps, double lr) {
  cf::TrainConfig t;
  t.batch_size = batch;
  t.total_steps = steps;
  t.warmup_steps = 50;
  t.base_lr = lr;
  t.gamma = 1.0;
  t.lambda = 2.0;
  t.log_every = 25;
  return t;
}

void time_config(const char* label, const cf::ModelConfig& m, cf::Index batch, int threads) {
  const cf::ToyDataset data = standard_dataset(m, 1);
  const cf::NoiseSchedule sched = cf::make_schedule(1000, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
  cf::TrainConfig tc = base_train(batch, 10, 3e-4);
  cf::TrainState state = cf::init_train_state(m, tc);
  // one warmup step outside the clock for allocator effects
  cf::train_step(state, cf::make_batch(data, m, tc, sched, 0), m, tc, sched, threads);
  const auto t0 = Clock::now();
  const cf::Index reps = 3;
  for (cf::Index i = 1; i <= reps; ++i)
    cf::train_step(state, cf::make_batch(data, m, tc, sched, i), m, tc, sched, threads);
  const double per = seconds_since(t0) / static_cast<double>(reps);
  std::printf("%-10s dim=%lld layers=%lld batch=%lld  %.3f s/step  (600 steps = %.1f min)\n",
              label, static_cast<long long>(m.dim), static_cast<long long>(m.n_layers),
              static_cast<long long>(batch), per, per * 600.0 / 60.0);
}

int pilot_timing(int argc, char** argv) {
  const int threads = cf::thread_count_from_env();
  std::printf("threads: %d\n", threads);
  time_config("recovery", recovery_model(), arg_int(argc, argv, "--batch", 32), threads);
  time_config("cell",
              cell_model(arg_int(argc, argv, "--dim", 48), arg_int(argc, argv, "--layers", 2)),
              arg_int(argc, argv, "--batch", 32), threads);
  {
    // one sampled image at each s_eval, recovery scale
    const cf::ModelConfig m = recovery_model();
    const cf::NoiseSchedule sched = cf::make_schedule(1000, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
    cf::TrainConfig tc = base_train(8, 1, 3e-4);
    cf::TrainState state = cf::init_train_state(m, tc);
    for (cf::Index s : {1, 4, 8}) {
      cf::SampleRequest req;
      req.s_eval = s;
      req.ddpm_steps = 25;
      const auto t0 = Clock::now();
      cf::generate(m, state.params, sched, req);
      std::printf("sample s_eval=%lld ddpm=25: %.3f s/image\n", static_cast<long long>(s),
                  seconds_since(t0));
    }
  }
  return 0;
}

void print_mmd(const char* label, const cf::MmdEntry& e) {
  std::printf("  %-28s u=%+.6f v=%.6f p=%.4f null_q99=%.6f bw=%.3f\n", label, e.u_stat, e.v_stat,
              e.p_value, e.null_q99, e.bandwidth);
}

int pilot_recovery(int argc, char** argv) {
  const int threads = cf::thread_count_from_env();
  const auto steps = static_cast<cf::Index>(arg_int(argc, argv, "--steps", 600));
  const auto batch = static_cast<cf::Index>(arg_int(argc, argv, "--batch", 32));
  const double lr = arg_real(argc, argv, "--lr", 3e-4);
  const auto n_eval = static_cast<cf::Index>(arg_int(argc, argv, "--eval-samples", 100));

  const cf::ModelConfig m = recovery_model();
  const cf::ToyDataset data = standard_dataset(m, 1);
  const cf::NoiseSchedule sched = cf::make_schedule(1000, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
  cf::TrainConfig tc = base_train(batch, steps, lr);
  tc.seed = 7;

  std::printf("recovery: steps=%lld batch=%lld lr=%g\n", static_cast<long long>(steps),
              static_cast<long long>(batch), lr);
  cf::TrainState state = cf::init_train_state(m, tc);
  const auto t0 = Clock::now();
  for (cf::Index s = 0; s < steps; ++s) {
    const auto b = cf::make_batch(data, m, tc, sched, s);
    const cf::StepMetrics sm = cf::train_step(state, b, m, tc, sched, threads);
    if (s % 25 == 0 || s + 1 == steps)
      std::printf("step %5lld  loss %.5f  gnorm %.3f  lr %.2e  [%.1fs]\n",
                  static_cast<long long>(s), sm.loss, sm.grad_norm, sm.lr, seconds_since(t0));
  }
  std::printf("train time: %.1f s\n", seconds_since(t0));

  const cf::Mat held0 = cf::flatten_class(data.held_x, data.held_y, 0);
  const cf::Mat held1 = cf::flatten_class(data.held_x, data.held_y, 1);
  for (cf::Index s_eval : {1, 4}) {
    cf::SampleRequest req;
    req.s_eval = s_eval;
    req.ddpm_steps = 25;
    req.class_id = 0;
    const auto t1 = Clock::now();
    const cf::Mat samples =
        cf::sample_set(m, state.params, sched, req, n_eval, 1000 + static_cast<std::uint64_t>(s_eval), threads);
    std::printf("s_eval=%lld: sampled %lld in %.1f s\n", static_cast<long long>(s_eval),
                static_cast<long long>(n_eval), seconds_since(t1));
    char nm[64];
    std::snprintf(nm, sizeof(nm), "s=%lld matched(class0)", static_cast<long long>(s_eval));
    print_mmd(nm, cf::mmd_entry(nm, samples, held0, 400, 42));
    std::snprintf(nm, sizeof(nm), "s=%lld mismatched(class1)", static_cast<long long>(s_eval));
    print_mmd(nm, cf::mmd_entry(nm, samples, held1, 400, 43));
  }
  return 0;
}

int pilot_ablation(int argc, char** argv) {
  const int threads = cf::thread_count_from_env();
  const auto steps = static_cast<cf::Index>(arg_int(argc, argv, "--steps", 500));
  const auto batch = static_cast<cf::Index>(arg_int(argc, argv, "--batch", 32));
  const double lr = arg_real(argc, argv, "--lr", 1e-3);
  const cf::ModelConfig m = cell_model(arg_int(argc, argv, "--dim", 48),
                                       arg_int(argc, argv, "--layers", 2));
  const cf::ToyDataset data = standard_dataset(m, 1);
  const cf::NoiseSchedule sched = cf::make_schedule(1000, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
  cf::TrainConfig tc = base_train(batch, steps, lr);
  tc.seed = 7;

  cf::AblationOptions opts;
  opts.cells = {{"s=1", 1, 1.0},      {"s=2", 2, 1.0},      {"s=4", 4, 1.0},
                {"s=8", 8, 1.0},      {"gamma=1.0", 0, 1.0}, {"gamma=0.9", 0, 0.9}};
  opts.eval_samples = arg_int(argc, argv, "--eval-samples", 100);

  const fs::path dir = fs::temp_directory_path() / "cf_pilot_ablation";
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const std::vector<cf::EvalReport> reports =
      cf::run_ablation(m, tc, sched, data, opts, threads, dir);
  std::printf("ablation grid: %.1f s total -> %s\n", seconds_since(t0), dir.string().c_str());

  for (const cf::EvalReport& r : reports) {
    if (!r.ok) {
      std::printf("%s FAILED: %s\n", r.cell.c_str(), r.error.c_str());
      continue;
    }
    std::printf("%s:\n", r.cell.c_str());
    for (const cf::MmdEntry& e : r.mmd) print_mmd(e.name.c_str(), e);
    if (!r.train_loss.empty()) {
      double tail = 0.0;
      std::size_t n = std::min<std::size_t>(10, r.train_loss.size());
      for (std::size_t i = r.train_loss.size() - n; i < r.train_loss.size(); ++i)
        tail += r.train_loss[i];
      std::printf("  tail train loss (last %zu logs): %.6f\n", n, tail / static_cast<double>(n));
    }
    if (!r.per_step_loss.empty()) {
      const std::size_t q = r.per_step_loss.size() / 4;
      double first = 0.0, last = 0.0;
      for (std::size_t i = 0; i < q; ++i) {
        first += r.per_step_loss[i];
        last += r.per_step_loss[r.per_step_loss.size() - 1 - i];
      }
      std::printf("  per-step val loss: first quartile %.5f  last quartile %.5f\n",
                  first / static_cast<double>(q), last / static_cast<double>(q));
    }
  }

  // Ratios the acceptance thresholds are frozen from. MMD values are
  // clamped at the permutation null's q99 before forming ratios, so a
  // statistically-zero MMD cannot blow a denominator up.
  auto clamped = [&](const cf::EvalReport& r, std::size_t i) {
    return std::max(r.mmd[i].u_stat, r.mmd[i].null_q99);
  };
  const cf::EvalReport* fixed1 = nullptr;
  const cf::EvalReport* random = nullptr;
  const cf::EvalReport* decay = nullptr;
  for (const cf::EvalReport& r : reports) {
    if (r.cell == "s=1") fixed1 = &r;
    if (r.cell == "gamma=1.0") random = &r;
    if (r.cell == "gamma=0.9") decay = &r;
  }
  if (fixed1 && fixed1->ok && fixed1->mmd.size() == 4)
    std::printf("fixed-1 collapse ratio u(s8)/u(s1): %.2f\n",
                clamped(*fixed1, 3) / clamped(*fixed1, 0));
  if (random && random->ok && random->mmd.size() == 4) {
    double lo = clamped(*random, 0), hi = lo;
    for (std::size_t i = 1; i < 4; ++i) {
      lo = std::min(lo, clamped(*random, i));
      hi = std::max(hi, clamped(*random, i));
    }
    std::printf("random flatness ratio max/min: %.2f\n", hi / lo);
  }
  if (decay && decay->ok && random && random->ok)
    std::printf("gamma direction at s_eval=1: 0.9 -> %.6f  vs  1.0 -> %.6f\n",
                decay->mmd[0].u_stat, random->mmd[0].u_stat);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "timing";
  try {
    if (mode == "timing") return pilot_timing(argc, argv);
    if (mode == "recovery") return pilot_recovery(argc, argv);
    if (mode == "ablation") return pilot_ablation(argc, argv);
    std::fprintf(stderr, "usage: cf_pilot [timing|recovery|ablation] [--key value ...]\n");
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pilot failed: %s\n", e.what());
    return 2;
  }
}
