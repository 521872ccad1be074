// Microbenchmarks for the hot paths: mask construction, denoiser forward,
// one optimizer step, sampling, and the MMD permutation test.

#include <benchmark/benchmark.h>

#include <vector>

#include "cf/causal_mask.hpp"
#include "cf/dataset.hpp"
#include "cf/factorization.hpp"
#include "cf/harness.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "cf/sampler.hpp"
#include "cf/schedule.hpp"
#include "cf/trainer.hpp"

namespace {

cf::ModelConfig small_model() {
  cf::ModelConfig m;
  m.dim = 64;
  m.n_layers = 2;
  m.n_heads = 4;
  return m;  // 8x8 grid of 4-channel patch tokens
}

void BM_BuildMaskRepeated(benchmark::State& state) {
  const auto L = static_cast<cf::Index>(state.range(0));
  cf::Rng rng(11);
  const cf::Index S = 1 + static_cast<cf::Index>(rng.below(static_cast<std::uint64_t>(L)));
  const cf::FactorizationPlan plan = cf::sample_plan(L, S, {}, rng);
  const std::vector<cf::Index> sizes = plan.group_sizes();
  for (auto _ : state) {
    cf::AttentionMask mask = cf::prepend_condition(cf::build_mask_repeated(sizes, 2), 4);
    benchmark::DoNotOptimize(mask);
  }
  state.SetItemsProcessed(state.iterations());
}

void BM_Forward(benchmark::State& state) {
  const cf::ModelConfig m = small_model();
  cf::Rng rng = cf::derive_rng(1, cf::Stream::kParamInit);
  const cf::ModelParams params = cf::init_params(m, rng);
  const cf::Index L = m.tokens();

  cf::Mat noisy(L, m.token_dim);
  for (cf::Index r = 0; r < L; ++r)
    for (cf::Index c = 0; c < m.token_dim; ++c) noisy(r, c) = rng.normal();
  cf::ForwardInput in;
  in.noisy = &noisy;
  for (cf::Index i = 0; i < L; ++i) in.noisy_positions.push_back(i);
  in.t_per_noisy.assign(static_cast<std::size_t>(L), 50);
  const cf::AttentionMask mask = cf::prepend_condition(cf::build_mask({L}), m.n_cond());
  in.mask = &mask;

  for (auto _ : state) {
    cf::Mat out = cf::forward(m, params, in);
    benchmark::DoNotOptimize(out);
  }
  state.SetItemsProcessed(state.iterations() * L);
}

void BM_TrainStep(benchmark::State& state) {
  const cf::ModelConfig m = small_model();
  cf::Rng drng = cf::derive_rng(1, cf::Stream::kDataset);
  const cf::ToyDataset data = cf::make_toy_dataset({}, m.grid_side, m.token_dim, m.n_classes, drng);
  const cf::NoiseSchedule sched = cf::make_schedule(100, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
  cf::TrainConfig tc;
  tc.batch_size = static_cast<cf::Index>(state.range(0));
  tc.total_steps = 1 << 20;
  tc.gamma = 1.0;
  cf::TrainState st = cf::init_train_state(m, tc);
  cf::Index step = 0;
  for (auto _ : state) {
    const auto batch = cf::make_batch(data, m, tc, sched, step++);
    benchmark::DoNotOptimize(cf::train_step(st, batch, m, tc, sched, 1));
  }
  state.SetItemsProcessed(state.iterations() * tc.batch_size);
}

void BM_Generate(benchmark::State& state) {
  cf::ModelConfig m;
  m.dim = 32;
  m.n_layers = 1;
  m.n_heads = 2;
  m.patch_size = 1;
  m.grid_side = 4;
  m.token_dim = 2;
  cf::Rng rng = cf::derive_rng(2, cf::Stream::kParamInit);
  const cf::ModelParams params = cf::init_params(m, rng);
  const cf::NoiseSchedule sched = cf::make_schedule(50, cf::ScheduleKind::kLinear, 1e-4, 2e-2);
  cf::SampleRequest req;
  req.s_eval = 4;
  req.ddpm_steps = 10;
  req.use_cache = state.range(0) != 0;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    req.seed = seed++;
    benchmark::DoNotOptimize(cf::generate(m, params, sched, req));
  }
  state.SetItemsProcessed(state.iterations());
}

void BM_MmdPermutationTest(benchmark::State& state) {
  cf::Rng rng(5);
  cf::Mat a(100, 64), b(100, 64);
  for (cf::Index r = 0; r < 100; ++r)
    for (cf::Index c = 0; c < 64; ++c) {
      a(r, c) = rng.normal();
      b(r, c) = rng.normal() + 0.2;
    }
  for (auto _ : state) {
    benchmark::DoNotOptimize(cf::mmd_entry("bench", a, b, state.range(0), 9));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_BuildMaskRepeated)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Generate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MmdPermutationTest)->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
