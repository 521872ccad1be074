#include "cf/trainer.hpp"

#include <cmath>
#include <string>

#include "cf/error.hpp"
#include "cf/threading.hpp"

namespace cf {

namespace {
// Gradient accumulation grid: fixed so that the batch-to-chunk split, and
// with it every floating-point reduction order, is independent of the
// worker count.
constexpr int kGradChunks = 16;
}  // namespace

void TrainConfig::validate(Index total_tokens) const {
  if (batch_size < 1) throw ParameterError("train.batch_size: must be >= 1");
  if (total_steps < 1) throw ParameterError("train.total_steps: must be >= 1");
  if (warmup_steps < 0) throw ParameterError("train.warmup_steps: must be >= 0");
  if (!(base_lr > 0.0)) throw ParameterError("train.base_lr: must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0))
    throw ParameterError("train.beta1: must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ParameterError("train.beta2: must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ParameterError("train.weight_decay: must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ParameterError("train.gamma: must lie in [0, 1], got " + std::to_string(gamma));
  if (fixed_num_steps < 0 || fixed_num_steps > total_tokens)
    throw ParameterError("train.fixed_s: must lie in [0, tokens]");
  if (!(lambda >= 1.0)) throw ParameterError("train.lambda: must be >= 1");
  if (t_sampling == TimeSampling::kMultiT && multi_t_k < 1)
    throw ParameterError("train.multi_t_k: must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0))
    throw ParameterError("train.ema_decay: must lie in [0, 1)");
  if (!(class_drop >= 0.0 && class_drop < 1.0))
    throw ParameterError("train.class_drop: must lie in [0, 1)");
  if (log_every < 1) throw ParameterError("train.log_every: must be >= 1");
  if (checkpoint_every < 0) throw ParameterError("train.checkpoint_every: must be >= 0");
}

std::vector<Index> sample_t(TimeSampling mode, Index num_steps, Index multi_t_k,
                            Index schedule_steps, Rng& rng) {
  if (num_steps < 1) throw ParameterError("num_steps: must be >= 1");
  const auto T = static_cast<std::uint64_t>(schedule_steps);
  auto draw = [&] { return 1 + static_cast<Index>(rng.below(T)); };
  std::vector<Index> ts;
  switch (mode) {
    case TimeSampling::kShared: {
      const Index t = draw();
      ts.assign(static_cast<std::size_t>(num_steps), t);
      break;
    }
    case TimeSampling::kPerGroupRandom:
      ts.reserve(static_cast<std::size_t>(num_steps));
      for (Index s = 0; s < num_steps; ++s) ts.push_back(draw());
      break;
    case TimeSampling::kMultiT:
      ts.reserve(static_cast<std::size_t>(num_steps * multi_t_k));
      for (Index s = 0; s < num_steps; ++s)
        for (Index j = 0; j < multi_t_k; ++j) ts.push_back(draw());
      break;
  }
  return ts;
}

TrainState init_train_state(const ModelConfig& model_cfg, const TrainConfig& train_cfg) {
  model_cfg.validate();
  TrainState st;
  Rng rng = derive_rng(train_cfg.seed, Stream::kParamInit);
  st.params = init_params(model_cfg, rng);
  st.ema = st.params;
  st.m = zeros_like(st.params);
  st.v = zeros_like(st.params);
  st.step = 0;
  return st;
}

std::vector<TrainItem> make_batch(const ToyDataset& data, const ModelConfig& model_cfg,
                                  const TrainConfig& train_cfg, const NoiseSchedule& sched,
                                  Index step) {
  train_cfg.validate(model_cfg.tokens());
  if (data.train_x.empty()) throw ParameterError("dataset: no training examples");
  const Index L = model_cfg.tokens();
  const auto ustep = static_cast<std::uint64_t>(step);
  std::vector<TrainItem> batch;
  batch.reserve(static_cast<std::size_t>(train_cfg.batch_size));

  for (Index i = 0; i < train_cfg.batch_size; ++i) {
    const auto uitem = static_cast<std::uint64_t>(i);
    TrainItem item;

    Rng data_rng = derive_rng(train_cfg.seed, Stream::kDataIndex, ustep, uitem);
    const auto idx =
        static_cast<std::size_t>(data_rng.below(static_cast<std::uint64_t>(data.train_x.size())));
    item.x0 = data.train_x[idx];
    item.class_id = data.train_y[idx];

    if (train_cfg.class_drop > 0.0) {
      Rng drop_rng = derive_rng(train_cfg.seed, Stream::kClassDrop, ustep, uitem);
      if (drop_rng.uniform() < train_cfg.class_drop) item.class_id = model_cfg.null_class();
    }

    Index S = train_cfg.fixed_num_steps;
    if (S == 0) {
      Rng s_rng = derive_rng(train_cfg.seed, Stream::kPlanSteps, ustep, uitem);
      S = sample_num_steps(L, train_cfg.gamma, s_rng);
    }
    Rng plan_rng = derive_rng(train_cfg.seed, Stream::kPlanCuts, ustep, uitem);
    item.plan = sample_plan(L, S, train_cfg.order, plan_rng);

    item.repeat = train_cfg.t_sampling == TimeSampling::kMultiT ? train_cfg.multi_t_k : 1;
    Rng t_rng = derive_rng(train_cfg.seed, Stream::kTimeDraw, ustep, uitem);
    item.t_per_group =
        sample_t(train_cfg.t_sampling, S, train_cfg.multi_t_k, sched.steps(), t_rng);

    Rng noise_rng = derive_rng(train_cfg.seed, Stream::kNoiseDraw, ustep, uitem);
    item.eps = Mat(item.repeat * L, model_cfg.token_dim);
    for (Index r = 0; r < item.eps.rows(); ++r)
      for (Index c = 0; c < item.eps.cols(); ++c) item.eps(r, c) = noise_rng.normal();

    batch.push_back(std::move(item));
  }
  return batch;
}

AssembledSequence assemble_sequence(const TrainItem& item, const ModelConfig& model_cfg,
                                    const NoiseSchedule& sched, double lambda) {
  item.plan.validate();
  const Index L = item.plan.total_tokens;
  const Index S = item.plan.num_steps;
  const Index repeat = item.repeat;
  if (L != model_cfg.tokens()) throw ShapeError("assemble_sequence: plan/model token count");
  if (item.x0.rows() != L || item.x0.cols() != model_cfg.token_dim)
    throw ShapeError("assemble_sequence: x0 shape");
  if (static_cast<Index>(item.t_per_group.size()) != S * repeat)
    throw ShapeError("assemble_sequence: t_per_group length");
  if (item.eps.rows() != repeat * L || item.eps.cols() != model_cfg.token_dim)
    throw ShapeError("assemble_sequence: eps shape");

  AssembledSequence out;
  const ARWeighting weighting = ar_weights(S, lambda);

  // Clean context: every group except the last, teacher-forced truth.
  const Index ctx_len = item.plan.cuts[S - 1];
  out.clean_ctx = Mat(ctx_len, model_cfg.token_dim);
  out.ctx_positions.reserve(static_cast<std::size_t>(ctx_len));
  for (Index slot = 0; slot < ctx_len; ++slot) {
    const Index pos = item.plan.perm[static_cast<std::size_t>(slot)];
    out.clean_ctx.map().row(slot) = item.x0.map().row(pos);
    out.ctx_positions.push_back(pos);
  }

  // Noisy rows, s-major over (group, copy, slot).
  const Index n_noisy = repeat * L;
  Mat x0_rows(n_noisy, model_cfg.token_dim);
  out.noisy_positions.reserve(static_cast<std::size_t>(n_noisy));
  out.t_per_noisy.reserve(static_cast<std::size_t>(n_noisy));
  out.row_weights.reserve(static_cast<std::size_t>(n_noisy));
  Index row = 0;
  for (Index s = 0; s < S; ++s)
    for (Index j = 0; j < repeat; ++j) {
      const Index t = item.t_per_group[static_cast<std::size_t>(s * repeat + j)];
      for (Index slot = item.plan.cuts[s]; slot < item.plan.cuts[s + 1]; ++slot, ++row) {
        const Index pos = item.plan.perm[static_cast<std::size_t>(slot)];
        x0_rows.map().row(row) = item.x0.map().row(pos);
        out.noisy_positions.push_back(pos);
        out.t_per_noisy.push_back(t);
        out.row_weights.push_back(weighting.weights[static_cast<std::size_t>(s)]);
      }
    }
  out.noisy = add_noise(x0_rows, out.t_per_noisy, item.eps, sched);
  out.target_eps = item.eps;

  out.mask = prepend_condition(build_mask_repeated(item.plan.group_sizes(), repeat),
                               model_cfg.n_cond());
  return out;
}

namespace {

struct TrainScratch {
  std::vector<Graph> graphs{kGradChunks};
  std::vector<ModelParams> chunk_grads;
  std::vector<double> chunk_loss;
};

double step_lr(const TrainConfig& cfg, Index opt_step) {
  // opt_step is 1-based; halfway through warmup gives exactly base_lr/2.
  if (cfg.warmup_steps > 0 && opt_step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(opt_step) / static_cast<double>(cfg.warmup_steps);
  return cfg.base_lr;
}

StepMetrics train_step_impl(TrainState& state, const std::vector<TrainItem>& batch,
                            const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            const NoiseSchedule& sched, int n_threads,
                            TrainScratch& scratch) {
  if (batch.empty()) throw ParameterError("train_step: empty batch");
  Index total_noisy = 0;
  for (const TrainItem& it : batch) total_noisy += it.repeat * it.plan.total_tokens;
  const double inv_norm = 1.0 / static_cast<double>(total_noisy);

  if (scratch.chunk_grads.empty()) {
    scratch.chunk_grads.reserve(kGradChunks);
    for (int c = 0; c < kGradChunks; ++c) scratch.chunk_grads.push_back(zeros_like(state.params));
    scratch.chunk_loss.assign(kGradChunks, 0.0);
  }

  const auto B = static_cast<int>(batch.size());
  parallel_chunks(n_threads, kGradChunks, [&](int c) {
    scratch.chunk_loss[static_cast<std::size_t>(c)] = 0.0;
    scratch.chunk_grads[static_cast<std::size_t>(c)].for_each(
        [](const std::string&, Mat& m) { m.fill(0.0); });
    const int lo = static_cast<int>(static_cast<long long>(B) * c / kGradChunks);
    const int hi = static_cast<int>(static_cast<long long>(B) * (c + 1) / kGradChunks);
    Graph& g = scratch.graphs[static_cast<std::size_t>(c)];
    for (int i = lo; i < hi; ++i) {
      const AssembledSequence seq =
          assemble_sequence(batch[static_cast<std::size_t>(i)], model_cfg, sched,
                            train_cfg.lambda);
      g.clear();
      ForwardInput in;
      in.clean_ctx = seq.clean_ctx.rows() > 0 ? &seq.clean_ctx : nullptr;
      in.ctx_positions = seq.ctx_positions;
      in.noisy = &seq.noisy;
      in.noisy_positions = seq.noisy_positions;
      in.t_per_noisy = seq.t_per_noisy;
      in.class_id = batch[static_cast<std::size_t>(i)].class_id;
      in.mask = &seq.mask;
      const Graph::Id eps_hat =
          build_forward(g, model_cfg, state.params,
                        &scratch.chunk_grads[static_cast<std::size_t>(c)], in);
      const Graph::Id loss = g.weighted_mse(eps_hat, seq.target_eps, seq.row_weights, inv_norm);
      scratch.chunk_loss[static_cast<std::size_t>(c)] += g.scalar(loss);
      g.backward(loss);
    }
  });

  // Reduce chunks in a fixed order: chunk 0 grads are the accumulator.
  double loss = 0.0;
  for (int c = 0; c < kGradChunks; ++c) loss += scratch.chunk_loss[static_cast<std::size_t>(c)];
  ModelParams& grads = scratch.chunk_grads[0];
  {
    std::vector<Mat*> acc;
    grads.for_each([&acc](const std::string&, Mat& m) { acc.push_back(&m); });
    for (int c = 1; c < kGradChunks; ++c) {
      std::size_t k = 0;
      scratch.chunk_grads[static_cast<std::size_t>(c)].for_each(
          [&](const std::string&, Mat& m) { acc[k++]->map() += m.map(); });
    }
  }

  if (!std::isfinite(loss))
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (seed " +
                       std::to_string(train_cfg.seed) + ")");

  double grad_sq = 0.0;
  grads.for_each([&grad_sq](const std::string&, const Mat& m) {
    grad_sq += m.map().squaredNorm();
  });

  // AdamW with bias correction; weight decay is decoupled.
  const Index opt_step = state.step + 1;
  const double lr = step_lr(train_cfg, opt_step);
  const double b1 = train_cfg.adam_beta1, b2 = train_cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt_step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt_step));
  {
    std::vector<Mat*> ps, ms, vs, gs, es;
    state.params.for_each([&](const std::string&, Mat& m) { ps.push_back(&m); });
    state.m.for_each([&](const std::string&, Mat& m) { ms.push_back(&m); });
    state.v.for_each([&](const std::string&, Mat& m) { vs.push_back(&m); });
    grads.for_each([&](const std::string&, Mat& m) { gs.push_back(&m); });
    state.ema.for_each([&](const std::string&, Mat& m) { es.push_back(&m); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      Mat& p = *ps[k];
      Mat& m = *ms[k];
      Mat& v = *vs[k];
      const Mat& grad = *gs[k];
      for (Index j = 0; j < p.size(); ++j) {
        const double gj = grad.data()[j];
        m.data()[j] = b1 * m.data()[j] + (1.0 - b1) * gj;
        v.data()[j] = b2 * v.data()[j] + (1.0 - b2) * gj * gj;
        const double mhat = m.data()[j] / bc1;
        const double vhat = v.data()[j] / bc2;
        p.data()[j] -= lr * (mhat / (std::sqrt(vhat) + train_cfg.adam_eps) +
                             train_cfg.weight_decay * p.data()[j]);
      }
      Mat& e = *es[k];
      for (Index j = 0; j < p.size(); ++j)
        e.data()[j] = train_cfg.ema_decay * e.data()[j] +
                      (1.0 - train_cfg.ema_decay) * p.data()[j];
    }
  }
  state.step = opt_step;

  StepMetrics metrics;
  metrics.loss = loss;
  metrics.grad_norm = std::sqrt(grad_sq);
  metrics.lr = lr;
  return metrics;
}

}  // namespace

StepMetrics train_step(TrainState& state, const std::vector<TrainItem>& batch,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const NoiseSchedule& sched, int n_threads) {
  TrainScratch scratch;
  return train_step_impl(state, batch, model_cfg, train_cfg, sched, n_threads, scratch);
}

StepMetrics train_loop(TrainState& state, const ToyDataset& data,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const NoiseSchedule& sched, int n_threads,
                       const std::optional<std::filesystem::path>& run_dir,
                       MetricsLog* log) {
  train_cfg.validate(model_cfg.tokens());
  TrainScratch scratch;
  StepMetrics metrics;
  while (state.step < train_cfg.total_steps) {
    const Index step = state.step;
    const auto batch = make_batch(data, model_cfg, train_cfg, sched, step);
    metrics = train_step_impl(state, batch, model_cfg, train_cfg, sched, n_threads, scratch);
    if (log && (state.step % train_cfg.log_every == 0 || state.step == train_cfg.total_steps)) {
      log->append(state.step, "loss", metrics.loss);
      log->append(state.step, "grad_norm", metrics.grad_norm);
      log->append(state.step, "lr", metrics.lr);
      log->flush();
    }
    if (run_dir && train_cfg.checkpoint_every > 0 &&
        state.step % train_cfg.checkpoint_every == 0 &&
        state.step < train_cfg.total_steps) {
      save_checkpoint(*run_dir / ("checkpoint_" + std::to_string(state.step) + ".cfkt"),
                      model_cfg, state.params, &state.ema);
    }
  }
  if (run_dir)
    save_checkpoint(*run_dir / "checkpoint.cfkt", model_cfg, state.params, &state.ema);
  return metrics;
}

}  // namespace cf
