// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ddistill/data.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/error.hpp"
#include "ddistill/params.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/schedule.hpp"

namespace ddistill {

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 0.03;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  int grad_accum = 1;
  long iterations = 1000;
  long fid_every = 500;
  long checkpoint_every = 0;  // 0 disables periodic checkpoints
  long log_every = 50;
  std::uint64_t seed = 0;
  bool ema = false;
  double ema_decay = 0.9999;
  double label_dropout = 0.0;  // probability of training a row as unconditional

  void validate() const {
    detail::require(lr > 0 && weight_decay >= 0 && adam_eps > 0, "train.lr/adam_eps must be positive, weight_decay >= 0");
    detail::require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "train.beta1/beta2 must lie in (0,1)");
    detail::require(batch_size >= 1 && grad_accum >= 1, "train.batch_size and train.grad_accum must be >= 1");
    detail::require(iterations >= 0 && fid_every >= 1 && checkpoint_every >= 0 && log_every >= 1,
                    "train.iterations >= 0, train.fid_every >= 1, train.log_every >= 1 required");
    detail::require(ema_decay > 0 && ema_decay < 1, "train.ema_decay must lie in (0,1)");
    detail::require(label_dropout >= 0 && label_dropout <= 1, "train.label_dropout must lie in [0,1]");
  }
};

template <class T>
struct OptimizerState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::uint64_t step = 0;

  static OptimizerState like(const ParamStore<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

/// One decoupled-weight-decay Adam update. Non-finite gradients abort before
/// any state changes.
template <class T>
void adamw_step(OptimizerState<T>& state, ParamStore<T>& params, const ParamStore<T>& grads, const TrainConfig& cfg) {
  if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v)) {
    throw ConfigError("adamw_step: parameter, gradient and moment layouts differ");
  }
  for (const auto& g : grads.entries()) {
    for (std::size_t i = 0; i < g.value.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g.value[i]))) {
        throw NumericError("non-finite gradient in tensor '" + g.name + "' at element " + std::to_string(i));
      }
    }
  }
  state.step++;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.lr), decay = static_cast<T>(cfg.lr * cfg.weight_decay);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t k = 0; k < params.count(); ++k) {
    auto& p = params.entries()[k].value;
    const auto& g = grads.entries()[k].value;
    auto& m = state.m.entries()[k].value;
    auto& v = state.v.entries()[k].value;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] * inv_bc1, vhat = v[i] * inv_bc2;
      p[i] = p[i] - lr * (mhat / (std::sqrt(vhat) + eps)) - decay * p[i];
    }
  }
}

/// Epsilon-prediction objective: mean over the batch of ||eps - eps_hat||².
/// Draws t uniformly in [1, T] and eps ~ N(0, I) per item from `rng`.
/// Accumulates scale·dL/dparams into `grads` when non-null.
template <class T>
double diffusion_loss(const Denoiser<T>& model, const LabeledImageBatch& batch, const NoiseSchedule& sched, Rng& rng,
                      std::type_identity_t<ParamStore<T>>* grads, double scale = 1.0,
                      double label_dropout = 0.0) {
  if (batch.empty()) throw ConfigError("diffusion_loss: empty batch");
  const auto& cfg = model.config();
  if (batch.image_numel() != static_cast<std::size_t>(cfg.image_numel())) {
    throw ConfigError("diffusion_loss: batch geometry does not match the model");
  }
  const int b = static_cast<int>(batch.size());
  const std::size_t numel = batch.image_numel();
  std::vector<T> xt(b * numel), eps(b * numel), eps_hat(b * numel);
  std::vector<double> steps(b);
  std::vector<int> labels(batch.labels);
  for (int i = 0; i < b; ++i) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
    steps[i] = t;
    if (label_dropout > 0 && rng.uniform() < label_dropout) labels[i] = kUnconditional;
    const T sa = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
    const T sn = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
    const auto img = batch.image(i);
    for (std::size_t j = 0; j < numel; ++j) {
      const T e = static_cast<T>(rng.normal());
      eps[i * numel + j] = e;
      xt[i * numel + j] = sa * static_cast<T>(img[j]) + sn * e;
    }
  }
  DenoiserCache<T> cache;
  model.predict(xt, steps, labels, eps_hat, grads ? &cache : nullptr);
  double loss = 0.0;
  std::vector<T> d(b * numel);
  for (std::size_t k = 0; k < d.size(); ++k) {
    const double diff = static_cast<double>(eps_hat[k]) - static_cast<double>(eps[k]);
    loss += diff * diff;
    d[k] = static_cast<T>(2.0 * diff * scale / b);
  }
  loss /= b;
  if (grads) model.backward(cache, d, *grads);
  return loss;
}

template <class T>
struct TrainState {
  Denoiser<T> model;
  OptimizerState<T> opt;
  std::optional<ParamStore<T>> ema;
  long iteration = 0;
  Rng rng;

  static TrainState fresh(const DenoiserConfig& cfg, const TrainConfig& tc) {
    Denoiser<T> model(cfg);
    Rng init = seed_substream(tc.seed, "denoiser.init", 0);
    model.initialize(init);
    auto opt = OptimizerState<T>::like(model.params());
    std::optional<ParamStore<T>> ema;
    if (tc.ema) ema = model.params();
    return {std::move(model), std::move(opt), std::move(ema), 0, seed_substream(tc.seed, "train", 0)};
  }

  /// Weights used for sampling: the moving average when enabled.
  Denoiser<T> sampling_model() const {
    if (!ema) return model;
    return Denoiser<T>(model.config(), *ema);
  }
};

struct MetricRow {
  long iteration = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double fid = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

template <class T>
struct TrainHooks {
  /// Called at iteration 0, every fid_every iterations and after the last one.
  std::function<double(long iteration, const Denoiser<T>& model)> fid;
  /// Called after every checkpoint_every-th optimizer step.
  std::function<void(const TrainState<T>& state)> checkpoint;
  /// Called for every logged row.
  std::function<void(const MetricRow& row)> log;
};

/// Runs iterations [state.iteration, cfg.iterations). Batches are drawn with
/// replacement from `data` using the state RNG, so a restored state resumes
/// the exact same trajectory.
template <class T>
std::vector<MetricRow> train(TrainState<T>& state, const LabeledImageBatch& data, const TrainConfig& cfg,
                             const NoiseSchedule& sched, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training data is empty");
  data.validate_labels();
  if (sched.steps() > state.model.config().max_steps) {
    throw ConfigError("schedule has more steps than the model time embedding covers");
  }
  std::vector<MetricRow> log;
  if (state.iteration >= cfg.iterations) return log;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  auto emit = [&](MetricRow row) {
    row.wall_seconds = elapsed();
    log.push_back(row);
    if (hooks.log) hooks.log(row);
  };
  auto eval_fid = [&](long it) { return hooks.fid(it, state.sampling_model()); };

  ParamStore<T> grads = state.model.params().zeros_like();
  double window = 0.0;
  long window_count = 0;
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  for (long it = state.iteration; it < cfg.iterations; ++it) {
    MetricRow row;
    row.iteration = it;
    bool emit_row = false;
    if (hooks.fid && it % cfg.fid_every == 0) {
      row.fid = eval_fid(it);
      emit_row = true;
    }
    grads.zero();
    double loss = 0.0;
    for (int a = 0; a < cfg.grad_accum; ++a) {
      for (auto& i : idx) i = static_cast<std::size_t>(state.rng.below(data.size()));
      const LabeledImageBatch batch = data.subset(idx);
      loss += diffusion_loss(state.model, batch, sched, state.rng, &grads, 1.0 / cfg.grad_accum, cfg.label_dropout) /
              cfg.grad_accum;
    }
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(it));
    }
    adamw_step(state.opt, state.model.params(), grads, cfg);
    if (state.ema) {
      const T decay = static_cast<T>(cfg.ema_decay);
      for (std::size_t k = 0; k < state.ema->count(); ++k) {
        auto& e = state.ema->entries()[k].value;
        const auto& p = state.model.params().entries()[k].value;
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = decay * e[i] + (T(1) - decay) * p[i];
      }
    }
    state.iteration = it + 1;
    window += loss;
    window_count++;
    if (it % cfg.log_every == 0) {
      row.loss = window / window_count;
      window = 0.0;
      window_count = 0;
      emit_row = true;
    }
    if (emit_row) emit(row);
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0) {
      hooks.checkpoint(state);
    }
  }
  if (hooks.fid) {
    MetricRow row;
    row.iteration = state.iteration;
    row.fid = eval_fid(state.iteration);
    emit(row);
  }
  return log;
}

/// Loads every checkpoint tensor whose name does not match `skip` (an
/// ECMAScript regex; empty matches nothing). Skipped tensors keep their
/// current values.
template <class T, class U>
void warm_start(ParamStore<T>& params, const ParamStore<U>& checkpoint, const std::string& skip) {
  const std::optional<std::regex> filter = skip.empty() ? std::nullopt : std::optional<std::regex>(std::regex(skip));
  for (auto& e : params.entries()) {
    if (filter && std::regex_search(e.name, *filter)) continue;
    if (!checkpoint.contains(e.name)) throw DataError("warm start: checkpoint lacks tensor '" + e.name + "'");
    const auto& src = checkpoint.get(e.name);
    if (src.shape() != e.value.shape()) {
      throw DataError("warm start: tensor '" + e.name + "' has shape " + shape_string(src.shape()) +
                      " in checkpoint, expected " + shape_string(e.value.shape()));
    }
    for (std::size_t i = 0; i < src.size(); ++i) e.value[i] = static_cast<T>(src[i]);
  }
}

}  // namespace ddistill
