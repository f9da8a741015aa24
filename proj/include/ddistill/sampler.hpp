// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ddistill/data.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/error.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/schedule.hpp"

namespace ddistill {

enum class SampleMethod { ancestral, fast_ode };

/// beta and beta_tilde add Gaussian noise after the reverse mean; zero
/// selects the deterministic (eta = 0) path over every integer step.
enum class VarianceMode { beta, beta_tilde, zero };

inline SampleMethod parse_sample_method(const std::string& s) {
  if (s == "ancestral") return SampleMethod::ancestral;
  if (s == "fast-ode") return SampleMethod::fast_ode;
  throw ConfigError("unknown sampling method '" + s + "' (expected ancestral|fast-ode)");
}

inline std::string to_string(SampleMethod m) { return m == SampleMethod::ancestral ? "ancestral" : "fast-ode"; }

inline VarianceMode parse_variance_mode(const std::string& s) {
  if (s == "beta") return VarianceMode::beta;
  if (s == "beta-tilde") return VarianceMode::beta_tilde;
  if (s == "zero") return VarianceMode::zero;
  throw ConfigError("unknown variance mode '" + s + "' (expected beta|beta-tilde|zero)");
}

inline std::string to_string(VarianceMode v) {
  switch (v) {
    case VarianceMode::beta: return "beta";
    case VarianceMode::beta_tilde: return "beta-tilde";
    default: return "zero";
  }
}

struct SamplerConfig {
  SampleMethod method = SampleMethod::fast_ode;
  int steps = 50;
  int order = 2;
  VarianceMode variance = VarianceMode::beta_tilde;
  double guidance = 1.0;
  std::uint64_t seed = 0;
  bool clip = true;
  int batch = 16;
  int workers = 1;

  void validate(const NoiseSchedule& sched) const {
    detail::require(steps >= 1, "sample.steps must be >= 1");
    if (method == SampleMethod::fast_ode) {
      detail::require(steps <= sched.steps(), "sample.steps (" + std::to_string(steps) +
                                                  ") exceeds schedule steps (" + std::to_string(sched.steps()) + ")");
      detail::require(order == 1 || order == 2, "sample.order must be 1 or 2");
    }
    detail::require(guidance >= 0, "sample.guidance must be >= 0");
    detail::require(batch >= 1 && workers >= 1, "sample.batch and workers must be >= 1");
  }

  /// Canonical text for provenance; excludes batching and worker count,
  /// which never change results.
  std::string describe() const {
    std::ostringstream os;
    os << "method=" << to_string(method) << " steps=" << steps << " order=" << order
       << " variance=" << to_string(variance) << " guidance=" << guidance << " seed=" << seed
       << " clip=" << (clip ? 1 : 0);
    return os.str();
  }
};

/// Noise predictor over a batch: (x, t per item, y per item) → eps.
template <class T>
using NoisePredictor =
    std::function<void(std::span<const T> x, std::span<const double> t, std::span<const int> y, std::span<T> eps)>;

/// Wraps a denoiser, applying classifier-free guidance when the scale is not 1.
/// At scale 1 the unconditional branch is never evaluated.
template <class T>
NoisePredictor<T> make_predictor(const Denoiser<T>& model, double guidance = 1.0) {
  return [&model, guidance](std::span<const T> x, std::span<const double> t, std::span<const int> y,
                            std::span<T> eps) {
    model.predict(x, t, y, eps);
    if (guidance == 1.0) return;
    std::vector<int> uncond(y.size(), kUnconditional);
    std::vector<T> eu(eps.size());
    model.predict(x, t, uncond, eu);
    const T w = static_cast<T>(guidance);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = eu[i] + w * (eps[i] - eu[i]);
  };
}

namespace detail {

/// Solver grid: steps points uniform in log-SNR from t = T to t = 1, then t = 0.
inline std::vector<double> log_snr_grid(const NoiseSchedule& sched, int steps) {
  std::vector<double> grid;
  const double t_max = sched.steps();
  if (steps == 1) return {t_max, 0.0};
  const double lo = sched.lambda(sched.steps()), hi = sched.lambda(1);
  for (int i = 0; i < steps; ++i) {
    if (i == 0) {
      grid.push_back(t_max);
    } else if (i == steps - 1) {
      grid.push_back(1.0);
    } else {
      grid.push_back(sched.time_for_lambda(lo + (hi - lo) * i / (steps - 1)));
    }
  }
  grid.push_back(0.0);
  return grid;
}

template <class T>
void clip_values(std::span<T> x, bool clip) {
  if (!clip) return;
  for (auto& v : x) v = std::clamp(v, T(-1), T(1));
}

}  // namespace detail

/// Generates one image per label. `rngs[i]` is item i's private stream and
/// supplies x_T and every ancestral noise draw, so rows never interact.
template <class T>
std::vector<T> sample_items(const NoisePredictor<T>& eps_fn, const NoiseSchedule& sched, std::span<const int> labels,
                            std::span<Rng> rngs, std::size_t numel, const SamplerConfig& cfg) {
  cfg.validate(sched);
  const std::size_t b = labels.size();
  if (rngs.size() != b) throw ConfigError("sampler: one RNG stream per item required");
  std::vector<T> x(b * numel), eps(b * numel);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < numel; ++j) x[i * numel + j] = static_cast<T>(rngs[i].normal());
  if (b == 0) return x;
  std::vector<double> tvec(b);
  auto predict_at = [&](double t, std::span<const T> xin, std::span<T> out) {
    std::fill(tvec.begin(), tvec.end(), t);
    eps_fn(xin, tvec, labels, out);
  };

  if (cfg.method == SampleMethod::ancestral) {
    for (int t = sched.steps(); t >= 1; --t) {
      predict_at(t, x, eps);
      if (cfg.variance == VarianceMode::zero) {
        const double a_t = std::sqrt(sched.alpha_bar(t)), s_t = std::sqrt(1.0 - sched.alpha_bar(t));
        const double a_p = std::sqrt(sched.alpha_bar(t - 1)), s_p = std::sqrt(1.0 - sched.alpha_bar(t - 1));
        const T cx = static_cast<T>(a_p / a_t), ce = static_cast<T>(a_p * s_t / a_t - s_p);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = cx * x[k] - ce * eps[k];
        continue;
      }
      x = posterior_mean<T>(x, eps, t, sched);
      if (t > 1) {
        const double var = cfg.variance == VarianceMode::beta
                               ? sched.beta(t)
                               : (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t);
        const T sigma = static_cast<T>(std::sqrt(var));
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < numel; ++j) x[i * numel + j] += sigma * static_cast<T>(rngs[i].normal());
      }
    }
    detail::clip_values<T>(x, cfg.clip);
    return x;
  }

  // Exponential-integrator steps in log-SNR time:
  //   x_t = (a_t / a_s) x_s - (a_t s_s / a_s - s_t) eps(x_s, s)
  // which equals -s_t (e^h - 1) eps with h = lambda_t - lambda_s and stays
  // finite for the final step to t = 0 where s_t = 0.
  auto a_of = [&](double t) { return std::exp(0.5 * sched.log_alpha_bar_at(t)); };
  auto s_of = [&](double t) { return std::sqrt(-std::expm1(sched.log_alpha_bar_at(t))); };
  auto first_order = [&](double s, double t, std::span<const T> e, std::span<const T> xin, std::span<T> xout) {
    const double as = a_of(s), ss = s_of(s), at = a_of(t), st = s_of(t);
    const T cx = static_cast<T>(at / as), ce = static_cast<T>(at * ss / as - st);
    for (std::size_t k = 0; k < xin.size(); ++k) xout[k] = cx * xin[k] - ce * e[k];
  };
  const auto grid = detail::log_snr_grid(sched, cfg.steps);
  std::vector<T> u(x.size());
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const double s = grid[i], t = grid[i + 1];
    predict_at(s, x, eps);
    if (cfg.order == 1 || t == 0.0) {
      first_order(s, t, eps, x, x);
      continue;
    }
    // midpoint in log-SNR: predict at u, then take the full step with eps(u)
    const double mid = sched.time_for_lambda(0.5 * (sched.lambda_at(s) + sched.lambda_at(t)));
    first_order(s, mid, eps, x, u);
    predict_at(mid, u, eps);
    first_order(s, t, eps, x, x);
  }
  detail::clip_values<T>(x, cfg.clip);
  return x;
}

/// Per-item stream for item `index` of a sampling run.
inline Rng sample_stream(std::uint64_t seed, std::uint64_t index) { return seed_substream(seed, "sample.item", index); }

/// Single-image ancestral sampling (method must be ancestral).
template <class T>
std::vector<T> ancestral_sample(const NoisePredictor<T>& eps_fn, const NoiseSchedule& sched, int label,
                                std::size_t numel, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.method != SampleMethod::ancestral) throw ConfigError("ancestral_sample requires method = ancestral");
  const int labels[1] = {label};
  return sample_items<T>(eps_fn, sched, labels, std::span<Rng>(&rng, 1), numel, cfg);
}

/// Single-image deterministic solver run for stream index 0 of cfg.seed.
template <class T>
std::vector<T> fast_ode_sample(const NoisePredictor<T>& eps_fn, const NoiseSchedule& sched, int label,
                               std::size_t numel, const SamplerConfig& cfg) {
  if (cfg.method != SampleMethod::fast_ode) throw ConfigError("fast_ode_sample requires method = fast-ode");
  Rng rng = sample_stream(cfg.seed, 0);
  const int labels[1] = {label};
  return sample_items<T>(eps_fn, sched, labels, std::span<Rng>(&rng, 1), numel, cfg);
}

/// One image per label; item i uses stream (cfg.seed, first_index + i).
/// Chunking by cfg.batch and spreading chunks over cfg.workers threads does
/// not change any output bit.
template <class T>
LabeledImageBatch sample_class_batch(const Denoiser<T>& model, const NoiseSchedule& sched, std::span<const int> labels,
                                     const SamplerConfig& cfg, std::uint64_t first_index = 0) {
  cfg.validate(sched);
  const auto& mc = model.config();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= mc.num_classes) {
      throw ConfigError("sample: label " + std::to_string(labels[i]) + " at position " + std::to_string(i) +
                        " outside [0, " + std::to_string(mc.num_classes) + ")");
    }
  }
  LabeledImageBatch out;
  out.channels = mc.channels, out.height = mc.height, out.width = mc.width, out.num_classes = mc.num_classes;
  const std::size_t numel = mc.image_numel();
  out.pixels.resize(labels.size() * numel);
  out.labels.assign(labels.begin(), labels.end());
  const auto predictor = make_predictor(model, cfg.guidance);
  const std::size_t chunk = static_cast<std::size_t>(cfg.batch);
  const std::size_t chunks = (labels.size() + chunk - 1) / chunk;
  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * chunk, end = std::min(labels.size(), begin + chunk);
    std::vector<Rng> rngs;
    for (std::size_t i = begin; i < end; ++i) rngs.push_back(sample_stream(cfg.seed, first_index + i));
    auto imgs = sample_items<T>(predictor, sched, labels.subspan(begin, end - begin), rngs, numel, cfg);
    for (std::size_t k = 0; k < imgs.size(); ++k) out.pixels[begin * numel + k] = static_cast<float>(imgs[k]);
  };
  const int workers = std::min<int>(cfg.workers, static_cast<int>(std::max<std::size_t>(chunks, 1)));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = static_cast<std::size_t>(w); c < chunks; c += static_cast<std::size_t>(workers)) {
            run_chunk(c);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace ddistill
