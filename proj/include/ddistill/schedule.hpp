// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ddistill/error.hpp"

namespace ddistill {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + s + "' (expected linear|cosine)");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

/// Discrete noise schedule over steps t = 1..T.
///
/// Storage is zero-based (index t-1). The convention alpha_bar(0) = 1 is
/// implicit: it is returned by alpha_bar(0) but never stored. All values are
/// kept in double precision; kernels cast at their boundary.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Builds from explicit per-step betas, each in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
    alphas_.resize(betas_.size());
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      const double b = betas_[i];
      if (!(b > 0.0 && b < 1.0)) {
        throw ConfigError("beta at step " + std::to_string(i + 1) + " outside (0,1): " + std::to_string(b));
      }
      alphas_[i] = 1.0 - b;
      prod *= alphas_[i];
      alpha_bars_[i] = prod;
    }
  }

  int steps() const { return static_cast<int>(betas_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  double beta(int t) const { return betas_.at(check(t) - 1); }
  double alpha(int t) const { return alphas_.at(check(t) - 1); }
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bars_.at(check(t) - 1);
  }

  /// Half log signal-to-noise ratio, ln(sqrt(abar) / sqrt(1 - abar)).
  double lambda(int t) const {
    const double ab = alpha_bar(t);
    return 0.5 * (std::log(ab) - std::log1p(-ab));
  }

  /// log alpha_bar at a real-valued time in [0, T], piecewise linear in t.
  double log_alpha_bar_at(double t) const {
    if (!(t >= 0.0 && t <= steps())) throw ConfigError("continuous time outside [0, T]");
    const int lo = std::min(static_cast<int>(std::floor(t)), steps() - 1);
    const double frac = t - lo;
    const double a = std::log(alpha_bar(lo));
    const double b = std::log(alpha_bar(lo + 1));
    return a + frac * (b - a);
  }

  double lambda_at(double t) const {
    const double lab = log_alpha_bar_at(t);
    return 0.5 * (lab - std::log(-std::expm1(lab)));
  }

  /// Inverse of lambda_at over [0, T]; lambda is strictly decreasing in t.
  double time_for_lambda(double lam) const {
    // log abar = -softplus(-2 lambda)
    const double x = -2.0 * lam;
    const double target = -(x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)));
    if (target >= 0.0) return 0.0;
    const double last = std::log(alpha_bar(steps()));
    if (target <= last) return steps();
    // segment with log abar(lo) >= target > log abar(lo + 1)
    int lo = 0, hi = steps();
    while (hi - lo > 1) {
      const int mid = (lo + hi) / 2;
      if (std::log(alpha_bar(mid)) >= target) lo = mid; else hi = mid;
    }
    const double a = std::log(alpha_bar(lo));
    const double b = std::log(alpha_bar(hi));
    return lo + (target - a) / (b - a);
  }

 private:
  int check(int t) const {
    if (t < 1 || t > steps()) {
      throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
    return t;
  }

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Linear betas interpolate evenly from beta_start to beta_end. Cosine
/// follows the squared-cosine alpha_bar curve with offset 0.008, betas capped
/// at 0.999; beta_start/beta_end are validated but do not shape it.
inline NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule steps must be >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0)) {
    throw ConfigError("schedule betas must lie in (0,1)");
  }
  if (beta_start > beta_end) throw ConfigError("beta_start must not exceed beta_end");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
      betas[i] = beta_start + frac * (beta_end - beta_start);
    }
  } else {
    constexpr double kOffset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + kOffset) / (1.0 + kOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < steps; ++i) {
      betas[i] = std::min(1.0 - f(i + 1.0) / f(i), 0.999);
    }
  }
  return NoiseSchedule(std::move(betas));
}

namespace detail {
template <class T>
void check_same_size(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size()) {
    throw ConfigError(std::string(what) + ": shape mismatch (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
}
}  // namespace detail

/// Draw from q(x_t | x_{t-1}) given caller-supplied standard normal noise.
template <class T>
std::vector<T> forward_step(std::span<const T> x_prev, int t, std::span<const T> noise, const NoiseSchedule& sched) {
  detail::check_same_size(x_prev, noise, "forward_step");
  const double a = sched.alpha(t);
  const T sa = static_cast<T>(std::sqrt(a));
  const T sn = static_cast<T>(std::sqrt(1.0 - a));
  std::vector<T> out(x_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * x_prev[i] + sn * noise[i];
  return out;
}

/// Closed-form marginal q(x_t | x_0).
template <class T>
std::vector<T> forward_marginal(std::span<const T> x0, int t, std::span<const T> noise, const NoiseSchedule& sched) {
  detail::check_same_size(x0, noise, "forward_marginal");
  const double ab = sched.alpha_bar(t);
  if (t == 0) throw ConfigError("forward_marginal: timestep 0 is not a diffusion step");
  const T sa = static_cast<T>(std::sqrt(ab));
  const T sn = static_cast<T>(std::sqrt(1.0 - ab));
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * noise[i];
  return out;
}

/// Reverse-process mean (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t).
template <class T>
std::vector<T> posterior_mean(std::span<const T> x_t, std::span<const T> eps_hat, int t, const NoiseSchedule& sched) {
  detail::check_same_size(x_t, eps_hat, "posterior_mean");
  const double a = sched.alpha(t);
  const double b = sched.beta(t);
  const double ab = sched.alpha_bar(t);
  if (ab >= 1.0 && b > 0.0) throw NumericError("posterior_mean: alpha_bar == 1 with beta > 0");
  const double coef = ab >= 1.0 ? 0.0 : b / std::sqrt(1.0 - ab);
  const T inv = static_cast<T>(1.0 / std::sqrt(a));
  const T c = static_cast<T>(coef);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (x_t[i] - c * eps_hat[i]);
  return out;
}

}  // namespace ddistill
