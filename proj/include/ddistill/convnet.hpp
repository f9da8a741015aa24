// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ddistill/data.hpp"
#include "ddistill/error.hpp"
#include "ddistill/kernels.hpp"
#include "ddistill/params.hpp"
#include "ddistill/rng.hpp"

namespace ddistill {

/// blocks × [conv3×3 → group norm → ReLU → avg-pool 2×2] → linear head.
struct ConvNetConfig {
  int blocks = 3;
  int width = 128;
  int kernel = 3;
  int groups = 0;  // 0 → one group per channel (instance norm)
  int channels = 3;
  int height = 32;
  int width_px = 32;
  int num_classes = 10;
  // training
  int epochs = 100;
  int batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = false;

  int norm_groups() const { return groups == 0 ? width : groups; }
  int feature_h() const { return height >> blocks; }
  int feature_w() const { return width_px >> blocks; }
  int feature_dim() const { return width * feature_h() * feature_w(); }

  void validate() const {
    detail::require(blocks >= 1 && width >= 1, "classifier.blocks and classifier.width must be >= 1");
    detail::require(kernel >= 1 && kernel % 2 == 1, "classifier kernel must be odd");
    detail::require(norm_groups() >= 1 && width % norm_groups() == 0, "classifier.width not divisible by groups");
    detail::require(num_classes >= 1, "classifier needs >= 1 class");
    detail::require(height % (1 << blocks) == 0 && width_px % (1 << blocks) == 0,
                    "image size must be divisible by 2^blocks");
    detail::require(epochs >= 0 && batch_size >= 1 && lr > 0 && momentum >= 0 && weight_decay >= 0,
                    "invalid classifier training settings");
  }

  bool operator==(const ConvNetConfig&) const = default;
};

template <class T>
class ConvNet {
 public:
  struct Cache {
    int batch = 0;
    std::vector<std::vector<T>> cols, conv, mean, rstd, normed, act;
    std::vector<T> features;
  };

  explicit ConvNet(ConvNetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int cin = cfg_.channels;
    const auto ks2 = static_cast<std::size_t>(cfg_.kernel * cfg_.kernel);
    for (int i = 0; i < cfg_.blocks; ++i) {
      const std::string p = "conv" + std::to_string(i) + ".";
      params_.add(p + "weight", {static_cast<std::size_t>(cfg_.width), static_cast<std::size_t>(cin) * ks2});
      params_.add(p + "bias", {static_cast<std::size_t>(cfg_.width)});
      params_.add("norm" + std::to_string(i) + ".weight", {static_cast<std::size_t>(cfg_.width)}, T(1));
      params_.add("norm" + std::to_string(i) + ".bias", {static_cast<std::size_t>(cfg_.width)});
      cin = cfg_.width;
    }
    params_.add("fc.weight", {static_cast<std::size_t>(cfg_.feature_dim()), static_cast<std::size_t>(cfg_.num_classes)});
    params_.add("fc.bias", {static_cast<std::size_t>(cfg_.num_classes)});
  }

  ConvNet(ConvNetConfig cfg, ParamStore<T> params) : ConvNet(std::move(cfg)) {
    if (!params_.same_layout(params)) throw DataError("classifier parameters do not match the configuration");
    params_ = std::move(params);
  }

  const ConvNetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// He-normal convolutions, 1/sqrt(fan_in) head, zero biases.
  void initialize(Rng& rng) {
    for (auto& e : params_.entries()) {
      if (e.name.starts_with("conv") && e.name.ends_with("weight")) {
        const double fan_in = static_cast<double>(e.value.dim(1));
        for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] = static_cast<T>(rng.normal() * std::sqrt(2.0 / fan_in));
      } else if (e.name == "fc.weight") {
        const double fan_in = static_cast<double>(e.value.dim(0));
        for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] = static_cast<T>(rng.normal() / std::sqrt(fan_in));
      }
    }
  }

  /// logits: batch × num_classes. Fills `cache` for backward when non-null.
  std::vector<T> forward(std::span<const T> x, int batch, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.batch = batch;
    c.cols.assign(cfg_.blocks, {}), c.conv.assign(cfg_.blocks, {});
    c.mean.assign(cfg_.blocks, {}), c.rstd.assign(cfg_.blocks, {}), c.normed.assign(cfg_.blocks, {});
    c.act.assign(cfg_.blocks, {});
    std::vector<T> cur(x.begin(), x.end());
    int cin = cfg_.channels, h = cfg_.height, w = cfg_.width_px;
    const int ks = cfg_.kernel, g = cfg_.norm_groups();
    for (int i = 0; i < cfg_.blocks; ++i) {
      const std::string p = "conv" + std::to_string(i) + ".";
      const std::string n = "norm" + std::to_string(i) + ".";
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      const std::size_t out_n = static_cast<std::size_t>(batch) * cfg_.width * plane;
      c.cols[i].resize(static_cast<std::size_t>(batch) * cin * ks * ks * plane);
      c.conv[i].resize(out_n);
      kernels::conv2d_forward(batch, cin, cfg_.width, h, w, ks, cur.data(), params_.data(p + "weight"),
                              params_.data(p + "bias"), c.conv[i].data(), c.cols[i].data());
      c.mean[i].resize(static_cast<std::size_t>(batch) * g), c.rstd[i].resize(static_cast<std::size_t>(batch) * g);
      c.normed[i].resize(out_n);
      kernels::group_norm_forward(batch, cfg_.width, h * w, g, c.conv[i].data(), params_.data(n + "weight"),
                                  params_.data(n + "bias"), c.normed[i].data(), c.mean[i].data(), c.rstd[i].data());
      c.act[i].resize(out_n);
      kernels::relu_forward(out_n, c.normed[i].data(), c.act[i].data());
      std::vector<T> pooled(out_n / 4);
      kernels::avg_pool2_forward(batch * cfg_.width, h, w, c.act[i].data(), pooled.data());
      cur = std::move(pooled);
      cin = cfg_.width, h /= 2, w /= 2;
    }
    c.features = cur;
    std::vector<T> logits(static_cast<std::size_t>(batch) * cfg_.num_classes);
    kernels::linear_forward(batch, cfg_.feature_dim(), cfg_.num_classes, cur.data(), params_.data("fc.weight"),
                            params_.data("fc.bias"), logits.data());
    return logits;
  }

  /// Penultimate (flattened pooled) features, batch × feature_dim.
  std::vector<T> features(std::span<const T> x, int batch) const {
    Cache c;
    forward(x, batch, &c);
    return c.features;
  }

  void backward(const Cache& c, std::span<const T> dlogits, ParamStore<T>& grads) const {
    const int batch = c.batch;
    std::vector<T> d(static_cast<std::size_t>(batch) * cfg_.feature_dim());
    kernels::linear_backward(batch, cfg_.feature_dim(), cfg_.num_classes, c.features.data(),
                             params_.data("fc.weight"), dlogits.data(), d.data(), grads.data("fc.weight"),
                             grads.data("fc.bias"));
    const int ks = cfg_.kernel, g = cfg_.norm_groups();
    for (int i = cfg_.blocks - 1; i >= 0; --i) {
      const int h = cfg_.height >> i, w = cfg_.width_px >> i;
      const int cin = i == 0 ? cfg_.channels : cfg_.width;
      const std::string p = "conv" + std::to_string(i) + ".";
      const std::string n = "norm" + std::to_string(i) + ".";
      const std::size_t out_n = static_cast<std::size_t>(batch) * cfg_.width * h * w;
      std::vector<T> dact(out_n), dnorm(out_n), dconv(out_n);
      kernels::avg_pool2_backward(batch * cfg_.width, h, w, d.data(), dact.data());
      kernels::relu_backward(out_n, c.normed[i].data(), dact.data(), dnorm.data());
      kernels::group_norm_backward(batch, cfg_.width, h * w, g, c.conv[i].data(), params_.data(n + "weight"),
                                   c.mean[i].data(), c.rstd[i].data(), dnorm.data(), dconv.data(),
                                   grads.data(n + "weight"), grads.data(n + "bias"));
      std::vector<T> dx(i > 0 ? static_cast<std::size_t>(batch) * cin * h * w : 0);
      kernels::conv2d_backward(batch, cin, cfg_.width, h, w, ks, c.cols[i].data(), params_.data(p + "weight"),
                               dconv.data(), i > 0 ? dx.data() : nullptr, grads.data(p + "weight"),
                               grads.data(p + "bias"));
      d = std::move(dx);
    }
  }

  /// Arg-max class per image; ties resolve to the lowest index.
  std::vector<int> predict(std::span<const float> pixels, int batch) const {
    std::vector<T> x(pixels.begin(), pixels.end());
    const auto logits = forward(x, batch);
    std::vector<int> out(batch);
    for (int b = 0; b < batch; ++b) {
      const T* row = logits.data() + static_cast<std::size_t>(b) * cfg_.num_classes;
      out[b] = static_cast<int>(std::max_element(row, row + cfg_.num_classes) - row);
    }
    return out;
  }

 private:
  ConvNetConfig cfg_;
  ParamStore<T> params_;
};

namespace detail {

// Horizontal flip with probability 1/2 and a random shift of up to 2 pixels
// with zero (-1 after normalization) padding.
inline void augment_image(std::span<float> img, int channels, int h, int w, Rng& rng) {
  const bool flip = rng.below(2) == 1;
  const int dy = static_cast<int>(rng.below(5)) - 2, dx = static_cast<int>(rng.below(5)) - 2;
  std::vector<float> src(img.begin(), img.end());
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y + dy, sx = x + dx;
        if (flip) sx = w - 1 - sx;
        const bool in = sy >= 0 && sy < h && sx >= 0 && sx < w;
        img[(static_cast<std::size_t>(c) * h + y) * w + x] =
            in ? src[(static_cast<std::size_t>(c) * h + sy) * w + sx] : -1.0f;
      }
}

}  // namespace detail

/// Cross-entropy training with momentum SGD, cosine-decayed rate and L2
/// decay on conv/linear weights. Deterministic given `seed`.
inline ConvNet<float> train_classifier(const LabeledImageBatch& data, const ConvNetConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw DataError("train_classifier: empty training set");
  cfg.validate();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] >= cfg.num_classes) {
      throw DataError("train_classifier: label " + std::to_string(data.labels[i]) + " at item " + std::to_string(i) +
                      " outside [0, " + std::to_string(cfg.num_classes) + ")");
    }
  }
  if (data.channels != cfg.channels || data.height != cfg.height || data.width != cfg.width_px) {
    throw DataError("train_classifier: image geometry does not match the classifier configuration");
  }
  ConvNet<float> net(cfg);
  Rng init = seed_substream(seed, "classifier.init", 0);
  net.initialize(init);
  if (cfg.epochs == 0) return net;

  auto velocity = net.params().zeros_like();
  auto grads = net.params().zeros_like();
  const std::size_t n = data.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const double total = static_cast<double>(per_epoch) * cfg.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  typename ConvNet<float>::Cache cache;
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng = seed_substream(seed, "classifier.epoch", static_cast<std::uint64_t>(e));
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      LabeledImageBatch batch = data.subset(std::span<const std::size_t>(order).subspan(start, end - start));
      if (cfg.augment) {
        for (std::size_t i = 0; i < batch.size(); ++i)
          detail::augment_image(batch.image(i), batch.channels, batch.height, batch.width, rng);
      }
      const int b = static_cast<int>(batch.size());
      const auto logits = net.forward(batch.pixels, b, &cache);
      std::vector<float> dlogits(logits.size());
      const double loss = kernels::cross_entropy(b, cfg.num_classes, logits.data(), batch.labels.data(), dlogits.data());
      if (!std::isfinite(loss)) throw NumericError("classifier loss became non-finite at epoch " + std::to_string(e));
      grads.zero();
      net.backward(cache, dlogits, grads);
      const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
      for (std::size_t k = 0; k < grads.count(); ++k) {
        auto& p = net.params().entries()[k];
        const bool decay = p.name.ends_with("weight") && !p.name.starts_with("norm");
        auto& v = velocity.entries()[k].value;
        const auto& g = grads.entries()[k].value;
        for (std::size_t i = 0; i < v.size(); ++i) {
          const float gi = g[i] + (decay ? static_cast<float>(cfg.weight_decay) * p.value[i] : 0.0f);
          v[i] = static_cast<float>(cfg.momentum) * v[i] + gi;
          p.value[i] -= static_cast<float>(lr) * v[i];
        }
      }
      ++step;
    }
  }
  return net;
}

/// Top-1 accuracy of any classifier exposing predict(pixels, count).
template <class Classifier>
double evaluate(const Classifier& clf, const LabeledImageBatch& test, std::size_t batch = 256) {
  if (test.empty()) throw DataError("evaluate: empty test set");
  if (batch == 0) throw ConfigError("evaluate: batch must be >= 1");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < test.size(); start += batch) {
    const std::size_t end = std::min(test.size(), start + batch);
    const auto pix = std::span<const float>(test.pixels).subspan(start * test.image_numel(), (end - start) * test.image_numel());
    const auto pred = clf.predict(pix, static_cast<int>(end - start));
    for (std::size_t i = start; i < end; ++i) correct += pred[i - start] == test.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  std::uint64_t train_fingerprint = 0;
  std::uint64_t test_fingerprint = 0;
  std::vector<double> baseline_accuracies;  // full real training set, when requested

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  /// Population standard deviation.
  static double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
  }
  double mean() const { return mean_of(accuracies); }
  double stddev() const { return std_of(accuracies); }
  double baseline_mean() const { return mean_of(baseline_accuracies); }
  double baseline_stddev() const { return std_of(baseline_accuracies); }
};

/// Trains on `train` and scores on `test` once per seed (seeds 0..n-1 offset
/// by `seed_base`); optionally repeats on the full real set as a baseline.
inline EvalReport protocol(const LabeledImageBatch& train, const LabeledImageBatch& test, const ConvNetConfig& cfg,
                           int seeds = 3, const LabeledImageBatch* real_train = nullptr,
                           const ConvNetConfig* baseline_cfg = nullptr, std::uint64_t seed_base = 0) {
  if (seeds < 1) throw ConfigError("protocol: seeds must be >= 1");
  EvalReport report;
  report.train_fingerprint = train.fingerprint();
  report.test_fingerprint = test.fingerprint();
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = seed_base + static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    report.accuracies.push_back(evaluate(train_classifier(train, cfg, seed), test));
    if (real_train) {
      report.baseline_accuracies.push_back(
          evaluate(train_classifier(*real_train, baseline_cfg ? *baseline_cfg : cfg, seed), test));
    }
  }
  return report;
}

}  // namespace ddistill
