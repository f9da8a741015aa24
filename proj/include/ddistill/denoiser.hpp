// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddistill/error.hpp"
#include "ddistill/kernels.hpp"
#include "ddistill/params.hpp"
#include "ddistill/rng.hpp"

namespace ddistill {

/// Label value selecting the unconditional class-embedding slot.
inline constexpr int kUnconditional = -1;

enum class SkipMode { add, concat };

inline SkipMode parse_skip_mode(const std::string& s) {
  if (s == "add") return SkipMode::add;
  if (s == "concat") return SkipMode::concat;
  throw ConfigError("unknown skip mode '" + s + "' (expected add|concat)");
}

inline std::string to_string(SkipMode m) { return m == SkipMode::add ? "add" : "concat"; }

struct DenoiserConfig {
  int layers = 13;
  int hidden = 512;
  int mlp = 2048;
  int heads = 8;
  int patch = 2;
  int height = 32;
  int width = 32;
  int channels = 3;
  int num_classes = 100;
  int max_steps = 1000;
  SkipMode skip = SkipMode::add;

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int num_patches() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * channels; }
  /// Layout: [time token, class token, image tokens...].
  int num_tokens() const { return num_patches() + 2; }
  int head_dim() const { return hidden / heads; }
  int image_numel() const { return channels * height * width; }
  int encoder_blocks() const { return layers / 2; }
  int decoder_blocks() const { return layers - layers / 2 - 1; }

  void validate() const {
    detail::require(layers >= 1, "model.layers must be >= 1");
    detail::require(hidden >= 1 && mlp >= 1 && heads >= 1, "model.hidden, model.mlp, model.heads must be positive");
    detail::require(hidden % heads == 0, "model.hidden must be divisible by model.heads");
    detail::require(patch >= 1 && height >= 1 && width >= 1 && channels >= 1, "image geometry must be positive");
    detail::require(height % patch == 0 && width % patch == 0,
                    "image size " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by patch " + std::to_string(patch));
    detail::require(num_classes >= 1, "model.num_classes must be >= 1");
    detail::require(max_steps >= 1, "model.max_steps must be >= 1");
  }

  bool operator==(const DenoiserConfig&) const = default;

  /// Named architecture rows: small = 13/512/2048/8, mid = 17/768/3072/12,
  /// tiny = 5/128/512/4 for desk-scale runs. Patch defaults to 2 up to 32
  /// pixels and 4 above.
  static DenoiserConfig preset(const std::string& name, int image_size, int channels, int num_classes) {
    DenoiserConfig c;
    if (name == "small") {
      c.layers = 13, c.hidden = 512, c.mlp = 2048, c.heads = 8;
    } else if (name == "mid") {
      c.layers = 17, c.hidden = 768, c.mlp = 3072, c.heads = 12;
    } else if (name == "tiny") {
      c.layers = 5, c.hidden = 128, c.mlp = 512, c.heads = 4;
    } else {
      throw ConfigError("unknown model preset '" + name + "' (expected small|mid|tiny)");
    }
    c.height = c.width = image_size;
    c.channels = channels;
    c.num_classes = num_classes;
    c.patch = image_size <= 32 ? 2 : 4;
    c.validate();
    return c;
  }
};

/// Closed-form scalar parameter count.
inline std::int64_t count_params(const DenoiserConfig& c) {
  c.validate();
  const std::int64_t d = c.hidden, m = c.mlp, p = c.patch_dim(), n = c.num_tokens(), k = c.num_classes;
  const std::int64_t embed = p * d + d + n * d + d * d + d + (k + 1) * d;
  const std::int64_t block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * m + m + m * d + d;
  const std::int64_t skip = c.skip == SkipMode::concat ? c.decoder_blocks() * (2 * d * d + d) : 0;
  const std::int64_t out = 2 * d + d * p + p;
  return embed + c.layers * block + skip + out;
}

/// Tensor names and shapes in canonical order.
inline std::vector<std::pair<std::string, Shape>> denoiser_layout(const DenoiserConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.hidden), m = static_cast<std::size_t>(c.mlp);
  const auto p = static_cast<std::size_t>(c.patch_dim());
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch_embed.weight", {p, d}},
      {"patch_embed.bias", {d}},
      {"pos_embed", {static_cast<std::size_t>(c.num_tokens()), d}},
      {"time_embed.weight", {d, d}},
      {"time_embed.bias", {d}},
      {"label_embed", {static_cast<std::size_t>(c.num_classes + 1), d}},
  };
  for (int i = 0; i < c.layers; ++i) {
    const std::string b = "blocks." + std::to_string(i) + ".";
    if (c.skip == SkipMode::concat && i > c.encoder_blocks()) {
      out.push_back({b + "skip.weight", {2 * d, d}});
      out.push_back({b + "skip.bias", {d}});
    }
    out.push_back({b + "norm1.weight", {d}});
    out.push_back({b + "norm1.bias", {d}});
    out.push_back({b + "attn.qkv.weight", {d, 3 * d}});
    out.push_back({b + "attn.qkv.bias", {3 * d}});
    out.push_back({b + "attn.proj.weight", {d, d}});
    out.push_back({b + "attn.proj.bias", {d}});
    out.push_back({b + "norm2.weight", {d}});
    out.push_back({b + "norm2.bias", {d}});
    out.push_back({b + "mlp.fc1.weight", {d, m}});
    out.push_back({b + "mlp.fc1.bias", {m}});
    out.push_back({b + "mlp.fc2.weight", {m, d}});
    out.push_back({b + "mlp.fc2.bias", {d}});
  }
  out.push_back({"final_norm.weight", {d}});
  out.push_back({"final_norm.bias", {d}});
  out.push_back({"head.weight", {d, p}});
  out.push_back({"head.bias", {p}});
  return out;
}

// ------------------------------------------------------------ patching

/// image: channels×h×w → (h/p·w/p) rows of p·p·channels, patches in
/// row-major grid order, elements ordered (py, px, channel).
template <class T>
std::vector<T> patchify(std::span<const T> image, int channels, int h, int w, int p) {
  if (p < 1 || h % p != 0 || w % p != 0) {
    throw ConfigError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                      std::to_string(p));
  }
  if (image.size() != static_cast<std::size_t>(channels) * h * w) throw ConfigError("patchify: image size mismatch");
  const int gh = h / p, gw = w / p, pd = p * p * channels;
  std::vector<T> out(static_cast<std::size_t>(gh) * gw * pd);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      T* row = out.data() + static_cast<std::size_t>(gy * gw + gx) * pd;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < channels; ++c)
            row[(py * p + px) * channels + c] =
                image[(static_cast<std::size_t>(c) * h + gy * p + py) * w + gx * p + px];
    }
  return out;
}

/// Exact inverse of patchify.
template <class T>
std::vector<T> unpatchify(std::span<const T> rows, int channels, int h, int w, int p) {
  if (p < 1 || h % p != 0 || w % p != 0) throw ConfigError("unpatchify: geometry not divisible by patch");
  const int gh = h / p, gw = w / p, pd = p * p * channels;
  if (rows.size() != static_cast<std::size_t>(gh) * gw * pd) {
    throw ConfigError("unpatchify: expected " + std::to_string(gh * gw) + " rows of " + std::to_string(pd) +
                      ", got " + std::to_string(rows.size()) + " values");
  }
  std::vector<T> img(static_cast<std::size_t>(channels) * h * w);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const T* row = rows.data() + static_cast<std::size_t>(gy * gw + gx) * pd;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < channels; ++c)
            img[(static_cast<std::size_t>(c) * h + gy * p + py) * w + gx * p + px] =
                row[(py * p + px) * channels + c];
    }
  return img;
}

/// Sinusoidal encoding [cos(t f_i), sin(t f_i)] with f_i = 10000^(-i/half).
template <class T>
void timestep_encoding(double t, int dim, T* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::cos(t * f));
    out[half + i] = static_cast<T>(std::sin(t * f));
  }
  if (dim % 2) out[dim - 1] = T(0);
}

// ------------------------------------------------------ transformer block

template <class T>
struct BlockWeights {
  const T *norm1_w, *norm1_b, *qkv_w, *qkv_b, *proj_w, *proj_b, *norm2_w, *norm2_b, *fc1_w, *fc1_b, *fc2_w, *fc2_b;
};

template <class T>
struct BlockGrads {
  T *norm1_w, *norm1_b, *qkv_w, *qkv_b, *proj_w, *proj_b, *norm2_w, *norm2_b, *fc1_w, *fc1_b, *fc2_w, *fc2_b;
};

template <class T, class Store>
auto block_view(Store& store, const std::string& prefix) {
  using P = std::conditional_t<std::is_const_v<Store>, const T*, T*>;
  auto g = [&](const char* n) -> P { return store.get(prefix + n).data(); };
  using Out = std::conditional_t<std::is_const_v<Store>, BlockWeights<T>, BlockGrads<T>>;
  return Out{g("norm1.weight"), g("norm1.bias"), g("attn.qkv.weight"), g("attn.qkv.bias"),
             g("attn.proj.weight"), g("attn.proj.bias"), g("norm2.weight"), g("norm2.bias"),
             g("mlp.fc1.weight"), g("mlp.fc1.bias"), g("mlp.fc2.weight"), g("mlp.fc2.bias")};
}

struct BlockShape {
  int batch, tokens, hidden, heads, mlp;
  int rows() const { return batch * tokens; }
};

template <class T>
struct BlockCache {
  std::vector<T> x, h1, mean1, rstd1, qkv, probs, attn, z1, h2, mean2, rstd2, u, g;
};

/// Pre-norm residual block: z1 = x + MHSA(LN(x)); out = z1 + MLP(LN(z1)).
template <class T>
void block_forward(const BlockShape& s, const BlockWeights<T>& w, const T* x, T* out, BlockCache<T>& c) {
  const int rows = s.rows(), d = s.hidden, dh = d / s.heads, n = s.tokens;
  const auto rd = static_cast<std::size_t>(rows) * d;
  c.x.assign(x, x + rd);
  c.h1.resize(rd), c.mean1.resize(rows), c.rstd1.resize(rows);
  kernels::layer_norm_forward(rows, d, x, w.norm1_w, w.norm1_b, c.h1.data(), c.mean1.data(), c.rstd1.data());
  c.qkv.resize(rd * 3);
  kernels::linear_forward(rows, d, 3 * d, c.h1.data(), w.qkv_w, w.qkv_b, c.qkv.data());
  c.probs.resize(static_cast<std::size_t>(s.batch) * s.heads * n * n);
  c.attn.resize(rd);
  for (int b = 0; b < s.batch; ++b)
    for (int h = 0; h < s.heads; ++h) {
      const T* base = c.qkv.data() + static_cast<std::size_t>(b) * n * 3 * d + h * dh;
      kernels::attention_forward(n, n, dh, dh, base, 3 * d, base + d, 3 * d, base + 2 * d, 3 * d,
                                 c.probs.data() + (static_cast<std::size_t>(b) * s.heads + h) * n * n,
                                 c.attn.data() + static_cast<std::size_t>(b) * n * d + h * dh, d);
    }
  c.z1.resize(rd);
  kernels::linear_forward(rows, d, d, c.attn.data(), w.proj_w, w.proj_b, c.z1.data());
  for (std::size_t i = 0; i < rd; ++i) c.z1[i] += x[i];
  c.h2.resize(rd), c.mean2.resize(rows), c.rstd2.resize(rows);
  kernels::layer_norm_forward(rows, d, c.z1.data(), w.norm2_w, w.norm2_b, c.h2.data(), c.mean2.data(),
                              c.rstd2.data());
  const auto rm = static_cast<std::size_t>(rows) * s.mlp;
  c.u.resize(rm), c.g.resize(rm);
  kernels::linear_forward(rows, d, s.mlp, c.h2.data(), w.fc1_w, w.fc1_b, c.u.data());
  kernels::gelu_forward(rm, c.u.data(), c.g.data());
  kernels::linear_forward(rows, s.mlp, d, c.g.data(), w.fc2_w, w.fc2_b, out);
  for (std::size_t i = 0; i < rd; ++i) out[i] += c.z1[i];
}

/// dx may alias dout.
template <class T>
void block_backward(const BlockShape& s, const BlockWeights<T>& w, const BlockCache<T>& c, const T* dout, T* dx,
                    const BlockGrads<T>& gr) {
  const int rows = s.rows(), d = s.hidden, dh = d / s.heads, n = s.tokens;
  const auto rd = static_cast<std::size_t>(rows) * d;
  const auto rm = static_cast<std::size_t>(rows) * s.mlp;
  std::vector<T> dz1(dout, dout + rd);
  std::vector<T> dg(rm), dh2(rd);
  kernels::linear_backward(rows, s.mlp, d, c.g.data(), w.fc2_w, dout, dg.data(), gr.fc2_w, gr.fc2_b);
  kernels::gelu_backward(rm, c.u.data(), dg.data(), dg.data());
  kernels::linear_backward(rows, d, s.mlp, c.h2.data(), w.fc1_w, dg.data(), dh2.data(), gr.fc1_w, gr.fc1_b);
  kernels::layer_norm_backward(rows, d, c.z1.data(), w.norm2_w, c.mean2.data(), c.rstd2.data(), dh2.data(),
                               dz1.data(), gr.norm2_w, gr.norm2_b, true);
  std::vector<T> dattn(rd), dqkv(rd * 3), scratch(static_cast<std::size_t>(n) * n);
  kernels::linear_backward(rows, d, d, c.attn.data(), w.proj_w, dz1.data(), dattn.data(), gr.proj_w, gr.proj_b);
  for (int b = 0; b < s.batch; ++b)
    for (int h = 0; h < s.heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(b) * n * 3 * d + h * dh;
      const T* base = c.qkv.data() + off;
      T* dbase = dqkv.data() + off;
      kernels::attention_backward(n, n, dh, dh, base, 3 * d, base + d, 3 * d, base + 2 * d, 3 * d,
                                  c.probs.data() + (static_cast<std::size_t>(b) * s.heads + h) * n * n,
                                  dattn.data() + static_cast<std::size_t>(b) * n * d + h * dh, d, dbase, 3 * d,
                                  dbase + d, 3 * d, dbase + 2 * d, 3 * d, scratch.data());
    }
  std::vector<T> dh1(rd);
  kernels::linear_backward(rows, d, 3 * d, c.h1.data(), w.qkv_w, dqkv.data(), dh1.data(), gr.qkv_w, gr.qkv_b);
  kernels::layer_norm_backward(rows, d, c.x.data(), w.norm1_w, c.mean1.data(), c.rstd1.data(), dh1.data(),
                               dz1.data(), gr.norm1_w, gr.norm1_b, true);
  std::copy(dz1.begin(), dz1.end(), dx);
}

// ------------------------------------------------------------ skip merge

/// add: deep + shallow. concat: [deep | shallow]·W + b with W of shape 2D×D.
/// `concat_cache` receives the rows×2D concatenation in concat mode.
template <class T>
void skip_merge_forward(SkipMode mode, int rows, int d, const T* deep, const T* shallow, const T* w, const T* b,
                        T* out, std::vector<T>* concat_cache) {
  const auto rd = static_cast<std::size_t>(rows) * d;
  if (mode == SkipMode::add) {
    for (std::size_t i = 0; i < rd; ++i) out[i] = deep[i] + shallow[i];
    return;
  }
  std::vector<T> local;
  std::vector<T>& cat = concat_cache ? *concat_cache : local;
  cat.resize(rd * 2);
  for (int r = 0; r < rows; ++r) {
    std::copy(deep + static_cast<std::size_t>(r) * d, deep + static_cast<std::size_t>(r + 1) * d,
              cat.data() + static_cast<std::size_t>(r) * 2 * d);
    std::copy(shallow + static_cast<std::size_t>(r) * d, shallow + static_cast<std::size_t>(r + 1) * d,
              cat.data() + static_cast<std::size_t>(r) * 2 * d + d);
  }
  kernels::linear_forward(rows, 2 * d, d, cat.data(), w, b, out);
}

template <class T>
void skip_merge_backward(SkipMode mode, int rows, int d, const T* w, const std::vector<T>& concat_cache,
                         const T* dout, T* ddeep, T* dshallow, T* dw, T* db) {
  const auto rd = static_cast<std::size_t>(rows) * d;
  if (mode == SkipMode::add) {
    std::copy(dout, dout + rd, ddeep);
    std::copy(dout, dout + rd, dshallow);
    return;
  }
  std::vector<T> dcat(rd * 2);
  kernels::linear_backward(rows, 2 * d, d, concat_cache.data(), w, dout, dcat.data(), dw, db);
  for (int r = 0; r < rows; ++r) {
    const T* src = dcat.data() + static_cast<std::size_t>(r) * 2 * d;
    std::copy(src, src + d, ddeep + static_cast<std::size_t>(r) * d);
    std::copy(src + d, src + 2 * d, dshallow + static_cast<std::size_t>(r) * d);
  }
}

// -------------------------------------------------------------- denoiser

/// Matrix of tokens × hidden for a single item.
template <class T>
struct TokenSequence {
  int tokens = 0;
  int hidden = 0;
  std::vector<T> data;
};

template <class T>
struct DenoiserCache {
  int batch = 0;
  std::vector<T> patches, time_enc, tokens0;
  std::vector<int> slots;
  std::vector<BlockCache<T>> blocks;
  std::vector<std::vector<T>> stash, concat;
  std::vector<T> final_in, final_mean, final_rstd, final_h, img_rows;
};

/// Class-conditional noise predictor over images in channel-major layout.
template <class T>
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
    for (auto& [name, shape] : denoiser_layout(cfg_)) params_.add(name, shape);
  }

  Denoiser(DenoiserConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    audit();
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Throws unless every tensor matches the layout dictated by the config.
  void audit() const {
    const auto layout = denoiser_layout(cfg_);
    if (layout.size() != params_.count()) throw ConfigError("denoiser parameter count mismatch");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& e = params_.entries()[i];
      if (e.name != layout[i].first || e.value.shape() != layout[i].second) {
        throw ConfigError("denoiser tensor '" + e.name + "' has shape " + shape_string(e.value.shape()) +
                          ", expected '" + layout[i].first + "' " + shape_string(layout[i].second));
      }
    }
  }

  /// Truncated-normal (std 0.02) weights and embeddings, unit norm scales,
  /// zero biases and a zero output head.
  void initialize(Rng& rng) {
    for (auto& e : params_.entries()) {
      const std::string& n = e.name;
      const bool is_norm = n.find("norm") != std::string::npos;
      if (is_norm && n.ends_with(".weight")) {
        e.value.fill(T(1));
      } else if (n.ends_with(".bias") || n.starts_with("head.") || is_norm) {
        e.value.fill(T(0));
      } else {
        init_truncated_normal(e.value, rng, 0.02);
      }
    }
  }

  void check_inputs(std::size_t x_size, std::span<const double> t, std::span<const int> y) const {
    const int batch = static_cast<int>(t.size());
    if (y.size() != t.size()) throw ConfigError("denoiser: step and label counts differ");
    if (x_size != static_cast<std::size_t>(batch) * cfg_.image_numel()) {
      throw ConfigError("denoiser: input has " + std::to_string(x_size) + " values, expected " +
                        std::to_string(static_cast<std::size_t>(batch) * cfg_.image_numel()));
    }
    for (int b = 0; b < batch; ++b) check_step_label(t[b], y[b]);
  }

  void check_step_label(double t, int y) const {
    if (!(t >= 1.0 && t <= cfg_.max_steps)) {
      throw ConfigError("denoiser: step " + std::to_string(t) + " outside [1, " + std::to_string(cfg_.max_steps) +
                        "]");
    }
    if (y != kUnconditional && (y < 0 || y >= cfg_.num_classes)) {
      throw ConfigError("denoiser: label " + std::to_string(y) + " outside [0, " + std::to_string(cfg_.num_classes) +
                        ")");
    }
  }

  /// z0 = [time(t); class(y); patches·E + b] + E_pos for one item.
  TokenSequence<T> embed(std::span<const T> patches, double t, int y) const {
    check_step_label(t, y);
    if (patches.size() != static_cast<std::size_t>(cfg_.num_patches()) * cfg_.patch_dim()) {
      throw ConfigError("embed: patch matrix has wrong size");
    }
    DenoiserCache<T> c;
    std::vector<T> z;
    embed_batch(1, patches.data(), &t, &y, c, z);
    return {cfg_.num_tokens(), cfg_.hidden, std::move(z)};
  }

  /// Noise estimate for a batch. x: batch×image_numel, t and y: per item.
  void predict(std::span<const T> x, std::span<const double> t, std::span<const int> y, std::span<T> eps,
               DenoiserCache<T>* cache = nullptr) const {
    check_inputs(x.size(), t, y);
    if (eps.size() != x.size()) throw ConfigError("denoiser: output buffer size mismatch");
    DenoiserCache<T> local;
    DenoiserCache<T>& c = cache ? *cache : local;
    const int batch = static_cast<int>(t.size());
    if (batch == 0) return;
    c.batch = batch;
    const int n = cfg_.num_tokens(), d = cfg_.hidden, np = cfg_.num_patches(), pd = cfg_.patch_dim();
    c.patches.resize(static_cast<std::size_t>(batch) * np * pd);
    for (int b = 0; b < batch; ++b) {
      auto rows = patchify<T>(x.subspan(static_cast<std::size_t>(b) * cfg_.image_numel(), cfg_.image_numel()),
                              cfg_.channels, cfg_.height, cfg_.width, cfg_.patch);
      std::copy(rows.begin(), rows.end(), c.patches.begin() + static_cast<std::ptrdiff_t>(b) * np * pd);
    }
    std::vector<T> z;
    embed_batch(batch, c.patches.data(), t.data(), y.data(), c, z);

    const BlockShape shape{batch, n, d, cfg_.heads, cfg_.mlp};
    const auto rd = z.size();
    const int enc = cfg_.encoder_blocks();
    c.blocks.resize(cfg_.layers);
    c.stash.assign(enc, {});
    c.concat.assign(cfg_.layers, {});
    std::vector<T> next(rd), merged(rd);
    for (int i = 0; i < cfg_.layers; ++i) {
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      if (i > enc) {
        const int partner = 2 * enc - i;  // block l pairs with block L - l
        if (partner >= 0) {
          const T* w = cfg_.skip == SkipMode::concat ? params_.data(prefix + "skip.weight") : nullptr;
          const T* bb = cfg_.skip == SkipMode::concat ? params_.data(prefix + "skip.bias") : nullptr;
          skip_merge_forward(cfg_.skip, shape.rows(), d, z.data(), c.stash[partner].data(), w, bb, merged.data(),
                             &c.concat[i]);
          std::swap(z, merged);
        }
      }
      block_forward(shape, block_view<T>(params_, prefix), z.data(), next.data(), c.blocks[i]);
      std::swap(z, next);
      if (i < enc) c.stash[i] = z;
    }

    c.final_in = z;
    c.final_h.resize(rd), c.final_mean.resize(shape.rows()), c.final_rstd.resize(shape.rows());
    kernels::layer_norm_forward(shape.rows(), d, z.data(), params_.data("final_norm.weight"),
                                params_.data("final_norm.bias"), c.final_h.data(), c.final_mean.data(),
                                c.final_rstd.data());
    c.img_rows.resize(static_cast<std::size_t>(batch) * np * d);
    for (int b = 0; b < batch; ++b) {
      const T* src = c.final_h.data() + (static_cast<std::size_t>(b) * n + 2) * d;
      std::copy(src, src + static_cast<std::size_t>(np) * d, c.img_rows.data() + static_cast<std::size_t>(b) * np * d);
    }
    std::vector<T> out_rows(static_cast<std::size_t>(batch) * np * pd);
    kernels::linear_forward(batch * np, d, pd, c.img_rows.data(), params_.data("head.weight"),
                            params_.data("head.bias"), out_rows.data());
    for (int b = 0; b < batch; ++b) {
      auto img = unpatchify<T>(std::span<const T>(out_rows).subspan(static_cast<std::size_t>(b) * np * pd,
                                                                  static_cast<std::size_t>(np) * pd),
                               cfg_.channels, cfg_.height, cfg_.width, cfg_.patch);
      std::copy(img.begin(), img.end(), eps.begin() + static_cast<std::ptrdiff_t>(b) * cfg_.image_numel());
    }
  }

  /// Accumulates dL/dparams into `grads` given dL/deps for the cached batch.
  void backward(const DenoiserCache<T>& c, std::span<const T> d_eps, ParamStore<T>& grads) const {
    const int batch = c.batch;
    const int n = cfg_.num_tokens(), d = cfg_.hidden, np = cfg_.num_patches(), pd = cfg_.patch_dim();
    if (d_eps.size() != static_cast<std::size_t>(batch) * cfg_.image_numel()) {
      throw ConfigError("denoiser backward: gradient size mismatch");
    }
    const BlockShape shape{batch, n, d, cfg_.heads, cfg_.mlp};
    const auto rd = static_cast<std::size_t>(shape.rows()) * d;

    std::vector<T> d_rows(static_cast<std::size_t>(batch) * np * pd);
    for (int b = 0; b < batch; ++b) {
      auto rows = patchify<T>(d_eps.subspan(static_cast<std::size_t>(b) * cfg_.image_numel(), cfg_.image_numel()),
                              cfg_.channels, cfg_.height, cfg_.width, cfg_.patch);
      std::copy(rows.begin(), rows.end(), d_rows.begin() + static_cast<std::ptrdiff_t>(b) * np * pd);
    }
    std::vector<T> d_img(static_cast<std::size_t>(batch) * np * d);
    kernels::linear_backward(batch * np, d, pd, c.img_rows.data(), params_.data("head.weight"), d_rows.data(),
                             d_img.data(), grads.data("head.weight"), grads.data("head.bias"));
    std::vector<T> dh(rd, T(0));
    for (int b = 0; b < batch; ++b) {
      const T* src = d_img.data() + static_cast<std::size_t>(b) * np * d;
      std::copy(src, src + static_cast<std::size_t>(np) * d, dh.data() + (static_cast<std::size_t>(b) * n + 2) * d);
    }
    std::vector<T> dz(rd);
    kernels::layer_norm_backward(shape.rows(), d, c.final_in.data(), params_.data("final_norm.weight"),
                                 c.final_mean.data(), c.final_rstd.data(), dh.data(), dz.data(),
                                 grads.data("final_norm.weight"), grads.data("final_norm.bias"));

    const int enc = cfg_.encoder_blocks();
    std::vector<std::vector<T>> d_stash(enc, std::vector<T>(rd, T(0)));
    std::vector<T> ddeep(rd), dshallow(rd);
    for (int i = cfg_.layers - 1; i >= 0; --i) {
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      if (i < enc) {
        for (std::size_t k = 0; k < rd; ++k) dz[k] += d_stash[i][k];
      }
      block_backward(shape, block_view<T>(params_, prefix), c.blocks[i], dz.data(), dz.data(),
                     block_view<T>(grads, prefix));
      if (i > enc) {
        const int partner = 2 * enc - i;
        if (partner >= 0) {
          const bool cat = cfg_.skip == SkipMode::concat;
          skip_merge_backward(cfg_.skip, shape.rows(), d, cat ? params_.data(prefix + "skip.weight") : nullptr,
                              c.concat[i], dz.data(), ddeep.data(), dshallow.data(),
                              cat ? grads.data(prefix + "skip.weight") : nullptr,
                              cat ? grads.data(prefix + "skip.bias") : nullptr);
          std::swap(dz, ddeep);
          for (std::size_t k = 0; k < rd; ++k) d_stash[partner][k] += dshallow[k];
        }
      }
    }
    embed_backward(c, dz, grads);
  }

 private:
  void embed_batch(int batch, const T* patches, const double* t, const int* y, DenoiserCache<T>& c,
                   std::vector<T>& z) const {
    const int n = cfg_.num_tokens(), d = cfg_.hidden, np = cfg_.num_patches(), pd = cfg_.patch_dim();
    z.assign(static_cast<std::size_t>(batch) * n * d, T(0));
    c.time_enc.resize(static_cast<std::size_t>(batch) * d);
    c.slots.resize(batch);
    for (int b = 0; b < batch; ++b) {
      timestep_encoding(t[b], d, c.time_enc.data() + static_cast<std::size_t>(b) * d);
      c.slots[b] = y[b] == kUnconditional ? cfg_.num_classes : y[b];
    }
    std::vector<T> time_tok(static_cast<std::size_t>(batch) * d);
    kernels::linear_forward(batch, d, d, c.time_enc.data(), params_.data("time_embed.weight"),
                            params_.data("time_embed.bias"), time_tok.data());
    std::vector<T> patch_tok(static_cast<std::size_t>(batch) * np * d);
    kernels::linear_forward(batch * np, pd, d, patches, params_.data("patch_embed.weight"),
                            params_.data("patch_embed.bias"), patch_tok.data());
    const T* pos = params_.data("pos_embed");
    const T* labels = params_.data("label_embed");
    for (int b = 0; b < batch; ++b) {
      T* zb = z.data() + static_cast<std::size_t>(b) * n * d;
      const T* lab = labels + static_cast<std::size_t>(c.slots[b]) * d;
      for (int j = 0; j < d; ++j) {
        zb[j] = time_tok[static_cast<std::size_t>(b) * d + j] + pos[j];
        zb[d + j] = lab[j] + pos[d + j];
      }
      for (int i = 0; i < np; ++i) {
        const T* src = patch_tok.data() + (static_cast<std::size_t>(b) * np + i) * d;
        T* dst = zb + static_cast<std::size_t>(i + 2) * d;
        const T* p = pos + static_cast<std::size_t>(i + 2) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] + p[j];
      }
    }
    c.tokens0 = z;
  }

  void embed_backward(const DenoiserCache<T>& c, const std::vector<T>& dz, ParamStore<T>& grads) const {
    const int batch = c.batch, n = cfg_.num_tokens(), d = cfg_.hidden, np = cfg_.num_patches(),
              pd = cfg_.patch_dim();
    T* dpos = grads.data("pos_embed");
    T* dlab = grads.data("label_embed");
    std::vector<T> dtime(static_cast<std::size_t>(batch) * d), dpatch(static_cast<std::size_t>(batch) * np * d);
    for (int b = 0; b < batch; ++b) {
      const T* zb = dz.data() + static_cast<std::size_t>(b) * n * d;
      for (std::size_t k = 0; k < static_cast<std::size_t>(n) * d; ++k) dpos[k] += zb[k];
      T* lab = dlab + static_cast<std::size_t>(c.slots[b]) * d;
      for (int j = 0; j < d; ++j) {
        dtime[static_cast<std::size_t>(b) * d + j] = zb[j];
        lab[j] += zb[d + j];
      }
      std::copy(zb + 2 * d, zb + static_cast<std::size_t>(n) * d,
                dpatch.data() + static_cast<std::size_t>(b) * np * d);
    }
    kernels::linear_backward<T>(batch, d, d, c.time_enc.data(), params_.data("time_embed.weight"), dtime.data(),
                                nullptr, grads.data("time_embed.weight"), grads.data("time_embed.bias"));
    kernels::linear_backward<T>(batch * np, pd, d, c.patches.data(), params_.data("patch_embed.weight"),
                                dpatch.data(), nullptr, grads.data("patch_embed.weight"),
                                grads.data("patch_embed.bias"));
  }

  DenoiserConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace ddistill
