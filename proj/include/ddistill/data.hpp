// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ddistill/error.hpp"
#include "ddistill/rng.hpp"

namespace ddistill {

/// Images in channel-major layout with pixels in [-1, 1] and integer labels.
struct LabeledImageBatch {
  int channels = 3;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_numel() const { return static_cast<std::size_t>(channels) * height * width; }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_numel(), image_numel());
  }
  std::span<float> image(std::size_t i) { return std::span<float>(pixels).subspan(i * image_numel(), image_numel()); }

  void push_back(std::span<const float> img, int label) {
    if (img.size() != image_numel()) throw ConfigError("image size does not match batch geometry");
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }

  LabeledImageBatch empty_like() const {
    LabeledImageBatch b;
    b.channels = channels, b.height = height, b.width = width, b.num_classes = num_classes;
    return b;
  }

  LabeledImageBatch subset(std::span<const std::size_t> idx) const {
    LabeledImageBatch b = empty_like();
    b.pixels.reserve(idx.size() * image_numel());
    for (auto i : idx) b.push_back(image(i), labels.at(i));
    return b;
  }

  void validate_labels() const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes) {
        throw DataError("label " + std::to_string(labels[i]) + " at item " + std::to_string(i) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
    }
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
    for (int l : labels) counts.at(static_cast<std::size_t>(l))++;
    return counts;
  }

  /// Hash over geometry, labels and pixels quantized to bytes.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a("ddistill.batch");
    const int geo[4] = {channels, height, width, num_classes};
    h = fnv1a(geo, sizeof geo, h);
    for (int l : labels) h = fnv1a(&l, sizeof l, h);
    for (float p : pixels) {
      const auto q = static_cast<std::uint8_t>(std::clamp(std::lround((p + 1.0f) * 127.5f), 0L, 255L));
      h = fnv1a(&q, 1, h);
    }
    return h;
  }
};

/// Four-class procedural shapes: 0 disk, 1 square, 2 plus, 3 ring.
///
/// Each image draws a shape of random center, size and bright colour over a
/// dark random background with mild pixel noise, rendered with 4×4
/// supersampling. Classes cycle 0,1,2,3 so any prefix is balanced.
inline LabeledImageBatch make_shapes_dataset(std::size_t count, std::uint64_t seed, int size = 16) {
  if (size < 8) throw ConfigError("shapes dataset needs at least 8x8 images");
  LabeledImageBatch out;
  out.channels = 3, out.height = size, out.width = size, out.num_classes = 4;
  out.pixels.reserve(count * out.image_numel());
  std::vector<float> img(out.image_numel());
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = seed_substream(seed, "shapes", i);
    const int label = static_cast<int>(i % 4);
    const double s = size / 16.0;
    const double cx = size / 2.0 + (rng.uniform() * 2 - 1) * 2.5 * s;
    const double cy = size / 2.0 + (rng.uniform() * 2 - 1) * 2.5 * s;
    const double radius = (3.6 + rng.uniform() * 1.8) * s;
    float fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      fg[c] = static_cast<float>(0.55 + 0.45 * rng.uniform());
      bg[c] = static_cast<float>(0.25 * rng.uniform());
    }
    auto inside = [&](double x, double y) {
      const double dx = x - cx, dy = y - cy;
      switch (label) {
        case 0: return dx * dx + dy * dy <= radius * radius;
        case 1: return std::abs(dx) <= radius * 0.85 && std::abs(dy) <= radius * 0.85;
        case 2: {
          const double arm = radius * 0.38;
          return (std::abs(dx) <= arm && std::abs(dy) <= radius) || (std::abs(dy) <= arm && std::abs(dx) <= radius);
        }
        default: {
          const double r2 = dx * dx + dy * dy;
          const double inner = radius * 0.55;
          return r2 <= radius * radius && r2 >= inner * inner;
        }
      }
    };
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) hits += inside(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0) ? 1 : 0;
        const float cover = hits / 16.0f;
        for (int c = 0; c < 3; ++c) {
          float v = cover * fg[c] + (1.0f - cover) * bg[c] + static_cast<float>(0.02 * rng.normal());
          v = std::clamp(v, 0.0f, 1.0f);
          // quantize like an 8-bit source so datasets round-trip exactly
          const long q = std::lround(v * 255.0f);
          img[(static_cast<std::size_t>(c) * size + y) * size + x] = static_cast<float>(q) / 127.5f - 1.0f;
        }
      }
    out.push_back(img, label);
  }
  return out;
}

}  // namespace ddistill
