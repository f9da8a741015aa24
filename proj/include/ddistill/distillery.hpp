// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ddistill/data.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/error.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/schedule.hpp"

namespace ddistill {

struct Budget {
  enum class Mode { ipc, wall_clock };
  Mode mode = Mode::ipc;
  int ipc = 10;
  double seconds = 0.0;

  static Budget images_per_class(int n) { return Budget{Mode::ipc, n, 0.0}; }
  static Budget wall_clock(double s) { return Budget{Mode::wall_clock, 0, s}; }

  void validate() const {
    if (mode == Mode::ipc) {
      detail::require(ipc >= 0, "budget ipc must be >= 0");
    } else {
      detail::require(seconds >= 0, "budget seconds must be >= 0");
    }
  }

  std::string describe() const {
    return mode == Mode::ipc ? "ipc=" + std::to_string(ipc) : "seconds=" + std::to_string(seconds);
  }
};

struct DistillManifest {
  std::uint64_t checkpoint_fingerprint = 0;
  std::string sampler;
  std::uint64_t seed = 0;
  std::string budget;
  double wall_seconds = 0.0;
  double images_per_second = 0.0;
  std::vector<std::size_t> class_counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : class_counts) n += c;
    return n;
  }

  /// Provenance hash; timing fields are excluded so repeat runs of the same
  /// generator, sampler and seed compare equal.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a("ddistill.manifest");
    h = fnv1a(&checkpoint_fingerprint, sizeof checkpoint_fingerprint, h);
    h = fnv1a(sampler, h);
    h = fnv1a(&seed, sizeof seed, h);
    for (auto c : class_counts) {
      const std::uint64_t v = c;
      h = fnv1a(&v, sizeof v, h);
    }
    return h;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "checkpoint_fingerprint = " << hex64(checkpoint_fingerprint) << '\n'
       << "sampler = " << sampler << '\n'
       << "seed = " << seed << '\n'
       << "budget = " << budget << '\n'
       << "wall_seconds = " << wall_seconds << '\n'
       << "images_per_second = " << images_per_second << '\n'
       << "images = " << total() << '\n'
       << "class_counts =";
    for (auto c : class_counts) os << ' ' << c;
    os << '\n' << "manifest_fingerprint = " << hex64(fingerprint()) << '\n';
    return os.str();
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest '" + path + "'");
    out << to_text();
  }

  static std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }
};

struct DistilledDataset {
  LabeledImageBatch images;
  DistillManifest manifest;
};

using Clock = std::function<double()>;

inline double steady_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

/// Generates a labelled synthetic set in round-robin class order.
///
/// Item i gets label i mod C and sampler stream i, so the output is a pure
/// function of (model, cfg, item count). In wall-clock mode a batch is only
/// started when the slowest batch seen so far still fits in the remaining
/// allowance.
template <class T>
DistilledDataset distill(const Denoiser<T>& model, const NoiseSchedule& sched, const SamplerConfig& cfg,
                         const Budget& budget, std::uint64_t checkpoint_fingerprint = 0,
                         const Clock& clock = steady_seconds) {
  budget.validate();
  cfg.validate(sched);
  const int classes = model.config().num_classes;
  const double start = clock();

  DistilledDataset out;
  auto& m = out.manifest;
  m.checkpoint_fingerprint = checkpoint_fingerprint;
  m.sampler = cfg.describe();
  m.seed = cfg.seed;
  m.budget = budget.describe();

  const auto labels_for = [&](std::size_t first, std::size_t n) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>((first + i) % static_cast<std::size_t>(classes));
    return y;
  };

  if (budget.mode == Budget::Mode::ipc) {
    if (budget.ipc == 0) throw DataError("distill: ipc = 0 produces an empty dataset");
    const auto y = labels_for(0, static_cast<std::size_t>(budget.ipc) * classes);
    out.images = sample_class_batch(model, sched, std::span<const int>(y), cfg);
  } else {
    const std::size_t round = static_cast<std::size_t>(cfg.batch) * static_cast<std::size_t>(cfg.workers);
    out.images = LabeledImageBatch{};
    const auto& mc = model.config();
    out.images.channels = mc.channels, out.images.height = mc.height, out.images.width = mc.width;
    out.images.num_classes = classes;
    const double deadline = start + budget.seconds;
    double slowest = 0.0;
    for (;;) {
      const double now = clock();
      if (now + slowest > deadline) break;
      const std::size_t first = out.images.size();
      const auto y = labels_for(first, round);
      auto part = sample_class_batch(model, sched, std::span<const int>(y), cfg, first);
      const double done = clock();
      slowest = std::max(slowest, done - now);
      if (done > deadline && first == 0) break;  // nothing finished inside the allowance
      out.images.pixels.insert(out.images.pixels.end(), part.pixels.begin(), part.pixels.end());
      out.images.labels.insert(out.images.labels.end(), part.labels.begin(), part.labels.end());
    }
    if (out.images.empty()) {
      throw DataError("distill: budget of " + std::to_string(budget.seconds) +
                      " s is too small to complete a single batch");
    }
  }

  m.wall_seconds = clock() - start;
  m.class_counts = out.images.class_counts();
  m.images_per_second = m.wall_seconds > 0 ? static_cast<double>(out.images.size()) / m.wall_seconds : 0.0;
  return out;
}

/// One (|S|, accuracy) observation for size-versus-performance reporting.
struct RiskEntry {
  std::size_t size = 0;
  double accuracy = 0.0;
  std::uint64_t fingerprint = 0;
  bool repeat = false;
};

class RiskLedger {
 public:
  static constexpr const char* kHeader = "images,accuracy,manifest_fingerprint,repeat";

  const RiskEntry& add(const DistilledDataset& s, double accuracy) {
    return add(s.images.size(), accuracy, s.manifest.fingerprint());
  }

  const RiskEntry& add(std::size_t size, double accuracy, std::uint64_t fingerprint) {
    if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
      throw ConfigError("risk_proxy: accuracy " + std::to_string(accuracy) + " outside [0, 1]");
    }
    RiskEntry e{size, accuracy, fingerprint, false};
    for (auto& other : entries_) {
      if (other.fingerprint == fingerprint) other.repeat = e.repeat = true;
    }
    entries_.push_back(e);
    return entries_.back();
  }

  const std::vector<RiskEntry>& entries() const { return entries_; }

  /// Entries ordered by |S|; ties keep insertion order.
  std::vector<RiskEntry> sorted() const {
    auto v = entries_;
    std::stable_sort(v.begin(), v.end(), [](const RiskEntry& a, const RiskEntry& b) { return a.size < b.size; });
    return v;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << kHeader << '\n';
    for (const auto& e : sorted()) {
      os << e.size << ',' << e.accuracy << ',' << DistillManifest::hex64(e.fingerprint) << ',' << (e.repeat ? 1 : 0)
         << '\n';
    }
    return os.str();
  }

 private:
  std::vector<RiskEntry> entries_;
};

}  // namespace ddistill
