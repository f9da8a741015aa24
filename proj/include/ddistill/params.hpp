// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ddistill/error.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/tensor.hpp"

namespace ddistill {

/// Ordered collection of uniquely named tensors.
///
/// Insertion order is the canonical order: checkpoints, optimizer state and
/// fingerprints all iterate it.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  Tensor<T>& add(const std::string& name, Shape shape, T fill = T(0)) {
    if (index_.contains(name)) throw ConfigError("duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Tensor<T>(std::move(shape), fill)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& get(const std::string& name) { return entries_.at(lookup(name)).value; }
  const Tensor<T>& get(const std::string& name) const { return entries_.at(lookup(name)).value; }
  T* data(const std::string& name) { return get(name).data(); }
  const T* data(const std::string& name) const { return get(name).data(); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Same names and shapes, zero-filled.
  ParamStore zeros_like() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.value.shape());
    return out;
  }

  void zero() {
    for (auto& e : entries_) e.value.fill(T(0));
  }

  bool same_layout(const ParamStore& other) const {
    if (other.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || entries_[i].value.shape() != other.entries_[i].value.shape())
        return false;
    }
    return true;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.shape()) = e.value.template cast<U>();
    return out;
  }

  /// Hash of names, shapes and values as stored in 32-bit floats.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a("ddistill.params");
    for (const auto& e : entries_) {
      h = fnv1a(e.name, h);
      for (auto d : e.value.shape()) {
        const auto v = static_cast<std::uint64_t>(d);
        h = fnv1a(&v, sizeof v, h);
      }
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const auto f = static_cast<float>(e.value[i]);
        h = fnv1a(&f, sizeof f, h);
      }
    }
    return h;
  }

  bool operator==(const ParamStore& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (!(entries_[i].value == other.entries_[i].value)) return false;
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown tensor '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Normal(0, std) truncated to two standard deviations.
template <class T>
void init_truncated_normal(Tensor<T>& t, Rng& rng, double std) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    double v;
    do {
      v = rng.normal();
    } while (v < -2.0 || v > 2.0);
    t[i] = static_cast<T>(v * std);
  }
}

}  // namespace ddistill
