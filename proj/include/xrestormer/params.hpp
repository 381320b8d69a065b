#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xrestormer/tensor.hpp"

namespace xrestormer {

/// Named trainable tensors in registration order. Names are hierarchical,
/// dot-separated and unique.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add(std::string name, Tensor<T> t) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return entries_[it->second].second;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic parameter initialiser: truncated normal (rejection outside
/// +-2 std), constants for norms and temperatures.
template <class T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed, double std = 0.02) : rng_(seed), std_(std) {}

  /// Produces zero tensors of the requested shapes; for shape enumeration.
  static Initializer shapes_only() {
    Initializer init(0);
    init.draw_ = false;
    return init;
  }

  Tensor<T> trunc_normal(Shape shape) {
    std::normal_distribution<double> dist(0.0, std_);
    Tensor<T> t(std::move(shape));
    if (!draw_) return t;
    for (auto& v : t.data()) {
      double s;
      do {
        s = dist(rng_);
      } while (std::abs(s) > 2.0 * std_);
      v = static_cast<T>(s);
    }
    return t;
  }

  static Tensor<T> constant(Shape shape, T value) { return Tensor<T>(std::move(shape), value); }

 private:
  std::mt19937_64 rng_;
  double std_;
  bool draw_ = true;
};

}  // namespace xrestormer
