// Named, ordered parameter storage with seeded initialization.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "calibformer/autograd/tensor.hpp"

namespace calibformer {

template <class S>
class ParamStore {
 public:
  using Var = ag::Var<S>;

  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Var normal(const std::string& name, ag::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<S> v(ag::numel(shape));
    for (auto& x : v) x = static_cast<S>(dist(rng_));
    return add(name, std::move(shape), std::move(v));
  }

  /// He-normal for a ReLU-followed layer with the given fan-in.
  Var he(const std::string& name, ag::Shape shape, int fan_in) {
    return normal(name, std::move(shape), std::sqrt(2.0 / fan_in));
  }

  /// Glorot-uniform for linear layers [out, in].
  Var glorot(const std::string& name, int out, int in) {
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<S> v(static_cast<std::size_t>(out) * in);
    for (auto& x : v) x = static_cast<S>(dist(rng_));
    return add(name, {out, in}, std::move(v));
  }

  Var constant(const std::string& name, ag::Shape shape, double value) {
    return add(name, shape, std::vector<S>(ag::numel(shape), static_cast<S>(value)));
  }

  Var add(const std::string& name, ag::Shape shape, std::vector<S> value) {
    if (index_.count(name)) throw Error(ErrorCode::kConfig, "duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var::parameter(std::move(shape), std::move(value)));
    return entries_.back().second;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::kConfig, "unknown parameter " + name);
    return entries_[it->second].second;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace calibformer
