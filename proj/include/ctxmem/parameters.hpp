#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctxmem/error.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/tensor.hpp"

namespace ctxmem {

/// Named trainable arrays in registration order. Registration order is the
/// order of the optimizer state and of checkpoint payloads.
template <class T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    auto t = Tensor<T>::zeros(std::move(shape), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : entries_) out.push_back(t);
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
void init_xavier_uniform(Tensor<T>& w, Rng& rng) {
  const double fan_in = static_cast<double>(w.rows());
  const double fan_out = static_cast<double>(w.cols());
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& x : w.mutable_data()) x = T(uniform(rng, -limit, limit));
}

template <class T>
void init_normal(Tensor<T>& w, double stddev, Rng& rng) {
  for (auto& x : w.mutable_data()) x = T(stddev * standard_normal(rng));
}

template <class T>
void init_constant(Tensor<T>& w, T value) {
  for (auto& x : w.mutable_data()) x = value;
}

}  // namespace ctxmem
