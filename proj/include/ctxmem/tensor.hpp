#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctxmem/error.hpp"

namespace ctxmem {

using Shape = std::vector<std::size_t>;

// true marks a padded (invalid) position.
using Mask = std::vector<bool>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Reductions accumulate in at least double precision.
template <class T>
using accum_t = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same node. Values are treated
/// as immutable once an operation has produced them; only leaves (parameters)
/// are mutated, by initializers and the optimizer.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_size(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  // Rank-0 and rank-1 tensors behave as a single row.
  std::size_t rows() const {
    return rank() < 2 ? 1 : node_->shape[rank() - 2];
  }
  std::size_t cols() const {
    return rank() == 0 ? 1 : node_->shape[rank() - 1];
  }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " +
                          shape_string(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the result node of an operation. The backward closure is kept only
/// when recording is enabled and some input requires a gradient.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  if (grad_enabled()) {
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto* in : inputs) node->inputs.push_back(in->handle());
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  if (grad_enabled()) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<T>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.handle());
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

/// Topologically ordered record of the operations leading to a loss.
template <class T>
class Tape {
 public:
  static Tape record(const Tensor<T>& loss) {
    Tape tape;
    if (!loss.requires_grad()) return tape;
    std::unordered_set<Node<T>*> visited;
    // Iterative post-order DFS so deep graphs do not exhaust the stack.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    visited.insert(&loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return nodes_; }
  bool empty() const { return nodes_.empty(); }

 private:
  std::vector<Node<T>*> nodes_;  // inputs precede consumers
};

/// Runs the adjoint pass over a recorded tape. Leaf gradients accumulate
/// across calls; intermediate gradients are recomputed each time.
template <class T>
void backward(const Tensor<T>& loss, const Tape<T>& tape) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.shape()));
  }
  if (tape.empty()) return;
  for (Node<T>* node : tape.nodes()) {
    if (!node->leaf) node->grad.assign(node->value.size(), T(0));
  }
  loss.node().grad_buffer()[0] += T(1);
  auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward) node->backward(*node);
  }
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.shape()));
  }
  backward(loss, Tape<T>::record(loss));
}

}  // namespace ctxmem
