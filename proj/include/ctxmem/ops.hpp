#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/error.hpp"
#include "ctxmem/tensor.hpp"

namespace ctxmem {

enum class Activation { relu, sigmoid, tanh, identity };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

namespace kernel {

// c[r x n] += a[r x k] * b[k x n]
template <class T>
void gemm_nn(std::size_t r, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < r; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[r x n] += a[r x k] * b[n x k]^T
template <class T>
void gemm_nt(std::size_t r, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k x n] += a[r x k]^T * b[r x n]
template <class T>
void gemm_tn(std::size_t r, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace kernel

namespace detail {

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() > 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " +
                     shape_string(t.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class T>
std::vector<T>* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t r = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<T> out(r * n, T(0));
  kernel::gemm_nn(r, k, n, a.data().data(), b.data().data(), out.data());
  return make_result<T>({r, n}, std::move(out), {&a, &b},
                        [r, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    if (auto* ga = detail::grad_of(self, 0)) {
      kernel::gemm_nt(r, n, k, g, bv, ga->data());
    }
    if (auto* gb = detail::grad_of(self, 1)) {
      kernel::gemm_tn(r, k, n, av, g, gb->data());
    }
  });
}

/// a * b^T without materializing the transpose.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t r = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " +
                     shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(r * n, T(0));
  kernel::gemm_nt(r, k, n, a.data().data(), b.data().data(), out.data());
  return make_result<T>({r, n}, std::move(out), {&a, &b},
                        [r, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    if (auto* ga = detail::grad_of(self, 0)) {
      kernel::gemm_nn(r, n, k, g, bv, ga->data());
    }
    if (auto* gb = detail::grad_of(self, 1)) {
      kernel::gemm_tn(r, n, k, g, av, gb->data());
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c);
  const auto v = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result<T>({c, r}, std::move(out), {&a}, [r, c](Node<T>& self) {
    auto* ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        (*ga)[i * c + j] += self.grad[j * r + i];
  });
}

/// x * w + b, with b broadcast over rows. b may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_matrix(x, "linear");
  const std::size_t r = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k) {
    throw ShapeError("linear: input " + shape_string(x.shape()) +
                     " does not match weight " + shape_string(w.shape()));
  }
  if (!b.defined()) return matmul(x, w);
  if (b.size() != n) {
    throw ShapeError("linear: bias " + shape_string(b.shape()) +
                     " does not match weight " + shape_string(w.shape()));
  }
  std::vector<T> out(r * n);
  const auto bv = b.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  kernel::gemm_nn(r, k, n, x.data().data(), w.data().data(), out.data());
  return make_result<T>({r, n}, std::move(out), {&x, &w, &b},
                        [r, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (auto* gx = detail::grad_of(self, 0)) {
      kernel::gemm_nt(r, n, k, g, self.inputs[1]->value.data(), gx->data());
    }
    if (auto* gw = detail::grad_of(self, 1)) {
      kernel::gemm_tn(r, k, n, self.inputs[0]->value.data(), g, gw->data());
    }
    if (auto* gb = detail::grad_of(self, 2)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b},
                        [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b},
                        [](Node<T>& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b},
                        [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * av[i];
  });
}

/// scale * x + shift
template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift = T(0)) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [scale](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i)
      (*g)[i] += scale * self.grad[i];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " to " +
                     shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&x},
                        [](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xv[i] > T(0) ? xv[i] : T(0);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = T(1) / (T(1) + std::exp(-xv[i]));
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Activation::identity:
      std::copy(xv.begin(), xv.end(), out.begin());
      break;
  }
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [kind](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const auto& y = self.value;
    const auto& xin = self.inputs[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      T d = T(1);
      switch (kind) {
        case Activation::relu: d = xin[i] > T(0) ? T(1) : T(0); break;
        case Activation::sigmoid: d = y[i] * (T(1) - y[i]); break;
        case Activation::tanh: d = T(1) - y[i] * y[i]; break;
        case Activation::identity: break;
      }
      (*g)[i] += d * self.grad[i];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::sigmoid);
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::tanh); }

/// Row-wise softmax with max subtraction. `column_mask[j]` excludes column j
/// from every row; `causal` excludes columns j > i. Excluded entries are
/// exactly 0; a row with every column excluded is all zeros.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask* column_mask = nullptr,
                       bool causal = false) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (column_mask && column_mask->size() != c) {
    throw ShapeError("softmax_rows: mask of length " +
                     std::to_string(column_mask->size()) + " for " +
                     shape_string(x.shape()));
  }
  std::vector<T> out(r * c, T(0));
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T* o = out.data() + i * c;
    auto valid = [&](std::size_t j) {
      return !(column_mask && (*column_mask)[j]) && !(causal && j > i);
    };
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (valid(j)) mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    accum_t<T> total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!valid(j)) continue;
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    const T inv = T(1 / total);
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [r, c](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t i = 0; i < r; ++i) {
      accum_t<T> dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*g)[i * c + j] += y[i * c + j] * (dy[i * c + j] - T(dot));
    }
  });
}

/// Per-row normalization over the last axis followed by gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T epsilon = T(1e-6)) {
  const std::size_t d = x.cols();
  const std::size_t r = x.size() / d;
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) +
                     " / bias " + shape_string(bias.shape()) + " for input " +
                     shape_string(x.shape()));
  }
  std::vector<T> out(x.size());
  std::vector<T> normalized(x.size());
  std::vector<T> inv_std(r);
  const auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * d;
    accum_t<T> mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<accum_t<T>>(d);
    accum_t<T> var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const accum_t<T> dev = row[j] - mean;
      var += dev * dev;
    }
    var /= static_cast<accum_t<T>>(d);
    const accum_t<T> is = 1 / std::sqrt(var + epsilon);
    inv_std[i] = T(is);
    for (std::size_t j = 0; j < d; ++j) {
      const T n = T((row[j] - mean) * is);
      normalized[i * d + j] = n;
      out[i * d + j] = n * gv[j] + bv[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [r, d, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Node<T>& self) {
        const T* dy = self.grad.data();
        const auto& gv = self.inputs[1]->value;
        if (auto* gg = detail::grad_of(self, 1))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j)
              (*gg)[j] += dy[i * d + j] * normalized[i * d + j];
        if (auto* gb = detail::grad_of(self, 2))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[i * d + j];
        if (auto* gx = detail::grad_of(self, 0)) {
          for (std::size_t i = 0; i < r; ++i) {
            accum_t<T> mean_dn = 0, mean_dn_n = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const accum_t<T> dn = dy[i * d + j] * gv[j];
              mean_dn += dn;
              mean_dn_n += dn * normalized[i * d + j];
            }
            mean_dn /= static_cast<accum_t<T>>(d);
            mean_dn_n /= static_cast<accum_t<T>>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const accum_t<T> dn = dy[i * d + j] * gv[j];
              (*gx)[i * d + j] += T(
                  inv_std[i] * (dn - mean_dn - normalized[i * d + j] * mean_dn_n));
            }
          }
        }
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  accum_t<T> total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({}, {T(total)}, {&x}, [](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (auto& v : *g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  accum_t<T> total = 0;
  for (T v : x.data()) total += v;
  const auto n = static_cast<accum_t<T>>(x.size());
  return make_result<T>({}, {T(total / n)}, {&x}, [n](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const T share = T(self.grad[0] / n);
    for (auto& v : *g) v += share;
  });
}

/// Mean over the cells of a matrix whose column is not masked.
template <class T>
Tensor<T> masked_mean(const Tensor<T>& x, const Mask* column_mask) {
  if (!column_mask) return mean(x);
  detail::require_matrix(x, "masked_mean");
  const std::size_t r = x.rows(), c = x.cols();
  if (column_mask->size() != c) {
    throw ShapeError("masked_mean: mask of length " +
                     std::to_string(column_mask->size()) + " for " +
                     shape_string(x.shape()));
  }
  std::size_t valid = 0;
  for (bool m : *column_mask) valid += m ? 0 : 1;
  accum_t<T> total = 0;
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      if (!(*column_mask)[j]) total += xv[i * c + j];
  const auto n = static_cast<accum_t<T>>(std::max<std::size_t>(1, valid * r));
  return make_result<T>({}, {T(total / n)}, {&x},
                        [r, c, n, mask = *column_mask](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const T share = T(self.grad[0] / n);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (!mask[j]) (*g)[i * c + j] += share;
  });
}

/// Sum of same-shaped tensors.
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("add_n: no inputs");
  std::vector<T> out(xs[0].size(), T(0));
  for (const auto& x : xs) {
    detail::require_same_shape(x, xs[0], "add_n");
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  return make_result<T>(xs[0].shape(), std::move(out), xs, [](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

/// sum_j weights[j] * xs[j] for same-shaped xs and a weight vector of size
/// xs.size().
template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs,
                       const Tensor<T>& weights) {
  if (xs.empty() || weights.size() != xs.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) +
                     " inputs for weights " + shape_string(weights.shape()));
  }
  std::vector<T> out(xs[0].size(), T(0));
  const auto w = weights.data();
  for (std::size_t j = 0; j < xs.size(); ++j) {
    detail::require_same_shape(xs[j], xs[0], "weighted_sum");
    const auto v = xs[j].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[j] * v[i];
  }
  std::vector<Tensor<T>> inputs = xs;
  inputs.push_back(weights);
  return make_result<T>(xs[0].shape(), std::move(out), inputs,
                        [m = xs.size()](Node<T>& self) {
    const auto& w = self.inputs[m]->value;
    auto* gw = detail::grad_of(self, m);
    for (std::size_t j = 0; j < m; ++j) {
      const auto& x = self.inputs[j]->value;
      if (auto* g = detail::grad_of(self, j))
        for (std::size_t i = 0; i < g->size(); ++i)
          (*g)[i] += w[j] * self.grad[i];
      if (gw) {
        accum_t<T> dot = 0;
        for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * self.grad[i];
        (*gw)[j] += T(dot);
      }
    }
  });
}

/// Concatenates matrices with equal row counts along the column axis.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = xs[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& x : xs) {
    detail::require_matrix(x, "concat_cols");
    if (x.rows() != r) {
      throw ShapeError("concat_cols: " + shape_string(xs[0].shape()) +
                       " vs " + shape_string(x.shape()));
    }
    offsets.push_back(total);
    total += x.cols();
  }
  std::vector<T> out(r * total);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t c = xs[k].cols();
    const auto v = xs[k].data();
    for (std::size_t i = 0; i < r; ++i)
      std::copy(v.begin() + i * c, v.begin() + (i + 1) * c,
                out.begin() + i * total + offsets[k]);
  }
  return make_result<T>({r, total}, std::move(out), xs,
                        [r, total, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* g = detail::grad_of(self, k);
      if (!g) continue;
      const std::size_t c = self.inputs[k]->value.size() / std::max<std::size_t>(r, 1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          (*g)[i * c + j] += self.grad[i * total + offsets[k] + j];
    }
  });
}

/// Stacks matrices with equal column counts along the row axis.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = xs[0].cols();
  std::size_t rows = 0;
  for (const auto& x : xs) {
    detail::require_matrix(x, "concat_rows");
    if (x.cols() != c) {
      throw ShapeError("concat_rows: " + shape_string(xs[0].shape()) +
                       " vs " + shape_string(x.shape()));
    }
    rows += x.rows();
  }
  std::vector<T> out;
  out.reserve(rows * c);
  for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
  return make_result<T>({rows, c}, std::move(out), xs, [](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[offset + i];
      offset += n;
    }
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t c = x.cols();
  if (begin > end || end > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") of " + shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin() + begin * c, x.data().begin() + end * c);
  return make_result<T>({end - begin, c}, std::move(out), {&x},
                        [begin, c](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      (*g)[begin * c + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols(), w = end - begin;
  if (begin > end || end > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") of " + shape_string(x.shape()));
  }
  std::vector<T> out(r * w);
  const auto v = x.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy(v.begin() + i * c + begin, v.begin() + i * c + end,
              out.begin() + i * w);
  return make_result<T>({r, w}, std::move(out), {&x},
                        [r, c, w, begin](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j)
        (*g)[i * c + begin + j] += self.grad[i * w + j];
  });
}

/// Gathers rows of `table` by id.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) +
                          " outside vocabulary of size " +
                          std::to_string(vocab));
    }
    std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d,
              out.begin() + i * d);
  }
  return make_result<T>({ids.size(), d}, std::move(out), {&table},
                        [d, ids = std::vector<int>(ids.begin(), ids.end())](
                            Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        (*g)[ids[i] * d + j] += self.grad[i * d + j];
  });
}

/// Inverted dropout: surviving entries are scaled by 1/(1-p).
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> scale(x.size());
  for (auto& s : scale) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    s = u < p ? T(0) : keep_scale;
  }
  std::vector<T> out(x.size());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * scale[i];
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [scale = std::move(scale)](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += scale[i] * self.grad[i];
  });
}

/// Scaled dot-product attention over `heads` column blocks of q, k and v,
/// concatenated back to [Lq x d]. key_mask marks padded keys; causal masks
/// keys after the query position. When `weights_out` is given it receives the
/// attention probabilities laid out [head][query][key].
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                       const Tensor<T>& v, std::size_t heads,
                                       const Mask* key_mask = nullptr,
                                       bool causal = false,
                                       std::vector<T>* weights_out = nullptr) {
  detail::require_matrix(q, "attention");
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) {
    throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " +
                     shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  if (key_mask && key_mask->size() != lk) {
    throw ShapeError("attention: key mask of length " +
                     std::to_string(key_mask->size()) + " for " +
                     std::to_string(lk) + " keys");
  }
  const std::size_t dk = d / heads;
  const T scale = T(1) / std::sqrt(T(dk));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  std::vector<T> probs(heads * lq * lk, T(0));
  std::vector<T> out(lq * d, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t i = 0; i < lq; ++i) {
      T* p = probs.data() + (h * lq + i) * lk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if ((key_mask && (*key_mask)[j]) || (causal && j > i)) continue;
        T dot = T(0);
        for (std::size_t t = 0; t < dk; ++t)
          dot += qv[i * d + off + t] * kv[j * d + off + t];
        p[j] = dot * scale;
        mx = std::max(mx, p[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      accum_t<T> total = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        if ((key_mask && (*key_mask)[j]) || (causal && j > i)) continue;
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      const T inv = T(1 / total);
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < lk; ++j) {
        p[j] *= inv;
        if (p[j] == T(0)) continue;
        const T* vj = vv + j * d + off;
        for (std::size_t t = 0; t < dk; ++t) o[t] += p[j] * vj[t];
      }
    }
  }
  if (weights_out) *weights_out = probs;
  return make_result<T>(
      {lq, d}, std::move(out), {&q, &k, &v},
      [lq, lk, d, heads, dk, scale, probs = std::move(probs)](Node<T>& self) {
        const T* qv = self.inputs[0]->value.data();
        const T* kv = self.inputs[1]->value.data();
        const T* vv = self.inputs[2]->value.data();
        auto* gq = detail::grad_of(self, 0);
        auto* gk = detail::grad_of(self, 1);
        auto* gv = detail::grad_of(self, 2);
        const T* dout = self.grad.data();
        std::vector<T> dscore(lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dk;
          for (std::size_t i = 0; i < lq; ++i) {
            const T* p = probs.data() + (h * lq + i) * lk;
            const T* go = dout + i * d + off;
            accum_t<T> dot = 0;
            for (std::size_t j = 0; j < lk; ++j) {
              T dp = T(0);
              if (p[j] != T(0)) {
                const T* vj = vv + j * d + off;
                for (std::size_t t = 0; t < dk; ++t) dp += go[t] * vj[t];
              }
              dscore[j] = dp;
              dot += dp * p[j];
            }
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == T(0)) continue;
              if (gv) {
                T* gvj = gv->data() + j * d + off;
                for (std::size_t t = 0; t < dk; ++t) gvj[t] += p[j] * go[t];
              }
              const T ds = p[j] * (dscore[j] - T(dot)) * scale;
              if (gq) {
                T* gqi = gq->data() + i * d + off;
                const T* kj = kv + j * d + off;
                for (std::size_t t = 0; t < dk; ++t) gqi[t] += ds * kj[t];
              }
              if (gk) {
                T* gkj = gk->data() + j * d + off;
                const T* qi = qv + i * d + off;
                for (std::size_t t = 0; t < dk; ++t) gkj[t] += ds * qi[t];
              }
            }
          }
        }
      });
}

}  // namespace ctxmem
