#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/batching.hpp"
#include "ctxmem/config.hpp"
#include "ctxmem/corpus.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/model.hpp"
#include "ctxmem/ops.hpp"
#include "ctxmem/parameters.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/tensor.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem {

/// Summed per-token KL divergence from the smoothed target distribution
/// (1 - eps on the gold id, eps / (V - 1) elsewhere) to softmax(logits).
/// Rows whose `pad` entry is set are ignored.
template <class T>
Tensor<T> smoothed_kl_sum(const Tensor<T>& logits, std::span<const int> targets, double smoothing,
                          const Mask* pad = nullptr) {
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw ContractError("label smoothing must lie in [0, 1), got " + std::to_string(smoothing));
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  if (pad && pad->size() != rows) throw ShapeError("loss: pad mask length mismatch");
  const double q_gold = vocab > 1 ? 1.0 - smoothing : 1.0;
  const double q_other = vocab > 1 ? smoothing / static_cast<double>(vocab - 1) : 0.0;
  const double entropy_gold = q_gold > 0 ? q_gold * std::log(q_gold) : 0.0;
  const double entropy_other = q_other > 0 ? q_other * std::log(q_other) : 0.0;

  const auto x = logits.data();
  std::vector<T> probs(rows * vocab, T(0));
  std::vector<int> gold(rows, -1);
  accum_t<T> total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (pad && (*pad)[r]) continue;
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ContractError("loss: target id " + std::to_string(t) + " outside vocabulary of size " +
                          std::to_string(vocab));
    }
    gold[r] = t;
    const T* row = x.data() + r * vocab;
    T mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    accum_t<T> z = 0, sum_logit = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const accum_t<T> e = std::exp(static_cast<accum_t<T>>(row[v] - mx));
      probs[r * vocab + v] = T(e);
      z += e;
      sum_logit += row[v];
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] = T(probs[r * vocab + v] / z);
    const accum_t<T> log_z = mx + std::log(z);
    const accum_t<T> log_p_gold = row[t] - log_z;
    const accum_t<T> sum_log_p = sum_logit - vocab * log_z;
    // sum_v q_v log q_v - sum_v q_v log p_v
    total += entropy_gold + (vocab - 1) * entropy_other - q_gold * log_p_gold -
             q_other * (sum_log_p - log_p_gold);
  }
  return make_result<T>({}, {T(total)}, {&logits},
                        [vocab, q_gold, q_other, probs = std::move(probs),
                         gold = std::move(gold)](Node<T>& self) {
    auto* g = detail::grad_of(self, 0);
    const T up = self.grad[0];
    for (std::size_t r = 0; r < gold.size(); ++r) {
      if (gold[r] < 0) continue;
      for (std::size_t v = 0; v < vocab; ++v) {
        const double q = static_cast<int>(v) == gold[r] ? q_gold : q_other;
        (*g)[r * vocab + v] += up * (probs[r * vocab + v] - T(q));
      }
    }
  });
}

/// Mean of smoothed_kl_sum over the non-padded rows.
template <class T>
Tensor<T> label_smoothed_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                       double smoothing, const Mask* pad = nullptr) {
  std::size_t count = targets.size();
  if (pad) {
    count = 0;
    for (bool p : *pad) count += p ? 0 : 1;
  }
  auto total = smoothed_kl_sum(logits, targets, smoothing, pad);
  return affine(total, T(1) / T(std::max<std::size_t>(1, count)));
}

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(std::uint64_t step, std::size_t d, std::size_t warmup) {
  if (step < 1) throw ContractError("noam_lr: step must be at least 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <class T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void reset(const ParameterStore<T>& store) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& [name, t] : store.entries()) {
      m.emplace_back(t.size(), T(0));
      v.emplace_back(t.size(), T(0));
    }
  }
};

/// Bias-corrected Adam update in place, then clears every gradient. A
/// parameter without a gradient is treated as having a zero gradient.
template <class T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr) {
  const auto& entries = store.entries();
  if (state.m.size() != entries.size()) state.reset(store);
  for (const auto& [name, t] : entries) {
    if (!t.has_grad()) continue;
    for (T g : t.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  using A = accum_t<T>;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor<T> t = entries[k].second;
    auto values = t.mutable_data();
    const bool has = t.has_grad();
    const auto grad = t.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const A g = has ? A(grad[i]) : A(0);
      const A mi = A(o.beta1) * m[i] + A(1 - o.beta1) * g;
      const A vi = A(o.beta2) * v[i] + A(1 - o.beta2) * g * g;
      m[i] = T(mi);
      v[i] = T(vi);
      const A update = A(lr) * (mi / A(c1)) / (std::sqrt(vi / A(c2)) + A(o.eps));
      values[i] = T(A(values[i]) - update);
    }
  }
  store.zero_grad();
}

/// Rescales all gradients so that their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : store.entries())
    if (t.has_grad())
      for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = T(max_norm / norm);
    for (const auto& [name, t] : store.entries()) {
      if (!t.has_grad()) continue;
      Tensor<T> handle = t;
      for (auto& g : handle.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

/// Decoder input for a target sentence: BOS followed by all but the last id.
inline std::vector<int> shift_right(std::span<const int> target) {
  std::vector<int> out{kBosId};
  if (!target.empty()) out.insert(out.end(), target.begin(), target.end() - 1);
  return out;
}

inline constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;

/// Training loop state: optimizer, dropout stream and position in the
/// epoch's batch schedule. Epoch e is batched with seed ^ e.
template <class T>
class Trainer {
 public:
  Trainer(ContextualTransformer<T>& model, RunConfig config, const DocumentCorpus& corpus)
      : model_(model), config_(std::move(config)), corpus_(corpus),
        rng_(mix_seed(config_.seed, kDropoutStream)) {
    optimizer_.reset(model_.parameters());
  }

  void set_warning_stream(std::ostream* out) { warnings_ = out; }

  /// Forward, backward and one Adam step on a batch. Returns the batch loss:
  /// summed token KL over the number of target tokens.
  double train_step(const Batch& batch) {
    const double tokens = static_cast<double>(std::max<std::size_t>(1, batch.target_tokens()));
    const DropoutContext drop{config_.transformer.dropout, &rng_};
    const std::size_t m = model_.memory_size();
    double loss = 0;
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto source = batch.source_row(b);
      const auto target = batch.target_row(b);
      const auto contexts = m > 0 ? batch.contexts(b) : std::vector<std::vector<int>>{};
      auto encoded = model_.encode(source, contexts, drop);
      auto logits = model_.logits(shift_right(target), encoded, drop);
      auto sentence_loss = affine(smoothed_kl_sum(logits, target, config_.label_smoothing), T(1 / tokens));
      backward(sentence_loss);
      loss += static_cast<double>(sentence_loss.item());
    }
    if (!std::isfinite(loss))
      throw NumericError("non-finite loss at step " + std::to_string(optimizer_.step + 1));
    if (config_.clip_norm > 0) clip_grad_norm(model_.parameters(), config_.clip_norm);
    last_lr_ = noam_lr(optimizer_.step + 1, config_.transformer.model_dim, config_.warmup_steps) *
               config_.lr_scale;
    adam_step(model_.parameters(), optimizer_, last_lr_);
    return loss;
  }

  /// Trains on the next scheduled batch.
  double step() {
    if (cursor_ >= schedule().size()) {
      ++epoch_;
      cursor_ = 0;
      schedule_.clear();
      scheduled_epoch_ = UINT64_MAX;
    }
    const Batch& batch = schedule()[cursor_];
    ++cursor_;
    return train_step(batch);
  }

  const std::vector<Batch>& schedule() {
    if (scheduled_epoch_ != epoch_) {
      schedule_ = make_batches(corpus_, config_.context_mode, model_.memory_size(),
                               config_.batch_tokens, config_.seed ^ epoch_, warnings_);
      warnings_ = nullptr;
      if (schedule_.empty()) throw IngestionError("no training sentence fits the batch_tokens budget");
      scheduled_epoch_ = epoch_;
    }
    return schedule_;
  }

  std::uint64_t global_step() const { return optimizer_.step; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t cursor() const { return cursor_; }
  double last_lr() const { return last_lr_; }
  const RunConfig& config() const { return config_; }
  AdamState<T>& optimizer() { return optimizer_; }
  const AdamState<T>& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  ContextualTransformer<T>& model() { return model_; }
  const ContextualTransformer<T>& model() const { return model_; }

  void set_position(std::uint64_t epoch, std::uint64_t cursor) {
    epoch_ = epoch;
    cursor_ = cursor;
    schedule_.clear();
    scheduled_epoch_ = UINT64_MAX;
  }

 private:
  ContextualTransformer<T>& model_;
  RunConfig config_;
  const DocumentCorpus& corpus_;
  Rng rng_;
  AdamState<T> optimizer_;
  std::uint64_t epoch_ = 0;
  std::uint64_t cursor_ = 0;
  std::vector<Batch> schedule_;
  std::uint64_t scheduled_epoch_ = UINT64_MAX;
  double last_lr_ = 0;
  std::ostream* warnings_ = &std::cerr;
};

}  // namespace ctxmem
