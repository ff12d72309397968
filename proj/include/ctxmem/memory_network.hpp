#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/error.hpp"
#include "ctxmem/ops.hpp"
#include "ctxmem/parameters.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/tensor.hpp"
#include "ctxmem/transformer.hpp"

namespace ctxmem {

enum class MergeKind { concatenation, average, weighted_average, flat, contextual_rnn };
enum class RnnCore { rnn, lstm, gru };
enum class RnnDirection { forward, backward, bidirectional };

inline MergeKind parse_merge_kind(std::string_view name) {
  if (name == "concatenation") return MergeKind::concatenation;
  if (name == "average") return MergeKind::average;
  if (name == "weighted_average") return MergeKind::weighted_average;
  if (name == "flat") return MergeKind::flat;
  if (name == "contextual_rnn") return MergeKind::contextual_rnn;
  throw ConfigError("unknown merge strategy '" + std::string(name) + "'");
}

inline std::string to_string(MergeKind kind) {
  switch (kind) {
    case MergeKind::concatenation: return "concatenation";
    case MergeKind::average: return "average";
    case MergeKind::weighted_average: return "weighted_average";
    case MergeKind::flat: return "flat";
    case MergeKind::contextual_rnn: return "contextual_rnn";
  }
  return "?";
}

inline RnnCore parse_rnn_core(std::string_view name) {
  if (name == "rnn") return RnnCore::rnn;
  if (name == "lstm") return RnnCore::lstm;
  if (name == "gru") return RnnCore::gru;
  throw ConfigError("unknown rnn core '" + std::string(name) + "'");
}

inline std::string to_string(RnnCore core) {
  switch (core) {
    case RnnCore::rnn: return "rnn";
    case RnnCore::lstm: return "lstm";
    case RnnCore::gru: return "gru";
  }
  return "?";
}

inline RnnDirection parse_rnn_direction(std::string_view name) {
  if (name == "forward") return RnnDirection::forward;
  if (name == "backward") return RnnDirection::backward;
  if (name == "bidirectional") return RnnDirection::bidirectional;
  throw ConfigError("unknown rnn direction '" + std::string(name) + "'");
}

inline std::string to_string(RnnDirection direction) {
  switch (direction) {
    case RnnDirection::forward: return "forward";
    case RnnDirection::backward: return "backward";
    case RnnDirection::bidirectional: return "bidirectional";
  }
  return "?";
}

/// The rnn fields are only consulted when kind is contextual_rnn.
struct MergeStrategy {
  MergeKind kind = MergeKind::contextual_rnn;
  RnnCore core = RnnCore::gru;
  RnnDirection direction = RnnDirection::forward;
  Activation rnn_activation = Activation::tanh;  // plain rnn core only
};

struct MemoryConfig {
  std::size_t memory_size = 3;
  MergeStrategy merge;
  // Constant gate value; 1 passes the source encoding through unchanged.
  std::optional<double> gate_override;
  bool share_context_encoder = false;

  void validate() const {
    if (gate_override && (*gate_override < 0.0 || *gate_override > 1.0))
      throw ConfigError("gate_override must lie in [0, 1]");
    if (merge.kind == MergeKind::contextual_rnn && merge.core != RnnCore::rnn &&
        merge.rnn_activation != Activation::tanh)
      throw ConfigError("rnn_activation applies to the rnn core only");
  }
};

template <class T>
struct RnnParams {
  Tensor<T> w;   // [d x gates*d]
  Tensor<T> u;   // [d x gates*d]
  Tensor<T> bx;  // [gates*d]
  Tensor<T> bh;
};

template <class T>
struct ContextGate {
  Tensor<T> weight;  // [2d x d]
  Tensor<T> bias;    // [d]
  std::optional<double> override_value;
};

template <class T>
struct MemoryParams {
  EncoderLayerParams<T> context_encoder;
  EncoderLayerParams<T> context_block;  // turns the merged a into H_context
  Tensor<T> concat_weight;              // [m*d x d]
  Tensor<T> concat_bias;
  RnnParams<T> rnn_forward;
  RnnParams<T> rnn_backward;
  Tensor<T> bidirectional_weight;  // [2d x d]
  Tensor<T> bidirectional_bias;
  ContextGate<T> gate;
};

inline std::size_t rnn_gate_count(RnnCore core) {
  switch (core) {
    case RnnCore::rnn: return 1;
    case RnnCore::gru: return 3;
    case RnnCore::lstm: return 4;
  }
  return 1;
}

template <class T>
RnnParams<T> make_rnn_params(ParameterStore<T>& store, const std::string& prefix, RnnCore core,
                             std::size_t d, Rng& rng) {
  const std::size_t width = rnn_gate_count(core) * d;
  RnnParams<T> p;
  p.w = detail::add_weight(store, prefix + ".w", d, width, rng);
  p.u = detail::add_weight(store, prefix + ".u", d, width, rng);
  p.bx = detail::add_bias(store, prefix + ".bx", width);
  p.bh = detail::add_bias(store, prefix + ".bh", width);
  return p;
}

/// Registers the memory-network parameters. Only the pieces the configured
/// strategy uses are created; nothing is registered when m = 0.
template <class T>
MemoryParams<T> make_memory_params(ParameterStore<T>& store, const TransformerConfig& tcfg,
                                   const MemoryConfig& mcfg, const TransformerParams<T>& transformer,
                                   Rng& rng) {
  mcfg.validate();
  MemoryParams<T> p;
  p.gate.override_value = mcfg.gate_override;
  const std::size_t m = mcfg.memory_size, d = tcfg.model_dim;
  if (m == 0) return p;
  if (mcfg.share_context_encoder) {
    p.context_encoder = transformer.encoder.at(0);
  } else {
    p.context_encoder = make_encoder_layer_params(store, "memory.context_encoder", tcfg, rng);
  }
  p.context_block = make_encoder_layer_params(store, "memory.context_block", tcfg, rng);
  switch (mcfg.merge.kind) {
    case MergeKind::concatenation: {
      // Block average [I/m; ...; I/m], so that it starts out as average merging.
      p.concat_weight = store.add("memory.concat.weight", {m * d, d});
      auto w = p.concat_weight.mutable_data();
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < d; ++i) w[(j * d + i) * d + i] = T(1.0 / static_cast<double>(m));
      p.concat_bias = detail::add_bias(store, "memory.concat.bias", d);
      break;
    }
    case MergeKind::contextual_rnn: {
      const auto dir = mcfg.merge.direction;
      if (dir != RnnDirection::backward)
        p.rnn_forward = make_rnn_params(store, "memory.rnn.forward", mcfg.merge.core, d, rng);
      if (dir != RnnDirection::forward)
        p.rnn_backward = make_rnn_params(store, "memory.rnn.backward", mcfg.merge.core, d, rng);
      if (dir == RnnDirection::bidirectional) {
        p.bidirectional_weight = detail::add_weight(store, "memory.rnn.project.weight", 2 * d, d, rng);
        p.bidirectional_bias = detail::add_bias(store, "memory.rnn.project.bias", d);
      }
      break;
    }
    default:
      break;
  }
  p.gate.weight = detail::add_weight(store, "memory.gate.weight", 2 * d, d, rng);
  p.gate.bias = detail::add_bias(store, "memory.gate.bias", d);
  return p;
}

template <class T>
struct InterSentenceAttention {
  Tensor<T> raw;         // M_j^raw [S x K_j]
  Tensor<T> normalized;  // M_j [S x K_j]
  Tensor<T> argument;    // a_j [S x d]
};

/// Per-sentence record of the contextual memory for one source sentence.
template <class T>
struct ContextualMemory {
  Tensor<T> source_states;  // x' [S x d]
  std::vector<Tensor<T>> context_states;
  std::vector<Mask> context_masks;
  std::vector<Tensor<T>> raw_similarity;
  std::vector<Tensor<T>> normalized;
  std::vector<Tensor<T>> argument_embeddings;

  std::size_t size() const { return context_states.size(); }
};

/// One self-attention + feed-forward layer over the source sentence and over
/// each context sentence, all embedded with the source table.
template <class T>
std::pair<Tensor<T>, std::vector<Tensor<T>>> encode_context(
    std::span<const int> source, const std::vector<std::vector<int>>& contexts,
    const Tensor<T>& source_embedding, const EncoderLayerParams<T>& layer,
    const TransformerConfig& cfg, const DropoutContext& drop = {}) {
  if (contexts.empty()) throw ContractError("encode_context: memory size must be at least 1");
  auto encode = [&](std::span<const int> ids) {
    if (ids.empty()) throw ContractError("encode_context: empty id sequence");
    return encoder_layer(embed_tokens(source_embedding, ids, cfg, drop), nullptr, layer,
                         cfg.num_heads, drop);
  };
  auto x = encode(source);
  std::vector<Tensor<T>> cs;
  cs.reserve(contexts.size());
  for (const auto& c : contexts) cs.push_back(encode(c));
  return {x, cs};
}

/// Unscaled similarity x' c'^T, row softmax over unmasked context positions,
/// and the attended argument embedding a_j = M_j c'.
template <class T>
InterSentenceAttention<T> inter_sentence_attention(const Tensor<T>& x, const Tensor<T>& c,
                                                   const Mask* context_mask = nullptr) {
  InterSentenceAttention<T> out;
  out.raw = matmul_nt(x, c);
  out.normalized = softmax_rows(out.raw, context_mask);
  out.argument = matmul(out.normalized, c);
  return out;
}

template <class T>
ContextualMemory<T> build_memory(const Tensor<T>& x, std::vector<Tensor<T>> contexts,
                                 std::vector<Mask> masks = {}) {
  if (masks.empty()) {
    for (const auto& c : contexts) masks.emplace_back(c.rows(), false);
  }
  if (masks.size() != contexts.size())
    throw ShapeError("build_memory: " + std::to_string(masks.size()) + " masks for " +
                     std::to_string(contexts.size()) + " contexts");
  ContextualMemory<T> mem;
  mem.source_states = x;
  for (std::size_t j = 0; j < contexts.size(); ++j) {
    auto att = inter_sentence_attention(x, contexts[j], &masks[j]);
    mem.raw_similarity.push_back(att.raw);
    mem.normalized.push_back(att.normalized);
    mem.argument_embeddings.push_back(att.argument);
  }
  mem.context_states = std::move(contexts);
  mem.context_masks = std::move(masks);
  return mem;
}

/// Softmax weights over context slots from the mean raw score of each slot.
template <class T>
Tensor<T> slot_weights(const ContextualMemory<T>& mem) {
  std::vector<Tensor<T>> means;
  for (std::size_t j = 0; j < mem.size(); ++j)
    means.push_back(reshape(masked_mean(mem.raw_similarity[j], &mem.context_masks[j]), {1, 1}));
  return softmax_rows(concat_cols(means));
}

/// Flat merging: one softmax per source row across all context positions of
/// all slots, applied to the stacked encoded context states.
template <class T>
Tensor<T> flat_attention(const ContextualMemory<T>& mem) {
  Mask mask;
  for (const auto& mk : mem.context_masks) mask.insert(mask.end(), mk.begin(), mk.end());
  auto gamma = softmax_rows(concat_cols(mem.raw_similarity), &mask);
  return gamma;
}

template <class T>
Tensor<T> merge_contexts(const ContextualMemory<T>& mem, MergeKind kind,
                         const MemoryParams<T>& params) {
  const std::size_t m = mem.size();
  if (m == 0) throw ContractError("merge_contexts: empty memory");
  switch (kind) {
    case MergeKind::concatenation:
      if (params.concat_weight.rows() != m * mem.source_states.cols())
        throw ConfigError("concatenation projection was built for memory size " +
                          std::to_string(params.concat_weight.rows() / mem.source_states.cols()) +
                          ", got " + std::to_string(m));
      return linear(concat_cols(mem.argument_embeddings), params.concat_weight, params.concat_bias);
    case MergeKind::average:
      return affine(add_n(mem.argument_embeddings), T(1) / T(m));
    case MergeKind::weighted_average:
      return weighted_sum(mem.argument_embeddings, slot_weights(mem));
    case MergeKind::flat:
      return matmul(flat_attention(mem), concat_rows(mem.context_states));
    case MergeKind::contextual_rnn:
      break;
  }
  throw ConfigError("merge_contexts: strategy " + to_string(kind) +
                    " is handled by merge_contextual_rnn");
}

namespace detail {

template <class T>
struct RnnState {
  Tensor<T> h;
  Tensor<T> c;  // lstm only
};

template <class T>
RnnState<T> rnn_cell(const Tensor<T>& x, const RnnState<T>& s, RnnCore core, Activation act,
                     const RnnParams<T>& p) {
  const std::size_t d = x.cols();
  auto xw = linear(x, p.w, p.bx);
  auto hu = linear(s.h, p.u, p.bh);
  switch (core) {
    case RnnCore::rnn:
      return {activation(add(xw, hu), act), {}};
    case RnnCore::gru: {
      auto r = sigmoid(add(slice_cols(xw, 0, d), slice_cols(hu, 0, d)));
      auto z = sigmoid(add(slice_cols(xw, d, 2 * d), slice_cols(hu, d, 2 * d)));
      auto n = tanh(add(slice_cols(xw, 2 * d, 3 * d), mul(r, slice_cols(hu, 2 * d, 3 * d))));
      return {add(n, mul(z, sub(s.h, n))), {}};
    }
    case RnnCore::lstm: {
      auto gates = add(xw, hu);
      auto i = sigmoid(slice_cols(gates, 0, d));
      auto f = sigmoid(slice_cols(gates, d, 2 * d));
      auto g = tanh(slice_cols(gates, 2 * d, 3 * d));
      auto o = sigmoid(slice_cols(gates, 3 * d, 4 * d));
      auto c = add(mul(f, s.c), mul(i, g));
      return {mul(o, tanh(c)), c};
    }
  }
  return s;
}

template <class T>
Tensor<T> run_rnn(const std::vector<Tensor<T>>& seq, bool reverse, RnnCore core, Activation act,
                  const RnnParams<T>& p) {
  const auto& first = seq.front();
  RnnState<T> s{Tensor<T>::zeros({first.rows(), first.cols()}),
                Tensor<T>::zeros({first.rows(), first.cols()})};
  for (std::size_t t = 0; t < seq.size(); ++t)
    s = rnn_cell(seq[reverse ? seq.size() - 1 - t : t], s, core, act, p);
  return s.h;
}

}  // namespace detail

/// Runs the recurrent core along the memory axis independently for every
/// source position; the final hidden state is the merged embedding.
template <class T>
Tensor<T> merge_contextual_rnn(const ContextualMemory<T>& mem, const MergeStrategy& strategy,
                               const MemoryParams<T>& params) {
  if (mem.size() == 0) throw ContractError("merge_contextual_rnn: empty memory");
  const auto& seq = mem.argument_embeddings;
  switch (strategy.direction) {
    case RnnDirection::forward:
      return detail::run_rnn(seq, false, strategy.core, strategy.rnn_activation, params.rnn_forward);
    case RnnDirection::backward:
      return detail::run_rnn(seq, true, strategy.core, strategy.rnn_activation, params.rnn_backward);
    case RnnDirection::bidirectional: {
      auto fwd = detail::run_rnn(seq, false, strategy.core, strategy.rnn_activation, params.rnn_forward);
      auto bwd = detail::run_rnn(seq, true, strategy.core, strategy.rnn_activation, params.rnn_backward);
      return linear(concat_cols<T>({fwd, bwd}), params.bidirectional_weight, params.bidirectional_bias);
    }
  }
  return {};
}

template <class T>
Tensor<T> merge(const ContextualMemory<T>& mem, const MergeStrategy& strategy,
                const MemoryParams<T>& params) {
  if (strategy.kind == MergeKind::contextual_rnn) return merge_contextual_rnn(mem, strategy, params);
  return merge_contexts(mem, strategy.kind, params);
}

/// Learned gate g = sigmoid([H_s, H_c] W_g + b_g).
template <class T>
Tensor<T> gate_values(const Tensor<T>& h_source, const Tensor<T>& h_context,
                      const ContextGate<T>& gate) {
  return sigmoid(linear(concat_cols<T>({h_source, h_context}), gate.weight, gate.bias));
}

/// H = g * H_source + (1 - g) * H_context.
template <class T>
Tensor<T> context_gate(const Tensor<T>& h_source, const Tensor<T>& h_context,
                       const ContextGate<T>& gate) {
  if (h_source.shape() != h_context.shape()) {
    throw ContractError("context_gate: source " + shape_string(h_source.shape()) + " vs context " +
                        shape_string(h_context.shape()));
  }
  if (gate.override_value) {
    const double g = *gate.override_value;
    if (g == 1.0) return h_source;
    if (g == 0.0) return h_context;
    return add(affine(h_source, T(g)), affine(h_context, T(1.0 - g)));
  }
  auto g = gate_values(h_source, h_context, gate);
  return add(h_context, mul(g, sub(h_source, h_context)));
}

/// Source encoding gated against the merged context memory. With no context
/// sentences this is encode_source.
template <class T>
EncodedSequence<T> gated_encoder_output(std::span<const int> source,
                                        const std::vector<std::vector<int>>& contexts,
                                        const TransformerParams<T>& tparams,
                                        const MemoryParams<T>& mparams,
                                        const TransformerConfig& tcfg, const MergeStrategy& strategy,
                                        const DropoutContext& drop = {},
                                        ContextualMemory<T>* trace = nullptr) {
  auto encoded = encode_source(source, nullptr, tparams, tcfg, drop);
  if (contexts.empty()) return encoded;
  if (mparams.gate.override_value && *mparams.gate.override_value == 1.0) return encoded;
  auto [x, cs] = encode_context(source, contexts, tparams.source_embedding, mparams.context_encoder,
                                tcfg, drop);
  auto mem = build_memory(x, std::move(cs));
  auto a = merge(mem, strategy, mparams);
  auto h_context = encoder_layer(a, nullptr, mparams.context_block, tcfg.num_heads, drop);
  encoded.states = context_gate(encoded.states, h_context, mparams.gate);
  if (trace) *trace = std::move(mem);
  return encoded;
}

/// Single-hop memory read: p = softmax(q . m_i), output sum_i p_i m_i.
inline std::vector<double> memory_read_reference(const std::vector<double>& q,
                                                 const std::vector<std::vector<double>>& cells) {
  if (cells.empty()) throw ContractError("memory_read_reference: no memory cells");
  std::vector<double> scores;
  for (const auto& cell : cells) {
    if (cell.size() != q.size()) throw ShapeError("memory_read_reference: dimension mismatch");
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * cell[i];
    scores.push_back(s);
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double total = 0;
  for (auto& s : scores) total += (s = std::exp(s - mx));
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t k = 0; k < cells.size(); ++k)
    for (std::size_t i = 0; i < q.size(); ++i) out[i] += scores[k] / total * cells[k][i];
  return out;
}

}  // namespace ctxmem
