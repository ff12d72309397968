#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/error.hpp"
#include "ctxmem/ops.hpp"
#include "ctxmem/parameters.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/tensor.hpp"

namespace ctxmem {

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;
  std::size_t max_positions = 256;

  std::size_t head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (num_layers == 0) throw ConfigError("num_layers must be positive");
    if (model_dim == 0 || model_dim % 2 != 0)
      throw ConfigError("model_dim must be positive and even, got " + std::to_string(model_dim));
    if (num_heads == 0 || model_dim % num_heads != 0) {
      throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (max_positions == 0) throw ConfigError("max_positions must be positive");
  }
};

/// Dropout switch threaded through the forward pass. Without an rng the pass
/// is deterministic (evaluation mode).
struct DropoutContext {
  double p = 0.0;
  Rng* rng = nullptr;

  template <class T>
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (!rng || p <= 0.0) return x;
    return dropout(x, p, *rng);
  }
};

template <class T>
struct EncodedSequence {
  Tensor<T> states;  // [S x d]
  Mask mask;         // length S, true at padding

  std::size_t length() const { return states.rows(); }
};

template <class T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct NormParams {
  Tensor<T> gain, bias;
};

template <class T>
struct EncoderLayerParams {
  AttentionParams<T> attention;
  NormParams<T> attention_norm;
  FeedForwardParams<T> ffn;
  NormParams<T> ffn_norm;
};

template <class T>
struct DecoderLayerParams {
  AttentionParams<T> self_attention;
  NormParams<T> self_norm;
  AttentionParams<T> cross_attention;
  NormParams<T> cross_norm;
  FeedForwardParams<T> ffn;
  NormParams<T> ffn_norm;
};

template <class T>
struct TransformerParams {
  Tensor<T> source_embedding;  // [V_src x d]
  Tensor<T> target_embedding;  // [V_tgt x d]
  std::vector<EncoderLayerParams<T>> encoder;
  std::vector<DecoderLayerParams<T>> decoder;
  Tensor<T> output_weight;  // [d x V_tgt]
  Tensor<T> output_bias;
};

namespace detail {

template <class T>
Tensor<T> add_weight(ParameterStore<T>& store, const std::string& name, std::size_t rows,
                     std::size_t cols, Rng& rng) {
  auto w = store.add(name, {rows, cols});
  init_xavier_uniform(w, rng);
  return w;
}

template <class T>
Tensor<T> add_bias(ParameterStore<T>& store, const std::string& name, std::size_t n) {
  return store.add(name, {n});
}

}  // namespace detail

template <class T>
AttentionParams<T> make_attention_params(ParameterStore<T>& store, const std::string& prefix,
                                         std::size_t d, Rng& rng) {
  AttentionParams<T> p;
  p.wq = detail::add_weight(store, prefix + ".wq", d, d, rng);
  p.bq = detail::add_bias(store, prefix + ".bq", d);
  p.wk = detail::add_weight(store, prefix + ".wk", d, d, rng);
  p.bk = detail::add_bias(store, prefix + ".bk", d);
  p.wv = detail::add_weight(store, prefix + ".wv", d, d, rng);
  p.bv = detail::add_bias(store, prefix + ".bv", d);
  p.wo = detail::add_weight(store, prefix + ".wo", d, d, rng);
  p.bo = detail::add_bias(store, prefix + ".bo", d);
  return p;
}

template <class T>
FeedForwardParams<T> make_feed_forward_params(ParameterStore<T>& store, const std::string& prefix,
                                              std::size_t d, std::size_t ffn_dim, Rng& rng) {
  FeedForwardParams<T> p;
  p.w1 = detail::add_weight(store, prefix + ".w1", d, ffn_dim, rng);
  p.b1 = detail::add_bias(store, prefix + ".b1", ffn_dim);
  p.w2 = detail::add_weight(store, prefix + ".w2", ffn_dim, d, rng);
  p.b2 = detail::add_bias(store, prefix + ".b2", d);
  return p;
}

template <class T>
NormParams<T> make_norm_params(ParameterStore<T>& store, const std::string& prefix, std::size_t d) {
  NormParams<T> p;
  p.gain = store.add(prefix + ".gain", {d});
  init_constant(p.gain, T(1));
  p.bias = store.add(prefix + ".bias", {d});
  return p;
}

template <class T>
EncoderLayerParams<T> make_encoder_layer_params(ParameterStore<T>& store, const std::string& prefix,
                                                const TransformerConfig& cfg, Rng& rng) {
  EncoderLayerParams<T> p;
  p.attention = make_attention_params(store, prefix + ".attention", cfg.model_dim, rng);
  p.attention_norm = make_norm_params(store, prefix + ".attention_norm", cfg.model_dim);
  p.ffn = make_feed_forward_params(store, prefix + ".ffn", cfg.model_dim, cfg.ffn_dim, rng);
  p.ffn_norm = make_norm_params(store, prefix + ".ffn_norm", cfg.model_dim);
  return p;
}

template <class T>
DecoderLayerParams<T> make_decoder_layer_params(ParameterStore<T>& store, const std::string& prefix,
                                                const TransformerConfig& cfg, Rng& rng) {
  DecoderLayerParams<T> p;
  p.self_attention = make_attention_params(store, prefix + ".self_attention", cfg.model_dim, rng);
  p.self_norm = make_norm_params(store, prefix + ".self_norm", cfg.model_dim);
  p.cross_attention = make_attention_params(store, prefix + ".cross_attention", cfg.model_dim, rng);
  p.cross_norm = make_norm_params(store, prefix + ".cross_norm", cfg.model_dim);
  p.ffn = make_feed_forward_params(store, prefix + ".ffn", cfg.model_dim, cfg.ffn_dim, rng);
  p.ffn_norm = make_norm_params(store, prefix + ".ffn_norm", cfg.model_dim);
  return p;
}

/// Registers and initializes every Transformer parameter in a fixed order.
template <class T>
TransformerParams<T> make_transformer_params(ParameterStore<T>& store, const TransformerConfig& cfg,
                                             std::size_t source_vocab, std::size_t target_vocab,
                                             Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  TransformerParams<T> p;
  p.source_embedding = store.add("source_embedding", {source_vocab, d});
  init_normal(p.source_embedding, embed_std, rng);
  p.target_embedding = store.add("target_embedding", {target_vocab, d});
  init_normal(p.target_embedding, embed_std, rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    p.encoder.push_back(make_encoder_layer_params(store, "encoder." + std::to_string(l), cfg, rng));
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    p.decoder.push_back(make_decoder_layer_params(store, "decoder." + std::to_string(l), cfg, rng));
  p.output_weight = detail::add_weight(store, "output.weight", d, target_vocab, rng);
  p.output_bias = detail::add_bias(store, "output.bias", target_vocab);
  return p;
}

/// Sinusoidal encodings: even columns sin(pos / 10000^(2i/d)), odd columns the
/// matching cosine.
template <class T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(d));
  std::vector<T> out(length * d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    for (std::size_t pos = 0; pos < length; ++pos) {
      const double angle = static_cast<double>(pos) * rate;
      out[pos * d + 2 * i] = T(std::sin(angle));
      out[pos * d + 2 * i + 1] = T(std::cos(angle));
    }
  }
  return Tensor<T>::from({length, d}, std::move(out));
}

/// Embedding lookup scaled by sqrt(d) plus positional encoding.
template <class T>
Tensor<T> embed_tokens(const Tensor<T>& table, std::span<const int> ids,
                       const TransformerConfig& cfg, const DropoutContext& drop) {
  if (ids.size() > cfg.max_positions) {
    throw ContractError("sequence of length " + std::to_string(ids.size()) + " exceeds max_positions " +
                        std::to_string(cfg.max_positions));
  }
  const T scale = T(std::sqrt(static_cast<double>(cfg.model_dim)));
  auto x = add(affine(embedding(table, ids), scale),
               positional_encoding<T>(ids.size(), cfg.model_dim));
  return drop(x);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Mask* key_mask, const AttentionParams<T>& p,
                               std::size_t heads, bool causal = false,
                               std::vector<T>* weights_out = nullptr) {
  auto qp = linear(q, p.wq, p.bq);
  auto kp = linear(k, p.wk, p.bk);
  auto vp = linear(v, p.wv, p.bv);
  auto attended = scaled_dot_product_attention(qp, kp, vp, heads, key_mask, causal, weights_out);
  return linear(attended, p.wo, p.bo);
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

// Post-norm residual wrapper.
template <class T>
Tensor<T> residual_norm(const Tensor<T>& x, const Tensor<T>& sublayer, const NormParams<T>& norm,
                        const DropoutContext& drop) {
  return layer_norm(add(x, drop(sublayer)), norm.gain, norm.bias);
}

template <class T>
Tensor<T> encoder_layer(const Tensor<T>& x, const Mask* mask, const EncoderLayerParams<T>& p,
                        std::size_t heads, const DropoutContext& drop) {
  auto h = residual_norm(x, multi_head_attention(x, x, x, mask, p.attention, heads), p.attention_norm,
                         drop);
  return residual_norm(h, feed_forward(h, p.ffn), p.ffn_norm, drop);
}

template <class T>
Tensor<T> decoder_layer(const Tensor<T>& y, const EncodedSequence<T>& memory,
                        const DecoderLayerParams<T>& p, std::size_t heads,
                        const DropoutContext& drop) {
  auto h = residual_norm(y, multi_head_attention(y, y, y, nullptr, p.self_attention, heads, true),
                         p.self_norm, drop);
  const Mask* mask = memory.mask.empty() ? nullptr : &memory.mask;
  h = residual_norm(h,
                    multi_head_attention(h, memory.states, memory.states, mask, p.cross_attention,
                                         heads),
                    p.cross_norm, drop);
  return residual_norm(h, feed_forward(h, p.ffn), p.ffn_norm, drop);
}

/// N-layer source encoder. `mask` may mark trailing padding; outputs at
/// unmasked positions do not depend on padded ones.
template <class T>
EncodedSequence<T> encode_source(std::span<const int> ids, const Mask* mask,
                                 const TransformerParams<T>& p, const TransformerConfig& cfg,
                                 const DropoutContext& drop = {}) {
  if (mask && mask->size() != ids.size()) {
    throw ShapeError("encode_source: mask of length " + std::to_string(mask->size()) + " for " +
                     std::to_string(ids.size()) + " tokens");
  }
  auto x = embed_tokens(p.source_embedding, ids, cfg, drop);
  for (const auto& layer : p.encoder) x = encoder_layer(x, mask, layer, cfg.num_heads, drop);
  return {x, mask ? *mask : Mask(ids.size(), false)};
}

/// Teacher-forced decoder pass: row t holds the logits for the token after
/// prefix[0..t].
template <class T>
Tensor<T> decode_logits(std::span<const int> prefix, const EncodedSequence<T>& memory,
                        const TransformerParams<T>& p, const TransformerConfig& cfg,
                        const DropoutContext& drop = {}) {
  if (prefix.empty()) throw ContractError("decode_logits: empty target prefix");
  auto y = embed_tokens(p.target_embedding, prefix, cfg, drop);
  for (const auto& layer : p.decoder) y = decoder_layer(y, memory, layer, cfg.num_heads, drop);
  return linear(y, p.output_weight, p.output_bias);
}

}  // namespace ctxmem
