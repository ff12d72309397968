#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/error.hpp"
#include "ctxmem/memory_network.hpp"
#include "ctxmem/parameters.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/transformer.hpp"

namespace ctxmem {

struct ModelConfig {
  TransformerConfig transformer;
  MemoryConfig memory;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
};

inline constexpr std::uint64_t kMemoryInitStream = 0x6d656d6f7279ULL;

/// Transformer with the contextual memory network in front of the decoder's
/// cross-attention. Transformer parameters are drawn from Rng(seed) and the
/// memory parameters from a separate stream, so the Transformer part of the
/// initialization does not depend on the memory configuration.
template <class T>
class ContextualTransformer {
 public:
  ContextualTransformer(const ModelConfig& config, std::uint64_t seed)
      : config_(config), memory_size_(config.memory.memory_size) {
    if (config.source_vocab == 0 || config.target_vocab == 0)
      throw ConfigError("vocabulary sizes must be positive");
    Rng rng(seed);
    transformer_ = make_transformer_params(store_, config_.transformer, config_.source_vocab,
                                           config_.target_vocab, rng);
    Rng memory_rng(mix_seed(seed, kMemoryInitStream));
    memory_ = make_memory_params(store_, config_.transformer, config_.memory, transformer_,
                                 memory_rng);
  }

  ContextualTransformer(const ContextualTransformer&) = delete;
  ContextualTransformer& operator=(const ContextualTransformer&) = delete;
  ContextualTransformer(ContextualTransformer&&) = default;
  ContextualTransformer& operator=(ContextualTransformer&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const TransformerParams<T>& transformer() const { return transformer_; }
  const MemoryParams<T>& memory() const { return memory_; }
  MemoryParams<T>& mutable_memory() { return memory_; }

  /// Number of context sentences the model reads per source sentence.
  std::size_t memory_size() const { return memory_size_; }

  /// Evaluation-time override. Dropping to 0 is always legal; other changes
  /// need a trained memory network whose parameters do not depend on m.
  void set_memory_size(std::size_t m) {
    const std::size_t trained = config_.memory.memory_size;
    if (m == trained || m == 0) {
      memory_size_ = m;
      return;
    }
    if (trained == 0)
      throw ConfigError("memory_size " + std::to_string(m) + " requested but the model was trained without memory");
    if (config_.memory.merge.kind == MergeKind::concatenation) {
      throw ConfigError("memory_size " + std::to_string(m) + " differs from trained size " +
                        std::to_string(trained) + ", which concatenation merging fixes");
    }
    memory_size_ = m;
  }

  std::optional<double> gate_override() const { return memory_.gate.override_value; }

  void set_gate_override(std::optional<double> g) {
    if (g && (*g < 0.0 || *g > 1.0)) throw ConfigError("gate_override must lie in [0, 1]");
    memory_.gate.override_value = g;
  }

  EncodedSequence<T> encode(std::span<const int> source,
                            const std::vector<std::vector<int>>& contexts,
                            const DropoutContext& drop = {},
                            ContextualMemory<T>* trace = nullptr) const {
    if (contexts.size() != memory_size_) {
      throw ContractError("encode: " + std::to_string(contexts.size()) +
                          " context sentences for memory size " + std::to_string(memory_size_));
    }
    return gated_encoder_output(source, contexts, transformer_, memory_, config_.transformer,
                                config_.memory.merge, drop, trace);
  }

  Tensor<T> logits(std::span<const int> prefix, const EncodedSequence<T>& memory,
                   const DropoutContext& drop = {}) const {
    return decode_logits(prefix, memory, transformer_, config_.transformer, drop);
  }

 private:
  ModelConfig config_;
  std::size_t memory_size_;
  ParameterStore<T> store_;
  TransformerParams<T> transformer_;
  MemoryParams<T> memory_;
};

}  // namespace ctxmem
