#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/corpus.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/memory_network.hpp"
#include "ctxmem/model.hpp"
#include "ctxmem/transformer.hpp"

namespace ctxmem {

/// Everything a training run is parameterized by.
struct RunConfig {
  TransformerConfig transformer;
  MemoryConfig memory;
  ContextMode context_mode = ContextMode::previous;
  double label_smoothing = 0.1;
  std::size_t warmup_steps = 4000;
  std::size_t train_steps = 1000;
  std::size_t batch_tokens = 1024;
  std::uint64_t seed = 1;
  std::size_t bpe_merges = 1000;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  double clip_norm = 0.0;            // 0: no clipping
  double lr_scale = 1.0;

  ModelConfig model(std::size_t source_vocab, std::size_t target_vocab) const {
    return {transformer, memory, source_vocab, target_vocab};
  }

  void validate() const {
    transformer.validate();
    memory.validate();
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("label_smoothing must lie in [0, 1)");
    if (warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
    if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be nonnegative");
    if (lr_scale <= 0.0) throw ConfigError("lr_scale must be positive");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys{
      "num_layers",    "model_dim",      "num_heads",    "ffn_dim",       "dropout",
      "label_smoothing", "warmup_steps", "train_steps",  "batch_tokens",  "memory_size",
      "context_mode",  "merge_strategy", "rnn_core",     "rnn_direction", "seed",
      "bpe_merges"};
  return keys;
}

inline const std::set<std::string>& optional_keys() {
  static const std::set<std::string> keys{"max_positions", "checkpoint_every", "clip_norm",
                                          "lr_scale",      "share_context_encoder",
                                          "gate_override", "rnn_activation"};
  return keys;
}

}  // namespace detail

/// Splits `key = value` lines; `#` starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = detail::trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(content).substr(0, eq));
    const std::string value = detail::trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError("config key '" + key + "' given twice");
  }
  return out;
}

/// Builds a RunConfig from parsed keys. A missing seed falls back to the
/// CTXMEM_SEED environment variable.
inline RunConfig config_from_keys(std::map<std::string, std::string> kv) {
  for (const auto& [key, value] : kv) {
    const auto& req = detail::required_keys();
    if (std::find(req.begin(), req.end(), key) == req.end() && !detail::optional_keys().count(key))
      throw ConfigError("unknown config key '" + key + "'");
  }
  if (!kv.count("seed")) {
    if (const char* env = std::getenv("CTXMEM_SEED")) kv["seed"] = env;
  }
  for (const auto& key : detail::required_keys())
    if (!kv.count(key)) throw ConfigError("missing config key '" + key + "'");

  auto size = [&](const char* key) { return detail::parse_number<std::size_t>(key, kv.at(key)); };
  auto real = [&](const char* key) { return detail::parse_number<double>(key, kv.at(key)); };
  auto with_key = [](const char* key, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  };

  RunConfig c;
  c.transformer.num_layers = size("num_layers");
  c.transformer.model_dim = size("model_dim");
  c.transformer.num_heads = size("num_heads");
  c.transformer.ffn_dim = size("ffn_dim");
  c.transformer.dropout = real("dropout");
  if (kv.count("max_positions")) c.transformer.max_positions = size("max_positions");
  c.label_smoothing = real("label_smoothing");
  c.warmup_steps = size("warmup_steps");
  c.train_steps = size("train_steps");
  c.batch_tokens = size("batch_tokens");
  c.memory.memory_size = size("memory_size");
  c.context_mode = with_key("context_mode", [&] { return parse_context_mode(kv.at("context_mode")); });
  c.memory.merge.kind =
      with_key("merge_strategy", [&] { return parse_merge_kind(kv.at("merge_strategy")); });
  c.memory.merge.core = with_key("rnn_core", [&] { return parse_rnn_core(kv.at("rnn_core")); });
  c.memory.merge.direction =
      with_key("rnn_direction", [&] { return parse_rnn_direction(kv.at("rnn_direction")); });
  if (kv.count("rnn_activation")) {
    c.memory.merge.rnn_activation =
        with_key("rnn_activation", [&] { return parse_activation(kv.at("rnn_activation")); });
  }
  if (kv.count("gate_override") && kv.at("gate_override") != "none")
    c.memory.gate_override = real("gate_override");
  if (kv.count("share_context_encoder"))
    c.memory.share_context_encoder =
        detail::parse_bool("share_context_encoder", kv.at("share_context_encoder"));
  c.seed = detail::parse_number<std::uint64_t>("seed", kv.at("seed"));
  c.bpe_merges = size("bpe_merges");
  if (kv.count("checkpoint_every")) c.checkpoint_every = size("checkpoint_every");
  if (kv.count("clip_norm")) c.clip_norm = real("clip_norm");
  if (kv.count("lr_scale")) c.lr_scale = real("lr_scale");
  c.validate();
  return c;
}

inline RunConfig parse_config(std::string_view text) { return config_from_keys(parse_key_values(text)); }

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Canonical key/value form, one entry per key in a fixed order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& c) {
  using detail::format_double;
  std::vector<std::pair<std::string, std::string>> out{
      {"num_layers", std::to_string(c.transformer.num_layers)},
      {"model_dim", std::to_string(c.transformer.model_dim)},
      {"num_heads", std::to_string(c.transformer.num_heads)},
      {"ffn_dim", std::to_string(c.transformer.ffn_dim)},
      {"dropout", format_double(c.transformer.dropout)},
      {"max_positions", std::to_string(c.transformer.max_positions)},
      {"label_smoothing", format_double(c.label_smoothing)},
      {"warmup_steps", std::to_string(c.warmup_steps)},
      {"train_steps", std::to_string(c.train_steps)},
      {"batch_tokens", std::to_string(c.batch_tokens)},
      {"memory_size", std::to_string(c.memory.memory_size)},
      {"context_mode", to_string(c.context_mode)},
      {"merge_strategy", to_string(c.memory.merge.kind)},
      {"rnn_core", to_string(c.memory.merge.core)},
      {"rnn_direction", to_string(c.memory.merge.direction)},
      {"rnn_activation", to_string(c.memory.merge.rnn_activation)},
      {"share_context_encoder", c.memory.share_context_encoder ? "true" : "false"},
      {"gate_override", c.memory.gate_override ? format_double(*c.memory.gate_override) : "none"},
      {"seed", std::to_string(c.seed)},
      {"bpe_merges", std::to_string(c.bpe_merges)},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"clip_norm", format_double(c.clip_norm)},
      {"lr_scale", format_double(c.lr_scale)},
  };
  return out;
}

inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace ctxmem
