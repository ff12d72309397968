#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctxmem/config.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/model.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/training.hpp"

namespace ctxmem {

inline constexpr char kCheckpointMagic[] = "CTXMEM1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Full training state: config snapshot, parameters, Adam moments, dropout
/// stream and schedule position.
struct Checkpoint {
  int version = kCheckpointVersion;
  RunConfig config;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t cursor = 0;
  std::string rng_state;
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  const CheckpointArray& at(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw CheckpointError("checkpoint has no array '" + name + "'");
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream header;
  header << "version " << ck.version << "\n";
  header << "source_vocab " << ck.source_vocab << "\n";
  header << "target_vocab " << ck.target_vocab << "\n";
  header << "step " << ck.step << "\n";
  header << "epoch " << ck.epoch << "\n";
  header << "cursor " << ck.cursor << "\n";
  header << "rng " << ck.rng_state << "\n";
  for (const auto& [k, v] : config_entries(ck.config)) header << "config " << k << " " << v << "\n";
  header << "arrays " << ck.arrays.size() << "\n";
  std::uint64_t offset = 0;
  for (const auto& a : ck.arrays) {
    if (shape_size(a.shape) != a.values.size())
      throw CheckpointError("array '" + a.name + "' does not match its shape");
    header << "array " << a.name << " " << a.shape.size();
    for (auto d : a.shape) header << " " << d;
    header << " " << offset << " " << a.values.size() << "\n";
    offset += 4 * a.values.size();
  }
  const std::string text = header.str();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& a : ck.arrays)
    for (float f : a.values) detail::put_f32(out, f);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kCheckpointMagic) != 0)
    throw CheckpointError(origin + ": not a checkpoint (bad magic)");
  if (bytes.size() < magic_len + 8) throw CheckpointError(origin + ": truncated header length");
  const std::uint64_t header_len = detail::get_u64(bytes.data() + magic_len);
  const std::size_t payload_at = magic_len + 8 + header_len;
  if (header_len > bytes.size() || payload_at > bytes.size())
    throw CheckpointError(origin + ": truncated header");
  std::istringstream in(bytes.substr(magic_len + 8, header_len));

  Checkpoint ck;
  std::map<std::string, std::string> config_kv;
  std::string line;
  std::size_t declared = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "version") {
      ls >> ck.version;
      if (ck.version != kCheckpointVersion)
        throw CheckpointError(origin + ": unsupported checkpoint version " + std::to_string(ck.version));
    } else if (tag == "source_vocab") {
      ls >> ck.source_vocab;
    } else if (tag == "target_vocab") {
      ls >> ck.target_vocab;
    } else if (tag == "step") {
      ls >> ck.step;
    } else if (tag == "epoch") {
      ls >> ck.epoch;
    } else if (tag == "cursor") {
      ls >> ck.cursor;
    } else if (tag == "rng") {
      ck.rng_state = line.size() > 4 ? line.substr(4) : "";
    } else if (tag == "config") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      config_kv[key] = value;
    } else if (tag == "arrays") {
      ls >> declared;
    } else if (tag == "array") {
      CheckpointArray a;
      std::size_t rank = 0;
      ls >> a.name >> rank;
      a.shape.resize(rank);
      for (auto& d : a.shape) ls >> d;
      std::uint64_t offset = 0, count = 0;
      ls >> offset >> count;
      if (!ls || count != shape_size(a.shape))
        throw CheckpointError(origin + ": malformed array entry '" + a.name + "'");
      spans.emplace_back(offset, count);
      ck.arrays.push_back(std::move(a));
    } else if (!tag.empty()) {
      throw CheckpointError(origin + ": unknown header field '" + tag + "'");
    }
  }
  if (ck.arrays.size() != declared)
    throw CheckpointError(origin + ": header lists " + std::to_string(ck.arrays.size()) +
                          " arrays but declares " + std::to_string(declared));
  std::uint64_t expected = 0;
  for (const auto& [offset, count] : spans) {
    if (offset != expected) throw CheckpointError(origin + ": array offsets are not contiguous");
    expected += 4 * count;
  }
  if (bytes.size() - payload_at != expected) {
    throw CheckpointError(origin + ": payload holds " + std::to_string(bytes.size() - payload_at) +
                          " bytes, header expects " + std::to_string(expected) + " (truncated?)");
  }
  for (std::size_t k = 0; k < ck.arrays.size(); ++k) {
    auto& a = ck.arrays[k];
    a.values.resize(spans[k].second);
    const char* p = bytes.data() + payload_at + spans[k].first;
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = detail::get_f32(p + 4 * i);
  }
  try {
    ck.config = config_from_keys(config_kv);
  } catch (const ConfigError& e) {
    throw CheckpointError(origin + ": bad config snapshot: " + e.what());
  }
  return ck;
}

/// Writes to a temporary sibling and renames it into place.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path);
}

namespace detail {

inline const std::vector<std::string>& architecture_keys() {
  static const std::vector<std::string> keys{
      "num_layers",    "model_dim",     "num_heads",      "ffn_dim",
      "max_positions", "memory_size",   "merge_strategy", "rnn_core",
      "rnn_direction", "rnn_activation", "share_context_encoder"};
  return keys;
}

template <class T>
void copy_into(Tensor<T> t, const CheckpointArray& a) {
  if (t.shape() != a.shape) {
    throw CheckpointError("array '" + a.name + "' has shape " + shape_string(a.shape) +
                          ", model expects " + shape_string(t.shape()));
  }
  auto values = t.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = T(a.values[i]);
}

template <class T>
std::vector<float> to_floats(std::span<const T> v) {
  return std::vector<float>(v.begin(), v.end());
}

}  // namespace detail

/// Errors if `expected` and the checkpoint disagree on any architecture
/// field, naming the first such field.
inline void check_compatible(const RunConfig& expected, const Checkpoint& ck) {
  std::map<std::string, std::string> have, want;
  for (const auto& [k, v] : config_entries(ck.config)) have[k] = v;
  for (const auto& [k, v] : config_entries(expected)) want[k] = v;
  for (const auto& key : detail::architecture_keys()) {
    if (have[key] != want[key]) {
      throw CheckpointError("checkpoint config mismatch: " + key + " is " + have[key] +
                            " in the checkpoint but " + want[key] + " was requested");
    }
  }
}

template <class T>
Checkpoint make_checkpoint(const Trainer<T>& trainer) {
  const auto& model = trainer.model();
  Checkpoint ck;
  ck.config = trainer.config();
  ck.source_vocab = model.config().source_vocab;
  ck.target_vocab = model.config().target_vocab;
  ck.step = trainer.global_step();
  ck.epoch = trainer.epoch();
  ck.cursor = trainer.cursor();
  ck.rng_state = rng_state(trainer.rng());
  const auto& entries = model.parameters().entries();
  for (const auto& [name, t] : entries) ck.arrays.push_back({name, t.shape(), detail::to_floats(t.data())});
  const auto& opt = trainer.optimizer();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    ck.arrays.push_back({"adam.m." + entries[k].first, entries[k].second.shape(),
                         detail::to_floats<T>(opt.m[k])});
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    ck.arrays.push_back({"adam.v." + entries[k].first, entries[k].second.shape(),
                         detail::to_floats<T>(opt.v[k])});
  }
  return ck;
}

template <class T>
void load_parameters(ContextualTransformer<T>& model, const Checkpoint& ck) {
  for (const auto& [name, t] : model.parameters().entries()) detail::copy_into(t, ck.at(name));
}

/// Rebuilds a model from a checkpoint's config snapshot and parameters.
template <class T>
ContextualTransformer<T> model_from_checkpoint(const Checkpoint& ck) {
  ContextualTransformer<T> model(ck.config.model(ck.source_vocab, ck.target_vocab), ck.config.seed);
  load_parameters(model, ck);
  return model;
}

/// Restores parameters, optimizer moments, dropout stream and schedule
/// position so that the next step equals the uninterrupted run's.
template <class T>
void restore_training(Trainer<T>& trainer, const Checkpoint& ck) {
  check_compatible(trainer.config(), ck);
  auto& model = trainer.model();
  if (model.config().source_vocab != ck.source_vocab || model.config().target_vocab != ck.target_vocab)
    throw CheckpointError("checkpoint vocabulary sizes differ from the model's");
  load_parameters(model, ck);
  auto& opt = trainer.optimizer();
  const auto& entries = model.parameters().entries();
  opt.reset(model.parameters());
  opt.step = ck.step;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& m = ck.at("adam.m." + entries[k].first);
    const auto& v = ck.at("adam.v." + entries[k].first);
    if (m.values.size() != opt.m[k].size() || v.values.size() != opt.v[k].size())
      throw CheckpointError("optimizer state for '" + entries[k].first + "' has the wrong size");
    std::copy(m.values.begin(), m.values.end(), opt.m[k].begin());
    std::copy(v.values.begin(), v.values.end(), opt.v[k].begin());
  }
  restore_rng_state(trainer.rng(), ck.rng_state);
  trainer.set_position(ck.epoch, ck.cursor);
}

}  // namespace ctxmem
