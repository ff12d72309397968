#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxmem/bpe.hpp"
#include "ctxmem/error.hpp"

namespace ctxmem {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} { reindex(); }

  /// Reserved tokens first, then `tokens` in the given order (duplicates and
  /// reserved strings are dropped).
  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  /// Orders symbols by descending frequency, then lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences) {
    std::map<std::string, std::size_t> freq;
    for (const auto& s : sentences)
      for (const auto& t : s) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(), freq.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(entries.size());
    for (auto& e : entries) tokens.push_back(e.first);
    return Vocabulary(tokens);
  }

  std::size_t size() const { return tokens_.size(); }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& decode(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot write vocabulary to " + path);
    for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot read vocabulary " + path);
    Vocabulary vocab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (vocab.index_.count(line)) {
        throw IngestionError(path + ":" + std::to_string(lineno) + ": duplicate token '" + line + "'");
      }
      vocab.add(line);
    }
    return vocab;
  }

 private:
  void add(const std::string& token) {
    if (index_.count(token)) return;
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Subword ids of a whitespace-tokenized sentence, EOS-terminated.
inline std::vector<int> encode_sentence(const std::string& sentence, const BpeModel& bpe,
                                        const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& symbol : bpe.segment(sentence)) ids.push_back(vocab.lookup(symbol));
  ids.push_back(kEosId);
  return ids;
}

/// Inverse of encode_sentence up to UNK: drops reserved ids, joins subwords.
inline std::string decode_sentence(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> symbols;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    if (id == kUnkId) {
      symbols.push_back(vocab.decode(id) + std::string(kEndOfWord));
      continue;
    }
    symbols.push_back(vocab.decode(id));
  }
  return join_subwords(symbols);
}

}  // namespace ctxmem
