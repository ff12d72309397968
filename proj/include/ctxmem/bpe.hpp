#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctxmem/error.hpp"

namespace ctxmem {

// Appended to the last symbol of every word.
inline constexpr std::string_view kEndOfWord = "</w>";

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\r') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

namespace detail {

// Splits a word into UTF-8 code points and marks the last one.
inline std::vector<std::string> initial_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    symbols.emplace_back(word.substr(i, len));
    i += len;
  }
  if (!symbols.empty()) symbols.back() += kEndOfWord;
  return symbols;
}

}  // namespace detail

/// Ordered merge rules of a byte-pair-encoding model.
class BpeModel {
 public:
  using Pair = std::pair<std::string, std::string>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Pair> merges) : merges_(std::move(merges)) {
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      ranks_.emplace(merges_[i].first + '\x1f' + merges_[i].second, i);
    }
  }

  const std::vector<Pair>& merges() const { return merges_; }
  std::size_t merge_count() const { return merges_.size(); }

  std::vector<std::string> segment_word(std::string_view word) const {
    auto symbols = detail::initial_symbols(word);
    while (symbols.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = ranks_.find(symbols[i] + '\x1f' + symbols[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == SIZE_MAX) break;
      const auto& [left, right] = merges_[best_rank];
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          next.push_back(left + right);
          ++i;
        } else {
          next.push_back(symbols[i]);
        }
      }
      symbols = std::move(next);
    }
    return symbols;
  }

  std::vector<std::string> segment(std::string_view sentence) const {
    std::vector<std::string> out;
    for (const auto& word : split_whitespace(sentence)) {
      auto symbols = segment_word(word);
      out.insert(out.end(), symbols.begin(), symbols.end());
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot write BPE model to " + path);
    out << "bpe-merges v1 " << merges_.size() << '\n';
    for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
  }

  static BpeModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot read BPE model " + path);
    std::string line;
    std::getline(in, line);
    std::istringstream header(line);
    std::string magic, version;
    std::size_t count = 0;
    if (!(header >> magic >> version >> count) || magic != "bpe-merges" || version != "v1") {
      throw IngestionError(path + ":1: expected header 'bpe-merges v1 <count>'");
    }
    std::vector<Pair> merges;
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(in, line)) {
        throw IngestionError(path + ": expected " + std::to_string(count) +
                             " merges, found " + std::to_string(i));
      }
      const auto space = line.find(' ');
      if (space == std::string::npos || space == 0 || space + 1 == line.size()) {
        throw IngestionError(path + ":" + std::to_string(i + 2) + ": malformed merge '" + line + "'");
      }
      merges.emplace_back(line.substr(0, space), line.substr(space + 1));
    }
    return BpeModel(std::move(merges));
  }

 private:
  std::vector<Pair> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

/// Learns `merge_count` merges greedily by pair frequency; ties go to the
/// lexicographically smallest pair. Stops early when no pair remains.
inline BpeModel train_bpe(const std::vector<std::string>& sentences,
                          std::size_t merge_count) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& s : sentences)
    for (const auto& w : split_whitespace(s)) ++word_freq[w];
  if (word_freq.empty()) throw IngestionError("train_bpe: empty corpus");

  struct Entry {
    std::vector<std::string> symbols;
    std::size_t freq;
  };
  std::vector<Entry> words;
  for (const auto& [w, f] : word_freq) words.push_back({detail::initial_symbols(w), f});

  std::vector<BpeModel::Pair> merges;
  while (merges.size() < merge_count) {
    std::map<BpeModel::Pair, std::size_t> counts;
    for (const auto& e : words)
      for (std::size_t i = 0; i + 1 < e.symbols.size(); ++i)
        counts[{e.symbols[i], e.symbols[i + 1]}] += e.freq;
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;  // map order breaks ties
    const auto pair = best->first;
    merges.push_back(pair);
    for (auto& e : words) {
      std::vector<std::string> next;
      next.reserve(e.symbols.size());
      for (std::size_t i = 0; i < e.symbols.size(); ++i) {
        if (i + 1 < e.symbols.size() && e.symbols[i] == pair.first &&
            e.symbols[i + 1] == pair.second) {
          next.push_back(pair.first + pair.second);
          ++i;
        } else {
          next.push_back(e.symbols[i]);
        }
      }
      e.symbols = std::move(next);
    }
  }
  return BpeModel(std::move(merges));
}

/// Joins subword symbols back into whitespace-separated words.
inline std::string join_subwords(const std::vector<std::string>& symbols) {
  std::string out;
  std::string word;
  for (const auto& s : symbols) {
    if (s.size() >= kEndOfWord.size() &&
        std::string_view(s).substr(s.size() - kEndOfWord.size()) == kEndOfWord) {
      word += s.substr(0, s.size() - kEndOfWord.size());
      if (!out.empty()) out += ' ';
      out += word;
      word.clear();
    } else {
      word += s;
    }
  }
  if (!word.empty()) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

}  // namespace ctxmem
