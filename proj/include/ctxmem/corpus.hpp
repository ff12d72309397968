#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/bpe.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem {

/// Sentences of one document, in order.
using TextDocument = std::vector<std::string>;

struct ParallelTextDocument {
  TextDocument source;
  TextDocument target;
};

namespace detail {

struct RawLine {
  std::string text;
  bool blank;
};

inline std::vector<RawLine> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open corpus file " + path);
  std::vector<RawLine> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const bool blank = line.find_first_not_of(" \t") == std::string::npos;
    lines.push_back({std::move(line), blank});
  }
  while (!lines.empty() && lines.back().blank) lines.pop_back();
  return lines;
}

// Runs of blank lines separate documents.
inline std::vector<TextDocument> split_documents(const std::vector<RawLine>& lines) {
  std::vector<TextDocument> docs;
  TextDocument current;
  for (const auto& l : lines) {
    if (l.blank) {
      if (!current.empty()) docs.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(l.text);
    }
  }
  if (!current.empty()) docs.push_back(std::move(current));
  return docs;
}

}  // namespace detail

/// Monolingual document file: one sentence per line, blank line between
/// documents.
inline std::vector<TextDocument> load_documents(const std::string& path) {
  return detail::split_documents(detail::read_lines(path));
}

inline void write_documents(const std::string& path, const std::vector<TextDocument>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : docs[d]) out << s << '\n';
  }
}

/// Loads a line-aligned parallel pair. Document boundaries must sit on the
/// same lines in both files.
inline std::vector<ParallelTextDocument> load_parallel_text(const std::string& source_path,
                                                            const std::string& target_path) {
  const auto src = detail::read_lines(source_path);
  const auto tgt = detail::read_lines(target_path);
  const std::size_t common = std::min(src.size(), tgt.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (src[i].blank != tgt[i].blank) {
      throw IngestionError("line " + std::to_string(i + 1) + ": document boundary in " +
                           (src[i].blank ? source_path : target_path) + " only");
    }
  }
  if (src.size() != tgt.size()) {
    throw IngestionError("line " + std::to_string(common + 1) + ": line counts differ (" +
                         std::to_string(src.size()) + " in " + source_path + ", " +
                         std::to_string(tgt.size()) + " in " + target_path + ")");
  }
  const auto sdocs = detail::split_documents(src);
  const auto tdocs = detail::split_documents(tgt);
  std::vector<ParallelTextDocument> out;
  for (std::size_t d = 0; d < sdocs.size(); ++d) out.push_back({sdocs[d], tdocs[d]});
  return out;
}

struct SentencePair {
  std::vector<int> source;  // EOS-terminated subword ids
  std::vector<int> target;
  std::size_t doc_index = 0;
  std::size_t position = 0;
};

struct DocumentCorpus {
  std::vector<std::vector<SentencePair>> documents;

  std::size_t sentence_count() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.size();
    return n;
  }
};

inline DocumentCorpus encode_corpus(const std::vector<ParallelTextDocument>& text,
                                    const BpeModel& bpe, const Vocabulary& source_vocab,
                                    const Vocabulary& target_vocab) {
  DocumentCorpus corpus;
  for (std::size_t d = 0; d < text.size(); ++d) {
    std::vector<SentencePair> doc;
    for (std::size_t p = 0; p < text[d].source.size(); ++p) {
      doc.push_back({encode_sentence(text[d].source[p], bpe, source_vocab),
                     encode_sentence(text[d].target[p], bpe, target_vocab), d, p});
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

/// Source-only corpus for decoding; targets are left empty.
inline DocumentCorpus encode_source_documents(const std::vector<TextDocument>& docs,
                                              const BpeModel& bpe, const Vocabulary& vocab) {
  DocumentCorpus corpus;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::vector<SentencePair> doc;
    for (std::size_t p = 0; p < docs[d].size(); ++p)
      doc.push_back({encode_sentence(docs[d][p], bpe, vocab), {}, d, p});
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

enum class ContextMode { previous, next, random };

inline ContextMode parse_context_mode(std::string_view name) {
  if (name == "previous") return ContextMode::previous;
  if (name == "next") return ContextMode::next;
  if (name == "random") return ContextMode::random;
  throw ConfigError("unknown context mode '" + std::string(name) + "'");
}

inline std::string to_string(ContextMode mode) {
  switch (mode) {
    case ContextMode::previous: return "previous";
    case ContextMode::next: return "next";
    case ContextMode::random: return "random";
  }
  return "?";
}

inline const std::vector<int>& empty_sentence() {
  static const std::vector<int> eos_only{kEosId};
  return eos_only;
}

/// The m source-side context sentences of (doc, pos). Slots falling outside
/// the document hold the empty sentence. Random mode draws m distinct other
/// sentences from the whole corpus, seeded per (seed, doc, pos).
inline std::vector<std::vector<int>> select_context(const DocumentCorpus& corpus, std::size_t doc,
                                                    std::size_t pos, ContextMode mode,
                                                    std::size_t m, std::uint64_t seed) {
  const auto& sentences = corpus.documents.at(doc);
  std::vector<std::vector<int>> out;
  out.reserve(m);
  switch (mode) {
    case ContextMode::previous:
      for (std::size_t j = 0; j < m; ++j) {
        const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(m) +
                                 static_cast<std::ptrdiff_t>(j);
        out.push_back(p >= 0 ? sentences[p].source : empty_sentence());
      }
      break;
    case ContextMode::next:
      for (std::size_t j = 1; j <= m; ++j) {
        const std::size_t p = pos + j;
        out.push_back(p < sentences.size() ? sentences[p].source : empty_sentence());
      }
      break;
    case ContextMode::random: {
      std::vector<std::size_t> offsets{0};
      for (const auto& d : corpus.documents) offsets.push_back(offsets.back() + d.size());
      const std::size_t total = offsets.back();
      const std::size_t self = offsets[doc] + pos;
      Rng rng(mix_seed(mix_seed(seed, doc), pos));
      std::vector<std::size_t> chosen;
      for (std::size_t j = 0; j < m; ++j) {
        if (chosen.size() + 1 >= total) {
          out.push_back(empty_sentence());
          continue;
        }
        std::size_t g = 0;
        do {
          g = uniform_index(rng, total);
        } while (g == self || std::find(chosen.begin(), chosen.end(), g) != chosen.end());
        chosen.push_back(g);
        const std::size_t d = static_cast<std::size_t>(
            std::upper_bound(offsets.begin(), offsets.end(), g) - offsets.begin() - 1);
        out.push_back(corpus.documents[d][g - offsets[d]].source);
      }
      break;
    }
  }
  return out;
}

}  // namespace ctxmem
