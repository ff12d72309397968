#pragma once

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/bpe.hpp"
#include "ctxmem/corpus.hpp"
#include "ctxmem/error.hpp"

namespace ctxmem {

using Tokens = std::vector<std::string>;
/// Tokenized sentences grouped by document.
using TokenDocuments = std::vector<std::vector<Tokens>>;

inline Tokens tokenize(std::string_view sentence) { return split_whitespace(sentence); }

inline TokenDocuments tokenize_documents(const std::vector<TextDocument>& docs) {
  TokenDocuments out;
  for (const auto& d : docs) {
    auto& doc = out.emplace_back();
    for (const auto& s : d) doc.push_back(tokenize(s));
  }
  return out;
}

inline std::vector<Tokens> flatten(const TokenDocuments& docs) {
  std::vector<Tokens> out;
  for (const auto& d : docs) out.insert(out.end(), d.begin(), d.end());
  return out;
}

// ---------------------------------------------------------------- BLEU

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

namespace detail {

inline std::map<std::vector<std::string_view>, std::size_t> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<std::vector<std::string_view>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    std::vector<std::string_view> g;
    for (std::size_t k = 0; k < n; ++k) g.push_back(s[i + k]);
    ++counts[g];
  }
  return counts;
}

}  // namespace detail

inline BleuStats bleu_stats(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.empty()) throw ContractError("bleu: empty candidate set");
  if (candidates.size() != references.size()) {
    throw ContractError("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                        std::to_string(references.size()) + " references");
  }
  BleuStats st;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& r = references[i];
    st.candidate_length += c.size();
    st.reference_length += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cc = detail::ngram_counts(c, n);
      const auto rc = detail::ngram_counts(r, n);
      for (const auto& [g, k] : cc) {
        auto it = rc.find(g);
        if (it != rc.end()) st.matches[n - 1] += std::min(k, it->second);
      }
      if (c.size() >= n) st.totals[n - 1] += c.size() - n + 1;
    }
  }
  return st;
}

inline double bleu_from_stats(const BleuStats& st) {
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (st.matches[n] == 0 || st.totals[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]));
  }
  const double c = static_cast<double>(st.candidate_length);
  const double r = static_cast<double>(st.reference_length);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

/// Corpus-level BLEU-4 on a 0-100 scale.
inline double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  return bleu_from_stats(bleu_stats(candidates, references));
}

// ---------------------------------------------------------------- filters

/// True when every code point of `token` is in a Unicode punctuation category.
inline bool is_punctuation(std::string_view token) {
  if (token.empty()) return false;
  const auto* s = reinterpret_cast<const std::uint8_t*>(token.data());
  const auto len = static_cast<std::int32_t>(token.size());
  std::int32_t i = 0;
  while (i < len) {
    UChar32 c;
    U8_NEXT(s, i, len, c);
    if (c < 0 || !u_ispunct(c)) return false;
  }
  return true;
}

using StopwordList = std::unordered_set<std::string>;

inline StopwordList load_stopwords(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open stopword list " + path);
  StopwordList out;
  std::string line;
  while (std::getline(in, line)) {
    for (auto& t : split_whitespace(line)) out.insert(std::move(t));
  }
  return out;
}

struct ContentFilter {
  const StopwordList* stopwords = nullptr;
  std::string unk_token = "<unk>";

  bool keep(const std::string& token) const {
    if (is_punctuation(token)) return false;
    if (stopwords && stopwords->count(token)) return false;
    return token.find(unk_token) == std::string::npos;
  }

  Tokens apply(const Tokens& s) const {
    Tokens out;
    for (const auto& t : s)
      if (keep(t)) out.push_back(t);
    return out;
  }
};

// ---------------------------------------------------------------- consistency

struct ConsistencyOptions {
  ContextMode window = ContextMode::previous;
  std::size_t m = 3;
  std::optional<StopwordList> stopwords;
  std::string unk_token = "<unk>";
};

/// Per sentence: content tokens that also occur in the m-window sentences of
/// the same document.
inline std::vector<std::vector<std::size_t>> consistency_counts(const TokenDocuments& docs,
                                                                const ConsistencyOptions& opt) {
  if (!opt.stopwords) throw ConfigError("consistency requires a stopword list");
  if (opt.window == ContextMode::random) throw ConfigError("consistency window must be previous or next");
  const ContentFilter filter{&*opt.stopwords, opt.unk_token};
  std::vector<std::vector<std::size_t>> out;
  for (const auto& doc : docs) {
    std::vector<Tokens> content;
    for (const auto& s : doc) content.push_back(filter.apply(s));
    auto& counts = out.emplace_back();
    for (std::size_t p = 0; p < doc.size(); ++p) {
      std::unordered_set<std::string_view> window;
      for (std::size_t j = 1; j <= opt.m; ++j) {
        const bool previous = opt.window == ContextMode::previous;
        if (previous ? j > p : p + j >= doc.size()) break;
        for (const auto& t : content[previous ? p - j : p + j]) window.insert(t);
      }
      std::size_t c = 0;
      for (const auto& t : content[p]) c += window.count(t);
      counts.push_back(c);
    }
  }
  return out;
}

inline double consistency(const TokenDocuments& docs, const ConsistencyOptions& opt) {
  const auto counts = consistency_counts(docs, opt);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& d : counts)
    for (std::size_t c : d) {
      sum += static_cast<double>(c);
      ++n;
    }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// ---------------------------------------------------------------- disambiguation

struct DictionaryEntry {
  std::string word;
  std::vector<std::string> candidates;
};

/// `word<TAB>cand1,cand2,...`; entries with fewer than two candidates are
/// reported on `warnings` and skipped.
inline std::vector<DictionaryEntry> parse_dictionary(std::string_view text, std::ostream* warnings,
                                                     const std::string& origin = "dictionary") {
  std::vector<DictionaryEntry> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IngestionError(origin + ":" + std::to_string(lineno) + ": expected word<TAB>candidates");
    DictionaryEntry e{line.substr(0, tab), {}};
    std::istringstream cands(line.substr(tab + 1));
    std::string c;
    while (std::getline(cands, c, ','))
      if (!c.empty() && std::find(e.candidates.begin(), e.candidates.end(), c) == e.candidates.end())
        e.candidates.push_back(c);
    if (e.candidates.size() < 2) {
      if (warnings)
        *warnings << "warning: " << origin << ":" << lineno << ": '" << e.word
                  << "' has fewer than two candidates, skipped\n";
      continue;
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<DictionaryEntry> load_dictionary(const std::string& path, std::ostream* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dictionary " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dictionary(buf.str(), warnings, path);
}

/// Corpus counts count(w, t) for every dictionary word w present in the
/// sources, in dictionary order.
inline std::vector<std::size_t> disambiguation_counts(const std::vector<Tokens>& translations,
                                                      const std::vector<Tokens>& sources,
                                                      const std::vector<DictionaryEntry>& dict) {
  if (translations.size() != sources.size()) {
    throw ContractError("disambiguation: " + std::to_string(translations.size()) + " translations but " +
                        std::to_string(sources.size()) + " sources");
  }
  std::vector<std::size_t> pooled;
  for (const auto& e : dict) {
    std::vector<std::size_t> counts(e.candidates.size(), 0);
    bool present = false;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      if (std::find(sources[i].begin(), sources[i].end(), e.word) == sources[i].end()) continue;
      present = true;
      for (std::size_t k = 0; k < e.candidates.size(); ++k)
        counts[k] += static_cast<std::size_t>(
            std::count(translations[i].begin(), translations[i].end(), e.candidates[k]));
    }
    if (present) pooled.insert(pooled.end(), counts.begin(), counts.end());
  }
  return pooled;
}

inline double population_std(const std::vector<std::size_t>& xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (auto x : xs) mean += static_cast<double>(x);
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (auto x : xs) var += (static_cast<double>(x) - mean) * (static_cast<double>(x) - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

/// Population standard deviation of the pooled candidate counts; lower means
/// the senses are spread more evenly.
inline double disambiguation(const std::vector<Tokens>& translations, const std::vector<Tokens>& sources,
                             const std::vector<DictionaryEntry>& dict) {
  return population_std(disambiguation_counts(translations, sources, dict));
}

/// Share of occurrences of dictionary words whose translation contains the
/// reference's candidate. Sentences whose reference holds no candidate of the
/// word are not scored.
inline double sense_accuracy(const std::vector<Tokens>& translations, const std::vector<Tokens>& sources,
                             const std::vector<Tokens>& references, const std::vector<DictionaryEntry>& dict) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    for (const auto& e : dict) {
      if (std::find(sources[i].begin(), sources[i].end(), e.word) == sources[i].end()) continue;
      for (const auto& c : e.candidates) {
        if (std::find(references[i].begin(), references[i].end(), c) == references[i].end()) continue;
        ++total;
        hit += std::find(translations[i].begin(), translations[i].end(), c) != translations[i].end();
        break;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

// ---------------------------------------------------------------- coherence

struct EmbeddingTable {
  std::unordered_map<std::string, std::vector<double>> vectors;
  std::vector<double> unknown;

  std::size_t dim() const { return unknown.size(); }
  const std::vector<double>& lookup(const std::string& token) const {
    auto it = vectors.find(token);
    return it == vectors.end() ? unknown : it->second;
  }
};

inline std::vector<double> sentence_vector(const Tokens& s, const EmbeddingTable& table) {
  std::vector<double> v(table.dim(), 0.0);
  if (s.empty()) return v;
  for (const auto& t : s) {
    const auto& e = table.lookup(t);
    if (e.size() != v.size()) throw ContractError("embedding for '" + t + "' has the wrong dimension");
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += e[k];
  }
  for (auto& x : v) x /= static_cast<double>(s.size());
  return v;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Mean cosine of consecutive sentence vectors per document, averaged over
/// documents. Single-sentence documents are skipped.
inline double coherence(const TokenDocuments& docs, const EmbeddingTable& table, std::ostream* warnings) {
  double sum = 0.0;
  std::size_t scored = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (docs[d].size() < 2) {
      if (warnings) *warnings << "warning: coherence skips single-sentence document " << d << "\n";
      continue;
    }
    double doc_sum = 0.0;
    auto prev = sentence_vector(docs[d][0], table);
    for (std::size_t p = 1; p < docs[d].size(); ++p) {
      auto cur = sentence_vector(docs[d][p], table);
      doc_sum += cosine(prev, cur);
      prev = std::move(cur);
    }
    sum += doc_sum / static_cast<double>(docs[d].size() - 1);
    ++scored;
  }
  return scored == 0 ? 0.0 : sum / static_cast<double>(scored);
}

// ---------------------------------------------------------------- report

enum class Metric { bleu, consistency, disambiguation, coherence, all };

inline Metric parse_metric(std::string_view name) {
  if (name == "bleu") return Metric::bleu;
  if (name == "consistency") return Metric::consistency;
  if (name == "disambiguation") return Metric::disambiguation;
  if (name == "coherence") return Metric::coherence;
  if (name == "all") return Metric::all;
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

struct EvaluationSettings {
  Metric metric = Metric::all;
  ContextMode window = ContextMode::previous;
  std::size_t m = 3;
  std::optional<std::string> stopwords_path;
  std::optional<std::string> dictionary_path;
  std::string unk_token = "<unk>";
  std::string embeddings_source;
};

struct EvaluationReport {
  std::optional<double> bleu;
  std::optional<double> consistency;
  std::optional<double> disambiguation_std;
  std::optional<double> coherence;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto put = [&](const char* key, const std::optional<double>& v) {
      j[key] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    put("bleu", bleu);
    put("consistency", consistency);
    put("disambiguation_std", disambiguation_std);
    put("coherence", coherence);
    j["metadata"] = metadata;
    return j;
  }
};

inline bool wants(Metric requested, Metric m) { return requested == Metric::all || requested == m; }

/// Scores `outputs` against `references`. Dictionary lookups need the source
/// documents; coherence needs an embedding table. Resources a requested
/// metric depends on must be present.
inline EvaluationReport evaluate(const TokenDocuments& outputs, const TokenDocuments& references,
                                 const TokenDocuments* sources, const EmbeddingTable* embeddings,
                                 const EvaluationSettings& settings, std::ostream* warnings) {
  const Metric metric = settings.metric;
  if (wants(metric, Metric::consistency) && !settings.stopwords_path)
    throw ConfigError("metric consistency requires --stopwords");
  if (wants(metric, Metric::disambiguation) && !settings.dictionary_path)
    throw ConfigError("metric disambiguation requires --dict");
  if (wants(metric, Metric::disambiguation) && !sources)
    throw ConfigError("metric disambiguation requires the source documents");
  if (wants(metric, Metric::coherence) && !embeddings)
    throw ConfigError("metric coherence requires an embedding table");
  if (outputs.size() != references.size())
    throw IngestionError("outputs have " + std::to_string(outputs.size()) + " documents, references " +
                         std::to_string(references.size()));
  for (std::size_t d = 0; d < outputs.size(); ++d)
    if (outputs[d].size() != references[d].size())
      throw IngestionError("document " + std::to_string(d) + ": " + std::to_string(outputs[d].size()) +
                           " output sentences, " + std::to_string(references[d].size()) + " references");

  EvaluationReport report;
  auto& meta = report.metadata;
  static const char* names[] = {"bleu", "consistency", "disambiguation", "coherence", "all"};
  meta["metric"] = names[static_cast<int>(metric)];
  meta["documents"] = outputs.size();
  meta["sentences"] = flatten(outputs).size();
  if (wants(metric, Metric::bleu)) {
    report.bleu = bleu(flatten(outputs), flatten(references));
  }
  if (wants(metric, Metric::consistency)) {
    ConsistencyOptions opt{settings.window, settings.m, load_stopwords(*settings.stopwords_path),
                           settings.unk_token};
    report.consistency = consistency(outputs, opt);
    meta["window_mode"] = to_string(settings.window);
    meta["window_size"] = settings.m;
    meta["stopwords"] = *settings.stopwords_path;
    meta["punctuation_filter"] = "unicode general category P";
    meta["unk_token"] = settings.unk_token;
  }
  if (wants(metric, Metric::disambiguation)) {
    const auto dict = load_dictionary(*settings.dictionary_path, warnings);
    report.disambiguation_std = disambiguation(flatten(outputs), flatten(*sources), dict);
    meta["dictionary"] = *settings.dictionary_path;
    meta["dictionary_entries"] = dict.size();
  }
  if (wants(metric, Metric::coherence)) {
    report.coherence = coherence(outputs, *embeddings, warnings);
    meta["embeddings"] = settings.embeddings_source;
  }
  return report;
}

}  // namespace ctxmem
