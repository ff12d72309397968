#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "ctxmem/corpus.hpp"
#include "ctxmem/error.hpp"
#include "ctxmem/model.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem {

struct DecodeOptions {
  std::size_t beam = 1;
  double alpha = 0.6;
  std::size_t max_len = 128;
};

/// Generated tokens (BOS excluded, EOS kept when produced) with their scores.
struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
};

inline double length_penalty(std::size_t len, double alpha) {
  return alpha == 0.0 ? 1.0 : std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

inline double normalized_score(double log_prob, std::size_t len, double alpha) {
  return log_prob / length_penalty(len, alpha);
}

namespace detail {

inline bool emittable(int id) { return id != kPadId && id != kBosId; }

/// Log-softmax of the last decoder row, in double.
template <class T>
std::vector<double> next_log_probs(const ContextualTransformer<T>& model, std::span<const int> prefix,
                                   const EncodedSequence<T>& enc) {
  const Tensor<T> logits = model.logits(prefix, enc);
  const std::size_t V = logits.cols();
  const auto row = logits.data().subspan((logits.rows() - 1) * V, V);
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : row) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (T x : row) sum += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(V);
  for (std::size_t i = 0; i < V; ++i) out[i] = static_cast<double>(row[i]) - lse;
  return out;
}

inline std::size_t effective_max_len(std::size_t max_len, const TransformerConfig& cfg) {
  if (max_len == 0) throw ContractError("max_len must be at least 1");
  return std::min(max_len, cfg.max_positions);
}

/// Higher score first, then the lexicographically smaller token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

inline std::vector<int> with_bos(const std::vector<int>& tokens) {
  std::vector<int> prefix{kBosId};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  return prefix;
}

template <class T>
Hypothesis greedy_from(const ContextualTransformer<T>& model, const EncodedSequence<T>& enc,
                       std::size_t max_len, double alpha) {
  Hypothesis h;
  std::vector<int> prefix{kBosId};
  while (h.tokens.size() < max_len) {
    const auto lp = next_log_probs(model, prefix, enc);
    int best = -1;
    double best_total = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < lp.size(); ++i) {
      if (!emittable(static_cast<int>(i))) continue;
      const double total = h.log_prob + lp[i];
      if (best < 0 || total > best_total) {
        best = static_cast<int>(i);
        best_total = total;
      }
    }
    h.tokens.push_back(best);
    h.log_prob = best_total;
    prefix.push_back(best);
    if (best == kEosId) break;
  }
  h.finished = true;
  h.score = normalized_score(h.log_prob, h.tokens.size(), alpha);
  return h;
}

}  // namespace detail

/// Argmax decoding; ties go to the lowest token id.
template <class T>
std::vector<int> greedy_decode(const ContextualTransformer<T>& model, std::span<const int> source,
                               const std::vector<std::vector<int>>& contexts, std::size_t max_len) {
  NoGradGuard no_grad;
  const std::size_t limit = detail::effective_max_len(max_len, model.config().transformer);
  const auto enc = model.encode(source, contexts);
  return detail::greedy_from(model, enc, limit, 0.0).tokens;
}

/// Beam search over length-normalized scores. Finished hypotheses stay in the
/// beam and compete with open ones; the result is the best completed
/// hypothesis seen, with the greedy path always among the candidates.
template <class T>
Hypothesis beam_search_hypothesis(const ContextualTransformer<T>& model, std::span<const int> source,
                                  const std::vector<std::vector<int>>& contexts,
                                  const DecodeOptions& options) {
  if (options.beam == 0) throw ContractError("beam must be at least 1");
  NoGradGuard no_grad;
  const std::size_t limit = detail::effective_max_len(options.max_len, model.config().transformer);
  const auto enc = model.encode(source, contexts);

  Hypothesis best = detail::greedy_from(model, enc, limit, options.alpha);
  auto archive = [&](const Hypothesis& h) {
    if (detail::better(h, best)) best = h;
  };

  std::vector<Hypothesis> pool{Hypothesis{}};
  for (std::size_t step = 0; step < limit; ++step) {
    std::vector<Hypothesis> candidates;
    bool any_open = false;
    for (const auto& h : pool) {
      if (h.finished) {
        candidates.push_back(h);
        continue;
      }
      any_open = true;
      const auto lp = detail::next_log_probs(model, detail::with_bos(h.tokens), enc);
      std::vector<int> ids;
      for (std::size_t i = 0; i < lp.size(); ++i)
        if (detail::emittable(static_cast<int>(i))) ids.push_back(static_cast<int>(i));
      const std::size_t keep = std::min(options.beam, ids.size());
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(),
                        [&](int a, int b) { return lp[a] != lp[b] ? lp[a] > lp[b] : a < b; });
      for (std::size_t k = 0; k < keep; ++k) {
        Hypothesis next;
        next.tokens = h.tokens;
        next.tokens.push_back(ids[k]);
        next.log_prob = h.log_prob + lp[ids[k]];
        next.finished = ids[k] == kEosId || next.tokens.size() >= limit;
        next.score = normalized_score(next.log_prob, next.tokens.size(), options.alpha);
        if (next.finished) archive(next);
        candidates.push_back(std::move(next));
      }
    }
    if (!any_open) break;
    const std::size_t keep = std::min(options.beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), detail::better);
    candidates.resize(keep);
    pool = std::move(candidates);
  }
  return best;
}

template <class T>
std::vector<int> beam_search(const ContextualTransformer<T>& model, std::span<const int> source,
                             const std::vector<std::vector<int>>& contexts, std::size_t beam,
                             double alpha, std::size_t max_len) {
  return beam_search_hypothesis(model, source, contexts, DecodeOptions{beam, alpha, max_len}).tokens;
}

/// Log-probability of a full token sequence (BOS excluded) under the model.
template <class T>
double sequence_log_prob(const ContextualTransformer<T>& model, std::span<const int> source,
                         const std::vector<std::vector<int>>& contexts, const std::vector<int>& tokens) {
  NoGradGuard no_grad;
  const auto enc = model.encode(source, contexts);
  double total = 0.0;
  std::vector<int> prefix{kBosId};
  for (int t : tokens) {
    total += detail::next_log_probs(model, prefix, enc)[static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  return total;
}

/// Decodes the sentences of one document in order, each with its own
/// source-side context window.
template <class T>
std::vector<std::vector<int>> translate_document(const ContextualTransformer<T>& model,
                                                 const std::vector<std::vector<int>>& sources,
                                                 ContextMode mode, const DecodeOptions& options) {
  if (mode == ContextMode::random)
    throw ConfigError("context_mode random is a training control and cannot be used for decoding");
  DocumentCorpus doc;
  doc.documents.emplace_back();
  for (std::size_t p = 0; p < sources.size(); ++p) doc.documents[0].push_back({sources[p], {}, 0, p});
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  for (std::size_t p = 0; p < sources.size(); ++p) {
    const auto ctx = select_context(doc, 0, p, mode, model.memory_size(), 0);
    if (options.beam == 1 && options.alpha == 0.0)
      out.push_back(greedy_decode(model, sources[p], ctx, options.max_len));
    else
      out.push_back(beam_search_hypothesis(model, sources[p], ctx, options).tokens);
  }
  return out;
}

/// Translates every document. Documents are distributed over up to `threads`
/// workers; each document is decoded sequentially.
template <class T>
std::vector<std::vector<std::vector<int>>> translate_corpus(const ContextualTransformer<T>& model,
                                                            const DocumentCorpus& corpus,
                                                            ContextMode mode,
                                                            const DecodeOptions& options,
                                                            std::size_t threads = 1) {
  if (mode == ContextMode::random)
    throw ConfigError("context_mode random is a training control and cannot be used for decoding");
  const std::size_t D = corpus.documents.size();
  std::vector<std::vector<std::vector<int>>> out(D);
  auto sources_of = [&](std::size_t d) {
    std::vector<std::vector<int>> s;
    for (const auto& pair : corpus.documents[d]) s.push_back(pair.source);
    return s;
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(D, 1));
  if (workers <= 1) {
    for (std::size_t d = 0; d < D; ++d) out[d] = translate_document(model, sources_of(d), mode, options);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t d = next++; d < D; d = next++)
          out[d] = translate_document(model, sources_of(d), mode, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace ctxmem
