#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <vector>

#include "ctxmem/corpus.hpp"
#include "ctxmem/random.hpp"
#include "ctxmem/tensor.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem {

/// Padded id matrices for B sentence pairs plus their m context sentences.
struct Batch {
  std::size_t size = 0;
  std::size_t memory_size = 0;
  std::size_t source_max = 0;
  std::size_t target_max = 0;
  std::size_t context_max = 0;

  std::vector<int> source;   // [B x source_max]
  std::vector<int> target;   // [B x target_max]
  std::vector<int> context;  // [B x m x context_max]
  Mask source_mask;
  Mask target_mask;
  Mask context_mask;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;
  std::vector<std::size_t> context_lengths;  // [B x m]
  std::vector<std::pair<std::size_t, std::size_t>> origin;  // (doc, position)

  std::vector<int> source_row(std::size_t b) const {
    return {source.begin() + b * source_max, source.begin() + b * source_max + source_lengths[b]};
  }
  std::vector<int> target_row(std::size_t b) const {
    return {target.begin() + b * target_max, target.begin() + b * target_max + target_lengths[b]};
  }
  std::vector<int> context_row(std::size_t b, std::size_t j) const {
    const std::size_t at = (b * memory_size + j) * context_max;
    return {context.begin() + at, context.begin() + at + context_lengths[b * memory_size + j]};
  }
  std::vector<std::vector<int>> contexts(std::size_t b) const {
    std::vector<std::vector<int>> out;
    for (std::size_t j = 0; j < memory_size; ++j) out.push_back(context_row(b, j));
    return out;
  }
  std::size_t target_tokens() const {
    return std::accumulate(target_lengths.begin(), target_lengths.end(), std::size_t{0});
  }
};

namespace detail {

inline void pad_into(std::vector<int>& out, Mask& mask, const std::vector<int>& ids,
                     std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) {
    const bool pad = i >= ids.size();
    out.push_back(pad ? kPadId : ids[i]);
    mask.push_back(pad);
  }
}

}  // namespace detail

inline Batch assemble_batch(const DocumentCorpus& corpus,
                            const std::vector<std::pair<std::size_t, std::size_t>>& members,
                            ContextMode mode, std::size_t m, std::uint64_t seed) {
  Batch batch;
  batch.size = members.size();
  batch.memory_size = m;
  batch.origin = members;
  std::vector<std::vector<std::vector<int>>> contexts;
  for (const auto& [d, p] : members) {
    const auto& pair = corpus.documents[d][p];
    batch.source_max = std::max(batch.source_max, pair.source.size());
    batch.target_max = std::max(batch.target_max, pair.target.size());
    contexts.push_back(select_context(corpus, d, p, mode, m, seed));
    for (const auto& c : contexts.back()) batch.context_max = std::max(batch.context_max, c.size());
  }
  for (std::size_t b = 0; b < members.size(); ++b) {
    const auto& pair = corpus.documents[members[b].first][members[b].second];
    detail::pad_into(batch.source, batch.source_mask, pair.source, batch.source_max);
    detail::pad_into(batch.target, batch.target_mask, pair.target, batch.target_max);
    batch.source_lengths.push_back(pair.source.size());
    batch.target_lengths.push_back(pair.target.size());
    for (const auto& c : contexts[b]) {
      detail::pad_into(batch.context, batch.context_mask, c, batch.context_max);
      batch.context_lengths.push_back(c.size());
    }
  }
  return batch;
}

/// Token-budget batches: sentences are shuffled, stably sorted by source
/// length and packed greedily so that size x longest source <= max_tokens.
/// Batch order is shuffled again. Everything is a function of `seed`.
inline std::vector<Batch> make_batches(const DocumentCorpus& corpus, ContextMode mode,
                                       std::size_t m, std::size_t max_tokens,
                                       std::uint64_t seed, std::ostream* warnings = &std::cerr) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t d = 0; d < corpus.documents.size(); ++d)
    for (std::size_t p = 0; p < corpus.documents[d].size(); ++p) {
      if (corpus.documents[d][p].source.size() > max_tokens) {
        if (warnings) {
          *warnings << "warning: skipping sentence " << p << " of document " << d << " ("
                    << corpus.documents[d][p].source.size() << " tokens > budget " << max_tokens
                    << ")\n";
        }
        continue;
      }
      order.emplace_back(d, p);
    }
  Rng rng(mix_seed(seed, 0xba7c4));
  shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    return corpus.documents[a.first][a.second].source.size() <
           corpus.documents[b.first][b.second].source.size();
  });

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> groups;
  std::vector<std::pair<std::size_t, std::size_t>> current;
  std::size_t longest = 0;
  for (const auto& member : order) {
    const std::size_t len = corpus.documents[member.first][member.second].source.size();
    const std::size_t widened = std::max(longest, len);
    if (!current.empty() && (current.size() + 1) * widened > max_tokens) {
      groups.push_back(std::move(current));
      current.clear();
      longest = 0;
    }
    current.push_back(member);
    longest = std::max(longest, len);
  }
  if (!current.empty()) groups.push_back(std::move(current));
  shuffle(groups.begin(), groups.end(), rng);

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(assemble_batch(corpus, g, mode, m, seed));
  return batches;
}

}  // namespace ctxmem
