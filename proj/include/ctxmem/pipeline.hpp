#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctxmem/bpe.hpp"
#include "ctxmem/checkpoint.hpp"
#include "ctxmem/config.hpp"
#include "ctxmem/corpus.hpp"
#include "ctxmem/evaluation.hpp"
#include "ctxmem/inference.hpp"
#include "ctxmem/vocabulary.hpp"

namespace ctxmem {

inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kBpeFile = "bpe.txt";
inline constexpr const char* kSourceVocabFile = "src.vocab";
inline constexpr const char* kTargetVocabFile = "tgt.vocab";

/// Joint BPE, per-side vocabularies and the id-level corpus of a run.
struct TrainingData {
  BpeModel bpe;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  DocumentCorpus corpus;
};

inline TrainingData prepare_training_data(const std::vector<ParallelTextDocument>& text,
                                          std::size_t bpe_merges) {
  std::vector<std::string> all;
  for (const auto& d : text) {
    all.insert(all.end(), d.source.begin(), d.source.end());
    all.insert(all.end(), d.target.begin(), d.target.end());
  }
  TrainingData data{train_bpe(all, bpe_merges), {}, {}, {}};
  std::vector<std::vector<std::string>> src, tgt;
  for (const auto& d : text) {
    for (const auto& s : d.source) src.push_back(data.bpe.segment(s));
    for (const auto& s : d.target) tgt.push_back(data.bpe.segment(s));
  }
  data.source_vocab = Vocabulary::build(src);
  data.target_vocab = Vocabulary::build(tgt);
  data.corpus = encode_corpus(text, data.bpe, data.source_vocab, data.target_vocab);
  return data;
}

/// A trained model together with the text pipeline it was trained with.
template <class T>
struct TranslationSystem {
  ContextualTransformer<T> model;
  BpeModel bpe;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  RunConfig config;
};

/// Loads `checkpoint` and the BPE and vocabulary files stored next to it.
template <class T>
TranslationSystem<T> load_system(const std::string& checkpoint) {
  const auto dir = std::filesystem::path(checkpoint).parent_path();
  const Checkpoint ck = load_checkpoint(checkpoint);
  auto bpe = BpeModel::load((dir / kBpeFile).string());
  auto src = Vocabulary::load((dir / kSourceVocabFile).string());
  auto tgt = Vocabulary::load((dir / kTargetVocabFile).string());
  if (src.size() != ck.source_vocab || tgt.size() != ck.target_vocab)
    throw CheckpointError(checkpoint + ": vocabulary files do not match the checkpoint");
  return {model_from_checkpoint<T>(ck), std::move(bpe), std::move(src), std::move(tgt), ck.config};
}

template <class T>
std::vector<TextDocument> translate_text(const TranslationSystem<T>& system,
                                         const std::vector<TextDocument>& sources, ContextMode mode,
                                         const DecodeOptions& options, std::size_t threads = 1) {
  const auto corpus = encode_source_documents(sources, system.bpe, system.source_vocab);
  const auto ids = translate_corpus(system.model, corpus, mode, options, threads);
  std::vector<TextDocument> out;
  for (const auto& doc : ids) {
    auto& text = out.emplace_back();
    for (const auto& s : doc) text.push_back(decode_sentence(s, system.target_vocab));
  }
  return out;
}

/// Rows of the target embedding keyed by subword symbol.
template <class T>
EmbeddingTable embedding_table(const TranslationSystem<T>& system) {
  const auto& e = system.model.transformer().target_embedding;
  const std::size_t d = e.cols();
  auto row = [&](std::size_t r) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = static_cast<double>(e.at(r, k));
    return v;
  };
  EmbeddingTable table;
  const auto& tokens = system.target_vocab.tokens();
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) table.vectors[tokens[i]] = row(i);
  table.unknown = row(kUnkId);
  return table;
}

/// Word-level table for the words of `docs`: each word maps to the mean of
/// its subword rows in the target embedding.
template <class T>
EmbeddingTable word_embedding_table(const TranslationSystem<T>& system, const std::vector<TextDocument>& docs) {
  const auto subwords = embedding_table(system);
  EmbeddingTable table;
  table.unknown = subwords.unknown;
  for (const auto& d : docs)
    for (const auto& s : d)
      for (const auto& w : split_whitespace(s)) {
        if (table.vectors.count(w)) continue;
        const auto pieces = system.bpe.segment_word(w);
        table.vectors[w] = sentence_vector(pieces, subwords);
      }
  return table;
}

}  // namespace ctxmem
