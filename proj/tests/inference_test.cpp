#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ctxmem/inference.hpp"
#include "ctxmem/training.hpp"
#include "test_support.hpp"

namespace ctxmem {
namespace {

using testing_support::toy_run_config;

constexpr std::size_t kVocab = 12;

ContextualTransformer<float> random_model(std::size_t m, std::uint64_t seed,
                                          MergeKind kind = MergeKind::contextual_rnn,
                                          std::size_t target_vocab = kVocab) {
  auto cfg = toy_run_config(m, kind);
  return ContextualTransformer<float>(cfg.model(kVocab, target_vocab), seed);
}

std::vector<int> random_sentence(Rng& rng) {
  std::vector<int> s;
  const std::size_t len = 1 + uniform_index(rng, 5);
  for (std::size_t i = 0; i < len; ++i) s.push_back(kNumReserved + static_cast<int>(uniform_index(rng, kVocab - kNumReserved)));
  s.push_back(kEosId);
  return s;
}

std::vector<std::vector<int>> random_contexts(Rng& rng, std::size_t m) {
  std::vector<std::vector<int>> c;
  for (std::size_t j = 0; j < m; ++j) c.push_back(random_sentence(rng));
  return c;
}

// Independent log-softmax over the last logits row, summed along a sequence.
double oracle_log_prob(const ContextualTransformer<float>& model, const EncodedSequence<float>& enc,
                       const std::vector<int>& tokens) {
  std::vector<int> prefix{kBosId};
  double total = 0;
  for (int t : tokens) {
    const auto logits = model.logits(prefix, enc);
    const std::size_t last = logits.rows() - 1;
    long double z = 0;
    for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(static_cast<long double>(logits.at(last, v)));
    total += static_cast<double>(static_cast<long double>(logits.at(last, static_cast<std::size_t>(t))) - std::log(z));
    prefix.push_back(t);
  }
  return total;
}

void expect_well_formed(const std::vector<int>& out, std::size_t max_len) {
  ASSERT_FALSE(out.empty());
  EXPECT_LE(out.size(), max_len);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NE(out[i], kPadId);
    EXPECT_NE(out[i], kBosId);
    if (i + 1 < out.size()) {
      EXPECT_NE(out[i], kEosId);
    }
  }
}

TEST(GreedyDecode, MaxLenOneGivesOneToken) {
  const auto model = random_model(2, 3);
  const auto out = greedy_decode(model, std::vector<int>{4, 5, kEosId}, {{6, kEosId}, {kEosId}}, 1);
  EXPECT_EQ(out.size(), 1u);
}

TEST(GreedyDecode, ZeroMaxLenIsRejected) {
  const auto model = random_model(0, 3);
  EXPECT_THROW(greedy_decode(model, std::vector<int>{4, kEosId}, {}, 0), ContractError);
}

TEST(GreedyDecode, PicksArgmaxAtEveryStep) {
  const auto model = random_model(1, 8);
  const std::vector<int> src{4, 7, 9, kEosId};
  const std::vector<std::vector<int>> ctx{{5, 5, kEosId}};
  const auto out = greedy_decode(model, src, ctx, 6);
  NoGradGuard no_grad;
  const auto enc = model.encode(src, ctx);
  std::vector<int> prefix{kBosId};
  for (int tok : out) {
    const auto logits = model.logits(prefix, enc);
    const std::size_t last = logits.rows() - 1;
    int best = -1;
    for (std::size_t v = 0; v < logits.cols(); ++v) {
      if (v == kPadId || v == kBosId) continue;
      if (best < 0 || logits.at(last, v) > logits.at(last, static_cast<std::size_t>(best))) best = static_cast<int>(v);
    }
    EXPECT_EQ(tok, best);
    prefix.push_back(tok);
  }
}

TEST(GreedyDecode, NeverEmitsReservedTokens) {
  Rng rng(11);
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto model = random_model(2, seed);
    const auto src = random_sentence(rng);
    expect_well_formed(greedy_decode(model, src, random_contexts(rng, 2), 7), 7);
  }
}

TEST(BeamSearch, BeamOneWithoutPenaltyEqualsGreedy) {
  Rng rng(5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto model = random_model(2, seed, MergeKind::flat);
    const auto src = random_sentence(rng);
    const auto ctx = random_contexts(rng, 2);
    EXPECT_EQ(beam_search(model, src, ctx, 1, 0.0, 8), greedy_decode(model, src, ctx, 8)) << seed;
  }
}

TEST(BeamSearch, FullBeamFindsTheExhaustiveOptimum) {
  // Target vocabulary of 7 leaves 5 emittable ids and max_len 2 gives 21
  // complete sequences.
  constexpr std::size_t V = 7;
  for (double alpha : {0.0, 0.6, 1.5}) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto model = random_model(1, seed, MergeKind::average, V);
      const std::vector<int> src{4, 6, kEosId};
      const std::vector<std::vector<int>> ctx{{5, kEosId}};
      NoGradGuard no_grad;
      const auto enc = model.encode(src, ctx);
      std::vector<int> best;
      double best_score = -std::numeric_limits<double>::infinity();
      auto consider = [&](const std::vector<int>& seq) {
        const double s = oracle_log_prob(model, enc, seq) / std::pow((5.0 + seq.size()) / 6.0, alpha);
        if (s > best_score) {
          best_score = s;
          best = seq;
        }
      };
      for (int a = 0; a < static_cast<int>(V); ++a) {
        if (a == kPadId || a == kBosId) continue;
        if (a == kEosId) {
          consider({a});
          continue;
        }
        for (int b = 0; b < static_cast<int>(V); ++b)
          if (b != kPadId && b != kBosId) consider({a, b});
      }
      const auto hyp = beam_search_hypothesis(model, src, ctx, DecodeOptions{V, alpha, 2});
      EXPECT_EQ(hyp.tokens, best) << "alpha " << alpha << " seed " << seed;
      EXPECT_NEAR(hyp.score, best_score, 1e-6);
    }
  }
}

TEST(BeamSearch, ScoreIsAtLeastTheGreedyScore) {
  Rng rng(17);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto model = random_model(2, seed);
    const auto src = random_sentence(rng);
    const auto ctx = random_contexts(rng, 2);
    const auto greedy = greedy_decode(model, src, ctx, 6);
    for (std::size_t beam : {2u, 3u, 5u}) {
      const auto hyp = beam_search_hypothesis(model, src, ctx, DecodeOptions{beam, 0.0, 6});
      EXPECT_GE(hyp.score, sequence_log_prob(model, src, ctx, greedy) - 1e-9);
      EXPECT_NEAR(hyp.score, sequence_log_prob(model, src, ctx, hyp.tokens), 1e-9);
      expect_well_formed(hyp.tokens, 6);
    }
  }
}

TEST(BeamSearch, ZeroBeamIsRejected) {
  const auto model = random_model(0, 1);
  EXPECT_THROW(beam_search(model, std::vector<int>{4, kEosId}, {}, 0, 0.6, 4), ContractError);
}

TEST(LengthPenalty, MatchesClosedForm) {
  EXPECT_DOUBLE_EQ(length_penalty(1, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(length_penalty(1, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(length_penalty(7, 1.0), 2.0);
  EXPECT_NEAR(length_penalty(4, 0.6), std::pow(1.5, 0.6), 1e-15);
  EXPECT_DOUBLE_EQ(normalized_score(-3.0, 7, 1.0), -1.5);
}

TEST(TranslateDocument, OutputCountEqualsInputCount) {
  const auto model = random_model(2, 4);
  Rng rng(2);
  std::vector<std::vector<int>> doc;
  for (int i = 0; i < 5; ++i) doc.push_back(random_sentence(rng));
  EXPECT_EQ(translate_document(model, doc, ContextMode::previous, DecodeOptions{1, 0.0, 5}).size(), 5u);
  EXPECT_EQ(translate_document(model, doc, ContextMode::next, DecodeOptions{2, 0.6, 5}).size(), 5u);
  EXPECT_TRUE(translate_document(model, {}, ContextMode::previous, DecodeOptions{}).empty());
}

TEST(TranslateDocument, RandomModeIsAConfigError) {
  const auto model = random_model(2, 4);
  EXPECT_THROW(translate_document(model, {{4, kEosId}}, ContextMode::random, DecodeOptions{}), ConfigError);
  EXPECT_THROW(translate_corpus(model, DocumentCorpus{}, ContextMode::random, DecodeOptions{}), ConfigError);
}

TEST(TranslateDocument, UsesThePrecedingSourceSentences) {
  const auto model = random_model(2, 6);
  Rng rng(9);
  std::vector<std::vector<int>> doc;
  for (int i = 0; i < 4; ++i) doc.push_back(random_sentence(rng));
  const DecodeOptions opts{1, 0.0, 6};
  const auto out = translate_document(model, doc, ContextMode::previous, opts);
  const std::vector<int> eos{kEosId};
  EXPECT_EQ(out[0], greedy_decode(model, doc[0], {eos, eos}, 6));
  EXPECT_EQ(out[1], greedy_decode(model, doc[1], {eos, doc[0]}, 6));
  EXPECT_EQ(out[3], greedy_decode(model, doc[3], {doc[1], doc[2]}, 6));
  const auto next = translate_document(model, doc, ContextMode::next, opts);
  EXPECT_EQ(next[2], greedy_decode(model, doc[2], {doc[3], eos}, 6));
}

TEST(TranslateDocument, SingleSentenceWithPassThroughGateEqualsBaseline) {
  auto model = random_model(3, 21);
  model.set_gate_override(1.0);
  const std::vector<std::vector<int>> doc{{4, 8, 6, kEosId}};
  const DecodeOptions opts{3, 0.6, 6};
  const auto with_memory = translate_document(model, doc, ContextMode::previous, opts);
  model.set_memory_size(0);
  EXPECT_EQ(with_memory, translate_document(model, doc, ContextMode::previous, opts));
}

TEST(TranslateDocument, WithoutMemorySentencesAreIndependent) {
  const auto model = random_model(0, 13);
  Rng rng(4);
  std::vector<std::vector<int>> doc;
  for (int i = 0; i < 4; ++i) doc.push_back(random_sentence(rng));
  const auto out = translate_document(model, doc, ContextMode::previous, DecodeOptions{2, 0.6, 6});
  for (std::size_t i = 0; i < doc.size(); ++i)
    EXPECT_EQ(out[i], translate_document(model, {doc[i]}, ContextMode::previous, DecodeOptions{2, 0.6, 6})[0]);
}

TEST(TranslateCorpus, ThreadCountDoesNotChangeOutputs) {
  const auto model = random_model(2, 14);
  Rng rng(8);
  DocumentCorpus corpus;
  for (std::size_t d = 0; d < 5; ++d) {
    corpus.documents.emplace_back();
    for (std::size_t p = 0; p < 1 + d % 3; ++p) corpus.documents[d].push_back({random_sentence(rng), {}, d, p});
  }
  const DecodeOptions opts{2, 0.6, 5};
  const auto serial = translate_corpus(model, corpus, ContextMode::previous, opts, 1);
  ASSERT_EQ(serial.size(), corpus.documents.size());
  EXPECT_EQ(serial, translate_corpus(model, corpus, ContextMode::previous, opts, 3));
}

// A document-level task where the translation of token 7 depends on the
// preceding sentence: after 5 it becomes 8, after 6 it becomes 9.
class ContextFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto cfg = toy_run_config(1, MergeKind::average);
    cfg.transformer.dropout = 0.0;
    cfg.label_smoothing = 0.0;
    cfg.warmup_steps = 60;
    cfg.batch_tokens = 64;
    auto doc = [](std::vector<int> src, std::vector<int> tgt, std::size_t d) {
      std::vector<SentencePair> out;
      for (std::size_t p = 0; p < src.size(); ++p)
        out.push_back({{src[p], kEosId}, {tgt[p], kEosId}, d, p});
      return out;
    };
    corpus_.documents = {doc({5, 7, 6, 7}, {5, 8, 6, 9}, 0), doc({6, 7, 5, 7}, {6, 9, 5, 8}, 1)};
    model_ = new ContextualTransformer<float>(cfg.model(kVocab, kVocab), cfg.seed);
    Trainer<float> trainer(*model_, cfg, corpus_);
    for (int i = 0; i < 600 && final_loss_ > 0.01; ++i) final_loss_ = trainer.step();
  }
  static void TearDownTestSuite() { delete model_; }

  static std::vector<std::vector<int>> sources(std::size_t d) {
    std::vector<std::vector<int>> s;
    for (const auto& p : corpus_.documents[d]) s.push_back(p.source);
    return s;
  }

  static inline DocumentCorpus corpus_;
  static inline ContextualTransformer<float>* model_ = nullptr;
  static inline double final_loss_ = 1e30;
};

TEST_F(ContextFixture, OverfitModelReproducesItsTargets) {
  ASSERT_LT(final_loss_, 0.05);
  for (std::size_t d = 0; d < corpus_.documents.size(); ++d) {
    const auto out = translate_document(*model_, sources(d), ContextMode::previous, DecodeOptions{1, 0.0, 4});
    for (std::size_t p = 0; p < out.size(); ++p) EXPECT_EQ(out[p], corpus_.documents[d][p].target) << d << "," << p;
  }
}

TEST_F(ContextFixture, ShuffledSentenceOrderChangesOutputs) {
  const DecodeOptions opts{2, 0.6, 4};
  const auto original = translate_document(*model_, sources(0), ContextMode::previous, opts);
  auto shuffled_src = sources(0);
  std::swap(shuffled_src[0], shuffled_src[2]);
  const auto shuffled = translate_document(*model_, shuffled_src, ContextMode::previous, opts);
  EXPECT_NE(original[1], shuffled[1]);
  EXPECT_NE(original[3], shuffled[3]);
}

}  // namespace
}  // namespace ctxmem
