#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "ctxmem/evaluation.hpp"
#include "ctxmem/random.hpp"
#include "test_support.hpp"

namespace ctxmem {
namespace {

using testing_support::TempDir;

std::vector<Tokens> sents(std::initializer_list<const char*> lines) {
  std::vector<Tokens> out;
  for (const char* l : lines) out.push_back(tokenize(l));
  return out;
}

std::vector<Tokens> random_corpus(Rng& rng, std::size_t n) {
  static const char* words[] = {"a", "b", "c", "d", "e"};
  std::vector<Tokens> out(n);
  for (auto& s : out) {
    const std::size_t len = 1 + uniform_index(rng, 8);
    for (std::size_t i = 0; i < len; ++i) s.push_back(words[uniform_index(rng, 5)]);
  }
  return out;
}

TEST(Bleu, IdentityIsExactlyOneHundred) {
  const auto c = sents({"the cat sat on the mat", "a b c d", "one two three four five"});
  EXPECT_EQ(bleu(c, c), 100.0);
}

TEST(Bleu, RepeatedUnigramIsClipped) {
  const auto st = bleu_stats(sents({"the the the the the"}), sents({"the cat sat"}));
  EXPECT_EQ(st.matches[0], 1u);
  EXPECT_EQ(st.totals[0], 5u);
  EXPECT_EQ(st.matches[1], 0u);
  EXPECT_EQ(bleu(sents({"the the the the the"}), sents({"the cat sat"})), 0.0);
}

TEST(Bleu, MatchesHandComputedPrecisions) {
  // Precisions 5/6, 4/5, 3/4, 2/3; c = 6 < r = 7.
  const double expected = 100.0 * std::exp(1.0 - 7.0 / 6.0) * std::pow(5.0 / 6 * 4.0 / 5 * 3.0 / 4 * 2.0 / 3, 0.25);
  EXPECT_NEAR(bleu(sents({"a b c d e f"}), sents({"a b c d e g h"})), expected, 1e-6);
}

TEST(Bleu, PoolsClippedCountsAcrossSentences) {
  const auto cand = sents({"a a b c d", "x y z w"});
  const auto ref = sents({"a b b c d", "x y z w"});
  const auto st = bleu_stats(cand, ref);
  // Sentence 1: a clipped to 1, b, c, d -> 4 of 5; sentence 2: 4 of 4.
  EXPECT_EQ(st.matches[0], 8u);
  EXPECT_EQ(st.totals[0], 9u);
  EXPECT_EQ(st.matches[1], 6u);  // a b, b c, c d / x y, y z, z w
  EXPECT_EQ(st.totals[1], 7u);
  EXPECT_EQ(st.matches[2], 3u);
  EXPECT_EQ(st.totals[2], 5u);
  EXPECT_EQ(st.matches[3], 1u);
  EXPECT_EQ(st.totals[3], 3u);
  const double expected = 100.0 * std::pow(8.0 / 9 * 6.0 / 7 * 3.0 / 5 * 1.0 / 3, 0.25);
  EXPECT_NEAR(bleu(cand, ref), expected, 1e-6);
}

TEST(Bleu, LongerCandidateHasNoBrevityPenalty) {
  const auto ref = sents({"a b c d"});
  const auto cand = sents({"a b c d e"});
  EXPECT_NEAR(bleu(cand, ref), 100.0 * std::pow(4.0 / 5 * 3.0 / 4 * 2.0 / 3 * 1.0 / 2, 0.25), 1e-6);
}

TEST(Bleu, RejectsEmptyAndMismatchedInput) {
  EXPECT_THROW(bleu({}, {}), ContractError);
  EXPECT_THROW(bleu(sents({"a"}), sents({"a", "b"})), ContractError);
}

TEST(BleuProperty, PermutationInvariantAndBounded) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 6);
    auto cand = random_corpus(rng, n);
    auto ref = random_corpus(rng, n);
    const double b = bleu(cand, ref);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 100.0);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    shuffle(perm.begin(), perm.end(), rng);
    std::vector<Tokens> pc, pr;
    for (auto i : perm) {
      pc.push_back(cand[i]);
      pr.push_back(ref[i]);
    }
    EXPECT_NEAR(bleu(pc, pr), b, 1e-9);
    if (b == 100.0) {
      EXPECT_EQ(cand, ref);
    }
  }
}

TEST(Punctuation, UsesUnicodeCategories) {
  EXPECT_TRUE(is_punctuation("."));
  EXPECT_TRUE(is_punctuation("..."));
  EXPECT_TRUE(is_punctuation("\xE3\x80\x82"));  // ideographic full stop
  EXPECT_TRUE(is_punctuation("\xE2\x80\x94"));  // dash punctuation
  EXPECT_TRUE(is_punctuation("\xC2\xBF"));      // inverted question mark
  EXPECT_FALSE(is_punctuation("don't"));
  EXPECT_FALSE(is_punctuation("+"));  // math symbol, not punctuation
  EXPECT_FALSE(is_punctuation(""));
}

const StopwordList kStop{"the", "a", "on"};

TokenDocuments fixture_doc() {
  return {{tokenize("the cat sat"), tokenize("cat sat mat ."), tokenize("a dog sat on mat")}};
}

TEST(Consistency, CountsPreviousWindowMatches) {
  const auto counts = consistency_counts(fixture_doc(), {ContextMode::previous, 1, kStop});
  EXPECT_EQ(counts[0], (std::vector<std::size_t>{0, 2, 2}));
  EXPECT_NEAR(consistency(fixture_doc(), {ContextMode::previous, 1, kStop}), 4.0 / 3.0, 1e-12);
}

TEST(Consistency, CountsNextWindowMatches) {
  const auto counts = consistency_counts(fixture_doc(), {ContextMode::next, 1, kStop});
  EXPECT_EQ(counts[0], (std::vector<std::size_t>{2, 2, 0}));
  EXPECT_EQ(consistency_counts(fixture_doc(), {ContextMode::next, 2, kStop})[0],
            (std::vector<std::size_t>{2, 2, 0}));
}

TEST(Consistency, SingleMatchContributesOne) {
  const TokenDocuments docs{{tokenize("cat"), tokenize("cat sat mat")}};
  EXPECT_EQ(consistency_counts(docs, {ContextMode::previous, 3, StopwordList{}})[0][1], 1u);
}

TEST(Consistency, CountsEveryOccurrence) {
  const TokenDocuments docs{{tokenize("cat"), tokenize("cat dog cat")}};
  EXPECT_EQ(consistency_counts(docs, {ContextMode::previous, 1, StopwordList{}})[0][1], 2u);
}

TEST(Consistency, IdenticalSentencesCountTheirContentLength) {
  const TokenDocuments docs{{tokenize("x y z ,"), tokenize("x y z ,"), tokenize("x y z ,")}};
  const auto counts = consistency_counts(docs, {ContextMode::previous, 3, StopwordList{}});
  EXPECT_EQ(counts[0], (std::vector<std::size_t>{0, 3, 3}));
}

TEST(Consistency, FiltersUnknownAndStopwords) {
  const TokenDocuments docs{{tokenize("the <unk> cat"), tokenize("the <unk> cat")}};
  EXPECT_EQ(consistency_counts(docs, {ContextMode::previous, 1, kStop})[0][1], 1u);
}

TEST(Consistency, WindowStaysInsideADocument) {
  const TokenDocuments docs{{tokenize("cat")}, {tokenize("cat")}};
  EXPECT_EQ(consistency(docs, {ContextMode::previous, 3, StopwordList{}}), 0.0);
}

TEST(Consistency, MissingStopwordListIsAConfigError) {
  EXPECT_THROW(consistency(fixture_doc(), {ContextMode::previous, 1, std::nullopt}), ConfigError);
  EXPECT_THROW(load_stopwords("/nonexistent/stopwords.txt"), ConfigError);
}

TEST(ConsistencyProperty, NondecreasingInWindowSize) {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    TokenDocuments docs(1 + uniform_index(rng, 3));
    for (auto& d : docs) d = random_corpus(rng, 1 + uniform_index(rng, 5));
    const auto mode = uniform_index(rng, 2) ? ContextMode::previous : ContextMode::next;
    double prev = -1;
    for (std::size_t m = 0; m <= 5; ++m) {
      const double c = consistency(docs, {mode, m, StopwordList{"e"}});
      EXPECT_GE(c, prev);
      prev = c;
    }
  }
}

const std::vector<DictionaryEntry> kDict{{"bank", {"river", "money"}}};

TEST(Disambiguation, FourAndZeroGiveTwo) {
  const auto src = sents({"bank x", "bank", "y"});
  const auto out = sents({"money money", "money money", "river"});
  EXPECT_EQ(disambiguation_counts(out, src, kDict), (std::vector<std::size_t>{0, 4}));
  EXPECT_DOUBLE_EQ(disambiguation(out, src, kDict), 2.0);
}

TEST(Disambiguation, BalancedUseGivesZero) {
  const auto src = sents({"bank", "bank"});
  EXPECT_EQ(disambiguation(sents({"river", "money"}), src, kDict), 0.0);
}

TEST(Disambiguation, MatchesHandPooledStd) {
  const std::vector<DictionaryEntry> dict{{"bank", {"river", "money"}}, {"bat", {"animal", "club"}},
                                          {"absent", {"p", "q"}}};
  const auto src = sents({"bank bat", "bat", "bank"});
  const auto out = sents({"river club", "club club", "river"});
  // bank: river 2, money 0; bat: animal 0, club 3.
  EXPECT_EQ(disambiguation_counts(out, src, dict), (std::vector<std::size_t>{2, 0, 0, 3}));
  const double mean = 5.0 / 4;
  const double var = ((2 - mean) * (2 - mean) + 2 * mean * mean + (3 - mean) * (3 - mean)) / 4;
  EXPECT_NEAR(disambiguation(out, src, dict), std::sqrt(var), 1e-6);
}

TEST(Disambiguation, WordAbsentFromSourcesContributesNothing) {
  EXPECT_TRUE(disambiguation_counts(sents({"money"}), sents({"x"}), kDict).empty());
  EXPECT_EQ(disambiguation(sents({"money"}), sents({"x"}), kDict), 0.0);
}

TEST(Disambiguation, InvariantUnderCandidateRelabeling) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto src = random_corpus(rng, 6);
    const auto out = random_corpus(rng, 6);
    const std::vector<DictionaryEntry> d1{{"a", {"b", "c"}}, {"d", {"e", "a", "b"}}};
    const std::vector<DictionaryEntry> d2{{"a", {"c", "b"}}, {"d", {"b", "e", "a"}}};
    EXPECT_NEAR(disambiguation(out, src, d1), disambiguation(out, src, d2), 1e-12);
  }
}

TEST(Dictionary, SkipsEntriesWithOneCandidate) {
  std::ostringstream warn;
  const auto dict = parse_dictionary("bank\triver,money\nsolo\tone\nbat\tanimal,club,animal\n", &warn);
  ASSERT_EQ(dict.size(), 2u);
  EXPECT_EQ(dict[1].candidates, (std::vector<std::string>{"animal", "club"}));
  EXPECT_NE(warn.str().find("solo"), std::string::npos);
  EXPECT_THROW(parse_dictionary("no tab here\n", nullptr), IngestionError);
  EXPECT_THROW(load_dictionary("/nonexistent/dict.tsv", nullptr), ConfigError);
}

TEST(SenseAccuracy, ScoresAgainstReferenceSense) {
  const auto src = sents({"bank", "bank", "x"});
  const auto ref = sents({"river", "money", "river"});
  EXPECT_DOUBLE_EQ(sense_accuracy(sents({"river", "river", "y"}), src, ref, kDict), 0.5);
}

EmbeddingTable toy_table() {
  EmbeddingTable t;
  t.vectors = {{"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1}}};
  t.unknown = {0, 0};
  return t;
}

TEST(Coherence, IdenticalSentencesScoreOne) {
  const TokenDocuments docs{{tokenize("a c"), tokenize("a c"), tokenize("a c")}};
  EXPECT_NEAR(coherence(docs, toy_table(), nullptr), 1.0, 1e-12);
}

TEST(Coherence, OrthogonalMeansScoreZero) {
  const TokenDocuments docs{{tokenize("a a"), tokenize("b")}};
  EXPECT_EQ(coherence(docs, toy_table(), nullptr), 0.0);
}

TEST(Coherence, MatchesHandCosines) {
  // Means (0.5, 0.5), (1, 0), (0.5, 1).
  const TokenDocuments docs{{tokenize("a b"), tokenize("a"), tokenize("c b")}};
  const double expected = (1.0 / std::sqrt(2.0) + 1.0 / std::sqrt(5.0)) / 2.0;
  EXPECT_NEAR(coherence(docs, toy_table(), nullptr), expected, 1e-6);
}

TEST(Coherence, AveragesOverDocumentsAndSkipsSingletons) {
  std::ostringstream warn;
  const TokenDocuments docs{{tokenize("a"), tokenize("a")}, {tokenize("a")}, {tokenize("a"), tokenize("b")}};
  EXPECT_DOUBLE_EQ(coherence(docs, toy_table(), &warn), 0.5);
  EXPECT_NE(warn.str().find("document 1"), std::string::npos);
}

TEST(Coherence, UnknownTokensUseTheUnknownVector) {
  auto t = toy_table();
  t.unknown = {0, 2};
  const TokenDocuments docs{{tokenize("zzz"), tokenize("b")}};
  EXPECT_NEAR(coherence(docs, t, nullptr), 1.0, 1e-12);
}

TEST(CoherenceProperty, ScaleInvariant) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    EmbeddingTable t;
    for (const char* w : {"a", "b", "c", "d", "e"}) {
      std::vector<double> v(3);
      for (auto& x : v) x = uniform(rng, -1, 1);
      t.vectors[w] = v;
    }
    t.unknown = {0.1, 0.2, 0.3};
    TokenDocuments docs(2);
    for (auto& d : docs) d = random_corpus(rng, 2 + uniform_index(rng, 3));
    const double base = coherence(docs, t, nullptr);
    EXPECT_GE(base, -1.0 - 1e-12);
    EXPECT_LE(base, 1.0 + 1e-12);
    const double s = uniform(rng, 0.1, 10.0);
    for (auto& [w, v] : t.vectors)
      for (auto& x : v) x *= s;
    for (auto& x : t.unknown) x *= s;
    EXPECT_NEAR(coherence(docs, t, nullptr), base, 1e-9);
  }
}

TEST(Evaluate, BleuOnIdenticalDocuments) {
  const TokenDocuments docs{{tokenize("a b c d"), tokenize("e f g h")}};
  EvaluationSettings s;
  s.metric = Metric::bleu;
  const auto r = evaluate(docs, docs, nullptr, nullptr, s, nullptr);
  EXPECT_EQ(*r.bleu, 100.0);
  EXPECT_FALSE(r.consistency.has_value());
  EXPECT_EQ(r.to_json()["bleu"].get<double>(), 100.0);
  EXPECT_TRUE(r.to_json()["coherence"].is_null());
}

TEST(Evaluate, AllMetricsNeedTheirResources) {
  TempDir dir;
  const TokenDocuments docs{{tokenize("a b c d")}};
  EvaluationSettings s;
  s.stopwords_path = dir.file("stop.txt", "the\n");
  EXPECT_THROW(evaluate(docs, docs, &docs, nullptr, s, nullptr), ConfigError);
  s.dictionary_path = dir.file("dict.tsv", "bank\triver,money\n");
  EXPECT_THROW(evaluate(docs, docs, &docs, nullptr, s, nullptr), ConfigError);
  s.stopwords_path.reset();
  const auto table = toy_table();
  EXPECT_THROW(evaluate(docs, docs, &docs, &table, s, nullptr), ConfigError);
}

TEST(Evaluate, ReportCarriesMetadataForEveryFilter) {
  TempDir dir;
  const TokenDocuments out{{tokenize("a b c d"), tokenize("a c , d")}};
  EvaluationSettings s;
  s.window = ContextMode::next;
  s.m = 2;
  s.stopwords_path = dir.file("stop.txt", "the\n");
  s.dictionary_path = dir.file("dict.tsv", "bank\triver,money\n");
  s.embeddings_source = "fixture";
  const auto table = toy_table();
  const auto r = evaluate(out, out, &out, &table, s, nullptr);
  const auto j = r.to_json();
  EXPECT_EQ(j["metadata"]["metric"], "all");
  EXPECT_EQ(j["metadata"]["window_mode"], "next");
  EXPECT_EQ(j["metadata"]["window_size"], 2);
  EXPECT_EQ(j["metadata"]["stopwords"], *s.stopwords_path);
  EXPECT_EQ(j["metadata"]["dictionary"], *s.dictionary_path);
  EXPECT_EQ(j["metadata"]["embeddings"], "fixture");
  EXPECT_EQ(j["metadata"]["unk_token"], "<unk>");
  EXPECT_TRUE(j["metadata"].contains("punctuation_filter"));
  EXPECT_DOUBLE_EQ(*r.consistency, 1.5);
  EXPECT_EQ(*r.disambiguation_std, 0.0);
}

TEST(Evaluate, MisalignedDocumentsAreRejected) {
  const TokenDocuments a{{tokenize("a")}}, b{{tokenize("a"), tokenize("b")}};
  EvaluationSettings s;
  s.metric = Metric::bleu;
  EXPECT_THROW(evaluate(a, b, nullptr, nullptr, s, nullptr), IngestionError);
}

}  // namespace
}  // namespace ctxmem
