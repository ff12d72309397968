#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <vector>

#include "ctxmem/checkpoint.hpp"
#include "ctxmem/grad_check.hpp"
#include "ctxmem/training.hpp"
#include "test_support.hpp"

namespace ctxmem {
namespace {

using testing_support::id_corpus;
using testing_support::read_file;
using testing_support::TempDir;
using testing_support::toy_run_config;

const std::vector<std::vector<std::vector<int>>> kDocs = {
    {{4, 5, 6}, {7, 8}, {5, 9, 4, 6}},
    {{8, 4}, {6, 6, 7}, {9}, {4, 7, 5}},
    {{5, 8, 9}},
};

double hand_kl(const std::vector<double>& logits, int gold, double eps) {
  const std::size_t v = logits.size();
  double z = 0;
  for (double l : logits) z += std::exp(l);
  double kl = 0;
  for (std::size_t i = 0; i < v; ++i) {
    const double q = static_cast<int>(i) == gold ? 1 - eps : eps / (v - 1);
    const double p = std::exp(logits[i]) / z;
    if (q > 0) kl += q * std::log(q / p);
  }
  return kl;
}

TEST(LabelSmoothedLoss, ConfidentCorrectPredictionHasNearZeroLoss) {
  auto logits = Tensor<double>::from({1, 4}, {-50, 50, -50, -50});
  std::vector<int> t{1};
  EXPECT_NEAR(label_smoothed_cross_entropy(logits, t, 0.0).item(), 0.0, 1e-12);
}

TEST(LabelSmoothedLoss, UniformLogitsGiveLogV) {
  auto logits = Tensor<double>::zeros({3, 7});
  std::vector<int> t{1, 4, 6};
  EXPECT_NEAR(label_smoothed_cross_entropy(logits, t, 0.0).item(), std::log(7.0), 1e-12);
}

TEST(LabelSmoothedLoss, MatchesHandKlWithSmoothing) {
  std::vector<double> l{1.0, 2.0, 0.5, -1.0};
  auto logits = Tensor<double>::from({1, 4}, l);
  std::vector<int> t{1};
  EXPECT_NEAR(label_smoothed_cross_entropy(logits, t, 0.1).item(), hand_kl(l, 1, 0.1), 1e-12);
}

TEST(LabelSmoothedLoss, AveragesOverUnpaddedRows) {
  std::vector<double> a{0.3, -0.2, 1.1}, b{2.0, 0.0, -1.0};
  auto logits = Tensor<double>::from({3, 3}, {0.3, -0.2, 1.1, 9, 9, 9, 2.0, 0.0, -1.0});
  std::vector<int> t{2, kPadId, 0};
  Mask pad{false, true, false};
  const double expected = (hand_kl(a, 2, 0.2) + hand_kl(b, 0, 0.2)) / 2;
  EXPECT_NEAR(label_smoothed_cross_entropy(logits, t, 0.2, &pad).item(), expected, 1e-12);
}

TEST(LabelSmoothedLoss, Errors) {
  auto logits = Tensor<double>::zeros({1, 4});
  std::vector<int> bad{4};
  EXPECT_THROW(label_smoothed_cross_entropy(logits, bad, 0.1), ContractError);
  std::vector<int> ok{1};
  EXPECT_THROW(label_smoothed_cross_entropy(logits, ok, 1.0), ContractError);
}

TEST(LabelSmoothedLoss, GradCheck) {
  Rng rng(1);
  std::vector<long double> v(12);
  for (auto& x : v) x = uniform(rng, -2, 2);
  auto logits = Tensor<long double>::from({3, 4}, v, true);
  std::vector<int> t{0, 3, 2};
  const auto err = grad_check<long double>(
      [&] { return label_smoothed_cross_entropy(logits, t, 0.1); }, {logits});
  EXPECT_LT(err, 1e-8L);
}

TEST(NoamLr, PeakAtWarmup) {
  const double at = noam_lr(4000, 512, 4000);
  EXPECT_NEAR(at, std::pow(512.0, -0.5) * std::pow(4000.0, -0.5), 1e-15);
  EXPECT_NEAR(noam_lr(1, 512, 4000), std::pow(512.0, -0.5) * std::pow(4000.0, -1.5), 1e-18);
  EXPECT_THROW(noam_lr(0, 512, 4000), ContractError);
}

TEST(NoamLr, RisesThenDecaysForManySettings) {
  for (std::size_t d : {8u, 64u, 512u})
    for (std::size_t w : {1u, 7u, 100u, 4000u}) {
      double prev = 0;
      for (std::uint64_t s = 1; s <= w; ++s) {
        const double lr = noam_lr(s, d, w);
        ASSERT_GE(lr, prev);
        prev = lr;
      }
      EXPECT_NEAR(prev, std::pow(double(d), -0.5) * std::pow(double(w), -0.5), 1e-15);
      for (std::uint64_t s = w + 1; s <= w + 200; ++s) {
        const double lr = noam_lr(s, d, w);
        ASSERT_LE(lr, prev);
        prev = lr;
      }
    }
}

TEST(Adam, ZeroGradientLeavesParametersAndFirstMomentUnchanged) {
  ParameterStore<double> store;
  auto p = store.add("p", {3});
  auto values = p.mutable_data();
  values[0] = 1, values[1] = -2, values[2] = 3;
  AdamState<double> st;
  st.reset(store);
  st.v[0] = {0.5, 0.5, 0.5};
  p.mutable_grad();
  adam_step(store, st, 0.1);
  EXPECT_EQ(p[0], 1);
  EXPECT_EQ(p[1], -2);
  EXPECT_EQ(p[2], 3);
  for (double v : st.v[0]) EXPECT_DOUBLE_EQ(v, 0.5 * 0.98);
  for (double m : st.m[0]) EXPECT_EQ(m, 0.0);
  EXPECT_FALSE(p.has_grad());
}

TEST(Adam, ConstantGradientDescends) {
  ParameterStore<double> store;
  auto p = store.add("p", {2});
  AdamState<double> st;
  for (int i = 0; i < 50; ++i) {
    auto g = p.mutable_grad();
    g[0] = 0.7;
    g[1] = -0.3;
    adam_step(store, st, 0.01);
  }
  EXPECT_LT(p[0], 0.0);
  EXPECT_GT(p[1], 0.0);
}

TEST(Adam, MatchesHandSteppedOracle) {
  ParameterStore<double> store;
  auto p = store.add("p", {1});
  p.mutable_data()[0] = 0.5;
  AdamState<double> st;
  const std::vector<double> grads{0.2, -0.1, 0.4};
  const double lr = 0.01, b1 = 0.9, b2 = 0.98, eps = 1e-9;
  double x = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    p.mutable_grad()[0] = g;
    adam_step(store, st, lr);
    EXPECT_NEAR(p[0], x, 1e-9);
  }
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  ParameterStore<double> store;
  store.add("fine", {1});
  auto bad = store.add("decoder.0.ffn.w1", {2});
  bad.mutable_grad()[1] = std::nan("");
  AdamState<double> st;
  try {
    adam_step(store, st, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.0.ffn.w1"), std::string::npos);
  }
}

TEST(ClipGradNorm, ScalesToTheBound) {
  ParameterStore<double> store;
  auto p = store.add("p", {2});
  auto g = p.mutable_grad();
  g[0] = 3;
  g[1] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
}

std::vector<float> flat_parameters(const ContextualTransformer<float>& model) {
  std::vector<float> out;
  for (const auto& [name, t] : model.parameters().entries()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

ModelConfig model_config(const RunConfig& cfg) { return cfg.model(10, 13); }

TEST(TrainStep, IsDeterministicForAFixedSeed) {
  const auto corpus = id_corpus(kDocs, 3);
  const auto cfg = toy_run_config();
  ContextualTransformer<float> a(model_config(cfg), cfg.seed), b(model_config(cfg), cfg.seed);
  Trainer<float> ta(a, cfg, corpus), tb(b, cfg, corpus);
  ta.set_warning_stream(nullptr);
  tb.set_warning_stream(nullptr);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(ta.step(), tb.step());
  EXPECT_EQ(flat_parameters(a), flat_parameters(b));
}

TEST(TrainStep, LossDecreasesOnOnePairCorpus) {
  const auto corpus = id_corpus({{{4, 5, 6, 7}}}, 2);
  auto cfg = toy_run_config(0);
  cfg.transformer.dropout = 0.0;
  cfg.warmup_steps = 100;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  double prev = 1e30;
  for (int i = 0; i < 10; ++i) {
    const double loss = trainer.step();
    EXPECT_LT(loss, prev) << "step " << i;
    prev = loss;
  }
}

TEST(TrainStep, BaselineHasNoMemoryParameters) {
  const auto corpus = id_corpus(kDocs, 3);
  auto cfg = toy_run_config(0);
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  for (const auto& [name, t] : model.parameters().entries()) EXPECT_NE(name.rfind("memory.", 0), 0u) << name;
  Trainer<float> trainer(model, cfg, corpus);
  trainer.set_warning_stream(nullptr);
  EXPECT_TRUE(std::isfinite(trainer.step()));
}

TEST(TrainStep, SourcePassThroughGateGivesMemoryNoGradient) {
  auto cfg = toy_run_config(2, MergeKind::flat);
  cfg.memory.gate_override = 1.0;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  std::vector<int> src{4, 5, kEosId}, tgt{7, kEosId};
  auto enc = model.encode(src, {{6, kEosId}, {kEosId}});
  auto loss = label_smoothed_cross_entropy(model.logits(shift_right(tgt), enc), tgt, 0.1);
  backward(loss);
  std::size_t checked = 0;
  for (const auto& [name, t] : model.parameters().entries()) {
    if (name.rfind("memory.", 0) != 0) continue;
    ++checked;
    if (!t.has_grad()) continue;
    for (float g : t.grad()) EXPECT_EQ(g, 0.0f) << name;
  }
  EXPECT_GT(checked, 0u);
}

TEST(TrainStep, RandomContextDrawsChangeAcrossEpochs) {
  const auto corpus = id_corpus(kDocs, 3);
  auto cfg = toy_run_config(2);
  cfg.context_mode = ContextMode::random;
  cfg.batch_tokens = 1000;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  const auto first = trainer.schedule()[0].context;
  trainer.set_position(1, 0);
  const auto second = trainer.schedule()[0].context;
  EXPECT_NE(first, second);
}

class CheckpointTest : public ::testing::Test {
 protected:
  DocumentCorpus corpus = id_corpus(kDocs, 3);
  RunConfig cfg = toy_run_config();
};

TEST_F(CheckpointTest, RoundTripIsBitwiseAndByteIdentical) {
  TempDir dir;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  trainer.set_warning_stream(nullptr);
  for (int i = 0; i < 3; ++i) trainer.step();
  const auto path = dir.path("a.ckpt");
  save_checkpoint(path, make_checkpoint(trainer));
  const auto loaded = load_checkpoint(path);
  auto restored = model_from_checkpoint<float>(loaded);
  EXPECT_EQ(flat_parameters(restored), flat_parameters(model));
  EXPECT_EQ(loaded.step, 3u);
  save_checkpoint(dir.path("b.ckpt"), loaded);
  EXPECT_EQ(read_file(path), read_file(dir.path("b.ckpt")));
  EXPECT_EQ(read_file(path).substr(0, 7), "CTXMEM1");
}

TEST_F(CheckpointTest, ResumeReproducesUninterruptedLosses) {
  TempDir dir;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  trainer.set_warning_stream(nullptr);
  for (int i = 0; i < 4; ++i) trainer.step();
  save_checkpoint(dir.path("k.ckpt"), make_checkpoint(trainer));
  std::vector<double> continuous;
  for (int i = 0; i < 5; ++i) continuous.push_back(trainer.step());

  const auto ck = load_checkpoint(dir.path("k.ckpt"));
  auto resumed_model = model_from_checkpoint<float>(ck);
  Trainer<float> resumed(resumed_model, cfg, corpus);
  resumed.set_warning_stream(nullptr);
  restore_training(resumed, ck);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(resumed.step(), continuous[i]) << "step " << i;
  EXPECT_EQ(flat_parameters(resumed_model), flat_parameters(model));
}

TEST_F(CheckpointTest, MismatchedModelDimNamesTheField) {
  TempDir dir;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  save_checkpoint(dir.path("c.ckpt"), make_checkpoint(trainer));
  auto other = cfg;
  other.transformer.model_dim = 32;
  ContextualTransformer<float> wrong(model_config(other), other.seed);
  Trainer<float> wrong_trainer(wrong, other, corpus);
  try {
    restore_training(wrong_trainer, load_checkpoint(dir.path("c.ckpt")));
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("model_dim"), std::string::npos) << e.what();
  }
}

TEST_F(CheckpointTest, TruncatedOrForeignFilesAreRejected) {
  TempDir dir;
  ContextualTransformer<float> model(model_config(cfg), cfg.seed);
  Trainer<float> trainer(model, cfg, corpus);
  const std::string bytes = serialize_checkpoint(make_checkpoint(trainer));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 5)), CheckpointError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 20)), CheckpointError);
  EXPECT_THROW(parse_checkpoint("GARBAGE" + bytes.substr(7)), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir.path("missing.ckpt")), CheckpointError);
  EXPECT_NO_THROW(parse_checkpoint(bytes));
}

const char* kConfigText = R"(# toy run
num_layers = 2
model_dim = 64
num_heads = 4
ffn_dim = 128
dropout = 0.1
label_smoothing = 0.1
warmup_steps = 400
train_steps = 3000
batch_tokens = 512
memory_size = 3
context_mode = previous
merge_strategy = contextual_rnn
rnn_core = gru
rnn_direction = forward
seed = 7   # trailing comment
bpe_merges = 800
)";

TEST(Config, ParsesEveryRequiredKey) {
  const auto c = parse_config(kConfigText);
  EXPECT_EQ(c.transformer.model_dim, 64u);
  EXPECT_EQ(c.memory.memory_size, 3u);
  EXPECT_EQ(c.memory.merge.kind, MergeKind::contextual_rnn);
  EXPECT_EQ(c.memory.merge.core, RnnCore::gru);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_DOUBLE_EQ(c.transformer.dropout, 0.1);
  EXPECT_FALSE(c.memory.gate_override.has_value());
  EXPECT_EQ(format_config(parse_config(format_config(c))), format_config(c));
}

void expect_config_error_mentioning(const std::string& text, const std::string& needle) {
  try {
    parse_config(text);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownKeyIsNamed) {
  expect_config_error_mentioning(std::string(kConfigText) + "modle_dim = 3\n", "modle_dim");
}

TEST(Config, MissingKeyIsNamed) {
  std::string text = kConfigText;
  text.erase(text.find("ffn_dim"), std::string("ffn_dim = 128\n").size());
  expect_config_error_mentioning(text, "ffn_dim");
}

TEST(Config, MalformedValueIsNamed) {
  std::string text = kConfigText;
  text.replace(text.find("batch_tokens = 512"), 18, "batch_tokens = lots");
  expect_config_error_mentioning(text, "batch_tokens");
  text = kConfigText;
  text.replace(text.find("rnn_core = gru"), 14, "rnn_core = tree");
  expect_config_error_mentioning(text, "rnn_core");
}

TEST(Config, SeedFallsBackToEnvironment) {
  std::string text = kConfigText;
  text.erase(text.find("seed = 7"), std::string("seed = 7   # trailing comment\n").size());
  ::unsetenv("CTXMEM_SEED");
  expect_config_error_mentioning(text, "seed");
  ::setenv("CTXMEM_SEED", "99", 1);
  EXPECT_EQ(parse_config(text).seed, 99u);
  ::unsetenv("CTXMEM_SEED");
}

TEST(Config, OptionalKeys) {
  const auto c = parse_config(std::string(kConfigText) +
                              "gate_override = 0.3\nclip_norm = 1.5\nshare_context_encoder = true\n");
  EXPECT_DOUBLE_EQ(*c.memory.gate_override, 0.3);
  EXPECT_DOUBLE_EQ(c.clip_norm, 1.5);
  EXPECT_TRUE(c.memory.share_context_encoder);
  expect_config_error_mentioning(std::string(kConfigText) + "gate_override = 1.5\n", "gate_override");
}

}  // namespace
}  // namespace ctxmem
