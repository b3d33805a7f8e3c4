#include "patchlens/metrics.hpp"

#include <gtest/gtest.h>

#include "testutil.hpp"

using patchlens::Checkpoint;
using patchlens::MetricSpec;
using patchlens::MinimalPair;
using patchlens::ModelConfig;
using patchlens::Order;
using patchlens::PronounTarget;
using patchlens::Tensor;
using patchlens::Vocab;
using testutil::scratch_dir;

namespace {

ModelConfig metrics_config(int64_t vocab_size) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 12;
  c.vocab_size = vocab_size;
  c.max_seq = 16;
  return c;
}

// logits [1, 4] with he at 0, she at 1
Tensor<double> two_logit_row(double he, double she) {
  Tensor<double> t({1, 4});
  t(0, 0) = he;
  t(0, 1) = she;
  return t;
}

}  // namespace

TEST(LogitDiff, MatchesArithmetic) {
  MetricSpec spec;
  spec.target.stereo_token = 0;  // "he"
  spec.target.anti_token = 1;    // "she"
  EXPECT_DOUBLE_EQ(patchlens::logit_diff(two_logit_row(2.0, 1.5), spec), -0.5);
  EXPECT_DOUBLE_EQ(patchlens::logit_diff(two_logit_row(1.0, 1.0), spec), 0.0);
}

TEST(LogitDiff, InvariantUnderConstantShift) {
  MetricSpec spec;
  spec.target.stereo_token = 0;
  spec.target.anti_token = 1;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    patchlens::Rng rng(seed);
    auto logits = Tensor<double>::randn({3, 4}, rng);
    MetricSpec at1 = spec;
    at1.position = 1;
    const double base = patchlens::logit_diff(logits, at1);
    const double shift = rng.normal() * 10;
    for (int64_t j = 0; j < 4; ++j) logits(1, j) += shift;
    EXPECT_NEAR(patchlens::logit_diff(logits, at1), base, 1e-12);
  }
}

TEST(LogitOrder, ExamplesAndTieRule) {
  PronounTarget t{0, 1};
  EXPECT_EQ(patchlens::logit_order(two_logit_row(2.0, 1.5), t), Order::Stereotypical);
  EXPECT_EQ(patchlens::logit_order(two_logit_row(1.5, 2.0), t), Order::AntiStereotypical);
  EXPECT_EQ(patchlens::logit_order(two_logit_row(1.0, 1.0), t), Order::Stereotypical);
}

TEST(LogitOrder, InvariantUnderIncreasingTransform) {
  PronounTarget t{0, 1};
  for (uint64_t seed = 0; seed < 50; ++seed) {
    patchlens::Rng rng(seed);
    const double a = rng.normal(), b = rng.normal();
    const Order before = patchlens::order_of(a, b);
    // strictly increasing: x -> 3x + 1 and x -> tanh then exp
    EXPECT_EQ(patchlens::order_of(3 * a + 1, 3 * b + 1), before);
    EXPECT_EQ(patchlens::order_of(std::exp(std::tanh(a)), std::exp(std::tanh(b))), before);
  }
}

TEST(KlDivergence, IdenticalDistributionsGiveZero) {
  patchlens::Rng rng(3);
  auto p = Tensor<double>::randn({8}, rng);
  EXPECT_NEAR(patchlens::kl_divergence(p, p), 0.0, 1e-12);
}

TEST(KlDivergence, OneHotVsUniformIsLogTwo) {
  Tensor<double> p({2}, {1000.0, 0.0});
  Tensor<double> q({2}, {0.0, 0.0});
  EXPECT_NEAR(patchlens::kl_divergence(p, q), std::log(2.0), 1e-9);
}

TEST(KlDivergence, NonNegativeOnRandomInputs) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    patchlens::Rng rng(seed);
    auto p = Tensor<double>::randn({16}, rng, 3.0);
    auto q = Tensor<double>::randn({16}, rng, 3.0);
    EXPECT_GE(patchlens::kl_divergence(p, q), 0.0) << "seed " << seed;
  }
}

TEST(SequenceLogprob, UniformModelGivesMinusLogVocabPerToken) {
  auto ck = patchlens::init_checkpoint<double>(metrics_config(40), 5);
  for (auto& v : ck.W_U.data) v = 0.0;  // all logits 0 -> uniform
  std::vector<int64_t> tokens{3, 1, 4, 1, 5};
  const double lp = patchlens::sequence_logprob_tokens<double>(tokens, ck);
  EXPECT_NEAR(lp, -4 * std::log(40.0), 1e-9);
}

TEST(SequenceLogprob, HandComputedOneLayerModel) {
  // Degenerate 1-layer model: with W_O and W_down zero the residual stream
  // stays the raw embedding, so logits = rmsnorm(embed) @ W_U and the score
  // of a 2-token sequence is a closed-form expression checked by hand below.
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 2;
  c.d_head = 2;
  c.d_mlp = 4;
  c.vocab_size = 3;
  c.max_seq = 4;
  auto ck = patchlens::init_checkpoint<double>(c, 9);
  for (auto& b : ck.blocks) {
    for (auto& v : b.W_O.data) v = 0.0;
    for (auto& v : b.W_down.data) v = 0.0;
  }
  // Hand-pick the relevant weights.
  ck.W_E.data = {0.5, -0.25, 1.0, 2.0, -1.5, 0.75};     // rows: tokens 0..2
  ck.W_U.data = {0.2, -0.4, 0.6, 1.0, 0.3, -0.8};       // [2,3]
  ck.final_ln_w.data = {1.0, 1.0};

  std::vector<int64_t> tokens{0, 2};
  const double got = patchlens::sequence_logprob_tokens<double>(tokens, ck);

  // By hand, with plain std:: calls only: normalize embedding of token 0,
  // form the three logits, subtract the log-sum-exp, take logit of token 2.
  const double x0 = 0.5, x1 = -0.25, eps = 1e-6;
  const double rms = std::sqrt((x0 * x0 + x1 * x1) / 2 + eps);
  const double n0 = x0 / rms, n1 = x1 / rms;
  const double z0 = n0 * 0.2 + n1 * 1.0;
  const double z1 = n0 * -0.4 + n1 * 0.3;
  const double z2 = n0 * 0.6 + n1 * -0.8;
  const double lse = std::log(std::exp(z0) + std::exp(z1) + std::exp(z2));
  EXPECT_NEAR(got, z2 - lse, 1e-5);
}

TEST(SequenceLogprob, AppendingTokenNeverIncreasesTotal) {
  auto ck = patchlens::init_checkpoint<double>(metrics_config(30), 6);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    patchlens::Rng rng(seed);
    std::vector<int64_t> tokens;
    for (int i = 0; i < 6; ++i)
      tokens.push_back(static_cast<int64_t>(rng.uniform_int(30)));
    std::vector<int64_t> longer = tokens;
    longer.push_back(static_cast<int64_t>(rng.uniform_int(30)));
    EXPECT_LE(patchlens::sequence_logprob_tokens<double>(longer, ck),
              patchlens::sequence_logprob_tokens<double>(tokens, ck) + 1e-12)
        << "seed " << seed;
  }
}

TEST(SequenceLogprob, SingleTokenRejected) {
  auto ck = patchlens::init_checkpoint<double>(metrics_config(30), 7);
  std::vector<int64_t> one{3};
  EXPECT_THROW(patchlens::sequence_logprob_tokens<double>(one, ck), patchlens::ConfigError);
}

TEST(PreferenceFraction, TieRuleAndCounting) {
  Vocab vocab({" a", " b", " c", " d"});
  auto ck = patchlens::init_checkpoint<double>(metrics_config(vocab.size()), 8);

  // identical texts -> tie -> counted stereotypical
  std::vector<MinimalPair> same{{" a b", " a b", "x"}, {" c d", " c d", "x"}};
  EXPECT_DOUBLE_EQ(patchlens::preference_fraction(same, ck, vocab), 1.0);

  // find one pair the model prefers in each direction, then check 0.5
  std::vector<MinimalPair> mixed;
  const double ab = patchlens::sequence_logprob<double>(" a b", ck, vocab);
  const double ba = patchlens::sequence_logprob<double>(" b a", ck, vocab);
  ASSERT_NE(ab, ba);
  mixed.push_back({" a b", " b a", "x"});  // one preference direction
  mixed.push_back({" b a", " a b", "x"});  // the mirror
  EXPECT_DOUBLE_EQ(patchlens::preference_fraction(mixed, ck, vocab), 0.5);
}

TEST(PreferenceFraction, InvariantUnderReorderAndDuplication) {
  Vocab vocab({" a", " b", " c", " d"});
  auto ck = patchlens::init_checkpoint<double>(metrics_config(vocab.size()), 9);
  std::vector<MinimalPair> pairs{{" a b", " b a", "x"}, {" c d", " d c", "y"},
                                 {" a d", " d a", "z"}};
  const double base = patchlens::preference_fraction(pairs, ck, vocab);
  std::vector<MinimalPair> reordered{pairs[2], pairs[0], pairs[1]};
  EXPECT_DOUBLE_EQ(patchlens::preference_fraction(reordered, ck, vocab), base);
  std::vector<MinimalPair> doubled = pairs;
  doubled.insert(doubled.end(), pairs.begin(), pairs.end());
  EXPECT_DOUBLE_EQ(patchlens::preference_fraction(doubled, ck, vocab), base);
}

TEST(PreferenceFraction, EmptyListRejected) {
  Vocab vocab({" a"});
  auto ck = patchlens::init_checkpoint<double>(metrics_config(vocab.size()), 10);
  std::vector<MinimalPair> none;
  EXPECT_THROW(patchlens::preference_fraction(none, ck, vocab), patchlens::ConfigError);
}

TEST(MinimalPairs, JsonLinesRoundTrip) {
  const auto dir = scratch_dir("pairs");
  const std::string path = (dir / "pairs.jsonl").string();
  {
    std::ofstream f(path);
    f << R"({"stereo": "the doctor said he", "anti": "the doctor said she", "category": "prof"})"
      << "\n\n";  // blank line tolerated
    f << R"({"stereo": "s2", "anti": "a2"})" << "\n";
  }
  auto pairs = patchlens::load_minimal_pairs(path);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].stereo_text, "the doctor said he");
  EXPECT_EQ(pairs[0].category, "prof");
  EXPECT_EQ(pairs[1].category, "");

  {
    std::ofstream f(path);
    f << "{broken\n";
  }
  EXPECT_THROW(patchlens::load_minimal_pairs(path), patchlens::LoadError);
}

TEST(LogitLens, FinalLayerMatchesTrueLogits) {
  auto ck = patchlens::init_checkpoint<float>(metrics_config(30), 11);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    patchlens::Rng rng(seed);
    std::vector<int64_t> tokens;
    for (int i = 0; i < 7; ++i) tokens.push_back(static_cast<int64_t>(rng.uniform_int(30)));
    auto res = patchlens::forward<float>(tokens, ck, patchlens::CaptureSet::all());
    for (int64_t pos = 0; pos < 7; ++pos) {
      auto lens = patchlens::logit_lens_row(res.cache, ck, ck.config.n_layers - 1, pos);
      for (int64_t j = 0; j < 30; ++j)
        ASSERT_NEAR(lens(j), res.logits(pos, j), 1e-5) << "pos " << pos << " seed " << seed;
    }
  }
}

TEST(LogitLens, OneLayerModelSingleEntryEqualsOutputOrder) {
  ModelConfig c = metrics_config(30);
  c.n_layers = 1;
  auto ck = patchlens::init_checkpoint<float>(c, 12);
  std::vector<int64_t> tokens{1, 2, 3};
  auto res = patchlens::forward<float>(tokens, ck, patchlens::CaptureSet::all());
  PronounTarget t{4, 7};
  auto orders = patchlens::logit_lens(res.cache, ck, 2, t);
  ASSERT_EQ(orders.size(), 1u);
  EXPECT_EQ(orders[0], patchlens::logit_order(res.logits, t, 2));
}

TEST(LogitLens, MissingHooksRejected) {
  auto ck = patchlens::init_checkpoint<float>(metrics_config(30), 13);
  std::vector<int64_t> tokens{1, 2, 3};
  auto res = patchlens::forward<float>(tokens, ck,
                                       patchlens::CaptureSet::of({{patchlens::Site::mlp_out, 0}}));
  PronounTarget t{4, 7};
  EXPECT_THROW(patchlens::logit_lens(res.cache, ck, 1, t), patchlens::CacheError);
}

TEST(LogitLens, SettledLayerScansFromTheBack) {
  using patchlens::settled_layer;
  const Order S = Order::Stereotypical, A = Order::AntiStereotypical;
  EXPECT_EQ(settled_layer({A, S, S, S}), 1);
  EXPECT_EQ(settled_layer({S, S, S, S}), 0);
  EXPECT_EQ(settled_layer({S, A, S, A}), 4);
  EXPECT_EQ(settled_layer({A, A, A, S}), 3);
}
