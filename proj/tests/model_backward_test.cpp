#include <gtest/gtest.h>

#include "patchlens/checkpoint.hpp"
#include "patchlens/model.hpp"
#include "testutil.hpp"

using patchlens::ActivationCache;
using patchlens::CaptureSet;
using patchlens::Checkpoint;
using patchlens::HookPoint;
using patchlens::MetricSpec;
using patchlens::ModelConfig;
using patchlens::PatchSpec;
using patchlens::Site;
using patchlens::SiteKey;
using patchlens::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 12;
  c.vocab_size = 40;
  c.max_seq = 8;
  return c;
}

std::vector<int64_t> random_tokens(patchlens::Rng& rng, int64_t n, int64_t vocab) {
  std::vector<int64_t> t(static_cast<size_t>(n));
  for (auto& x : t) x = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vocab)));
  return t;
}

MetricSpec pronoun_metric() {
  MetricSpec spec;
  spec.target.stereo_token = 3;
  spec.target.anti_token = 5;
  return spec;
}

// Numeric d(metric)/d(activation[t,i]) by counterfactual-patching the site
// with a +-h bumped copy of the clean activation.
double fd_hook_grad(std::span<const int64_t> tokens, const Checkpoint<double>& ck,
                    const MetricSpec& spec, const SiteKey& key, int64_t t, int64_t i, double h) {
  auto clean = patchlens::forward<double>(tokens, ck, CaptureSet::all());
  double vals[2];
  for (int s = 0; s < 2; ++s) {
    ActivationCache<double> bumped = clean.cache;
    bumped.store[key](t, i) += (s == 0 ? h : -h);
    PatchSpec<double> patch;
    HookPoint hook{key.site, key.layer, key.head, t};
    patch.add(hook, patchlens::AblationSource<double>::counterfactual(bumped, t));
    auto res = patchlens::forward<double>(tokens, ck, {}, &patch);
    vals[s] = patchlens::metric_value_and_dlogits(res.logits, spec).first;
  }
  return (vals[0] - vals[1]) / (2 * h);
}

}  // namespace

TEST(Backward, HookGradientsMatchFiniteDifferencesAllSites) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 21);
  const MetricSpec spec = pronoun_metric();
  const Site sites[] = {Site::resid_pre, Site::resid_post, Site::attn_out, Site::attn_head_out,
                        Site::mlp_out};
  int cases = 0;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    patchlens::Rng rng(seed);
    auto tokens = random_tokens(rng, 6, 40);
    auto back = patchlens::backward_metric<double>(tokens, ck, spec, CaptureSet::all());
    for (Site site : sites) {
      SiteKey key{site, static_cast<int64_t>(rng.uniform_int(2)),
                  site == Site::attn_head_out ? static_cast<int64_t>(rng.uniform_int(2)) : -1};
      const int64_t t = static_cast<int64_t>(rng.uniform_int(6));
      const int64_t i = static_cast<int64_t>(rng.uniform_int(8));
      const double analytic = back.grads.at(key)(t, i);
      const double numeric = fd_hook_grad(tokens, ck, spec, key, t, i, 1e-5);
      // relative 1e-5 with an absolute floor for near-zero gradients, where
      // the central-difference estimate is pure rounding noise
      ASSERT_LE(std::abs(analytic - numeric), 1e-5 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-10)
          << patchlens::to_string(key) << " t=" << t << " i=" << i << " seed " << seed;
      ++cases;
    }
  }
  EXPECT_GE(cases, 100);
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 22);
  patchlens::Rng rng(99);
  auto tokens = random_tokens(rng, 6, 40);

  auto grads = patchlens::zero_grads<double>(ck.config);
  const double loss = patchlens::lm_loss_and_grads<double>(tokens, ck, &grads);
  EXPECT_GT(loss, 0.0);

  // Collect (name, numel) in canonical order so we can perturb by flat index.
  std::vector<std::pair<std::string, int64_t>> layout;
  ck.for_each_tensor([&](const std::string& name, const Tensor<double>& t) {
    layout.emplace_back(name, t.numel());
  });

  int checked = 0;
  for (uint64_t trial = 0; trial < 120; ++trial) {
    patchlens::Rng trng(1000 + trial);
    const size_t which = trng.uniform_int(layout.size());
    const int64_t idx = static_cast<int64_t>(trng.uniform_int(
        static_cast<uint64_t>(layout[which].second)));
    const std::string& name = layout[which].first;

    double analytic = 0;
    grads.for_each_tensor([&](const std::string& n, const Tensor<double>& t) {
      if (n == name) analytic = t.data[static_cast<size_t>(idx)];
    });

    const double h = 1e-5;
    double vals[2];
    for (int s = 0; s < 2; ++s) {
      Checkpoint<double> bumped = ck;
      bumped.for_each_tensor([&](const std::string& n, Tensor<double>& t) {
        if (n == name) t.data[static_cast<size_t>(idx)] += (s == 0 ? h : -h);
      });
      vals[s] = patchlens::lm_loss_and_grads<double>(tokens, bumped, nullptr);
    }
    const double numeric = (vals[0] - vals[1]) / (2 * h);
    ASSERT_LE(std::abs(analytic - numeric), 1e-5 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-10)
        << name << "[" << idx << "] trial " << trial;
    ++checked;
  }
  EXPECT_GE(checked, 100);
}

TEST(Backward, GradAfterMetricPositionIsZero) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 23);
  patchlens::Rng rng(5);
  auto tokens = random_tokens(rng, 7, 40);
  MetricSpec spec = pronoun_metric();
  spec.position = 3;
  auto back = patchlens::backward_metric<double>(tokens, ck, spec, CaptureSet::all());
  for (const auto& [key, grad] : back.grads.store) {
    for (int64_t t = 4; t < 7; ++t)
      for (int64_t i = 0; i < 8; ++i)
        ASSERT_EQ(grad(t, i), 0.0) << patchlens::to_string(key) << " t=" << t;
  }
}

TEST(Backward, GradientStepReducesLoss) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 24);
  patchlens::Rng rng(6);
  auto tokens = random_tokens(rng, 6, 40);
  auto grads = patchlens::zero_grads<double>(ck.config);
  const double before = patchlens::lm_loss_and_grads<double>(tokens, ck, &grads);
  Checkpoint<double> stepped = ck;
  stepped.for_each_tensor([&](const std::string& name, Tensor<double>& t) {
    grads.for_each_tensor([&](const std::string& gname, const Tensor<double>& g) {
      if (gname != name) return;
      for (int64_t i = 0; i < t.numel(); ++i) t.data[i] -= 0.05 * g.data[i];
    });
  });
  const double after = patchlens::lm_loss_and_grads<double>(tokens, stepped, nullptr);
  EXPECT_LT(after, before);
}

TEST(Backward, PatchedTraceIsRejected) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 25);
  std::vector<int64_t> tokens{1, 2, 3, 4};
  PatchSpec<double> patch;
  patch.add(patchlens::parse_hook("mlp_out.0@1"), patchlens::AblationSource<double>::zero());
  auto fwd = patchlens::forward<double>(tokens, ck, {}, &patch, /*keep_trace=*/true);
  Tensor<double> dlogits({4, 40});
  ActivationCache<double> grads;
  EXPECT_THROW(
      patchlens::backward_from_dlogits(*fwd.trace, ck, dlogits, CaptureSet::all(), &grads, nullptr),
      patchlens::PatchError);
}

TEST(Backward, LogProbDiffEqualsLogitDiff) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 26);
  patchlens::Rng rng(11);
  auto tokens = random_tokens(rng, 5, 40);
  MetricSpec a = pronoun_metric();
  MetricSpec b = a;
  b.kind = patchlens::MetricKind::log_prob_diff;
  auto ra = patchlens::backward_metric<double>(tokens, ck, a, CaptureSet::all());
  auto rb = patchlens::backward_metric<double>(tokens, ck, b, CaptureSet::all());
  EXPECT_DOUBLE_EQ(ra.metric_value, rb.metric_value);
  for (const auto& [key, grad] : ra.grads.store)
    EXPECT_EQ(grad.data, rb.grads.at(key).data) << patchlens::to_string(key);
}

TEST(Backward, MetricValidation) {
  auto ck = patchlens::init_checkpoint<double>(tiny_config(), 27);
  std::vector<int64_t> tokens{1, 2, 3};
  MetricSpec bad = pronoun_metric();
  bad.target.anti_token = 99;  // out of vocab
  EXPECT_THROW(patchlens::backward_metric<double>(tokens, ck, bad, CaptureSet::all()),
               patchlens::ConfigError);
  MetricSpec same = pronoun_metric();
  same.target.anti_token = same.target.stereo_token;
  EXPECT_THROW(patchlens::backward_metric<double>(tokens, ck, same, CaptureSet::all()),
               patchlens::ConfigError);
  MetricSpec far = pronoun_metric();
  far.position = 3;  // == seq length
  EXPECT_THROW(patchlens::backward_metric<double>(tokens, ck, far, CaptureSet::all()),
               patchlens::ConfigError);
  EXPECT_THROW(patchlens::metric_kind_from_string("kl"), patchlens::ConfigError);
}
