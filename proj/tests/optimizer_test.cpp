#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "patchlens/masks.hpp"
#include "patchlens/optimizer.hpp"

using patchlens::adamw_step;
using patchlens::Checkpoint;
using patchlens::ComponentMask;
using patchlens::ConfigError;
using patchlens::mask_parameters;
using patchlens::ModelConfig;
using patchlens::OptimizerState;
using patchlens::TrainableRegion;
using patchlens::trainable_param_count;
using patchlens::TrainConfig;
using patchlens::TrainError;

namespace {

ModelConfig four_layer_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 16;
  c.d_head = 4;
  c.d_mlp = 32;
  c.vocab_size = 50;
  c.max_seq = 16;
  return c;
}

// Smallest legal model: every tensor a handful of scalars, so closed-form
// optimizer checks can target individual entries.
ModelConfig scalar_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 1;
  c.d_head = 1;
  c.d_mlp = 1;
  c.vocab_size = 2;
  c.max_seq = 4;
  return c;
}

int64_t total_params(const ModelConfig& c) {
  auto ck = patchlens::zero_grads<double>(c);
  int64_t n = 0;
  ck.for_each_tensor([&](const std::string&, const patchlens::Tensor<double>& t) {
    n += static_cast<int64_t>(t.data.size());
  });
  return n;
}

}  // namespace

TEST(ComponentMaskTest, MlpMaskSelectsExactlyFourTensorsPerLayer) {
  auto c = four_layer_config();
  auto regions = mask_parameters(c, ComponentMask::mlp({0}));
  ASSERT_EQ(regions.size(), 4u);
  std::set<std::string> names;
  for (const auto& r : regions) {
    names.insert(r.name);
    EXPECT_EQ(r.begin, 0);
  }
  EXPECT_TRUE(names.count("blocks.0.ln2.w"));
  EXPECT_TRUE(names.count("blocks.0.mlp.W_gate"));
  EXPECT_TRUE(names.count("blocks.0.mlp.W_up"));
  EXPECT_TRUE(names.count("blocks.0.mlp.W_down"));

  EXPECT_EQ(mask_parameters(c, ComponentMask::mlp({0, 2})).size(), 8u);
}

TEST(ComponentMaskTest, HeadMaskCoversTheFourSlicesOfThatHead) {
  auto c = four_layer_config();
  auto regions = mask_parameters(c, ComponentMask::attn({{1, 2}}));
  ASSERT_EQ(regions.size(), 4u);
  const int64_t qkv = c.d_model * c.d_head;
  for (const auto& r : regions) {
    EXPECT_TRUE(r.name.rfind("blocks.1.attn.", 0) == 0) << r.name;
    EXPECT_EQ(r.begin, 2 * qkv);  // d_head == d_model/n_heads makes O and QKV blocks equal here
    EXPECT_EQ(r.end, 3 * qkv);
  }
}

TEST(ComponentMaskTest, TrainableCountsFollowFromShapes) {
  auto c = four_layer_config();
  EXPECT_EQ(trainable_param_count(c, ComponentMask::none()), 0);
  EXPECT_EQ(trainable_param_count(c, ComponentMask::full()), total_params(c));
  EXPECT_EQ(trainable_param_count(c, ComponentMask::mlp({1})),
            c.d_model + 2 * c.d_model * c.d_mlp + c.d_mlp * c.d_model);
  EXPECT_EQ(trainable_param_count(c, ComponentMask::attn({{0, 0}, {3, 1}})),
            2 * 4 * c.d_model * c.d_head);
}

TEST(ComponentMaskTest, RejectsOutOfRangeAndEmptyMasks) {
  auto c = four_layer_config();
  EXPECT_THROW(mask_parameters(c, ComponentMask::mlp({4})), ConfigError);
  EXPECT_THROW(mask_parameters(c, ComponentMask::mlp({-1})), ConfigError);
  EXPECT_THROW(mask_parameters(c, ComponentMask::attn({{0, 4}})), ConfigError);
  EXPECT_THROW(mask_parameters(c, ComponentMask::attn({{4, 0}})), ConfigError);
  EXPECT_THROW(mask_parameters(c, ComponentMask::mlp({})), ConfigError);
  EXPECT_THROW(mask_parameters(c, ComponentMask::attn({})), ConfigError);
}

TEST(AdamWTest, FirstStepMovesByRoughlyLearningRateTimesSign) {
  auto c = scalar_config();
  auto params = patchlens::zero_grads<double>(c);
  auto grads = patchlens::zero_grads<double>(c);
  params.final_ln_w.data[0] = 1.0;
  grads.final_ln_w.data[0] = 0.1;

  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  auto state = OptimizerState<double>::init(c);
  adamw_step(params, grads, state, cfg, mask_parameters(c, ComponentMask::full()));

  // After bias correction m-hat = g and v-hat = g^2, so the update is
  // lr * g/(|g| + eps) = lr to within eps.
  EXPECT_NEAR(params.final_ln_w.data[0], 0.9, 1e-6);
  EXPECT_EQ(state.step, 1);
}

TEST(AdamWTest, ZeroGradAndZeroDecayLeaveParametersBitwise) {
  auto c = scalar_config();
  auto params = patchlens::init_checkpoint<double>(c, 7);
  auto before = params;
  auto grads = patchlens::zero_grads<double>(c);

  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.weight_decay = 0.0;
  auto state = OptimizerState<double>::init(c);
  adamw_step(params, grads, state, cfg, mask_parameters(c, ComponentMask::full()));

  params.for_each_tensor([&](const std::string& name, const patchlens::Tensor<double>& t) {
    const auto* other = &before.final_ln_w;  // overwritten below; silences init warning
    before.for_each_tensor([&](const std::string& n2, const patchlens::Tensor<double>& t2) {
      if (n2 == name) other = &t2;
    });
    EXPECT_EQ(std::memcmp(t.data.data(), other->data.data(), t.data.size() * sizeof(double)), 0)
        << name;
  });
}

TEST(AdamWTest, ParametersOutsideTheMaskNeverMove) {
  auto c = four_layer_config();
  auto params = patchlens::init_checkpoint<double>(c, 3);
  auto before = params;
  auto grads = patchlens::zero_grads<double>(c);
  // Gradients everywhere; only masked entries may respond.
  grads.for_each_tensor(
      [](const std::string&, patchlens::Tensor<double>& t) { std::fill(t.data.begin(), t.data.end(), 0.25); });

  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  auto state = OptimizerState<double>::init(c);
  const auto mask = ComponentMask::mlp({2});
  adamw_step(params, grads, state, cfg, mask_parameters(c, mask));

  EXPECT_EQ(std::memcmp(params.W_E.data.data(), before.W_E.data.data(),
                        params.W_E.data.size() * sizeof(double)),
            0);
  for (int64_t l = 0; l < c.n_layers; ++l) {
    const auto& pb = params.blocks[static_cast<size_t>(l)];
    const auto& bb = before.blocks[static_cast<size_t>(l)];
    EXPECT_EQ(std::memcmp(pb.W_Q.data.data(), bb.W_Q.data.data(),
                          pb.W_Q.data.size() * sizeof(double)),
              0)
        << "W_Q layer " << l;
    const bool masked = l == 2;
    EXPECT_EQ(pb.W_gate.data != bb.W_gate.data, masked) << "W_gate layer " << l;
    EXPECT_EQ(pb.ln2_w.data != bb.ln2_w.data, masked) << "ln2 layer " << l;
  }
}

TEST(AdamWTest, ConvergesOnATwoParameterQuadratic) {
  auto c = scalar_config();
  auto params = patchlens::zero_grads<double>(c);
  auto state = OptimizerState<double>::init(c);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;
  auto regions = mask_parameters(c, ComponentMask::full());

  // L = 0.5 (p0 - 0.3)^2 + 0.5 (p1 + 0.7)^2 on final_ln.w and blocks.0.ln1.w
  double loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    const double e0 = params.final_ln_w.data[0] - 0.3;
    const double e1 = params.blocks[0].ln1_w.data[0] + 0.7;
    loss = 0.5 * (e0 * e0 + e1 * e1);
    auto grads = patchlens::zero_grads<double>(c);
    grads.final_ln_w.data[0] = e0;
    grads.blocks[0].ln1_w.data[0] = e1;
    adamw_step(params, grads, state, cfg, regions);
  }
  EXPECT_LT(loss, 1e-4);
  EXPECT_EQ(state.step, 200);
}

TEST(AdamWTest, NonFiniteGradientAbortsNamingTheParameter) {
  auto c = scalar_config();
  auto params = patchlens::init_checkpoint<double>(c, 1);
  auto grads = patchlens::zero_grads<double>(c);
  grads.blocks[0].W_up.data[0] = std::nan("");

  TrainConfig cfg;
  auto state = OptimizerState<double>::init(c);
  try {
    adamw_step(params, grads, state, cfg, mask_parameters(c, ComponentMask::full()));
    FAIL() << "expected TrainError";
  } catch (const TrainError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.0.mlp.W_up"), std::string::npos) << e.what();
  }
}

TEST(TrainConfigTest, ValidatesRanges) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_DOUBLE_EQ(cfg.learning_rate, 1e-5);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-4);
  EXPECT_EQ(cfg.batch_size, 2);
  EXPECT_EQ(cfg.epochs, 5);
  EXPECT_DOUBLE_EQ(cfg.validation_fraction, 0.1);

  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.validation_fraction = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
