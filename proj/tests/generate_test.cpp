#include <gtest/gtest.h>

#include "patchlens/checkpoint.hpp"
#include "patchlens/model.hpp"
#include "testutil.hpp"

using patchlens::Checkpoint;
using patchlens::ModelConfig;
using patchlens::PatchSpec;

namespace {

ModelConfig gen_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 12;
  c.vocab_size = 30;
  c.max_seq = 20;
  return c;
}

}  // namespace

TEST(Generate, CachedDecodingEqualsFullRecompute) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto ck = patchlens::init_checkpoint<float>(gen_config(), 100 + seed);
    std::vector<int64_t> prompt{1, 5, 9, 2};
    auto cached = patchlens::generate_greedy<float>(prompt, ck, 8);
    auto recomputed = patchlens::generate_greedy_recompute<float>(prompt, ck, 8);
    EXPECT_EQ(cached, recomputed) << "seed " << seed;
  }
}

TEST(Generate, CachedDecodingEqualsFullRecomputeUnderPatches) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 50);
  std::vector<int64_t> prompt{3, 7, 1, 4, 2};

  auto corrupt = patchlens::forward<float>(std::vector<int64_t>{8, 6, 5, 9, 11}, ck,
                                           patchlens::CaptureSet::all());
  PatchSpec<float> patches;
  patches.add(patchlens::parse_hook("mlp_out.0@2"),
              patchlens::AblationSource<float>::counterfactual(corrupt.cache, 2));
  patches.add(patchlens::parse_hook("attn_head_out.1.0@*"),
              patchlens::AblationSource<float>::counterfactual(corrupt.cache));
  auto cached = patchlens::generate_greedy<float>(prompt, ck, 6, &patches);
  auto recomputed = patchlens::generate_greedy_recompute<float>(prompt, ck, 6, &patches);
  EXPECT_EQ(cached, recomputed);
}

TEST(Generate, EmptyPatchSpecMatchesUnpatched) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 51);
  std::vector<int64_t> prompt{2, 4, 6};
  PatchSpec<float> empty;
  EXPECT_EQ(patchlens::generate_greedy<float>(prompt, ck, 5, &empty),
            patchlens::generate_greedy<float>(prompt, ck, 5));
}

TEST(Generate, TiesBreakToLowestTokenId) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 52);
  // Zero unembedding -> every logit is exactly 0 -> argmax must pick id 0.
  for (auto& v : ck.W_U.data) v = 0.0f;
  std::vector<int64_t> prompt{9, 8};
  auto out = patchlens::generate_greedy<float>(prompt, ck, 4);
  std::vector<int64_t> want{9, 8, 0, 0, 0, 0};
  EXPECT_EQ(out, want);
}

TEST(Generate, PatchBeyondPromptRejected) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 53);
  std::vector<int64_t> prompt{1, 2, 3};
  auto corrupt =
      patchlens::forward<float>(std::vector<int64_t>{4, 5, 6, 7}, ck, patchlens::CaptureSet::all());
  PatchSpec<float> patches;
  patches.add(patchlens::parse_hook("mlp_out.0@3"),
              patchlens::AblationSource<float>::counterfactual(corrupt.cache, 3));
  EXPECT_THROW(patchlens::generate_greedy<float>(prompt, ck, 2, &patches), patchlens::PatchError);
}

TEST(Generate, LengthBudgetEnforced) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 54);
  std::vector<int64_t> prompt{1, 2, 3};
  EXPECT_THROW(patchlens::generate_greedy<float>(prompt, ck, 18), patchlens::ShapeError);
  EXPECT_THROW(patchlens::generate_greedy<float>(prompt, ck, -1), patchlens::ConfigError);
  auto out = patchlens::generate_greedy<float>(prompt, ck, 0);
  EXPECT_EQ(out, prompt);
}

TEST(Generate, DeterministicAcrossCalls) {
  auto ck = patchlens::init_checkpoint<float>(gen_config(), 55);
  std::vector<int64_t> prompt{11, 3, 7};
  EXPECT_EQ(patchlens::generate_greedy<float>(prompt, ck, 10),
            patchlens::generate_greedy<float>(prompt, ck, 10));
}
