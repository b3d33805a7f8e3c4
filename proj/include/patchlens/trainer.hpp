#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchlens/checkpoint.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/masks.hpp"
#include "patchlens/model.hpp"
#include "patchlens/optimizer.hpp"
#include "patchlens/rng.hpp"
#include "patchlens/vocab.hpp"

// Next-token LM training with a component mask. Deterministic end to end:
// seeded validation split, seeded epoch shuffles, fixed batch reduction
// order.

namespace patchlens {

struct EpochLoss {
  double train = 0.0;
  std::optional<double> val;  // absent when the validation split is empty
};

template <typename T>
struct TrainResult {
  Checkpoint<T> model;
  std::vector<EpochLoss> curve;
  int64_t steps = 0;           // optimizer steps taken
  int64_t train_lines = 0;
  int64_t val_lines = 0;
  int64_t skipped_lines = 0;   // shorter than two tokens; carry no LM signal
};

// Pretraining aids, off by default. Frozen embeddings keep lexical identity
// out of the trainable path; head dropout (probability per head per batch)
// discourages single-head circuits by silencing W_O slices for a batch.
struct TrainHooks {
  bool freeze_embed = false;
  double head_dropout = 0.0;
};

namespace detail {

template <typename T>
double val_loss(const std::vector<std::vector<int64_t>>& lines,
                const std::vector<size_t>& val_idx, const Checkpoint<T>& ck) {
  double total = 0.0;
  for (size_t i : val_idx)
    total += static_cast<double>(lm_loss_and_grads<T>(lines[i], ck, nullptr));
  return total / static_cast<double>(val_idx.size());
}

}  // namespace detail

template <typename T>
TrainResult<T> train_lm(const std::vector<std::string>& corpus, const Vocab& vocab,
                        const Checkpoint<T>& start, const ComponentMask& mask,
                        const TrainConfig& config, const TrainHooks& hooks = {}) {
  config.validate();
  mask.validate(start.config);
  if (hooks.head_dropout < 0 || hooks.head_dropout >= 1)
    throw ConfigError("head_dropout must be in [0, 1)");

  TrainResult<T> result;
  result.model = start;

  std::vector<std::vector<int64_t>> lines;
  lines.reserve(corpus.size());
  for (const auto& text : corpus) {
    auto ids = vocab.tokenize(text).ids;
    if (ids.size() < 2) {
      ++result.skipped_lines;
      continue;
    }
    if (static_cast<int64_t>(ids.size()) > start.config.max_seq)
      throw ConfigError("corpus line exceeds max_seq " + std::to_string(start.config.max_seq) +
                        ": \"" + text + "\"");
    lines.push_back(std::move(ids));
  }
  if (lines.empty()) throw ConfigError("corpus has no usable lines");

  // Seeded split: shuffle once, carve off the validation tail.
  Rng rng(config.seed);
  std::vector<size_t> order = rng.permutation(lines.size());
  const auto n_val = static_cast<size_t>(
      std::floor(config.validation_fraction * static_cast<double>(lines.size())));
  if (n_val >= lines.size()) throw ConfigError("validation split leaves no training lines");
  std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<int64_t>(n_val));
  std::vector<size_t> train_idx(order.begin() + static_cast<int64_t>(n_val), order.end());
  result.train_lines = static_cast<int64_t>(train_idx.size());
  result.val_lines = static_cast<int64_t>(val_idx.size());

  std::vector<TrainableRegion> regions = mask_parameters(start.config, mask);
  if (hooks.freeze_embed)
    std::erase_if(regions, [](const TrainableRegion& r) { return r.name == "embed.W_E"; });

  auto state = OptimizerState<T>::init(start.config);
  const ModelConfig& mc = start.config;

  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.fork(static_cast<uint64_t>(epoch) + 1);
    std::vector<size_t> sched = epoch_rng.permutation(train_idx.size());

    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (size_t b = 0; b < sched.size(); b += static_cast<size_t>(config.batch_size)) {
      const size_t b_end = std::min(sched.size(), b + static_cast<size_t>(config.batch_size));
      const auto batch_n = static_cast<T>(b_end - b);

      // Head dropout: silence sampled heads by zeroing their W_O slice for
      // this batch; restore afterwards and drop their gradients so the
      // optimizer leaves them untouched.
      std::vector<std::pair<size_t, std::vector<T>>> silenced;  // (layer, saved W_O slice)
      std::vector<std::pair<size_t, int64_t>> silenced_heads;
      if (hooks.head_dropout > 0) {
        const int64_t o_block = mc.d_head * mc.d_model;
        for (int64_t l = 0; l < mc.n_layers; ++l)
          for (int64_t h = 0; h < mc.n_heads; ++h)
            if (epoch_rng.bernoulli(hooks.head_dropout)) {
              auto& w = result.model.blocks[static_cast<size_t>(l)].W_O;
              std::vector<T> saved(w.data.begin() + h * o_block,
                                   w.data.begin() + (h + 1) * o_block);
              std::fill(w.data.begin() + h * o_block, w.data.begin() + (h + 1) * o_block, T(0));
              silenced.emplace_back(static_cast<size_t>(l), std::move(saved));
              silenced_heads.emplace_back(static_cast<size_t>(l), h);
            }
      }

      auto grads = zero_grads<T>(mc);
      double batch_loss = 0.0;
      try {
        for (size_t i = b; i < b_end; ++i)
          batch_loss += static_cast<double>(
              lm_loss_and_grads<T>(lines[train_idx[sched[i]]], result.model, &grads,
                                   T(1) / batch_n));
      } catch (const ShapeError& e) {
        // Exploding weights first surface as overflow inside a kernel.
        throw TrainError("training diverged (numeric overflow) at step " +
                         std::to_string(state.step + 1) + ": " + e.what());
      }
      batch_loss /= static_cast<double>(b_end - b);
      if (!std::isfinite(batch_loss))
        throw TrainError("training diverged (non-finite loss) at step " +
                         std::to_string(state.step + 1));

      // restore silenced heads, then erase their gradients for this step
      {
        const int64_t o_block = mc.d_head * mc.d_model;
        for (size_t s = 0; s < silenced.size(); ++s) {
          auto& w = result.model.blocks[silenced[s].first].W_O;
          const int64_t h = silenced_heads[s].second;
          std::copy(silenced[s].second.begin(), silenced[s].second.end(),
                    w.data.begin() + h * o_block);
          auto& gw = grads.blocks[silenced[s].first].W_O;
          std::fill(gw.data.begin() + h * o_block, gw.data.begin() + (h + 1) * o_block, T(0));
        }
      }

      adamw_step(result.model, grads, state, config, regions);
      epoch_loss += batch_loss;
      ++batches;
    }

    EpochLoss e;
    e.train = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    if (!val_idx.empty()) e.val = detail::val_loss<T>(lines, val_idx, result.model);
    result.curve.push_back(e);
    result.steps = state.step;
  }
  return result;
}

}  // namespace patchlens
