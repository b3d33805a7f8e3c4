#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchlens/checkpoint.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/masks.hpp"
#include "patchlens/metrics.hpp"
#include "patchlens/trainer.hpp"
#include "patchlens/vocab.hpp"

// Masked debiasing: fine-tune only the selected components on counterfactual
// (gender-swapped) text, then report stereotype preference and language
// quality before vs. after.

namespace patchlens {

// Token-weighted corpus perplexity: exp(-sum logprob / sum predicted tokens).
// Lines shorter than two tokens carry no prediction and are skipped.
template <typename T>
double corpus_perplexity(const std::vector<std::string>& lines, const Checkpoint<T>& ck,
                         const Vocab& vocab) {
  double total_lp = 0.0;
  int64_t total_predicted = 0;
  for (const auto& line : lines) {
    auto toks = vocab.tokenize(line);
    if (toks.ids.size() < 2) continue;
    total_lp += static_cast<double>(sequence_logprob_tokens<T>(toks.ids, ck));
    total_predicted += static_cast<int64_t>(toks.ids.size()) - 1;
  }
  if (total_predicted == 0) throw ConfigError("perplexity: no line has 2+ tokens");
  return std::exp(-total_lp / static_cast<double>(total_predicted));
}

inline std::string mask_name(const ComponentMask& mask) {
  switch (mask.kind) {
    case ComponentMask::Kind::full:
      return "full";
    case ComponentMask::Kind::none:
      return "none";
    case ComponentMask::Kind::mlp_layers: {
      std::string s = "mlp_layers[";
      bool first = true;
      for (int64_t l : mask.layers) {
        if (!first) s += '+';
        s += std::to_string(l);
        first = false;
      }
      return s + "]";
    }
    case ComponentMask::Kind::attn_heads: {
      std::string s = "attn_heads[";
      bool first = true;
      for (const auto& [l, h] : mask.heads) {
        if (!first) s += '+';
        s += std::to_string(l) + "." + std::to_string(h);
        first = false;
      }
      return s + "]";
    }
  }
  return "?";
}

template <typename T>
struct DebiasReport {
  std::string component;          // mask description
  int64_t trainable_params = 0;
  double preference_before = 0.0;
  double preference_after = 0.0;
  double perplexity_before = 0.0;
  double perplexity_after = 0.0;
  std::vector<EpochLoss> curve;
  Checkpoint<T> model;  // the debiased checkpoint

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["component"] = component;
    j["trainable_params"] = trainable_params;
    j["preference_before"] = preference_before;
    j["preference_after"] = preference_after;
    j["perplexity_before"] = perplexity_before;
    j["perplexity_after"] = perplexity_after;
    j["perplexity_change"] =
        perplexity_before > 0 ? perplexity_after / perplexity_before - 1.0 : 0.0;
    nlohmann::ordered_json curve_j = nlohmann::ordered_json::array();
    for (const auto& e : curve) {
      nlohmann::ordered_json row;
      row["train"] = e.train;
      if (e.val) row["val"] = *e.val;
      curve_j.push_back(row);
    }
    j["curve"] = std::move(curve_j);
    return j;
  }
};

// Fine-tunes `ck` on the counterfactual corpus under `mask`, measuring
// stereotype preference on the eval pairs and perplexity on the neutral
// corpus before and after.
template <typename T>
DebiasReport<T> debias_run(const Checkpoint<T>& ck, const ComponentMask& mask,
                           const std::vector<std::string>& counterfactual,
                           const std::vector<MinimalPair>& eval_pairs,
                           const std::vector<std::string>& neutral, const Vocab& vocab,
                           const TrainConfig& config) {
  DebiasReport<T> report;
  report.component = mask_name(mask);
  report.trainable_params = trainable_param_count(ck.config, mask);
  report.preference_before = preference_fraction(eval_pairs, ck, vocab);
  report.perplexity_before = corpus_perplexity(neutral, ck, vocab);

  auto trained = train_lm(counterfactual, vocab, ck, mask, config);
  report.curve = std::move(trained.curve);
  report.model = std::move(trained.model);

  report.preference_after = preference_fraction(eval_pairs, report.model, vocab);
  report.perplexity_after = corpus_perplexity(neutral, report.model, vocab);
  return report;
}

}  // namespace patchlens
