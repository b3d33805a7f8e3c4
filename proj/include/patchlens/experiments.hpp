#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "patchlens/data.hpp"
#include "patchlens/metrics.hpp"
#include "patchlens/model.hpp"
#include "patchlens/parallel.hpp"
#include "patchlens/patching.hpp"
#include "patchlens/report.hpp"
#include "patchlens/rng.hpp"

// The experiment runners: MLP layer sweeps, attention top-k attribution with
// layer grouping, upper-layer MLP patching, generation checks, and the
// feature probe. Each emits an ExperimentReport whose aggregates can be
// recomputed from its per-sample rows.

namespace patchlens {

namespace detail {

inline std::string join_layers(const std::vector<int64_t>& layers) {
  std::string out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i) out += '+';
    out += std::to_string(layers[i]);
  }
  return out;
}

inline std::string join_heads(const std::vector<AttributionScore>& scores) {
  std::string out;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (i) out += '+';
    out += std::to_string(scores[i].hook.layer) + '.' + std::to_string(scores[i].hook.head);
  }
  return out;
}

// "reversed" = the patched run prefers the anti-stereotypical pronoun.
inline bool is_reversed(const Tensor<double>& logits, const PronounTarget& target) {
  return logit_order(logits, target) == Order::AntiStereotypical;
}

template <typename T>
nlohmann::ordered_json model_snapshot(const Checkpoint<T>& ck) {
  return config_to_json(ck.config);
}

}  // namespace detail

// Fraction helper used by several aggregates (0/0 reported as 0).
inline double fraction(int64_t hits, int64_t total) {
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// MLP sweep (Fig 3a protocol): patch mlp_out with counterfactual activations
// at the profession span for each requested layer set; report the fraction of
// samples whose final-position logit order flips to anti-stereotypical.

template <typename T>
ExperimentReport exp_mlp_sweep(const std::vector<TemplateSample>& samples,
                               const ProfessionSet& professions, const Vocab& vocab,
                               const Checkpoint<T>& ck,
                               const std::vector<std::vector<int64_t>>& layer_sets,
                               SpanAlignment span_mode, const PairingOptions& pairing = {},
                               int threads = 1, uint64_t seed = 0) {
  const ModelConfig& config = ck.config;
  for (const auto& set : layer_sets)
    for (int64_t l : set)
      if (l < 0 || l >= config.n_layers)
        throw ConfigError("mlp sweep layer out of range: " + std::to_string(l));

  struct SampleRows {
    std::vector<std::vector<Cell>> rows;
  };
  std::vector<int64_t> all_layers(config.n_layers);
  for (int64_t l = 0; l < config.n_layers; ++l) all_layers[l] = l;

  auto work = [&](int64_t i) -> SampleRows {
    const TemplateSample& s = samples[static_cast<size_t>(i)];
    SampleRows out;
    std::optional<CounterfactualPair> pair;
    std::optional<ForwardResult<T>> corrupt;
    std::string pair_error;
    try {
      pair = pair_counterfactual(s, professions, vocab, pairing);
      corrupt = forward<T>(pair->corrupt.tokens, ck,
                           capture_for_family(Site::mlp_out, all_layers, config.n_heads));
    } catch (const std::exception& e) {
      pair_error = e.what();
    }
    for (const auto& layers : layer_sets) {
      std::vector<Cell> row{i,
                            s.template_text,
                            s.profession,
                            std::string(gender_name(s.gender)),
                            detail::join_layers(layers),
                            std::string(span_alignment_name(span_mode)),
                            0.0,
                            0.0,
                            false,
                            std::string()};
      if (!pair_error.empty()) {
        row[9] = pair_error;
        out.rows.push_back(std::move(row));
        continue;
      }
      try {
        Tensor<double> logits;
        if (layers.empty()) {
          logits = forward<T>(s.tokens, ck).logits.template cast<double>();
        } else {
          auto patches = make_profession_patchset<T>(*pair, corrupt->cache, layers,
                                                     Site::mlp_out, span_mode);
          logits = run_with_patches<T>(s.tokens, ck, patches).logits.template cast<double>();
        }
        const int64_t p = logits.dim(0) - 1;
        row[6] = static_cast<double>(logits(p, s.target.stereo_token));
        row[7] = static_cast<double>(logits(p, s.target.anti_token));
        row[8] = detail::is_reversed(logits, s.target);
      } catch (const std::exception& e) {
        row[9] = std::string(e.what());
      }
      out.rows.push_back(std::move(row));
    }
    return out;
  };

  auto per_sample = parallel_map<SampleRows>(static_cast<int64_t>(samples.size()), threads, work);

  ExperimentReport report;
  report.experiment = "mlp_sweep";
  report.seed = seed;
  report.config = detail::model_snapshot(ck);
  report.config["span_mode"] = span_alignment_name(span_mode);
  report.rows = Table({"sample", "template", "profession", "gender", "layers", "span_mode",
                       "logit_stereo", "logit_anti", "reversed", "error"});
  for (auto& sr : per_sample)
    for (auto& row : sr.rows) report.rows.add_row(std::move(row));

  nlohmann::ordered_json sets = nlohmann::ordered_json::array();
  for (const auto& layers : layer_sets) {
    int64_t n = 0, reversed = 0;
    const std::string id = detail::join_layers(layers);
    for (const auto& row : report.rows.rows) {
      if (std::get<std::string>(row[4]) != id || !std::get<std::string>(row[9]).empty()) continue;
      ++n;
      if (std::get<bool>(row[8])) ++reversed;
    }
    sets.push_back({{"layers", layers},
                    {"n", n},
                    {"reversed", reversed},
                    {"fraction_reversed", fraction(reversed, n)}});
  }
  report.aggregates = {{"layer_sets", sets}};
  return report;
}

// ---------------------------------------------------------------------------
// Attention top-k (Fig 3b protocol): attribution-rank heads up to a layer
// ceiling, then for each k patch (a) the top-k heads directly and (b) the
// whole attn_out of every layer containing a top-k head.

template <typename T>
ExperimentReport exp_attn_topk(const std::vector<TemplateSample>& samples,
                               const ProfessionSet& professions, const Vocab& vocab,
                               const Checkpoint<T>& ck, const std::vector<int64_t>& k_values,
                               int64_t layer_ceiling, const PairingOptions& pairing = {},
                               int threads = 1, uint64_t seed = 0) {
  const ModelConfig& config = ck.config;
  for (int64_t k : k_values)
    if (k < 1) throw ConfigError("attn top-k needs k >= 1");
  AttributionQuery query;
  query.layer_ceiling = layer_ceiling;
  query.validate(config);

  struct SampleOut {
    std::vector<std::vector<Cell>> rows;
    // per-layer max/median |unused|: raw head scores for dispersion stats
    std::vector<std::vector<double>> head_scores;  // [ceiling+1][n_heads]
    bool ok = false;
  };

  auto work = [&](int64_t i) -> SampleOut {
    const TemplateSample& s = samples[static_cast<size_t>(i)];
    SampleOut out;
    std::string err;
    std::optional<CounterfactualPair> pair;
    std::vector<AttributionScore> ranked;
    std::optional<ForwardResult<T>> corrupt;
    try {
      pair = pair_counterfactual(s, professions, vocab, pairing);
      MetricSpec metric;
      metric.kind = MetricKind::logit_diff;
      metric.position = kFinalPosition;
      metric.target = s.target;
      ranked = attribution_patch<T>(*pair, ck, metric, query);

      CaptureSet cap;
      for (int64_t l = 0; l <= layer_ceiling; ++l) {
        cap.add({Site::attn_out, l, -1});
        for (int64_t h = 0; h < config.n_heads; ++h) cap.add({Site::attn_head_out, l, h});
      }
      corrupt = forward<T>(pair->corrupt.tokens, ck, cap);

      out.head_scores.assign(static_cast<size_t>(layer_ceiling + 1),
                             std::vector<double>(static_cast<size_t>(config.n_heads), 0.0));
      for (const auto& sc : ranked)
        out.head_scores[static_cast<size_t>(sc.hook.layer)][static_cast<size_t>(sc.hook.head)] =
            sc.score;
      out.ok = true;
    } catch (const std::exception& e) {
      err = e.what();
    }

    const int64_t seq = static_cast<int64_t>(s.tokens.size());
    for (int64_t k : k_values) {
      std::vector<Cell> row{i,
                            s.template_text,
                            s.profession,
                            std::string(gender_name(s.gender)),
                            k,
                            std::string(),
                            std::string(),
                            int64_t(0),
                            false,
                            false,
                            0.0,
                            0.0,
                            std::string(err)};
      if (out.ok) {
        try {
          auto top = top_k(ranked, k);
          row[5] = detail::join_heads(top);
          auto layers = heads_to_layers(top, layer_ceiling);
          std::vector<int64_t> layer_list(layers.begin(), layers.end());
          row[6] = detail::join_layers(layer_list);
          row[7] = static_cast<int64_t>(layer_list.size());

          // (a) direct per-head patching at positions right of the span
          PatchSpec<T> direct;
          for (const auto& sc : top)
            for (int64_t p = pair->clean.span.end; p < seq; ++p)
              direct.add({Site::attn_head_out, sc.hook.layer, sc.hook.head, p},
                         AblationSource<T>::counterfactual(corrupt->cache, p));
          auto direct_logits =
              run_with_patches<T>(s.tokens, ck, direct).logits.template cast<double>();
          row[8] = detail::is_reversed(direct_logits, s.target);

          // (b) grouped whole-layer attn_out patching
          PatchSpec<T> grouped;
          for (int64_t l : layer_list)
            for (int64_t p = pair->clean.span.end; p < seq; ++p)
              grouped.add({Site::attn_out, l, -1, p},
                          AblationSource<T>::counterfactual(corrupt->cache, p));
          auto grouped_logits =
              run_with_patches<T>(s.tokens, ck, grouped).logits.template cast<double>();
          row[9] = detail::is_reversed(grouped_logits, s.target);
          const int64_t p = grouped_logits.dim(0) - 1;
          row[10] = static_cast<double>(grouped_logits(p, s.target.stereo_token));
          row[11] = static_cast<double>(grouped_logits(p, s.target.anti_token));
        } catch (const std::exception& e) {
          row[12] = std::string(e.what());
        }
      }
      out.rows.push_back(std::move(row));
    }
    return out;
  };

  auto per_sample = parallel_map<SampleOut>(static_cast<int64_t>(samples.size()), threads, work);

  ExperimentReport report;
  report.experiment = "attn_topk";
  report.seed = seed;
  report.config = detail::model_snapshot(ck);
  report.config["layer_ceiling"] = layer_ceiling;
  report.rows = Table({"sample", "template", "profession", "gender", "k", "heads",
                       "layers_patched", "n_layers_patched", "direct_reversed",
                       "grouped_reversed", "logit_stereo", "logit_anti", "error"});
  for (auto& so : per_sample)
    for (auto& row : so.rows) report.rows.add_row(std::move(row));

  nlohmann::ordered_json per_k = nlohmann::ordered_json::array();
  for (int64_t k : k_values) {
    int64_t n = 0, direct = 0, grouped = 0, layer_sum = 0;
    for (const auto& row : report.rows.rows) {
      if (std::get<int64_t>(row[4]) != k || !std::get<std::string>(row[12]).empty()) continue;
      ++n;
      if (std::get<bool>(row[8])) ++direct;
      if (std::get<bool>(row[9])) ++grouped;
      layer_sum += std::get<int64_t>(row[7]);
    }
    per_k.push_back({{"k", k},
                     {"n", n},
                     {"direct_fraction_reversed", fraction(direct, n)},
                     {"grouped_fraction_reversed", fraction(grouped, n)},
                     {"mean_layers_patched", n == 0 ? 0.0 : static_cast<double>(layer_sum) / n}});
  }

  // Per-layer score dispersion across heads, averaged over samples: large
  // max-to-median gaps would contradict "similar scores across heads".
  nlohmann::ordered_json dispersion = nlohmann::ordered_json::array();
  int64_t ok_samples = 0;
  std::vector<double> max_acc(static_cast<size_t>(layer_ceiling + 1), 0.0);
  std::vector<double> med_acc(static_cast<size_t>(layer_ceiling + 1), 0.0);
  for (const auto& so : per_sample) {
    if (!so.ok) continue;
    ++ok_samples;
    for (int64_t l = 0; l <= layer_ceiling; ++l) {
      std::vector<double> v = so.head_scores[static_cast<size_t>(l)];
      std::sort(v.begin(), v.end());
      max_acc[static_cast<size_t>(l)] += v.back();
      const size_t m = v.size() / 2;
      med_acc[static_cast<size_t>(l)] +=
          v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
  }
  for (int64_t l = 0; l <= layer_ceiling; ++l) {
    dispersion.push_back(
        {{"layer", l},
         {"mean_max_score", ok_samples ? max_acc[static_cast<size_t>(l)] / ok_samples : 0.0},
         {"mean_median_score", ok_samples ? med_acc[static_cast<size_t>(l)] / ok_samples : 0.0}});
  }
  report.aggregates = {{"per_k", per_k}, {"score_dispersion", dispersion}};
  return report;
}

// ---------------------------------------------------------------------------
// Upper-layer MLP patching: layers >= floor, final token position only.

template <typename T>
ExperimentReport exp_upper_mlp(const std::vector<TemplateSample>& samples,
                               const ProfessionSet& professions, const Vocab& vocab,
                               const Checkpoint<T>& ck, int64_t layer_floor,
                               const PairingOptions& pairing = {}, int threads = 1,
                               uint64_t seed = 0) {
  const ModelConfig& config = ck.config;
  if (layer_floor < 0 || layer_floor > config.n_layers)
    throw ConfigError("upper-mlp layer floor out of range: " + std::to_string(layer_floor));
  std::vector<int64_t> layers;
  for (int64_t l = layer_floor; l < config.n_layers; ++l) layers.push_back(l);

  auto work = [&](int64_t i) -> std::vector<Cell> {
    const TemplateSample& s = samples[static_cast<size_t>(i)];
    std::vector<Cell> row{i,
                          s.template_text,
                          s.profession,
                          std::string(gender_name(s.gender)),
                          0.0,
                          0.0,
                          false,
                          std::string()};
    try {
      Tensor<double> logits;
      if (layers.empty()) {
        logits = forward<T>(s.tokens, ck).logits.template cast<double>();
      } else {
        auto pair = pair_counterfactual(s, professions, vocab, pairing);
        auto corrupt = forward<T>(pair.corrupt.tokens, ck,
                                  capture_for_family(Site::mlp_out, layers, config.n_heads));
        const int64_t last = static_cast<int64_t>(s.tokens.size()) - 1;
        PatchSpec<T> patches;
        for (int64_t l : layers)
          patches.add({Site::mlp_out, l, -1, last},
                      AblationSource<T>::counterfactual(corrupt.cache, last));
        logits = run_with_patches<T>(s.tokens, ck, patches).logits.template cast<double>();
      }
      const int64_t p = logits.dim(0) - 1;
      row[4] = static_cast<double>(logits(p, s.target.stereo_token));
      row[5] = static_cast<double>(logits(p, s.target.anti_token));
      row[6] = detail::is_reversed(logits, s.target);
    } catch (const std::exception& e) {
      row[7] = std::string(e.what());
    }
    return row;
  };

  auto rows = parallel_map<std::vector<Cell>>(static_cast<int64_t>(samples.size()), threads, work);

  ExperimentReport report;
  report.experiment = "upper_mlp";
  report.seed = seed;
  report.config = detail::model_snapshot(ck);
  report.config["layer_floor"] = layer_floor;
  report.rows = Table({"sample", "template", "profession", "gender", "logit_stereo",
                       "logit_anti", "reversed", "error"});
  for (auto& row : rows) report.rows.add_row(std::move(row));

  int64_t n = 0, reversed = 0;
  std::map<std::string, std::pair<int64_t, int64_t>> by_template;  // n, reversed
  for (const auto& row : report.rows.rows) {
    const auto& tmpl = std::get<std::string>(row[1]);
    auto& bucket = by_template[tmpl];
    if (!std::get<std::string>(row[7]).empty()) continue;
    ++n;
    ++bucket.first;
    if (std::get<bool>(row[6])) {
      ++reversed;
      ++bucket.second;
    }
  }
  nlohmann::ordered_json per_template = nlohmann::ordered_json::array();
  for (const auto& [tmpl, counts] : by_template)
    per_template.push_back({{"template", tmpl},
                            {"n", counts.first},
                            {"reversed", counts.second},
                            {"fraction_reversed", fraction(counts.second, counts.first)}});
  report.aggregates = {{"n", n},
                       {"reversed", reversed},
                       {"fraction_reversed", fraction(reversed, n)},
                       {"per_template", per_template}};
  return report;
}

// ---------------------------------------------------------------------------
// Generation check: greedy-decode sampled pairs with and without patches and
// flag pronoun switches / profession retention automatically.

struct GenPatchConfig {
  Site family = Site::mlp_out;
  std::vector<int64_t> layers;
  SpanAlignment span_mode = SpanAlignment::last_token;
};

template <typename T>
ExperimentReport exp_generation_check(const std::vector<CounterfactualPair>& pairs,
                                      const Checkpoint<T>& ck, const Vocab& vocab,
                                      const GenderWordFilter& filter, const GenPatchConfig& patch,
                                      int64_t n_samples, int64_t n_tokens, uint64_t seed,
                                      int threads = 1) {
  if (n_tokens < 1) throw ConfigError("generation check needs n_tokens >= 1");
  if (n_samples < 1) throw ConfigError("generation check needs n_samples >= 1");
  const ModelConfig& config = ck.config;
  for (int64_t l : patch.layers)
    if (l < 0 || l >= config.n_layers)
      throw ConfigError("generation patch layer out of range: " + std::to_string(l));

  // Seeded sample without replacement, order preserved for determinism.
  Rng rng(seed);
  std::vector<size_t> order = rng.permutation(pairs.size());
  order.resize(std::min<size_t>(order.size(), static_cast<size_t>(n_samples)));
  std::sort(order.begin(), order.end());

  auto work = [&](int64_t i) -> std::vector<Cell> {
    const CounterfactualPair& pair = pairs[order[static_cast<size_t>(i)]];
    const TemplateSample& s = pair.clean;
    std::vector<Cell> row{static_cast<int64_t>(order[static_cast<size_t>(i)]),
                          s.template_text,
                          s.profession,
                          pair.corrupt.profession,
                          std::string(),   // unpatched text
                          std::string(),   // patched text
                          std::string(),   // first pronoun, unpatched
                          std::string(),   // first pronoun, patched
                          std::string(),   // switch flag: yes | no | ambiguous
                          false,           // profession retained in patched text
                          std::string()};  // error
    try {
      auto decode_continuation = [&](const std::vector<int64_t>& full) {
        std::vector<int64_t> cont(full.begin() + static_cast<int64_t>(s.tokens.size()),
                                  full.end());
        return vocab.detokenize(cont);
      };
      const std::string plain =
          decode_continuation(generate_greedy<T>(s.tokens, ck, n_tokens));

      std::string patched_text;
      if (patch.layers.empty()) {
        patched_text = plain;
      } else {
        auto corrupt = forward<T>(pair.corrupt.tokens, ck,
                                  capture_for_family(patch.family, patch.layers, config.n_heads));
        auto patches = make_profession_patchset<T>(pair, corrupt.cache, patch.layers,
                                                   patch.family, patch.span_mode, config.n_heads);
        patched_text = decode_continuation(generate_greedy<T>(s.tokens, ck, n_tokens, &patches));
      }

      row[4] = plain;
      row[5] = patched_text;
      auto p0 = filter.first_gendered_word(plain);
      auto p1 = filter.first_gendered_word(patched_text);
      if (p0) row[6] = p0->first;
      if (p1) row[7] = p1->first;
      row[8] = std::string(!p0 || !p1 ? "ambiguous" : (p0->second != p1->second ? "yes" : "no"));
      row[9] = patched_text.find(s.profession) != std::string::npos;
    } catch (const std::exception& e) {
      row[10] = std::string(e.what());
    }
    return row;
  };

  auto rows = parallel_map<std::vector<Cell>>(static_cast<int64_t>(order.size()), threads, work);

  ExperimentReport report;
  report.experiment = "generation_check";
  report.seed = seed;
  report.config = detail::model_snapshot(ck);
  report.config["patch_family"] = site_name(patch.family);
  report.config["patch_layers"] = patch.layers;
  report.config["span_mode"] = span_alignment_name(patch.span_mode);
  report.config["n_tokens"] = n_tokens;
  report.rows = Table({"sample", "template", "profession", "corrupt_profession",
                       "unpatched_text", "patched_text", "first_pronoun_unpatched",
                       "first_pronoun_patched", "pronoun_switched", "profession_retained",
                       "error"});
  for (auto& row : rows) report.rows.add_row(std::move(row));

  int64_t n = 0, switched = 0, ambiguous = 0, retained = 0;
  for (const auto& row : report.rows.rows) {
    if (!std::get<std::string>(row[10]).empty()) continue;
    ++n;
    const auto& flag = std::get<std::string>(row[8]);
    if (flag == "ambiguous")
      ++ambiguous;
    else if (flag == "yes")
      ++switched;
    if (std::get<bool>(row[9])) ++retained;
  }
  report.aggregates = {{"n_sampled", n},
                       {"n_ambiguous", ambiguous},
                       {"pronoun_switched", switched},
                       {"pronoun_switched_fraction", fraction(switched, n - ambiguous)},
                       {"profession_retained", retained},
                       {"profession_retained_fraction", fraction(retained, n)}};
  return report;
}

// ---------------------------------------------------------------------------
// Feature probe: patch selected hooks at the tokens where two prompts differ
// (or at the final token) and compare the top-n next-token lists.

struct ProbeConfig {
  Site family = Site::mlp_out;
  std::vector<int64_t> layers;
  enum class Where { differing_span, final_token } where = Where::differing_span;
};

struct TokenProb {
  int64_t token = 0;
  std::string spelling;
  double prob = 0.0;
};

struct FeatureProbeResult {
  TokenSpan differing;             // token range where the prompts disagree
  std::vector<TokenProb> before;   // top-n at final position, unpatched
  std::vector<TokenProb> after;    // top-n after patching
  std::vector<TokenProb> entered;  // in `after` top-n but not in `before`
  std::vector<TokenProb> left;     // in `before` top-n but not in `after`; prob = delta
};

namespace detail {

inline std::vector<TokenProb> top_tokens(const Tensor<double>& probs_row, const Vocab& vocab,
                                         int64_t top_n) {
  std::vector<int64_t> idx(static_cast<size_t>(probs_row.dim(1)));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return probs_row(0, a) > probs_row(0, b);
  });
  const int64_t n = std::min<int64_t>(top_n, probs_row.dim(1));
  std::vector<TokenProb> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out.push_back({idx[static_cast<size_t>(i)], vocab.spelling(idx[static_cast<size_t>(i)]),
                   probs_row(0, idx[static_cast<size_t>(i)])});
  return out;
}

inline Tensor<double> final_row_probs(const Tensor<double>& logits) {
  const int64_t p = logits.dim(0) - 1;
  Tensor<double> row({1, logits.dim(1)});
  for (int64_t j = 0; j < logits.dim(1); ++j) row(0, j) = logits(p, j);
  return softmax_rows(row);
}

}  // namespace detail

template <typename T>
FeatureProbeResult exp_feature_probe(const std::string& prompt, const std::string& counter_prompt,
                                     const Checkpoint<T>& ck, const Vocab& vocab,
                                     const ProbeConfig& probe, int64_t top_n) {
  if (top_n < 1) throw ConfigError("feature probe needs top_n >= 1");
  const ModelConfig& config = ck.config;
  for (int64_t l : probe.layers)
    if (l < 0 || l >= config.n_layers)
      throw ConfigError("feature probe layer out of range: " + std::to_string(l));

  const auto clean_ids = vocab.tokenize(prompt).ids;
  const auto counter_ids = vocab.tokenize(counter_prompt).ids;
  if (clean_ids.size() != counter_ids.size())
    throw PairingError("feature probe alignment: prompts tokenize to different lengths (" +
                       std::to_string(clean_ids.size()) + " vs " +
                       std::to_string(counter_ids.size()) + ")");
  const int64_t seq = static_cast<int64_t>(clean_ids.size());

  FeatureProbeResult result;
  int64_t lo = -1, hi = -1;
  for (int64_t i = 0; i < seq; ++i) {
    if (clean_ids[static_cast<size_t>(i)] != counter_ids[static_cast<size_t>(i)]) {
      if (lo < 0) lo = i;
      hi = i + 1;
    }
  }
  result.differing = lo < 0 ? TokenSpan{0, 0} : TokenSpan{lo, hi};

  auto before_run = forward<T>(clean_ids, ck);
  const auto before_probs = detail::final_row_probs(before_run.logits.template cast<double>());
  result.before = detail::top_tokens(before_probs, vocab, top_n);

  std::vector<int64_t> positions;
  if (probe.where == ProbeConfig::Where::final_token) {
    positions.push_back(seq - 1);
  } else {
    for (int64_t p = result.differing.start; p < result.differing.end; ++p) positions.push_back(p);
  }

  Tensor<double> after_probs = before_probs;
  if (!positions.empty() && !probe.layers.empty()) {
    auto corrupt = forward<T>(counter_ids, ck,
                              capture_for_family(probe.family, probe.layers, config.n_heads));
    PatchSpec<T> patches;
    for (int64_t l : probe.layers) {
      for (int64_t p : positions) {
        if (probe.family == Site::attn_head_out) {
          for (int64_t h = 0; h < config.n_heads; ++h)
            patches.add({probe.family, l, h, p},
                        AblationSource<T>::counterfactual(corrupt.cache, p));
        } else {
          patches.add({probe.family, l, -1, p},
                      AblationSource<T>::counterfactual(corrupt.cache, p));
        }
      }
    }
    auto after_run = run_with_patches<T>(clean_ids, ck, patches);
    after_probs = detail::final_row_probs(after_run.logits.template cast<double>());
  }
  result.after = detail::top_tokens(after_probs, vocab, top_n);

  std::set<int64_t> before_set, after_set;
  for (const auto& t : result.before) before_set.insert(t.token);
  for (const auto& t : result.after) after_set.insert(t.token);
  for (const auto& t : result.after)
    if (!before_set.count(t.token)) {
      TokenProb delta = t;
      delta.prob = t.prob - before_probs(0, t.token);  // entry's probability gain
      result.entered.push_back(delta);
    }
  for (const auto& t : result.before)
    if (!after_set.count(t.token)) {
      TokenProb delta = t;
      delta.prob = after_probs(0, t.token) - t.prob;  // negative: probability lost
      result.left.push_back(delta);
    }
  return result;
}

// ---------------------------------------------------------------------------
// Logit-lens sweep: per-layer logit order at the final position for every
// sample, the layer where the order settles, and the lens-vs-logits
// consistency residual at the last layer.

template <typename T>
ExperimentReport exp_logit_lens(const std::vector<TemplateSample>& samples,
                                const Checkpoint<T>& ck, int threads = 1, uint64_t seed = 0) {
  const ModelConfig& config = ck.config;

  auto work = [&](int64_t i) -> std::vector<Cell> {
    const TemplateSample& s = samples[static_cast<size_t>(i)];
    std::vector<Cell> row{i,
                          s.template_text,
                          s.profession,
                          std::string(gender_name(s.gender)),
                          std::string(),  // per-layer orders, '+'-joined
                          int64_t{0},     // settled layer
                          false,          // stereotypical at the final layer
                          0.0,            // max |lens - logits| at the last layer
                          std::string()};
    try {
      std::vector<int64_t> all_layers(static_cast<size_t>(config.n_layers));
      for (int64_t l = 0; l < config.n_layers; ++l) all_layers[static_cast<size_t>(l)] = l;
      auto run = forward<T>(s.tokens, ck, capture_for_family(Site::resid_post, all_layers,
                                                             config.n_heads));
      const int64_t position = static_cast<int64_t>(s.tokens.size()) - 1;
      auto orders = logit_lens(run.cache, ck, position, s.target);

      std::string joined;
      for (size_t l = 0; l < orders.size(); ++l) {
        if (l) joined += '+';
        joined += orders[l] == Order::Stereotypical ? 'S' : 'A';
      }
      row[4] = std::move(joined);
      row[5] = settled_layer(orders);
      row[6] = orders.back() == Order::Stereotypical;

      // The last lens row must be the model's own output distribution.
      auto lens_row = logit_lens_row(run.cache, ck, config.n_layers - 1, position);
      double max_err = 0.0;
      for (int64_t j = 0; j < config.vocab_size; ++j)
        max_err = std::max(max_err, std::abs(static_cast<double>(lens_row(j)) -
                                             static_cast<double>(run.logits(position, j))));
      row[7] = max_err;
    } catch (const std::exception& e) {
      row[8] = std::string(e.what());
    }
    return row;
  };

  auto rows = parallel_map<std::vector<Cell>>(static_cast<int64_t>(samples.size()), threads, work);

  ExperimentReport report;
  report.experiment = "logit_lens";
  report.seed = seed;
  report.config = detail::model_snapshot(ck);
  report.rows = Table({"sample", "template", "profession", "gender", "orders", "settled_layer",
                       "final_stereotypical", "lens_final_max_abs_err", "error"});
  for (auto& row : rows) report.rows.add_row(std::move(row));

  const int64_t mid = config.n_layers / 2;
  int64_t n = 0, settled_by_mid = 0, final_stereo = 0;
  double max_divergence = 0.0, settled_sum = 0.0;
  for (const auto& row : report.rows.rows) {
    if (!std::get<std::string>(row[8]).empty()) continue;
    ++n;
    const int64_t settled = std::get<int64_t>(row[5]);
    settled_sum += static_cast<double>(settled);
    if (settled <= mid) ++settled_by_mid;
    if (std::get<bool>(row[6])) ++final_stereo;
    max_divergence = std::max(max_divergence, std::get<double>(row[7]));
  }
  report.aggregates = {{"n", n},
                       {"mid_layer", mid},
                       {"settled_by_mid", settled_by_mid},
                       {"fraction_settled_by_mid", fraction(settled_by_mid, n)},
                       {"final_stereotypical", final_stereo},
                       {"mean_settled_layer", n ? settled_sum / static_cast<double>(n) : 0.0},
                       {"max_final_lens_divergence", max_divergence}};
  return report;
}

}  // namespace patchlens
