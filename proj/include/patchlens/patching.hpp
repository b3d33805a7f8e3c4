#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "patchlens/data.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/hooks.hpp"
#include "patchlens/metric_spec.hpp"
#include "patchlens/model.hpp"

// Higher-level patching protocols on top of the hook machinery: profession
// counterfactual patch sets, attribution patching, and the head→layer
// grouping used by the attention experiments.

namespace patchlens {

// Convenience wrapper: forward pass with patches applied and sites captured.
template <typename T>
ForwardResult<T> run_with_patches(std::span<const int64_t> tokens, const Checkpoint<T>& ck,
                                  const PatchSpec<T>& patches, const CaptureSet& capture = {}) {
  return forward<T>(tokens, ck, capture, &patches);
}

// Capture set covering one site family over `layers` (all heads for the
// head-resolved family).
inline CaptureSet capture_for_family(Site family, const std::vector<int64_t>& layers,
                                     int64_t n_heads) {
  CaptureSet cs;
  for (int64_t l : layers) {
    if (family == Site::attn_head_out) {
      for (int64_t h = 0; h < n_heads; ++h) cs.add({family, l, h});
    } else {
      cs.add({family, l, -1});
    }
  }
  return cs;
}

// Builds the patch set for one counterfactual pair: replace the clean run's
// activations at the profession span with the corrupt run's, at every
// requested layer. `corrupt_cache` must outlive the returned spec and must
// hold the (site, layer[, head]) tensors this asks for.
//
// last-token mode patches only the final profession token (the paper's
// default); all-tokens patches the whole span, position by position.
template <typename T>
PatchSpec<T> make_profession_patchset(const CounterfactualPair& pair,
                                      const ActivationCache<T>& corrupt_cache,
                                      const std::vector<int64_t>& layers, Site family,
                                      SpanAlignment span_mode, int64_t n_heads = 0) {
  if (family != Site::mlp_out && family != Site::resid_pre && family != Site::attn_head_out)
    throw ConfigError(std::string("unsupported patch site family: ") + site_name(family));
  if (family == Site::attn_head_out && n_heads <= 0)
    throw ConfigError("attn_head_out patch set needs n_heads");

  const TokenSpan clean_span = pair.clean.span;
  const TokenSpan corrupt_span = pair.corrupt.span;

  std::vector<std::pair<int64_t, int64_t>> positions;  // (target, source)
  if (span_mode == SpanAlignment::last_token) {
    positions.emplace_back(clean_span.end - 1, corrupt_span.end - 1);
  } else {
    if (clean_span.length() != corrupt_span.length())
      throw PairingError("all-tokens alignment needs equal span lengths, got " +
                         std::to_string(clean_span.length()) + " vs " +
                         std::to_string(corrupt_span.length()));
    for (int64_t i = 0; i < clean_span.length(); ++i)
      positions.emplace_back(clean_span.start + i, corrupt_span.start + i);
  }

  PatchSpec<T> spec;
  for (int64_t l : layers) {
    for (auto [target, source] : positions) {
      if (family == Site::attn_head_out) {
        for (int64_t h = 0; h < n_heads; ++h)
          spec.add({family, l, h, target}, AblationSource<T>::counterfactual(corrupt_cache, source));
      } else {
        spec.add({family, l, -1, target}, AblationSource<T>::counterfactual(corrupt_cache, source));
      }
    }
  }
  return spec;
}

struct AttributionQuery {
  std::vector<Site> families = {Site::attn_head_out};
  int64_t layer_ceiling = 0;  // inclusive upper layer bound
  // Scored positions [begin, end); defaults to everything strictly right of
  // the clean profession span.
  std::optional<std::pair<int64_t, int64_t>> position_range;

  void validate(const ModelConfig& config) const {
    if (layer_ceiling < 0 || layer_ceiling >= config.n_layers)
      throw ConfigError("attribution layer_ceiling out of range: " +
                        std::to_string(layer_ceiling));
    if (families.empty()) throw ConfigError("attribution query has no site families");
  }
};

struct AttributionScore {
  HookPoint hook;  // position == kAllPositions; score is summed over the range
  double score = 0.0;
};

// Hooks a query covers, in canonical order (so equal scores rank
// deterministically after the stable sort).
inline std::vector<SiteKey> attribution_keys(const AttributionQuery& query, int64_t n_heads) {
  std::vector<SiteKey> keys;
  for (Site family : query.families) {
    for (int64_t l = 0; l <= query.layer_ceiling; ++l) {
      if (family == Site::attn_head_out) {
        for (int64_t h = 0; h < n_heads; ++h) keys.push_back({family, l, h});
      } else {
        keys.push_back({family, l, -1});
      }
    }
  }
  return keys;
}

// Core attribution formula on pre-computed caches: per hook, sum over scored
// positions [begin, end) of (corrupt − clean) · ∂metric/∂activation. Exact
// for metrics linear in the activation; first-order estimate otherwise.
template <typename T>
std::vector<AttributionScore> attribution_scores(const ActivationCache<T>& clean_acts,
                                                 const ActivationCache<T>& grads,
                                                 const ActivationCache<T>& corrupt_acts,
                                                 const std::vector<SiteKey>& keys, int64_t begin,
                                                 int64_t end) {
  std::vector<AttributionScore> out;
  out.reserve(keys.size());
  for (const auto& k : keys) {
    const Tensor<T>& a_clean = clean_acts.at(k);
    const Tensor<T>& a_corrupt = corrupt_acts.at(k);
    const Tensor<T>& grad = grads.at(k);
    double score = 0.0;
    for (int64_t p = begin; p < end; ++p)
      for (int64_t j = 0; j < a_clean.shape[1]; ++j)
        score += static_cast<double>((a_corrupt(p, j) - a_clean(p, j)) * grad(p, j));
    if (!std::isfinite(score))
      throw ShapeError("attribution score for " + to_string(k) + " is not finite");
    out.push_back({HookPoint{k.site, k.layer, k.head, kAllPositions}, score});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const AttributionScore& a, const AttributionScore& b) {
                     return a.score > b.score;
                   });
  return out;
}

// Gradient-based approximation of activation patching: two forward passes
// (clean and corrupt) and one backward pass on the clean run. Results are
// sorted by descending signed score (most anti-stereotypical first).
template <typename T>
std::vector<AttributionScore> attribution_patch(const CounterfactualPair& pair,
                                                const Checkpoint<T>& ck, const MetricSpec& metric,
                                                const AttributionQuery& query) {
  query.validate(ck.config);
  if (pair.clean.tokens.size() != pair.corrupt.tokens.size())
    throw PairingError("attribution alignment: clean and corrupt lengths differ (" +
                       std::to_string(pair.clean.tokens.size()) + " vs " +
                       std::to_string(pair.corrupt.tokens.size()) + ")");
  const int64_t seq = static_cast<int64_t>(pair.clean.tokens.size());

  int64_t begin = pair.clean.span.end, end = seq;
  if (query.position_range) std::tie(begin, end) = *query.position_range;
  if (begin < 0 || end > seq || begin >= end)
    throw ConfigError("attribution position range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") invalid for length " + std::to_string(seq));

  const std::vector<SiteKey> keys = attribution_keys(query, ck.config.n_heads);
  CaptureSet capture;
  for (const auto& k : keys) capture.add(k);

  auto clean = backward_metric<T>(pair.clean.tokens, ck, metric, capture, capture);
  auto corrupt = forward<T>(pair.corrupt.tokens, ck, capture);
  return attribution_scores<T>(clean.activations, clean.grads, corrupt.cache, keys, begin, end);
}

inline std::vector<AttributionScore> top_k(const std::vector<AttributionScore>& scores,
                                           int64_t k) {
  if (k < 1) throw ConfigError("top_k needs k >= 1");
  const auto n = std::min<int64_t>(k, static_cast<int64_t>(scores.size()));
  return {scores.begin(), scores.begin() + n};
}

// Distinct layers (≤ ceiling) holding at least one of the given head hooks.
// Non-head entries are ignored.
inline std::set<int64_t> heads_to_layers(const std::vector<AttributionScore>& scores,
                                         int64_t layer_ceiling) {
  std::set<int64_t> layers;
  for (const auto& s : scores)
    if (s.hook.site == Site::attn_head_out && s.hook.layer <= layer_ceiling)
      layers.insert(s.hook.layer);
  return layers;
}

}  // namespace patchlens
