#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchlens/checkpoint.hpp"
#include "patchlens/hooks.hpp"
#include "patchlens/kernels.hpp"
#include "patchlens/metric_spec.hpp"
#include "patchlens/model.hpp"
#include "patchlens/vocab.hpp"

namespace patchlens {

enum class Order { Stereotypical, AntiStereotypical };

inline const char* order_name(Order o) {
  return o == Order::Stereotypical ? "stereotypical" : "anti_stereotypical";
}

// Tie counts as Stereotypical: ties must never inflate reversal claims.
template <typename T>
Order order_of(T stereo_logit, T anti_logit) {
  return stereo_logit >= anti_logit ? Order::Stereotypical : Order::AntiStereotypical;
}

// logits[pos, anti] - logits[pos, stereo]; positive = anti-stereotypical
// preferred. Shift-invariant per position by construction.
template <typename T>
T logit_diff(const Tensor<T>& logits, const MetricSpec& spec) {
  spec.target.validate(logits.dim(1));
  const int64_t p = spec.resolve_position(logits.dim(0));
  return logits(p, spec.target.anti_token) - logits(p, spec.target.stereo_token);
}

template <typename T>
Order logit_order(const Tensor<T>& logits, const PronounTarget& target,
                  int64_t position = kFinalPosition) {
  target.validate(logits.dim(1));
  const int64_t p = (position == kFinalPosition) ? logits.dim(0) - 1 : position;
  if (p < 0 || p >= logits.dim(0))
    throw ConfigError("logit_order: position out of range");
  return order_of(logits(p, target.stereo_token), logits(p, target.anti_token));
}

// KL(softmax(p) || softmax(q)), natural log, over one logit row each.
template <typename T>
T kl_divergence(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
  if (p_logits.rank() != 1 || q_logits.rank() != 1 || p_logits.dim(0) != q_logits.dim(0))
    throw ShapeError("kl_divergence: want two equal-length logit vectors");
  const int64_t v = p_logits.dim(0);
  auto lp = log_softmax_row(p_logits.data.data(), v);
  auto lq = log_softmax_row(q_logits.data.data(), v);
  T kl = T(0);
  for (int64_t j = 0; j < v; ++j)
    kl += std::exp(lp[static_cast<size_t>(j)]) *
          (lp[static_cast<size_t>(j)] - lq[static_cast<size_t>(j)]);
  return std::max(kl, T(0));  // clamp the -1e-18-style rounding residue
}

// ------------------------------------------------------------- logit lens

// resid_post.{layer} at one position, pushed through the final norm and the
// unembedding. The full row, for the lens-vs-logits consistency check.
template <typename T>
Tensor<T> logit_lens_row(const ActivationCache<T>& cache, const Checkpoint<T>& ck, int64_t layer,
                         int64_t position) {
  const Tensor<T>& resid = cache.at({Site::resid_post, layer});
  if (position < 0 || position >= resid.dim(0))
    throw ConfigError("logit_lens: position out of range");
  const int64_t d = ck.config.d_model;
  Tensor<T> normed({1, d});
  rmsnorm_row(resid.row(position), ck.final_ln_w.data.data(), static_cast<T>(ck.config.norm_eps),
              d, normed.row(0));
  Tensor<T> row = matmul(normed, ck.W_U);
  row.shape = {ck.config.vocab_size};
  return row;
}

// Per-layer logit order of the two target tokens at one position.
template <typename T>
std::vector<Order> logit_lens(const ActivationCache<T>& cache, const Checkpoint<T>& ck,
                              int64_t position, const PronounTarget& target) {
  target.validate(ck.config.vocab_size);
  std::vector<Order> orders;
  orders.reserve(static_cast<size_t>(ck.config.n_layers));
  for (int64_t l = 0; l < ck.config.n_layers; ++l) {
    Tensor<T> row = logit_lens_row(cache, ck, l, position);
    orders.push_back(order_of(row(target.stereo_token), row(target.anti_token)));
  }
  return orders;
}

// First layer from which the order is Stereotypical at every later layer
// (inclusive); n_layers if it never settles.
inline int64_t settled_layer(const std::vector<Order>& orders) {
  int64_t settled = static_cast<int64_t>(orders.size());
  for (int64_t l = static_cast<int64_t>(orders.size()) - 1; l >= 0; --l) {
    if (orders[static_cast<size_t>(l)] != Order::Stereotypical) break;
    settled = l;
  }
  return settled;
}

// --------------------------------------------------------- sequence scores

// Sum of next-token log-probabilities over positions 1..n-1; no length
// normalization.
template <typename T>
T sequence_logprob_tokens(std::span<const int64_t> tokens, const Checkpoint<T>& ck) {
  if (tokens.size() < 2)
    throw ConfigError("sequence_logprob: need at least 2 tokens, got " +
                      std::to_string(tokens.size()));
  auto res = forward<T>(tokens, ck);
  T total = T(0);
  for (size_t t = 1; t < tokens.size(); ++t) {
    auto ls = log_softmax_row(res.logits.row(static_cast<int64_t>(t - 1)), ck.config.vocab_size);
    total += ls[static_cast<size_t>(tokens[t])];
  }
  return total;
}

template <typename T>
T sequence_logprob(const std::string& text, const Checkpoint<T>& ck, const Vocab& vocab) {
  return sequence_logprob_tokens<T>(vocab.tokenize(text).ids, ck);
}

// ------------------------------------------------------------- preference

struct MinimalPair {
  std::string stereo_text;
  std::string anti_text;
  std::string category;
};

// JSON-lines: {"stereo": s, "anti": s, "category": s} per line.
inline std::vector<MinimalPair> load_minimal_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("pairs: cannot open '" + path + "'");
  std::vector<MinimalPair> pairs;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      pairs.push_back({j.at("stereo").get<std::string>(), j.at("anti").get<std::string>(),
                       j.value("category", "")});
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("pairs: bad record at " + path + ":" + std::to_string(lineno) + ": " +
                      e.what());
    }
  }
  return pairs;
}

// Fraction of pairs scored stereotypical (ties -> stereotypical). 0.5 is the
// unbiased reference; pretrained-biased models land near 1.0.
template <typename T>
double preference_fraction(const std::vector<MinimalPair>& pairs, const Checkpoint<T>& ck,
                           const Vocab& vocab) {
  if (pairs.empty()) throw ConfigError("preference_fraction: empty pair list");
  int64_t stereo = 0;
  for (const auto& p : pairs) {
    const T lp_s = sequence_logprob<T>(p.stereo_text, ck, vocab);
    const T lp_a = sequence_logprob<T>(p.anti_text, ck, vocab);
    if (lp_s >= lp_a) ++stereo;
  }
  return static_cast<double>(stereo) / static_cast<double>(pairs.size());
}

}  // namespace patchlens
