#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "patchlens/config.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/tensor.hpp"

namespace patchlens {

// Position wildcard: "every position in the sequence".
constexpr int64_t kAllPositions = -1;

enum class Site { resid_pre, resid_post, attn_out, attn_head_out, mlp_out };

inline const char* site_name(Site s) {
  switch (s) {
    case Site::resid_pre: return "resid_pre";
    case Site::resid_post: return "resid_post";
    case Site::attn_out: return "attn_out";
    case Site::attn_head_out: return "attn_head_out";
    case Site::mlp_out: return "mlp_out";
  }
  return "?";
}

// An addressable activation: site + layer (+ head for attn_head_out) at one
// position or all of them. attn_head_out is the head's contribution after its
// W_O slice, so every site here has width d_model and heads sum to attn_out.
struct HookPoint {
  Site site = Site::resid_pre;
  int64_t layer = 0;
  int64_t head = -1;  // meaningful only for attn_head_out
  int64_t position = kAllPositions;

  auto operator<=>(const HookPoint&) const = default;
};

// Cache/gradient key: a hook point without the position axis.
struct SiteKey {
  Site site = Site::resid_pre;
  int64_t layer = 0;
  int64_t head = -1;

  auto operator<=>(const SiteKey&) const = default;
};

inline SiteKey key_of(const HookPoint& h) { return {h.site, h.layer, h.head}; }

inline std::string to_string(const SiteKey& k) {
  std::string s = std::string(site_name(k.site)) + "." + std::to_string(k.layer);
  if (k.site == Site::attn_head_out) s += "." + std::to_string(k.head);
  return s;
}

// "mlp_out.2@5", "attn_head_out.1.3@*"; "@*" (or no suffix) = all positions.
inline std::string to_string(const HookPoint& h) {
  std::string s = to_string(key_of(h));
  s += "@";
  s += (h.position == kAllPositions) ? "*" : std::to_string(h.position);
  return s;
}

inline HookPoint parse_hook(std::string_view text) {
  auto fail = [&](const std::string& why) {
    throw ConfigError("bad hook '" + std::string(text) + "': " + why);
  };
  HookPoint h;
  std::string_view rest = text;
  if (auto at = rest.find('@'); at != std::string_view::npos) {
    std::string_view pos = rest.substr(at + 1);
    rest = rest.substr(0, at);
    if (pos == "*") {
      h.position = kAllPositions;
    } else {
      auto [p, ec] = std::from_chars(pos.data(), pos.data() + pos.size(), h.position);
      if (ec != std::errc() || p != pos.data() + pos.size() || h.position < 0)
        fail("position must be a non-negative integer or '*'");
    }
  }
  std::vector<std::string_view> parts;
  while (!rest.empty()) {
    auto dot = rest.find('.');
    parts.push_back(rest.substr(0, dot));
    if (dot == std::string_view::npos) break;
    rest = rest.substr(dot + 1);
  }
  if (parts.empty()) fail("empty site");
  const std::string_view name = parts[0];
  if (name == "resid_pre") h.site = Site::resid_pre;
  else if (name == "resid_post") h.site = Site::resid_post;
  else if (name == "attn_out") h.site = Site::attn_out;
  else if (name == "attn_head_out") h.site = Site::attn_head_out;
  else if (name == "mlp_out") h.site = Site::mlp_out;
  else fail("unknown site '" + std::string(name) + "'");
  const size_t want = (h.site == Site::attn_head_out) ? 3 : 2;
  if (parts.size() != want) fail("expected " + std::to_string(want - 1) + " index field(s)");
  auto parse_idx = [&](std::string_view f, int64_t& out) {
    auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), out);
    if (ec != std::errc() || p != f.data() + f.size() || out < 0) fail("bad index '" + std::string(f) + "'");
  };
  parse_idx(parts[1], h.layer);
  if (h.site == Site::attn_head_out) parse_idx(parts[2], h.head);
  return h;
}

inline void validate_hook(const HookPoint& h, const ModelConfig& c, int64_t seq_len) {
  if (h.layer < 0 || h.layer >= c.n_layers)
    throw PatchError("hook " + to_string(h) + ": layer out of range (n_layers=" +
                     std::to_string(c.n_layers) + ")");
  if (h.site == Site::attn_head_out) {
    if (h.head < 0 || h.head >= c.n_heads)
      throw PatchError("hook " + to_string(h) + ": head out of range (n_heads=" +
                       std::to_string(c.n_heads) + ")");
  } else if (h.head != -1) {
    throw PatchError("hook " + to_string(h) + ": head index only valid for attn_head_out");
  }
  if (h.position != kAllPositions && (h.position < 0 || h.position >= seq_len))
    throw PatchError("hook " + to_string(h) + ": position out of range (seq=" +
                     std::to_string(seq_len) + ")");
}

// Activations recorded during a run, one [seq, d_model] tensor per site key.
// std::map keeps iteration deterministic for reports.
template <typename T>
struct ActivationCache {
  int64_t seq_len = 0;
  std::map<SiteKey, Tensor<T>> store;

  bool has(const SiteKey& k) const { return store.count(k) > 0; }

  const Tensor<T>& at(const SiteKey& k) const {
    auto it = store.find(k);
    if (it == store.end()) throw CacheError("cache is missing hook " + to_string(k));
    return it->second;
  }
};

// Which sites a forward pass should record.
struct CaptureSet {
  bool everything = false;
  std::set<SiteKey> keys;

  static CaptureSet all() {
    CaptureSet c;
    c.everything = true;
    return c;
  }
  static CaptureSet none() { return {}; }
  static CaptureSet of(std::initializer_list<SiteKey> ks) {
    CaptureSet c;
    c.keys.insert(ks.begin(), ks.end());
    return c;
  }

  void add(const SiteKey& k) { keys.insert(k); }
  bool wants(const SiteKey& k) const { return everything || keys.count(k) > 0; }
  bool empty() const { return !everything && keys.empty(); }
};

enum class AblationKind { counterfactual, zero, mean };

// Where a patched activation's replacement value comes from. Caches are held
// by pointer; the caller keeps them alive for the duration of the run.
template <typename T>
struct AblationSource {
  AblationKind kind = AblationKind::zero;
  const ActivationCache<T>* cache = nullptr;          // counterfactual
  int64_t source_position = kAllPositions;            // counterfactual: aligned if *
  std::vector<const ActivationCache<T>*> cache_set;   // mean

  static AblationSource counterfactual(const ActivationCache<T>& c,
                                       int64_t src_pos = kAllPositions) {
    AblationSource s;
    s.kind = AblationKind::counterfactual;
    s.cache = &c;
    s.source_position = src_pos;
    return s;
  }
  static AblationSource zero() { return {}; }
  static AblationSource mean(std::vector<const ActivationCache<T>*> caches) {
    AblationSource s;
    s.kind = AblationKind::mean;
    s.cache_set = std::move(caches);
    return s;
  }
};

template <typename T>
struct PatchEntry {
  HookPoint hook;
  AblationSource<T> source;
};

// A set of interventions, disjoint by (site, position).
template <typename T>
struct PatchSpec {
  std::vector<PatchEntry<T>> entries;

  void add(const HookPoint& hook, AblationSource<T> source) {
    for (const auto& e : entries) {
      if (key_of(e.hook) != key_of(hook)) continue;
      if (e.hook.position == hook.position || e.hook.position == kAllPositions ||
          hook.position == kAllPositions)
        throw PatchError("patch entries overlap at " + to_string(hook));
    }
    entries.push_back({hook, std::move(source)});
  }

  bool empty() const { return entries.empty(); }

  void validate(const ModelConfig& config, int64_t seq_len) const {
    for (const auto& e : entries) {
      validate_hook(e.hook, config, seq_len);
      if (e.source.kind == AblationKind::counterfactual) {
        if (!e.source.cache) throw PatchError("patch " + to_string(e.hook) + ": null source cache");
        const Tensor<T>& src = e.source.cache->at(key_of(e.hook));
        if (src.dim(1) != config.d_model)
          throw PatchError("patch " + to_string(e.hook) + ": source width " +
                           std::to_string(src.dim(1)) + " != d_model " +
                           std::to_string(config.d_model));
        const int64_t sp = e.source.source_position;
        if (sp != kAllPositions && (sp < 0 || sp >= src.dim(0)))
          throw PatchError("patch " + to_string(e.hook) + ": source position " +
                           std::to_string(sp) + " outside source cache (len " +
                           std::to_string(src.dim(0)) + ")");
        if (sp == kAllPositions && e.hook.position == kAllPositions &&
            src.dim(0) < seq_len)
          throw PatchError("patch " + to_string(e.hook) + ": aligned source shorter than target (" +
                           std::to_string(src.dim(0)) + " < " + std::to_string(seq_len) + ")");
      } else if (e.source.kind == AblationKind::mean) {
        if (e.source.cache_set.empty())
          throw PatchError("patch " + to_string(e.hook) + ": empty mean cache set");
      }
    }
  }
};

namespace detail {

// Replace rows of `act` ([seq, d_model]) according to entries keyed `key`.
// Runs after the site's own computation and before any downstream use.
template <typename T>
void apply_site_patches(const PatchSpec<T>* patches, const SiteKey& key, Tensor<T>& act) {
  if (!patches) return;
  const int64_t seq = act.dim(0), d = act.dim(1);
  for (const auto& e : patches->entries) {
    if (key_of(e.hook) != key) continue;
    const int64_t lo = (e.hook.position == kAllPositions) ? 0 : e.hook.position;
    const int64_t hi = (e.hook.position == kAllPositions) ? seq : e.hook.position + 1;
    if (hi > seq)
      throw PatchError("patch " + to_string(e.hook) + ": position beyond sequence length " +
                       std::to_string(seq));
    switch (e.source.kind) {
      case AblationKind::zero:
        for (int64_t t = lo; t < hi; ++t)
          std::fill_n(act.row(t), d, T(0));
        break;
      case AblationKind::counterfactual: {
        const Tensor<T>& src = e.source.cache->at(key);
        for (int64_t t = lo; t < hi; ++t) {
          const int64_t st = (e.source.source_position == kAllPositions)
                                 ? t
                                 : e.source.source_position;
          if (st < 0 || st >= src.dim(0))
            throw PatchError("patch " + to_string(e.hook) + ": source position " +
                             std::to_string(st) + " outside source cache");
          std::copy_n(src.row(st), d, act.row(t));
        }
        break;
      }
      case AblationKind::mean: {
        std::vector<T> mean(static_cast<size_t>(d), T(0));
        int64_t rows = 0;
        for (const auto* c : e.source.cache_set) {
          const Tensor<T>& src = c->at(key);
          for (int64_t t = 0; t < src.dim(0); ++t) {
            const T* r = src.row(t);
            for (int64_t i = 0; i < d; ++i) mean[static_cast<size_t>(i)] += r[i];
          }
          rows += src.dim(0);
        }
        for (auto& m : mean) m /= static_cast<T>(rows);
        for (int64_t t = lo; t < hi; ++t) std::copy_n(mean.data(), d, act.row(t));
        break;
      }
    }
  }
}

}  // namespace detail

}  // namespace patchlens
