#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "patchlens/config.hpp"
#include "patchlens/errors.hpp"

// Component-restricted parameter selection for targeted fine-tuning: whole
// MLP layers, individual attention heads, everything, or nothing.

namespace patchlens {

struct ComponentMask {
  enum class Kind { full, none, mlp_layers, attn_heads };
  Kind kind = Kind::full;
  std::set<int64_t> layers;                            // mlp_layers
  std::set<std::pair<int64_t, int64_t>> heads;         // attn_heads: (layer, head)

  static ComponentMask full() { return {}; }
  static ComponentMask none() {
    ComponentMask m;
    m.kind = Kind::none;
    return m;
  }
  static ComponentMask mlp(std::set<int64_t> ls) {
    ComponentMask m;
    m.kind = Kind::mlp_layers;
    m.layers = std::move(ls);
    return m;
  }
  static ComponentMask attn(std::set<std::pair<int64_t, int64_t>> hs) {
    ComponentMask m;
    m.kind = Kind::attn_heads;
    m.heads = std::move(hs);
    return m;
  }

  void validate(const ModelConfig& config) const {
    if (kind == Kind::mlp_layers) {
      if (layers.empty()) throw ConfigError("mask error: empty mlp layer set");
      for (int64_t l : layers)
        if (l < 0 || l >= config.n_layers)
          throw ConfigError("mask error: mlp layer " + std::to_string(l) + " out of range");
    } else if (kind == Kind::attn_heads) {
      if (heads.empty()) throw ConfigError("mask error: empty head set");
      for (auto [l, h] : heads)
        if (l < 0 || l >= config.n_layers || h < 0 || h >= config.n_heads)
          throw ConfigError("mask error: head (" + std::to_string(l) + "," + std::to_string(h) +
                            ") out of range");
    }
  }
};

// A trainable slice of one named tensor, as a flat index range. Head slices
// are contiguous because the head axis is outermost in W_Q/W_K/W_V/W_O.
struct TrainableRegion {
  std::string name;
  int64_t begin = 0;
  int64_t end = 0;  // exclusive
};

inline std::vector<TrainableRegion> mask_parameters(const ModelConfig& config,
                                                    const ComponentMask& mask) {
  mask.validate(config);
  std::vector<TrainableRegion> out;
  auto full_tensor = [&](const std::string& name, int64_t numel) {
    out.push_back({name, 0, numel});
  };

  switch (mask.kind) {
    case ComponentMask::Kind::none:
      break;
    case ComponentMask::Kind::full: {
      const auto& c = config;
      full_tensor("embed.W_E", c.vocab_size * c.d_model);
      for (int64_t l = 0; l < c.n_layers; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        full_tensor(b + "ln1.w", c.d_model);
        full_tensor(b + "attn.W_Q", c.n_heads * c.d_model * c.d_head);
        full_tensor(b + "attn.W_K", c.n_heads * c.d_model * c.d_head);
        full_tensor(b + "attn.W_V", c.n_heads * c.d_model * c.d_head);
        full_tensor(b + "attn.W_O", c.n_heads * c.d_head * c.d_model);
        full_tensor(b + "ln2.w", c.d_model);
        full_tensor(b + "mlp.W_gate", c.d_model * c.d_mlp);
        full_tensor(b + "mlp.W_up", c.d_model * c.d_mlp);
        full_tensor(b + "mlp.W_down", c.d_mlp * c.d_model);
      }
      full_tensor("final_ln.w", c.d_model);
      full_tensor("unembed.W_U", c.d_model * c.vocab_size);
      break;
    }
    case ComponentMask::Kind::mlp_layers:
      for (int64_t l : mask.layers) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        full_tensor(b + "ln2.w", config.d_model);
        full_tensor(b + "mlp.W_gate", config.d_model * config.d_mlp);
        full_tensor(b + "mlp.W_up", config.d_model * config.d_mlp);
        full_tensor(b + "mlp.W_down", config.d_mlp * config.d_model);
      }
      break;
    case ComponentMask::Kind::attn_heads: {
      const int64_t qkv_block = config.d_model * config.d_head;
      const int64_t o_block = config.d_head * config.d_model;
      for (auto [l, h] : mask.heads) {
        const std::string b = "blocks." + std::to_string(l) + ".attn.";
        out.push_back({b + "W_Q", h * qkv_block, (h + 1) * qkv_block});
        out.push_back({b + "W_K", h * qkv_block, (h + 1) * qkv_block});
        out.push_back({b + "W_V", h * qkv_block, (h + 1) * qkv_block});
        out.push_back({b + "W_O", h * o_block, (h + 1) * o_block});
      }
      break;
    }
  }
  return out;
}

inline int64_t trainable_param_count(const ModelConfig& config, const ComponentMask& mask) {
  int64_t n = 0;
  for (const auto& r : mask_parameters(config, mask)) n += r.end - r.begin;
  return n;
}

// name -> trainable flat ranges, for the optimizer's per-tensor walk.
inline std::map<std::string, std::vector<std::pair<int64_t, int64_t>>> regions_by_tensor(
    const std::vector<TrainableRegion>& regions) {
  std::map<std::string, std::vector<std::pair<int64_t, int64_t>>> out;
  for (const auto& r : regions) out[r.name].emplace_back(r.begin, r.end);
  return out;
}

}  // namespace patchlens
