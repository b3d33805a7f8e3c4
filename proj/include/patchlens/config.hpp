#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "patchlens/errors.hpp"

namespace patchlens {

// Architecture hyperparameters. The shape is fixed to the pre-norm / rotary /
// gated-MLP family; everything else in the library keys off these counts.
struct ModelConfig {
  int64_t n_layers = 0;
  int64_t n_heads = 0;
  int64_t d_model = 0;
  int64_t d_head = 0;
  int64_t d_mlp = 0;
  int64_t vocab_size = 0;
  int64_t max_seq = 0;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  void validate() const {
    auto positive = [](int64_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_head, "d_head");
    positive(d_mlp, "d_mlp");
    positive(vocab_size, "vocab_size");
    positive(max_seq, "max_seq");
    if (n_heads * d_head != d_model)
      throw ConfigError("ModelConfig: n_heads*d_head must equal d_model (" +
                        std::to_string(n_heads) + "*" + std::to_string(d_head) +
                        " != " + std::to_string(d_model) + ")");
    if (!(norm_eps > 0)) throw ConfigError("ModelConfig: norm_eps must be > 0");
    if (!(rope_base > 0)) throw ConfigError("ModelConfig: rope_base must be > 0");
  }
};

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["vocab_size"] = c.vocab_size;
  j["max_seq"] = c.max_seq;
  j["norm_eps"] = c.norm_eps;
  j["rope_base"] = c.rope_base;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.d_head = j.at("d_head").get<int64_t>();
    c.d_mlp = j.at("d_mlp").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_seq = j.at("max_seq").get<int64_t>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.rope_base = j.at("rope_base").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ModelConfig: bad config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace patchlens
