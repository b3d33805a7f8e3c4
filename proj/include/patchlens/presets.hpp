#pragma once

#include <cstdint>

#include "patchlens/config.hpp"
#include "patchlens/synth.hpp"

// Stock configurations for the desk-scale model experiments run on. Small
// enough to pretrain in seconds on one core, big enough that gender routes
// through interior components instead of living in the embeddings.

namespace patchlens {

inline ModelConfig toy_model_config(int64_t vocab_size) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_head = 16;
  c.d_mlp = 256;
  c.vocab_size = vocab_size;
  c.max_seq = 48;
  return c;
}

// 160 professions against d_model 64: with frozen random embeddings the
// planted gender cannot be read off linearly, so the trained model must
// compute it in early layers — which is what the patching experiments probe.
inline SynthCorpusSpec toy_synth_spec(double bias_strength = 1.0, int64_t size = 4000,
                                      uint64_t seed = 0) {
  SynthCorpusSpec spec;
  spec.professions_per_gender = 80;
  spec.bias_strength = bias_strength;
  spec.size = size;
  spec.seed = seed;
  return spec;
}

}  // namespace patchlens
