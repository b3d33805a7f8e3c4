#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "patchlens/checkpoint.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/masks.hpp"
#include "patchlens/model.hpp"

// Adam with decoupled weight decay, restricted to the trainable regions of a
// ComponentMask. Everything outside the mask is never touched, which is what
// makes the freeze contract bitwise.

namespace patchlens {

struct TrainConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  int64_t batch_size = 2;
  int64_t epochs = 5;
  double validation_fraction = 0.1;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (validation_fraction < 0 || validation_fraction >= 1)
      throw ConfigError("validation_fraction must be in [0, 1)");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("betas must be in [0, 1)");
    if (eps <= 0) throw ConfigError("eps must be > 0");
  }
};

// Moments are checkpoint-shaped; only masked entries are ever read or
// written, so the memory outside the mask stays zero.
template <typename T>
struct OptimizerState {
  Checkpoint<T> m;
  Checkpoint<T> v;
  int64_t step = 0;

  static OptimizerState init(const ModelConfig& config) {
    OptimizerState s;
    s.m = zero_grads<T>(config);
    s.v = zero_grads<T>(config);
    return s;
  }
};

template <typename T>
void adamw_step(Checkpoint<T>& params, const Checkpoint<T>& grads, OptimizerState<T>& state,
                const TrainConfig& config, const std::vector<TrainableRegion>& regions) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const auto by_tensor = regions_by_tensor(regions);

  // Walk all four checkpoint-shaped containers in the same canonical order.
  std::vector<std::pair<std::string, Tensor<T>*>> p_list, m_list, v_list;
  std::vector<std::pair<std::string, const Tensor<T>*>> g_list;
  params.for_each_tensor([&](const std::string& n, Tensor<T>& t) { p_list.emplace_back(n, &t); });
  grads.for_each_tensor(
      [&](const std::string& n, const Tensor<T>& t) { g_list.emplace_back(n, &t); });
  state.m.for_each_tensor([&](const std::string& n, Tensor<T>& t) { m_list.emplace_back(n, &t); });
  state.v.for_each_tensor([&](const std::string& n, Tensor<T>& t) { v_list.emplace_back(n, &t); });

  for (size_t i = 0; i < p_list.size(); ++i) {
    const auto it = by_tensor.find(p_list[i].first);
    if (it == by_tensor.end()) continue;
    Tensor<T>& p = *p_list[i].second;
    const Tensor<T>& g = *g_list[i].second;
    Tensor<T>& m = *m_list[i].second;
    Tensor<T>& v = *v_list[i].second;
    for (auto [begin, end] : it->second) {
      for (int64_t j = begin; j < end; ++j) {
        const double gj = static_cast<double>(g.data[static_cast<size_t>(j)]);
        if (!std::isfinite(gj))
          throw TrainError("non-finite gradient in " + p_list[i].first + " at flat index " +
                           std::to_string(j));
        double pj = static_cast<double>(p.data[static_cast<size_t>(j)]);
        // decoupled weight decay
        pj -= config.learning_rate * config.weight_decay * pj;
        double mj = config.beta1 * static_cast<double>(m.data[static_cast<size_t>(j)]) +
                    (1.0 - config.beta1) * gj;
        double vj = config.beta2 * static_cast<double>(v.data[static_cast<size_t>(j)]) +
                    (1.0 - config.beta2) * gj * gj;
        m.data[static_cast<size_t>(j)] = static_cast<T>(mj);
        v.data[static_cast<size_t>(j)] = static_cast<T>(vj);
        pj -= config.learning_rate * (mj / bc1) / (std::sqrt(vj / bc2) + config.eps);
        p.data[static_cast<size_t>(j)] = static_cast<T>(pj);
      }
    }
  }
}

}  // namespace patchlens
