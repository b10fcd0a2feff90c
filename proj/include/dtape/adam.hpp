#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dtape/errors.hpp"
#include "dtape/mlp.hpp"

namespace dtape {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0.0) || !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) ||
        !(epsilon > 0.0)) {
      throw ParameterError("invalid Adam configuration");
    }
  }
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
  AdamConfig config;
  MlpParams first_moment;
  MlpParams second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const MlpParams& params, AdamConfig config = {}) {
    config.validate();
    return AdamState{config, params.zeros_like(), params.zeros_like(), 0};
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& state, MlpParams& params, const MlpParams& grads) {
  if (!params.same_architecture(grads) || !params.same_architecture(state.first_moment)) {
    throw DimensionError("adam_step: gradient/moment shapes do not mirror the parameters");
  }
  grads.for_each_tensor([](const Tensor& g, const std::string& name) {
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient in " + name);
  });

  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / correction1;
        const double vhat = v[i] / correction2;
        p[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
      }
    };
    update(params.layers[l].weight, grads.layers[l].weight, state.first_moment.layers[l].weight,
           state.second_moment.layers[l].weight);
    update(params.layers[l].bias, grads.layers[l].bias, state.first_moment.layers[l].bias,
           state.second_moment.layers[l].bias);
  }
}

}  // namespace dtape
