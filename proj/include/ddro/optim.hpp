#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ddro/error.hpp"
#include "ddro/rng.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;

  OptimizerState() = default;
  OptimizerState(AdamConfig cfg, const ParamList& params) : config(cfg) {
    if (!(cfg.lr > 0.0)) throw InvalidArgument("Adam learning rate must be positive");
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) {
      throw InvalidArgument("Adam decay rates must lie in (0,1)");
    }
    if (!(cfg.eps > 0.0)) throw InvalidArgument("Adam stabilizer must be positive");
    for (const Tensor& p : params) {
      first_moment.emplace_back(p.shape());
      second_moment.emplace_back(p.shape());
    }
  }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(ParamList& params, const std::vector<Tensor>& grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape()) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                       shape_str(params[i].shape()) + " vs gradient " + shape_str(grads[i].shape()));
    }
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data();
    const auto& g = grads[i].data();
    auto& m = state.first_moment[i].data();
    auto& v = state.second_moment[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

/// Weights and biases for a fully-connected stack with the given layer
/// widths: [W0 (n0 x n1), b0 (1 x n1), W1 (n1 x n2), b1, ...]. Weights are
/// N(0, 1/fan_in); biases start at zero.
inline ParamList init_params(const std::vector<std::size_t>& layers, std::uint64_t seed) {
  if (layers.size() < 2) throw InvalidArgument("init_params needs at least an input and an output width");
  for (std::size_t w : layers) {
    if (w == 0) throw InvalidArgument("init_params: zero-width layer");
  }
  Rng rng(seed);
  ParamList out;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    const std::size_t fan_in = layers[l], fan_out = layers[l + 1];
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w({fan_in, fan_out});
    for (double& v : w.data()) v = std * rng.normal();
    out.push_back(std::move(w));
    out.emplace_back(Shape{1, fan_out});
  }
  return out;
}

}  // namespace ddro
