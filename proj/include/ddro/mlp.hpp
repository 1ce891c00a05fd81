#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ddro/error.hpp"
#include "ddro/graph.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

enum class Activation { tanh, relu };

inline double activate(Activation a, double x) {
  return a == Activation::tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

/// Register parameters as named graph inputs: "<prefix>0", "<prefix>1", ...
inline std::vector<Var> bind_params(Graph& g, const ParamList& params, const std::string& prefix) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back(g.input(prefix + std::to_string(i), params[i]));
  }
  return out;
}

inline std::vector<Tensor> collect_grads(const Gradients& grads, const std::vector<Var>& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(grads[v]);
  return out;
}

/// Fully-connected stack on a batch (rows are samples); no activation after
/// the last layer.
inline Var mlp_graph(Graph& g, const std::vector<Var>& params, Var x, Activation act) {
  if (params.size() % 2 != 0 || params.empty()) throw InvalidArgument("mlp parameters come in (W, b) pairs");
  Var h = x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    Var z = g.matmul(h, params[2 * l]);
    z = g.add(z, g.broadcast(params[2 * l + 1], z.shape()));
    h = l + 1 < layers ? (act == Activation::tanh ? g.tanh(z) : g.relu(z)) : z;
  }
  return h;
}

/// Same network as mlp_graph, evaluated directly without recording a graph.
inline Tensor mlp_apply(const ParamList& params, const Tensor& x, Activation act) {
  if (params.size() % 2 != 0 || params.empty()) throw InvalidArgument("mlp parameters come in (W, b) pairs");
  Tensor h = x.rank() == 1 ? Tensor({x.size(), 1}, x.data()) : x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor& w = params[2 * l];
    const Tensor& b = params[2 * l + 1];
    if (h.cols() != w.rows()) {
      throw ShapeError("mlp layer " + std::to_string(l) + ": input " + shape_str(h.shape()) +
                       " vs weight " + shape_str(w.shape()));
    }
    Tensor z({h.rows(), w.cols()});
    detail::matmul_into(h, w, z);
    const bool last = l + 1 == layers;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto zr = z.row(r);
      for (std::size_t c = 0; c < zr.size(); ++c) {
        zr[c] += b[c];
        if (!last) zr[c] = activate(act, zr[c]);
      }
    }
    h = std::move(z);
  }
  return h;
}

}  // namespace ddro
