#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ddro/data.hpp"
#include "ddro/error.hpp"
#include "ddro/graph.hpp"
#include "ddro/mlp.hpp"
#include "ddro/optim.hpp"
#include "ddro/rng.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

enum class PredictorArch { mlp, rnn };

inline PredictorArch parse_predictor_arch(const std::string& s) {
  if (s == "mlp") return PredictorArch::mlp;
  if (s == "rnn") return PredictorArch::rnn;
  throw InvalidArgument("unknown predictor architecture '" + s + "'");
}

struct PredictorSpec {
  std::size_t window = 24;
  std::size_t horizon = 1;
  std::vector<std::size_t> hidden{32};
  PredictorArch arch = PredictorArch::mlp;
  Activation activation = Activation::tanh;

  void validate() const {
    if (window < 1 || horizon < 1) throw InvalidArgument("predictor window and horizon must be >= 1");
    if (arch == PredictorArch::rnn && hidden.size() != 1) {
      throw InvalidArgument("the recurrent predictor takes exactly one hidden size");
    }
    for (std::size_t h : hidden) {
      if (h == 0) throw InvalidArgument("predictor hidden sizes must be positive");
    }
  }
};

/// Sequence predictor w: window (L_in) -> horizon (L_out). Either a
/// fully-connected network on the flattened window or a single tanh
/// recurrent cell read out linearly after the last step.
class DecisionModel {
 public:
  DecisionModel() = default;
  DecisionModel(PredictorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.arch == PredictorArch::mlp) {
      std::vector<std::size_t> layers{spec_.window};
      layers.insert(layers.end(), spec_.hidden.begin(), spec_.hidden.end());
      layers.push_back(spec_.horizon);
      params = init_params(layers, seed);
    } else {
      const std::size_t h = spec_.hidden.front();
      // [Wx (1 x h), bx (1 x h)], [Wh (h x h), unused], [Wo (h x L_out), bo]
      ParamList in = init_params({1, h}, derive_seed(seed, 1));
      ParamList rec = init_params({h, h}, derive_seed(seed, 2));
      ParamList out = init_params({h, spec_.horizon}, derive_seed(seed, 3));
      params = {in[0], in[1], rec[0], out[0], out[1]};
    }
  }

  const PredictorSpec& spec() const { return spec_; }
  std::size_t window() const { return spec_.window; }
  std::size_t horizon() const { return spec_.horizon; }

  /// windows: (B x L_in) -> (B x L_out).
  Tensor predict(const Tensor& windows) const {
    if (windows.cols() != spec_.window) {
      throw ShapeError("predictor expects windows of length " + std::to_string(spec_.window) + ", got " +
                       shape_str(windows.shape()));
    }
    if (spec_.arch == PredictorArch::mlp) return mlp_apply(params, windows, spec_.activation);
    const std::size_t b = windows.rows(), h = spec_.hidden.front();
    const Tensor &wx = params[0], &bx = params[1], &wh = params[2];
    Tensor state({b, h});
    for (std::size_t i = 0; i < spec_.window; ++i) {
      Tensor next({b, h});
      detail::matmul_into(state, wh, next);
      for (std::size_t r = 0; r < b; ++r) {
        const double xi = windows.at(r, i);
        for (std::size_t c = 0; c < h; ++c) next.at(r, c) = std::tanh(next.at(r, c) + xi * wx[c] + bx[c]);
      }
      state = std::move(next);
    }
    return mlp_apply({params[3], params[4]}, state, spec_.activation);
  }

  Var predict(Graph& g, const std::vector<Var>& pv, Var windows) const {
    if (spec_.arch == PredictorArch::mlp) return mlp_graph(g, pv, windows, spec_.activation);
    const std::size_t b = g.shape(windows)[0], h = spec_.hidden.front();
    Var state = g.constant(Tensor({b, h}));
    for (std::size_t i = 0; i < spec_.window; ++i) {
      Var xi = g.slice(windows, 1, i, i + 1);
      Var pre = g.add(g.matmul(xi, pv[0]), g.matmul(state, pv[2]));
      state = g.tanh(g.add(pre, g.broadcast(pv[1], {b, h})));
    }
    Var out = g.matmul(state, pv[3]);
    return g.add(out, g.broadcast(pv[4], g.shape(out)));
  }

  /// f(w, x) = ||predict(window) - horizon||^2 / L_out for one generated
  /// vector x = [window, horizon].
  double loss(std::span<const double> x) const {
    if (x.size() != spec_.window + spec_.horizon) throw ShapeError("sample length differs from window + horizon");
    Tensor win({1, spec_.window}, std::vector<double>(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(spec_.window)));
    const Tensor p = predict(win);
    double s = 0.0;
    for (std::size_t j = 0; j < spec_.horizon; ++j) {
      const double e = p[j] - x[spec_.window + j];
      s += e * e;
    }
    return s / static_cast<double>(spec_.horizon);
  }

  ParamList params;

 private:
  PredictorSpec spec_;
};

/// Window and horizon matrices of a dataset slice.
struct Batch {
  Tensor windows;
  Tensor horizons;
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> rows) {
  if (rows.empty()) throw InvalidArgument("empty batch");
  const std::size_t li = data.at(rows[0]).window.size(), lo = data.at(rows[0]).horizon.size();
  Batch b{Tensor({rows.size(), li}), Tensor({rows.size(), lo})};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = data.at(rows[i]);
    if (s.window.size() != li || s.horizon.size() != lo) throw ShapeError("ragged dataset");
    std::copy(s.window.begin(), s.window.end(), b.windows.row(i).begin());
    std::copy(s.horizon.begin(), s.horizon.end(), b.horizons.row(i).begin());
  }
  return b;
}

inline Batch make_batch(const Dataset& data) {
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return make_batch(data, rows);
}

/// (B x 1) column of per-sample losses ||pred - y||^2 / L_out.
inline Var per_sample_loss_graph(Graph& g, const DecisionModel& w, const std::vector<Var>& pv, const Batch& b) {
  Var pred = w.predict(g, pv, g.constant(b.windows));
  Var sq = g.square(g.sub(pred, g.constant(b.horizons)));
  return g.scale(g.row_sum(sq), 1.0 / static_cast<double>(w.horizon()));
}

inline Var mean_loss_graph(Graph& g, const DecisionModel& w, const std::vector<Var>& pv, const Batch& b) {
  return g.mean(per_sample_loss_graph(g, w, pv, b));
}

/// Mean loss and its parameter gradient over a batch.
struct LossGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

inline LossGrad loss_and_grad(const DecisionModel& w, const Batch& b) {
  Graph g;
  auto pv = bind_params(g, w.params, "w");
  Var loss = mean_loss_graph(g, w, pv, b);
  return {g.value(loss).item(), collect_grads(g.backward(loss), pv)};
}

inline double grad_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& t : grads) {
    for (double v : t.data()) s += v * v;
  }
  return std::sqrt(s);
}

/// Minibatch Adam epochs on a dataset; returns the mean batch loss per epoch.
inline std::vector<double> fit_epochs(DecisionModel& w, const Dataset& data, std::size_t epochs, std::size_t batch,
                                      OptimizerState& opt, Rng& rng) {
  if (data.empty()) throw InvalidArgument("cannot fit on an empty dataset");
  if (opt.first_moment.size() != w.params.size()) throw InvalidArgument("optimizer state does not match predictor");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t bs = std::max<std::size_t>(1, std::min(batch, data.size()));
  std::vector<double> trace;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    double acc = 0.0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const Batch b = make_batch(data, std::span<const std::size_t>(order).subspan(start, end - start));
      LossGrad lg = loss_and_grad(w, b);
      adam_step(w.params, lg.grads, opt);
      acc += lg.loss;
      ++nb;
    }
    trace.push_back(acc / static_cast<double>(nb));
  }
  return trace;
}

}  // namespace ddro
