#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ddro/data.hpp"
#include "ddro/error.hpp"
#include "ddro/graph.hpp"
#include "ddro/optim.hpp"
#include "ddro/predictor.hpp"
#include "ddro/rng.hpp"
#include "ddro/trainer.hpp"

namespace ddro {

enum class Method { ddro, ml, dml, wdro, kldro };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::ddro: return "ddro";
    case Method::ml: return "ml";
    case Method::dml: return "dml";
    case Method::wdro: return "wdro";
    case Method::kldro: return "kldro";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::ddro, Method::ml, Method::dml, Method::wdro, Method::kldro}) {
    if (s == method_name(m)) return m;
  }
  throw InvalidArgument("unknown method '" + s + "' (expected ddro, ml, dml, wdro or kldro)");
}

struct RobustLossReport {
  double value = 0.0;
  double alpha = 0.0;  // +inf when the worst case sits on the largest losses
  std::vector<double> weights;
};

/// sup { E_q[l] : KL(q || uniform) <= eps } through its dual
/// min_{alpha > 0} alpha ln mean exp(l / alpha) + alpha eps.
///
/// When eps >= ln(N / #argmax) the ball reaches the distribution supported
/// on the largest losses and the value is max(l) exactly. Otherwise the
/// dual is minimized by golden-section search on ln alpha.
inline RobustLossReport kl_dro_robust_loss(std::span<const double> losses, double eps) {
  if (losses.empty()) throw InvalidArgument("kl_dro_robust_loss: empty loss set");
  if (!(eps > 0.0) || !std::isfinite(eps)) throw InvalidArgument("KL budget must be positive and finite");
  for (double l : losses) {
    if (!std::isfinite(l)) throw NumericError("kl_dro_robust_loss: non-finite loss");
  }
  const std::size_t n = losses.size();
  const auto [lo_it, hi_it] = std::minmax_element(losses.begin(), losses.end());
  const double lmin = *lo_it, lmax = *hi_it;
  RobustLossReport rep;
  rep.weights.assign(n, 0.0);

  if (lmax == lmin) {
    rep.value = lmax;
    rep.alpha = std::numeric_limits<double>::infinity();
    std::fill(rep.weights.begin(), rep.weights.end(), 1.0 / static_cast<double>(n));
    return rep;
  }
  const auto top = static_cast<std::size_t>(std::count(losses.begin(), losses.end(), lmax));
  if (eps >= std::log(static_cast<double>(n) / static_cast<double>(top))) {
    rep.value = lmax;
    rep.alpha = 0.0;
    for (std::size_t i = 0; i < n; ++i) rep.weights[i] = losses[i] == lmax ? 1.0 / static_cast<double>(top) : 0.0;
    return rep;
  }

  auto dual = [&](double log_alpha) {
    const double a = std::exp(log_alpha);
    double s = 0.0;
    for (double l : losses) s += std::exp((l - lmax) / a);
    return lmax + a * std::log(s / static_cast<double>(n)) + a * eps;
  };
  // the minimizer scales with the loss spread
  const double spread = lmax - lmin;
  double a = std::log(1e-4 * spread), b = std::log(1e4 * spread);
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - ratio * (b - a), d = a + ratio * (b - a);
  double fc = dual(c), fd = dual(d);
  while (b - a > 1e-10) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - ratio * (b - a);
      fc = dual(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + ratio * (b - a);
      fd = dual(d);
    }
  }
  const double la = 0.5 * (a + b);
  rep.alpha = std::exp(la);
  rep.value = dual(la);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    rep.weights[i] = std::exp((losses[i] - lmax) / rep.alpha);
    z += rep.weights[i];
  }
  for (double& q : rep.weights) q /= z;
  // the dual upper-bounds the primal; never report below the nominal mean
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
  rep.value = std::max(rep.value, mean);
  return rep;
}

/// Projected normalized-gradient ascent of loss(x + delta) over the l2 ball
/// |delta| <= budget. `fn(x, grad)` returns the loss and writes its gradient.
/// Returns the best delta seen (delta = 0 included), so the loss never drops.
template <class LossGradFn>
std::vector<double> l2_ball_ascent(std::span<const double> x, double budget, std::size_t steps, double step_size,
                                   LossGradFn&& fn) {
  if (!(budget >= 0.0)) throw InvalidArgument("perturbation budget must be >= 0");
  const std::size_t d = x.size();
  std::vector<double> delta(d, 0.0), best(d, 0.0), point(x.begin(), x.end()), grad(d);
  if (budget == 0.0) return best;
  double best_loss = fn(std::span<const double>(point), std::span<double>(grad));
  for (std::size_t s = 0; s < steps; ++s) {
    double gn = 0.0;
    for (double g : grad) gn += g * g;
    gn = std::sqrt(gn);
    if (gn == 0.0 || !std::isfinite(gn)) break;
    double dn = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      delta[i] += step_size * grad[i] / gn;
      dn += delta[i] * delta[i];
    }
    dn = std::sqrt(dn);
    if (dn > budget) {
      for (double& v : delta) v *= budget / dn;
    }
    for (std::size_t i = 0; i < d; ++i) point[i] = x[i] + delta[i];
    const double l = fn(std::span<const double>(point), std::span<double>(grad));
    if (l > best_loss) {
      best_loss = l;
      best = delta;
    }
  }
  return best;
}

struct WdroConfig {
  double budget = 0.3;
  std::size_t steps = 10;
  double step_size = 0.1;
};

/// Per-sample l2-ball adversarial perturbation of the input windows;
/// horizons are left as they are.
inline Dataset wdro_perturb(Dataset batch, const DecisionModel& w, double budget, std::size_t steps,
                            double step_size) {
  if (!(budget >= 0.0)) throw InvalidArgument("perturbation budget must be >= 0");
  if (budget == 0.0 || batch.empty()) return batch;
  const std::size_t n = batch.size(), li = w.window();
  const Batch b0 = make_batch(batch);
  // per-sample losses and input gradients of the whole batch in one graph
  auto eval = [&](const Tensor& windows, Tensor& grads, std::vector<double>& loss) {
    Graph g;
    auto pv = bind_params(g, w.params, "w");
    Var x = g.input("x", windows);
    Var pred = w.predict(g, pv, x);
    Var per = g.scale(g.row_sum(g.square(g.sub(pred, g.constant(b0.horizons)))),
                      1.0 / static_cast<double>(w.horizon()));
    const Tensor& pv_val = g.value(per);
    for (std::size_t i = 0; i < n; ++i) loss[i] = pv_val[i];
    grads = g.backward(g.sum(per))[x];
  };
  Tensor delta({n, li}), best({n, li}), point = b0.windows, grad;
  std::vector<double> loss(n), best_loss(n);
  eval(point, grad, best_loss);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      auto gr = grad.row(i);
      auto dr = delta.row(i);
      double gn = 0.0;
      for (double v : gr) gn += v * v;
      gn = std::sqrt(gn);
      if (gn == 0.0 || !std::isfinite(gn)) continue;
      double dn = 0.0;
      for (std::size_t k = 0; k < li; ++k) {
        dr[k] += step_size * gr[k] / gn;
        dn += dr[k] * dr[k];
      }
      dn = std::sqrt(dn);
      if (dn > budget) {
        for (double& v : dr) v *= budget / dn;
      }
      for (std::size_t k = 0; k < li; ++k) point.at(i, k) = b0.windows.at(i, k) + dr[k];
    }
    eval(point, grad, loss);
    for (std::size_t i = 0; i < n; ++i) {
      if (loss[i] > best_loss[i]) {
        best_loss[i] = loss[i];
        std::copy(delta.row(i).begin(), delta.row(i).end(), best.row(i).begin());
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < li; ++k) batch[i].window[k] += best.at(i, k);
  }
  return batch;
}

/// Tilted batch loss sum_i q_i f_i with q from kl_dro_robust_loss held fixed.
inline LossGrad kl_weighted_loss_and_grad(const DecisionModel& w, const Batch& b, double budget) {
  Graph g;
  auto pv = bind_params(g, w.params, "w");
  Var per = per_sample_loss_graph(g, w, pv, b);
  const Tensor& lv = g.value(per);
  const RobustLossReport rep = kl_dro_robust_loss(lv.data(), budget);
  Var loss = g.sum(g.mul(per, g.constant(Tensor({b.windows.rows(), 1}, rep.weights))));
  return {g.value(loss).item(), collect_grads(g.backward(loss), pv)};
}

struct BaselineConfig {
  DdroConfig run;  // outer schedule, seed, and for dml the reference-sample settings
  WdroConfig wdro;
  double kl_budget = 4.0;
};

namespace detail {

/// I rounds of E passes over S0, with a per-batch gradient rule.
template <class GradFn>
RunResult robust_rounds(const TrainInputs& in, const OuterConfig& cfg, std::uint64_t seed, const char* method,
                        GradFn&& grad_fn) {
  RunResult res;
  res.method = method;
  DecisionModel w = in.initial;
  const Dataset& data = *in.train;
  OptimizerState opt(AdamConfig{.lr = cfg.lr}, w.params);
  Rng rng(derive_seed(seed, 0xf17));
  Rng select(derive_seed(seed, 0x5e1ec7));
  const Batch full = make_batch(data);
  const std::size_t bs = cfg.optimizer == OuterOptimizer::sgd ? data.size() : std::max<std::size_t>(1, std::min(cfg.batch, data.size()));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  try {
    for (std::size_t j = 0; j < cfg.iterations; ++j) {
      const LossGrad at = loss_and_grad(w, full);
      res.outer_loss.push_back(at.loss);
      res.grad_norm.push_back(grad_norm(at.grads));
      for (std::size_t e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += bs) {
          const std::size_t end = std::min(order.size(), start + bs);
          const auto rows = std::span<const std::size_t>(order).subspan(start, end - start);
          LossGrad lg = grad_fn(w, data, rows, rng);
          for (const auto& gt : lg.grads) {
            if (!gt.all_finite()) throw NumericError(std::string(method) + ": non-finite predictor gradient");
          }
          if (cfg.optimizer == OuterOptimizer::sgd) {
            for (std::size_t i = 0; i < w.params.size(); ++i) {
              auto& p = w.params[i].data();
              for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.lr * lg.grads[i][k];
            }
          } else {
            adam_step(w.params, lg.grads, opt);
          }
        }
      }
      res.decision_iterates.push_back(w.params);
      res.diffusion_iterates.emplace_back();
      res.inner_traces.emplace_back();
    }
  } catch (const Error& e) {
    finish(res, in.initial, cfg.select, select);
    throw TrainingAborted(std::string(method) + " training aborted: " + e.what(), std::move(res));
  }
  finish(res, in.initial, cfg.select, select);
  return res;
}

}  // namespace detail

/// ML: further epochs on S0. DML: the D-DRO loop with the adversary frozen
/// at the reference, so every round trains on the same z0. W-DRO and KL-DRO
/// run the same rounds on S0 with perturbed or tilted batches.
inline RunResult train_baseline(Method kind, const TrainInputs& in, const BaselineConfig& cfg) {
  switch (kind) {
    case Method::dml: {
      DdroConfig dc = cfg.run;
      dc.adversary = false;
      return ddro_train(in, dc);
    }
    case Method::ddro:
      throw InvalidArgument("ddro is not a baseline; use ddro_train");
    default:
      break;
  }
  if (!in.train || in.train->empty()) throw InvalidArgument("training set is empty");
  const OuterConfig& oc = cfg.run.outer;
  const std::uint64_t seed = cfg.run.seed;
  if (kind == Method::ml) {
    return detail::robust_rounds(in, oc, seed, "ml", [](const DecisionModel& w, const Dataset& data,
                                                         std::span<const std::size_t> rows, Rng&) {
      return loss_and_grad(w, make_batch(data, rows));
    });
  }
  if (kind == Method::wdro) {
    const WdroConfig wc = cfg.wdro;
    return detail::robust_rounds(in, oc, seed, "wdro", [wc](const DecisionModel& w, const Dataset& data,
                                                            std::span<const std::size_t> rows, Rng&) {
      Dataset sub;
      sub.reserve(rows.size());
      for (std::size_t r : rows) sub.push_back(data[r]);
      return loss_and_grad(w, make_batch(wdro_perturb(std::move(sub), w, wc.budget, wc.steps, wc.step_size)));
    });
  }
  const double budget = cfg.kl_budget;
  if (!(budget > 0.0)) throw InvalidArgument("KL budget must be positive");
  return detail::robust_rounds(in, oc, seed, "kldro", [budget](const DecisionModel& w, const Dataset& data,
                                                               std::span<const std::size_t> rows, Rng&) {
    return kl_weighted_loss_and_grad(w, make_batch(data, rows), budget);
  });
}

}  // namespace ddro
