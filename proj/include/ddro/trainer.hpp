#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ddro/data.hpp"
#include "ddro/diffusion.hpp"
#include "ddro/error.hpp"
#include "ddro/inner_max.hpp"
#include "ddro/optim.hpp"
#include "ddro/predictor.hpp"
#include "ddro/rng.hpp"

namespace ddro {

/// n reverse-chain outputs of `model`, each split into window + horizon.
template <NoisePredictor M>
Dataset sample_adversarial_dataset(const M& model, const NoiseSchedule& sched, std::size_t n, std::uint64_t seed,
                                   std::size_t window) {
  if (n < 1) throw InvalidArgument("adversarial dataset size must be >= 1");
  if (window >= model.dim()) throw ShapeError("window length must be smaller than the generated dimension");
  return from_matrix(reverse_sample(model, sched, n, seed).samples, window);
}

/// w' = w - lambda * grad mean_{x in S} f(w, x), one full-batch step.
inline DecisionModel outer_step(const DecisionModel& w, const Dataset& data, double lambda) {
  if (data.empty()) throw InvalidArgument("outer step needs a non-empty dataset");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("step size must be finite and >= 0");
  const LossGrad lg = loss_and_grad(w, make_batch(data));
  for (std::size_t i = 0; i < lg.grads.size(); ++i) {
    if (!lg.grads[i].all_finite()) {
      throw NumericError("non-finite gradient in predictor parameter " + std::to_string(i) +
                         " (batch loss " + std::to_string(lg.loss) + ")");
    }
  }
  DecisionModel out = w;
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto& p = out.params[i].data();
    const auto& gi = lg.grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lambda * gi[k];
  }
  return out;
}

enum class OuterOptimizer { sgd, adam };

/// Which decision iterate a run returns.
enum class ReturnRule { last, uniform };

struct OuterConfig {
  std::size_t iterations = 15;  // I
  std::size_t epochs = 2;       // E passes over each S_j
  OuterOptimizer optimizer = OuterOptimizer::adam;
  double lr = 1e-3;  // Adam learning rate, or lambda for full-batch steps
  std::size_t batch = 64;
  ReturnRule select = ReturnRule::last;
};

struct DdroConfig {
  InnerMaxConfig inner;
  DualState dual;
  OuterConfig outer;
  ResetMode reset = ResetMode::continuous;
  std::size_t samples = 0;  // n = |z0| = |S_j|; 0 means |S0|
  bool adversary = true;    // false freezes the diffusion model at the reference
  std::uint64_t seed = 0;
};

struct RunResult {
  std::string method;
  DecisionModel model;   // the returned w
  std::size_t selected = 0;  // 1-based index into decision_iterates; 0 = initial w
  std::vector<ParamList> decision_iterates;   // w_1 .. w_I
  std::vector<ParamList> diffusion_iterates;  // theta^(1) .. theta^(I)
  std::vector<double> outer_loss;             // mean f(w_{j-1}, S_j)
  std::vector<double> grad_norm;              // |grad mean f(w_{j-1}, S_j)|
  std::vector<InnerTrace> inner_traces;

  std::size_t iterations() const { return outer_loss.size(); }
};

/// A stage failure; the result holds every completed outer iteration.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, RunResult partial) : Error(what), partial(std::move(partial)) {}
  RunResult partial;
};

/// Affine map between data values and the space the diffusion model runs
/// in: model = (data - shift) / scale.
struct DataMap {
  double shift = 0.0;
  double scale = 1.0;

  static DataMap fit(const Tensor& data) {
    const auto& v = data.data();
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));
    if (!(sd > 0.0)) throw InvalidArgument("cannot standardize constant data");
    return {m, sd};
  }

  Tensor to_model(Tensor t) const {
    for (double& v : t.data()) v = (v - shift) / scale;
    return t;
  }
  Tensor to_data(Tensor t) const {
    for (double& v : t.data()) v = shift + scale * v;
    return t;
  }
};

struct TrainInputs {
  const Dataset* train = nullptr;          // S0
  const ScoreModel* reference = nullptr;   // pretrained diffusion model
  const NoiseSchedule* sched = nullptr;
  DecisionModel initial;                   // pretrained predictor
  DataMap map;                             // data <-> diffusion space
};

namespace detail {

inline void check_inputs(const TrainInputs& in) {
  if (!in.train || !in.reference || !in.sched) throw InvalidArgument("training inputs are incomplete");
  if (in.train->empty()) throw InvalidArgument("training set is empty");
  const std::size_t d = in.initial.window() + in.initial.horizon();
  if (in.reference->dim() != d) {
    throw ShapeError("diffusion dimension " + std::to_string(in.reference->dim()) + " differs from window + horizon " +
                     std::to_string(d));
  }
}

/// Shared bookkeeping of one outer iteration: record the loss and gradient
/// norm at w_{j-1} on S_j, then apply the configured update.
class OuterUpdater {
 public:
  OuterUpdater(const DecisionModel& w, const OuterConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), opt_(AdamConfig{.lr = cfg.lr}, w.params), rng_(derive_seed(seed, 0xf17)) {}

  void step(DecisionModel& w, const Dataset& sj, RunResult& res) {
    const LossGrad lg = loss_and_grad(w, make_batch(sj));
    res.outer_loss.push_back(lg.loss);
    res.grad_norm.push_back(grad_norm(lg.grads));
    if (cfg_.optimizer == OuterOptimizer::sgd) {
      for (std::size_t e = 0; e < cfg_.epochs; ++e) w = outer_step(w, sj, cfg_.lr);
    } else {
      fit_epochs(w, sj, cfg_.epochs, cfg_.batch, opt_, rng_);
    }
    res.decision_iterates.push_back(w.params);
  }

 private:
  OuterConfig cfg_;
  OptimizerState opt_;
  Rng rng_;
};

inline void finish(RunResult& res, const DecisionModel& initial, ReturnRule rule, Rng& select) {
  res.model = initial;
  const std::size_t I = res.decision_iterates.size();
  if (I == 0) return;
  res.selected = rule == ReturnRule::uniform ? select.index(I) + 1 : I;
  res.model.params = res.decision_iterates[res.selected - 1];
}

}  // namespace detail

/// Gradient descent with a max-oracle: each outer iteration fine-tunes the
/// diffusion model against the current predictor, picks one inner iterate
/// uniformly, regenerates S_j from it and updates the predictor on S_j.
///
/// S_j reuses the noise of the reference chains z0, so with the adversary
/// frozen at the reference S_j equals z0 exactly.
inline RunResult ddro_train(const TrainInputs& in, const DdroConfig& cfg) {
  detail::check_inputs(in);
  const NoiseSchedule& sched = *in.sched;
  const ScoreModel& reference = *in.reference;
  if (cfg.adversary) cfg.inner.ppo.validate(sched.T);
  const std::size_t tp = cfg.adversary ? cfg.inner.ppo.tuned_steps : std::min<std::size_t>(1, sched.T);
  const std::size_t n = cfg.samples ? cfg.samples : in.train->size();
  const std::size_t window = in.initial.window();

  RunResult res;
  res.method = cfg.adversary ? "ddro" : "dml";
  DecisionModel w = in.initial;
  Rng select(derive_seed(cfg.seed, 0x5e1ec7));
  detail::OuterUpdater updater(w, cfg.outer, cfg.seed);

  try {
    const ReferenceSet z0 = make_reference_set(reference, sched, n, tp, derive_seed(cfg.seed, 0x20));
    const Dataset z0_data = from_matrix(in.map.to_data(z0.outputs), window);
    const Tensor s0 = in.map.to_model(to_matrix(*in.train));
    ScoreModel theta = reference;
    OptimizerState theta_opt(cfg.inner.adam, theta.params);
    DualState dual = cfg.dual;
    std::vector<std::size_t> all_rows(n);
    for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;

    for (std::size_t j = 1; j <= cfg.outer.iterations; ++j) {
      if (!cfg.adversary) {
        res.inner_traces.emplace_back();
        res.diffusion_iterates.push_back(reference.params);
        updater.step(w, z0_data, res);
        continue;
      }
      if (cfg.reset == ResetMode::reset) {
        theta = reference;
        theta_opt = OptimizerState(cfg.inner.adam, theta.params);
      }
      const DecisionModel current = w;
      const DataMap map = in.map;
      RewardFn reward = [&current, map](std::span<const double> x) {
        std::vector<double> v(x.begin(), x.end());
        for (double& e : v) e = map.shift + map.scale * e;
        return current.loss(v);
      };
      InnerResult inner;
      try {
        inner = inner_max_run(reward, theta, reference, z0, s0, sched, cfg.inner, dual, theta_opt,
                              derive_seed(cfg.seed, 0x1ee, j));
      } catch (const InnerMaxDiverged& e) {
        res.inner_traces.push_back(e.trace);
        throw;
      }
      dual = inner.dual;
      res.inner_traces.push_back(inner.trace);

      ScoreModel chosen = theta;
      if (!inner.iterates.empty()) chosen.params = inner.iterates[select.index(inner.iterates.size())];
      res.diffusion_iterates.push_back(chosen.params);

      const SampleResult sj = resample_tail(chosen, sched, z0, all_rows, z0.seed);
      updater.step(w, from_matrix(in.map.to_data(sj.samples), window), res);
    }
  } catch (const TrainingAborted&) {
    throw;
  } catch (const Error& e) {
    detail::finish(res, in.initial, cfg.outer.select, select);
    throw TrainingAborted(std::string("training aborted at outer iteration ") +
                              std::to_string(res.decision_iterates.size() + 1) + ": " + e.what(),
                          std::move(res));
  }
  detail::finish(res, in.initial, cfg.outer.select, select);
  return res;
}

}  // namespace ddro
