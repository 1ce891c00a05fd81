#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ddro/error.hpp"
#include "ddro/graph.hpp"
#include "ddro/mlp.hpp"
#include "ddro/optim.hpp"
#include "ddro/rng.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

/// Sorted set of diffusion step indices, each in 1..T.
class StepSet {
 public:
  StepSet() = default;
  explicit StepSet(std::vector<std::size_t> steps) : steps_(std::move(steps)) {
    std::sort(steps_.begin(), steps_.end());
    steps_.erase(std::unique(steps_.begin(), steps_.end()), steps_.end());
    if (!steps_.empty() && steps_.front() == 0) throw InvalidArgument("diffusion steps start at 1");
  }

  /// {1, ..., count}: the last `count` steps of the backward chain.
  static StepSet last(std::size_t count) {
    std::vector<std::size_t> s(count);
    for (std::size_t i = 0; i < count; ++i) s[i] = i + 1;
    return StepSet(std::move(s));
  }

  const std::vector<std::size_t>& steps() const { return steps_; }
  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  std::size_t max() const { return steps_.empty() ? 0 : steps_.back(); }
  bool contains(std::size_t t) const { return std::binary_search(steps_.begin(), steps_.end(), t); }

 private:
  std::vector<std::size_t> steps_;
};

/// Per-step constants of a discrete variance-preserving chain. Vectors are
/// indexed by t - 1 for t = 1..T; use the accessors.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
  double sigma_at(std::size_t t) const { return sigma.at(t - 1); }

  void check_step(std::size_t t) const {
    if (t < 1 || t > T) {
      throw InvalidArgument("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(T));
    }
  }

  /// Override the reverse standard deviation on a set of steps.
  void set_sigma(const StepSet& steps, double value) {
    if (!(value >= 0.0) || !std::isfinite(value)) throw InvalidArgument("sigma must be finite and >= 0");
    for (std::size_t t : steps.steps()) {
      check_step(t);
      sigma[t - 1] = value;
    }
  }
};

/// Linear beta schedule. The reverse standard deviation defaults to
/// sqrt(beta_t) on every step.
inline NoiseSchedule build_schedule(std::size_t T, double beta_min, double beta_max) {
  if (T < 1) throw InvalidArgument("schedule needs T >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw InvalidArgument("beta bounds must satisfy 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_min + frac * (beta_max - beta_min);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    s.sigma[i] = std::sqrt(s.beta[i]);
  }
  return s;
}

/// Schedule with a constant reverse standard deviation on `tuned` steps.
inline NoiseSchedule build_schedule(std::size_t T, double beta_min, double beta_max,
                                    double sigma_value, const StepSet& tuned) {
  if (!(sigma_value > 0.0)) throw InvalidArgument("sigma_value must be positive");
  NoiseSchedule s = build_schedule(T, beta_min, beta_max);
  s.set_sigma(tuned, sigma_value);
  return s;
}

/// Closed-form marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) xi.
inline std::vector<double> forward_perturb(std::span<const double> x0, std::size_t t,
                                           std::span<const double> xi, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x0.size() != xi.size()) throw ShapeError("forward_perturb: x0 and noise lengths differ");
  const double a = std::sqrt(sched.alpha_bar_at(t));
  const double b = std::sqrt(1.0 - sched.alpha_bar_at(t));
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * xi[i];
  return out;
}

/// Anything that predicts the injected noise for a batch of states, one
/// step index per row.
template <class M>
concept NoisePredictor = requires(const M& m, const Tensor& x, std::span<const std::size_t> steps) {
  { m.dim() } -> std::convertible_to<std::size_t>;
  { m.predict_noise(x, steps) } -> std::convertible_to<Tensor>;
};

struct ScoreModelSpec {
  std::size_t dim = 1;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t time_frequencies = 4;
  Activation activation = Activation::tanh;
};

/// Noise predictor eps_hat(x, t): a fully-connected network on [x, phi(t)]
/// where phi is a fixed sinusoidal embedding of t / T.
class ScoreModel {
 public:
  ScoreModel() = default;
  ScoreModel(ScoreModelSpec spec, std::size_t T, std::uint64_t seed) : spec_(std::move(spec)), T_(T) {
    if (spec_.dim == 0) throw InvalidArgument("score model dimension must be positive");
    if (T_ == 0) throw InvalidArgument("score model needs T >= 1");
    std::vector<std::size_t> layers{spec_.dim + embedding_width()};
    layers.insert(layers.end(), spec_.hidden.begin(), spec_.hidden.end());
    layers.push_back(spec_.dim);
    params = init_params(layers, seed);
  }

  std::size_t dim() const { return spec_.dim; }
  std::size_t steps() const { return T_; }
  const ScoreModelSpec& spec() const { return spec_; }
  std::size_t embedding_width() const { return 1 + 2 * spec_.time_frequencies; }

  void time_embedding(std::size_t t, std::span<double> out) const {
    const double tau = static_cast<double>(t) / static_cast<double>(T_);
    out[0] = tau;
    for (std::size_t k = 0; k < spec_.time_frequencies; ++k) {
      const double w = std::numbers::pi * std::pow(2.0, static_cast<double>(k)) * tau;
      out[1 + 2 * k] = std::sin(w);
      out[2 + 2 * k] = std::cos(w);
    }
  }

  /// Network input rows [x_i, phi(t_i)].
  Tensor features(const Tensor& x, std::span<const std::size_t> steps) const {
    if (x.cols() != spec_.dim || x.rows() != steps.size()) {
      throw ShapeError("score model input " + shape_str(x.shape()) + " with " +
                       std::to_string(steps.size()) + " step indices, dim " + std::to_string(spec_.dim));
    }
    const std::size_t width = spec_.dim + embedding_width();
    Tensor f({x.rows(), width});
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto row = f.row(r);
      std::copy(x.row(r).begin(), x.row(r).end(), row.begin());
      time_embedding(steps[r], row.subspan(spec_.dim));
    }
    return f;
  }

  Tensor predict_noise(const Tensor& x, std::span<const std::size_t> steps) const {
    return mlp_apply(params, features(x, steps), spec_.activation);
  }

  /// Graph version; `param_vars` are the bound parameters of this model.
  Var predict_noise(Graph& g, const std::vector<Var>& param_vars, const Tensor& x,
                    std::span<const std::size_t> steps) const {
    return mlp_graph(g, param_vars, g.constant(features(x, steps)), spec_.activation);
  }

  ParamList params;

 private:
  ScoreModelSpec spec_;
  std::size_t T_ = 0;
};

/// s(x, t) = -eps_hat(x, t) / sqrt(1 - abar_t).
template <NoisePredictor M>
Tensor score(const M& model, const Tensor& x, std::size_t t, const NoiseSchedule& sched) {
  sched.check_step(t);
  std::vector<std::size_t> steps(x.rows(), t);
  Tensor eps = model.predict_noise(x, steps);
  const double k = -1.0 / std::sqrt(1.0 - sched.alpha_bar_at(t));
  for (double& v : eps.data()) v *= k;
  return eps;
}

/// mu(x_t, t) = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t), one step index per row.
inline Tensor reverse_mean_from_noise(const Tensor& x, const Tensor& eps, std::span<const std::size_t> steps,
                                      const NoiseSchedule& sched) {
  Tensor mu(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t t = steps[r];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(t));
    const double c = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
    for (std::size_t j = 0; j < x.cols(); ++j) {
      mu.at(r, j) = inv_sqrt_alpha * (x.at(r, j) - c * eps.at(r, j));
    }
  }
  return mu;
}

template <NoisePredictor M>
Tensor reverse_mean(const M& model, const Tensor& x, std::size_t t, const NoiseSchedule& sched) {
  sched.check_step(t);
  std::vector<std::size_t> steps(x.rows(), t);
  return reverse_mean_from_noise(x, model.predict_noise(x, steps), steps, sched);
}

/// Uses `early` for steps above `switch_step` and `late` for steps
/// 1..switch_step. This is how a model fine-tuned on the last steps only is
/// sampled.
template <NoisePredictor Early, NoisePredictor Late>
class SplitChain {
 public:
  SplitChain(const Early& early, const Late& late, std::size_t switch_step)
      : early_(early), late_(late), switch_step_(switch_step) {
    if (early.dim() != late.dim()) throw ShapeError("split chain models differ in dimension");
  }

  std::size_t dim() const { return late_.dim(); }

  Tensor predict_noise(const Tensor& x, std::span<const std::size_t> steps) const {
    const bool all_late = std::all_of(steps.begin(), steps.end(), [&](std::size_t t) { return t <= switch_step_; });
    const bool all_early = std::all_of(steps.begin(), steps.end(), [&](std::size_t t) { return t > switch_step_; });
    if (all_late) return late_.predict_noise(x, steps);
    if (all_early) return early_.predict_noise(x, steps);
    Tensor a = early_.predict_noise(x, steps);
    const Tensor b = late_.predict_noise(x, steps);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      if (steps[r] <= switch_step_) std::copy(b.row(r).begin(), b.row(r).end(), a.row(r).begin());
    }
    return a;
  }

 private:
  const Early& early_;
  const Late& late_;
  std::size_t switch_step_;
};

/// One reverse-chain realization. states[t] holds x_t for t = 0..top; the
/// chain above `top` is not retained.
struct Trajectory {
  std::size_t top = 0;
  std::vector<std::vector<double>> states;

  const std::vector<double>& at(std::size_t t) const {
    if (t > top || t >= states.size()) {
      throw InvalidArgument("trajectory does not cover step " + std::to_string(t));
    }
    return states[t];
  }
  bool covers(const StepSet& steps) const { return steps.max() <= top && states.size() == top + 1; }
};

struct SampleResult {
  Tensor samples;                         // n x d, the chain outputs x_0
  std::vector<Trajectory> trajectories;   // empty unless requested
};

namespace detail {

// Noise for sample `row` at step `t`; key t = 0 is the chain start x_T.
inline void chain_noise(std::uint64_t seed, std::size_t row, std::size_t t, std::span<double> out) {
  Rng rng(derive_seed(seed, row, t));
  for (double& v : out) v = rng.normal();
}

}  // namespace detail

/// Runs x_{t-1} = mu(x_t, t) + sigma_t z_t from `start_step` down to 0.
/// `start` holds x_{start_step} for each row; `row_ids` name the noise
/// streams so that chains can be resumed or re-run with common noise.
template <NoisePredictor M>
SampleResult reverse_continue(const M& model, const NoiseSchedule& sched, Tensor start, std::size_t start_step,
                              std::uint64_t seed, std::span<const std::size_t> row_ids,
                              std::size_t keep_top = 0, bool keep = false) {
  if (start.cols() != model.dim()) throw ShapeError("reverse chain state width differs from model dimension");
  if (row_ids.size() != start.rows()) throw ShapeError("one noise stream id per row required");
  if (start_step > sched.T) throw InvalidArgument("start step beyond schedule length");
  if (keep && keep_top > start_step) throw InvalidArgument("cannot keep states above the start step");
  const std::size_t n = start.rows(), d = start.cols();
  SampleResult res;
  if (keep) {
    res.trajectories.resize(n);
    for (auto& tr : res.trajectories) {
      tr.top = keep_top;
      tr.states.resize(keep_top + 1);
    }
  }
  auto record = [&](const Tensor& x, std::size_t t) {
    if (!keep || t > keep_top) return;
    for (std::size_t r = 0; r < n; ++r) res.trajectories[r].states[t].assign(x.row(r).begin(), x.row(r).end());
  };
  Tensor x = std::move(start);
  record(x, start_step);
  std::vector<std::size_t> steps(n);
  std::vector<double> z(d);
  for (std::size_t t = start_step; t >= 1; --t) {
    std::fill(steps.begin(), steps.end(), t);
    Tensor mu = reverse_mean_from_noise(x, model.predict_noise(x, steps), steps, sched);
    const double sigma = sched.sigma_at(t);
    if (sigma != 0.0) {
      for (std::size_t r = 0; r < n; ++r) {
        detail::chain_noise(seed, row_ids[r], t, z);
        auto row = mu.row(r);
        for (std::size_t j = 0; j < d; ++j) row[j] += sigma * z[j];
      }
    }
    if (!mu.all_finite()) {
      throw NumericError("reverse chain produced a non-finite state at step " + std::to_string(t));
    }
    x = std::move(mu);
    record(x, t - 1);
  }
  res.samples = std::move(x);
  return res;
}

/// Draw n chain outputs starting from x_T ~ N(0, I). With `keep` set, each
/// trajectory retains x_t for t = 0..max(keep).
template <NoisePredictor M>
SampleResult reverse_sample(const M& model, const NoiseSchedule& sched, std::size_t n, std::uint64_t seed,
                            const StepSet* keep = nullptr) {
  if (n < 1) throw InvalidArgument("reverse_sample needs n >= 1");
  const std::size_t d = model.dim();
  Tensor start({n, d});
  std::vector<std::size_t> ids(n);
  for (std::size_t r = 0; r < n; ++r) {
    ids[r] = r;
    detail::chain_noise(seed, r, 0, start.row(r));
  }
  return reverse_continue(model, sched, std::move(start), sched.T, seed, ids, keep ? keep->max() : 0,
                          keep != nullptr);
}

/// Noise draws behind one evaluation of the denoising loss.
struct DsmDraw {
  std::vector<std::size_t> steps;  // one per row
  Tensor noise;                    // xi
  Tensor perturbed;                // x_t
};

inline DsmDraw draw_dsm(const Tensor& x0, const NoiseSchedule& sched, const StepSet& step_set,
                        std::uint64_t seed) {
  if (step_set.empty()) throw InvalidArgument("denoising loss needs a non-empty step set");
  if (x0.rows() == 0) throw InvalidArgument("denoising loss needs a non-empty batch");
  for (std::size_t t : step_set.steps()) sched.check_step(t);
  Rng rng(seed);
  DsmDraw d;
  d.steps.resize(x0.rows());
  d.noise = Tensor(x0.shape());
  d.perturbed = Tensor(x0.shape());
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    const std::size_t t = step_set.steps()[rng.index(step_set.size())];
    d.steps[r] = t;
    auto xi = d.noise.row(r);
    for (double& v : xi) v = rng.normal();
    const auto xt = forward_perturb(x0.row(r), t, xi, sched);
    std::copy(xt.begin(), xt.end(), d.perturbed.row(r).begin());
  }
  return d;
}

/// Mean over rows of ||xi - eps_hat(x_t, t)||^2 / d, with t uniform on the
/// step set and fresh xi; deterministic given the seed.
template <NoisePredictor M>
double dsm_loss(const M& model, const Tensor& x0, const NoiseSchedule& sched, const StepSet& step_set,
                std::uint64_t seed) {
  const DsmDraw d = draw_dsm(x0, sched, step_set, seed);
  const Tensor eps = model.predict_noise(d.perturbed, d.steps);
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double r = d.noise[i] - eps[i];
    s += r * r;
  }
  return s / static_cast<double>(eps.size());
}

inline Var dsm_loss_graph(Graph& g, const ScoreModel& model, const std::vector<Var>& params, const DsmDraw& d) {
  Var eps = model.predict_noise(g, params, d.perturbed, d.steps);
  return g.mean(g.square(g.sub(g.constant(d.noise), eps)));
}

namespace detail {

// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline void check_sigma(const NoiseSchedule& sched, const StepSet& steps) {
  for (std::size_t t : steps.steps()) {
    sched.check_step(t);
    if (!(sched.sigma_at(t) > 0.0)) {
      throw InvalidArgument("sigma_" + std::to_string(t) + " is zero; transition density undefined");
    }
  }
}

}  // namespace detail

/// theta-dependent part of the log joint density of each trajectory:
/// -sum_t ||x_{t-1} - mu(x_t, t)||^2 / (2 sigma_t^2) over the step set.
template <NoisePredictor M>
std::vector<double> traj_log_probs(const M& model, std::span<const Trajectory> trajs, const NoiseSchedule& sched,
                                   const StepSet& step_set) {
  detail::check_sigma(sched, step_set);
  const std::size_t n = trajs.size(), d = model.dim();
  for (const auto& tr : trajs) {
    if (!tr.covers(step_set)) throw InvalidArgument("trajectory does not cover the step set");
  }
  std::vector<detail::CompensatedSum> acc(n);
  Tensor x({n, d});
  std::vector<std::size_t> steps(n);
  for (std::size_t t : step_set.steps()) {
    for (std::size_t r = 0; r < n; ++r) std::copy(trajs[r].at(t).begin(), trajs[r].at(t).end(), x.row(r).begin());
    std::fill(steps.begin(), steps.end(), t);
    const Tensor mu = reverse_mean_from_noise(x, model.predict_noise(x, steps), steps, sched);
    const double w = 1.0 / (2.0 * sched.sigma_at(t) * sched.sigma_at(t));
    for (std::size_t r = 0; r < n; ++r) {
      const auto& prev = trajs[r].at(t - 1);
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = prev[j] - mu.at(r, j);
        sq += e * e;
      }
      acc[r].add(-w * sq);
    }
  }
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = acc[r].value();
  return out;
}

template <NoisePredictor M>
double traj_log_prob(const M& model, const Trajectory& traj, const NoiseSchedule& sched, const StepSet& step_set) {
  return traj_log_probs(model, std::span<const Trajectory>(&traj, 1), sched, step_set).front();
}

/// Graph version of traj_log_probs for a batch: returns an (n x 1) column.
inline Var traj_log_prob_graph(Graph& g, const ScoreModel& model, const std::vector<Var>& params,
                               std::span<const Trajectory> trajs, const NoiseSchedule& sched,
                               const StepSet& step_set) {
  detail::check_sigma(sched, step_set);
  const std::size_t n = trajs.size(), d = model.dim();
  if (n == 0) throw InvalidArgument("empty trajectory batch");
  const std::size_t m = n * step_set.size();
  Tensor states({m, d});
  Tensor offset({m, d});   // x_{t-1} - x_t / sqrt(alpha_t)
  Tensor gain({m, d});     // beta_t / (sqrt(alpha_t) sqrt(1 - abar_t))
  Tensor weight({m, d});   // -1 / (2 sigma_t^2)
  std::vector<std::size_t> steps(m);
  std::size_t r = 0;
  for (std::size_t t : step_set.steps()) {
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(t));
    const double c = inv_sqrt_alpha * sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
    const double w = -1.0 / (2.0 * sched.sigma_at(t) * sched.sigma_at(t));
    for (const auto& tr : trajs) {
      if (!tr.covers(step_set)) throw InvalidArgument("trajectory does not cover the step set");
      const auto& xt = tr.at(t);
      const auto& prev = tr.at(t - 1);
      for (std::size_t j = 0; j < d; ++j) {
        states.at(r, j) = xt[j];
        offset.at(r, j) = prev[j] - inv_sqrt_alpha * xt[j];
        gain.at(r, j) = c;
        weight.at(r, j) = w;
      }
      steps[r] = t;
      ++r;
    }
  }
  Var eps = model.predict_noise(g, params, states, steps);
  Var resid = g.add(g.constant(std::move(offset)), g.mul(g.constant(std::move(gain)), eps));
  Var per_row = g.row_sum(g.mul(g.square(resid), g.constant(std::move(weight))));
  Var total;
  for (std::size_t k = 0; k < step_set.size(); ++k) {
    Var block = g.slice(per_row, 0, k * n, (k + 1) * n);
    total = k == 0 ? block : g.add(total, block);
  }
  return total;
}

struct DiffusionTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 128;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

/// Fits a score model to `data` (n x d) by minimizing the denoising loss
/// over all steps. Returns the per-step loss trace.
inline std::vector<double> train_score_model(ScoreModel& model, const Tensor& data, const NoiseSchedule& sched,
                                             const DiffusionTrainConfig& cfg) {
  if (data.cols() != model.dim()) throw ShapeError("training data width differs from model dimension");
  std::vector<std::size_t> all(sched.T);
  for (std::size_t t = 0; t < sched.T; ++t) all[t] = t + 1;
  const StepSet every(all);
  OptimizerState opt(AdamConfig{.lr = cfg.lr}, model.params);
  Rng rng(derive_seed(cfg.seed, 0x5c0e));
  const std::size_t batch = std::min(cfg.batch, data.rows());
  std::vector<double> trace;
  trace.reserve(cfg.steps);
  Tensor x0({batch, data.cols()});
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    for (std::size_t r = 0; r < batch; ++r) {
      const auto src = data.row(rng.index(data.rows()));
      std::copy(src.begin(), src.end(), x0.row(r).begin());
    }
    const DsmDraw draw = draw_dsm(x0, sched, every, rng.next_u64());
    Graph g;
    auto pv = bind_params(g, model.params, "theta");
    Var loss = dsm_loss_graph(g, model, pv, draw);
    trace.push_back(g.value(loss).item());
    adam_step(model.params, collect_grads(g.backward(loss), pv), opt);
  }
  return trace;
}

}  // namespace ddro
