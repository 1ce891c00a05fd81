#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ddro/diffusion.hpp"
#include "ddro/error.hpp"
#include "ddro/graph.hpp"
#include "ddro/optim.hpp"
#include "ddro/rng.hpp"

namespace ddro {

/// Lagrange multiplier for the score-matching budget J(theta, S0) <= epsilon.
struct DualState {
  double mu = 1.0;
  double eta = 0.01;
  double epsilon = 0.015;
};

/// mu <- max{0, mu + eta (J - epsilon)}.
inline DualState dual_update(DualState dual, double constraint_value) {
  dual.mu = std::max(0.0, dual.mu + dual.eta * (constraint_value - dual.epsilon));
  return dual;
}

enum class Surrogate { policy_gradient, ppo };

inline const char* surrogate_name(Surrogate s) { return s == Surrogate::ppo ? "ppo" : "policy_gradient"; }

struct PpoConfig {
  double kappa = 0.4;
  std::size_t tuned_steps = 15;  // T': only the last T' backward steps are fine-tuned
  std::size_t iterations = 10;   // K
  Surrogate kind = Surrogate::ppo;

  void validate(std::size_t T) const {
    if (!(kappa > 0.0 && kappa < 1.0)) throw InvalidArgument("kappa must lie in (0,1)");
    if (tuned_steps < 1 || tuned_steps > T) throw InvalidArgument("tuned step count must lie in 1..T");
  }
};

/// Whether each outer iteration restarts the adversary from the reference.
enum class ResetMode { continuous, reset };

struct InnerMaxConfig {
  PpoConfig ppo;
  AdamConfig adam{.lr = 1e-3};
  std::size_t batch = 64;             // trajectories per surrogate update
  std::size_t updates = 0;            // surrogate updates per iteration; 0 = one pass over the reference set
  std::size_t constraint_batch = 64;  // S0 rows per stochastic J term
  bool reward_baseline = false;       // subtract the batch-mean reward
  std::size_t trace_samples = 0;      // fresh chains for E[f] in the trace; 0 = importance-weighted estimate
  double log_ratio_clamp = 30.0;
};

/// Per-iteration records: J(theta_k, S0), mu after the update, E_{theta_k}[f].
struct InnerTrace {
  std::vector<double> constraint;
  std::vector<double> dual;
  std::vector<double> expected_loss;

  std::size_t size() const { return constraint.size(); }
};

/// Thrown when the inner loop hits a non-finite objective; carries the trace
/// collected so far.
class InnerMaxDiverged : public NumericError {
 public:
  InnerMaxDiverged(const std::string& what, InnerTrace trace) : NumericError(what), trace(std::move(trace)) {}
  InnerTrace trace;
};

/// min(r f, clip(r, 1 - kappa, 1 + kappa) f).
inline double ppo_term(double ratio, double reward, double kappa) {
  const double clipped = std::clamp(ratio, 1.0 - kappa, 1.0 + kappa);
  return std::min(ratio * reward, clipped * reward);
}

inline double clamp_log_ratio(double log_ratio, double limit) {
  if (std::isnan(log_ratio)) throw NumericError("log probability ratio is NaN");
  return std::clamp(log_ratio, -limit, limit);
}

/// Trajectory probability ratio P_model / P_reference over the step set,
/// formed in log space and clamped before exponentiation.
template <NoisePredictor M, NoisePredictor R>
double ppo_ratio(const M& model, const R& reference, const Trajectory& traj, const NoiseSchedule& sched,
                 const StepSet& step_set, double log_clamp = 30.0) {
  if (model.dim() != reference.dim()) throw ShapeError("ppo_ratio: model dimensions differ");
  const double lr = traj_log_prob(model, traj, sched, step_set) - traj_log_prob(reference, traj, sched, step_set);
  const double r = std::exp(clamp_log_ratio(lr, log_clamp));
  if (!std::isfinite(r) || r <= 0.0) {
    throw NumericError("probability ratio overflow (log ratio " + std::to_string(lr) + ")");
  }
  return r;
}

/// S0 rows plus the fixed noise draw used for a constraint evaluation.
struct ConstraintSample {
  Tensor data;
  StepSet steps;
  std::uint64_t seed = 0;
};

/// PPO surrogate value: mean_i min(r_i f_i, clip(r_i) f_i) - mu J(model, S0).
template <NoisePredictor M, NoisePredictor R>
double ppo_objective(const M& model, const R& reference, std::span<const Trajectory> trajs,
                     std::span<const double> f_values, const PpoConfig& cfg, const DualState& dual,
                     const ConstraintSample& s0, const NoiseSchedule& sched, double log_clamp = 30.0) {
  if (trajs.empty()) throw InvalidArgument("ppo_objective: empty trajectory batch");
  if (f_values.size() != trajs.size()) throw ShapeError("ppo_objective: one reward per trajectory required");
  const StepSet step_set = StepSet::last(cfg.tuned_steps);
  const auto lp = traj_log_probs(model, trajs, sched, step_set);
  const auto lr = traj_log_probs(reference, trajs, sched, step_set);
  double s = 0.0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    s += ppo_term(std::exp(clamp_log_ratio(lp[i] - lr[i], log_clamp)), f_values[i], cfg.kappa);
  }
  const double j = dsm_loss(model, s0.data, sched, s0.steps, s0.seed);
  return s / static_cast<double>(trajs.size()) - dual.mu * j;
}

/// Policy-gradient surrogate value: mean_i log P(traj_i) f_i - mu J(model, S0).
template <NoisePredictor M>
double pg_objective(const M& model, std::span<const Trajectory> trajs, std::span<const double> f_values,
                    const DualState& dual, const ConstraintSample& s0, const NoiseSchedule& sched,
                    const StepSet& step_set) {
  if (trajs.empty()) throw InvalidArgument("pg_objective: empty trajectory batch");
  if (f_values.size() != trajs.size()) throw ShapeError("pg_objective: one reward per trajectory required");
  const auto lp = traj_log_probs(model, trajs, sched, step_set);
  double s = 0.0;
  for (std::size_t i = 0; i < trajs.size(); ++i) s += lp[i] * f_values[i];
  return s / static_cast<double>(trajs.size()) - dual.mu * dsm_loss(model, s0.data, sched, s0.steps, s0.seed);
}

/// Differentiable pieces of a surrogate: objective = reward - mu * constraint.
struct SurrogateGraph {
  Var objective;
  Var reward;
  Var constraint;
};

namespace detail {

inline Tensor column(std::span<const double> v) { return Tensor({v.size(), 1}, std::vector<double>(v.begin(), v.end())); }

inline std::vector<double> centered(std::span<const double> f) {
  const double m = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
  std::vector<double> out(f.begin(), f.end());
  for (double& v : out) v -= m;
  return out;
}

}  // namespace detail

/// Graph of the PPO surrogate in the parameters bound as `params`. Rewards
/// are constants. The min/clip is resolved from the current ratio values:
/// where the clipped branch is active its term is a constant.
inline SurrogateGraph ppo_objective_graph(Graph& g, const ScoreModel& model, const std::vector<Var>& params,
                                          std::span<const Trajectory> trajs, std::span<const double> ref_log_probs,
                                          std::span<const double> f_values, double kappa, double mu,
                                          const DsmDraw& constraint_draw, const NoiseSchedule& sched,
                                          const StepSet& step_set, double log_clamp = 30.0) {
  const std::size_t n = trajs.size();
  if (n == 0) throw InvalidArgument("ppo_objective: empty trajectory batch");
  if (f_values.size() != n || ref_log_probs.size() != n) throw ShapeError("ppo_objective: misaligned batch");
  Var lp = traj_log_prob_graph(g, model, params, trajs, sched, step_set);
  Var log_ratio = g.sub(lp, g.constant(detail::column(ref_log_probs)));
  const Tensor& lr_val = g.value(log_ratio);
  Tensor keep({n, 1}), fill({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double v = lr_val[i];
    const double c = clamp_log_ratio(v, log_clamp);
    if (c == v) {
      keep[i] = 1.0;
    } else {
      fill[i] = c;
    }
  }
  Var ratio = g.exp(g.add(g.mul(log_ratio, g.constant(keep)), g.constant(fill)));
  const Tensor& r_val = g.value(ratio);
  Tensor coef({n, 1}), offset({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double r = r_val[i], f = f_values[i];
    const double clipped = std::clamp(r, 1.0 - kappa, 1.0 + kappa);
    if (r * f <= clipped * f) {
      coef[i] = f;
    } else {
      offset[i] = clipped * f;
    }
  }
  Var reward = g.mean(g.add(g.mul(ratio, g.constant(coef)), g.constant(offset)));
  Var constraint = dsm_loss_graph(g, model, params, constraint_draw);
  return {g.sub(reward, g.scale(constraint, mu)), reward, constraint};
}

/// Graph of the policy-gradient surrogate: mean(log P(traj) f) - mu J.
inline SurrogateGraph pg_objective_graph(Graph& g, const ScoreModel& model, const std::vector<Var>& params,
                                         std::span<const Trajectory> trajs, std::span<const double> f_values,
                                         double mu, const DsmDraw& constraint_draw, const NoiseSchedule& sched,
                                         const StepSet& step_set) {
  const std::size_t n = trajs.size();
  if (n == 0) throw InvalidArgument("pg_objective: empty trajectory batch");
  if (f_values.size() != n) throw ShapeError("pg_objective: one reward per trajectory required");
  Var lp = traj_log_prob_graph(g, model, params, trajs, sched, step_set);
  Var reward = g.mean(g.mul(lp, g.constant(detail::column(f_values))));
  Var constraint = dsm_loss_graph(g, model, params, constraint_draw);
  return {g.sub(reward, g.scale(constraint, mu)), reward, constraint};
}

/// Chains sampled from the frozen reference, kept over the last T' steps,
/// with their reference log-probabilities. Rows are noise stream ids so the
/// tail of each chain can be re-run under another model with common noise.
struct ReferenceSet {
  std::vector<Trajectory> trajectories;
  std::vector<double> log_probs;
  Tensor outputs;
  std::uint64_t seed = 0;
  std::size_t tuned_steps = 0;

  std::size_t size() const { return trajectories.size(); }
};

inline ReferenceSet make_reference_set(const ScoreModel& reference, const NoiseSchedule& sched, std::size_t n,
                                       std::size_t tuned_steps, std::uint64_t seed) {
  const StepSet steps = StepSet::last(tuned_steps);
  SampleResult s = reverse_sample(reference, sched, n, seed, &steps);
  ReferenceSet out;
  out.log_probs = traj_log_probs(reference, std::span<const Trajectory>(s.trajectories), sched, steps);
  out.trajectories = std::move(s.trajectories);
  out.outputs = std::move(s.samples);
  out.seed = seed;
  out.tuned_steps = tuned_steps;
  return out;
}

/// Re-runs the last T' steps of the selected reference chains under `model`
/// with fresh noise (stream `seed`), keeping trajectories.
inline SampleResult resample_tail(const ScoreModel& model, const NoiseSchedule& sched, const ReferenceSet& ref,
                                  std::span<const std::size_t> rows, std::uint64_t seed) {
  const std::size_t tp = ref.tuned_steps;
  Tensor start({rows.size(), model.dim()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& x = ref.trajectories.at(rows[i]).at(tp);
    std::copy(x.begin(), x.end(), start.row(i).begin());
  }
  return reverse_continue(model, sched, std::move(start), tp, seed, rows, tp, true);
}

/// f(w, x0) for one generated sample; the decision model is captured.
using RewardFn = std::function<double(std::span<const double>)>;

/// E_{P_model}[f]. With `samples` > 0 the tails of that many reference
/// chains are re-run under `model`; otherwise the reference outputs are
/// reweighted by their self-normalized probability ratios.
inline double expected_reward(const ScoreModel& model, const NoiseSchedule& sched, const ReferenceSet& ref,
                              const RewardFn& reward, std::size_t samples, std::uint64_t seed,
                              double log_clamp = 30.0) {
  const std::size_t n = ref.size();
  if (samples > 0) {
    std::vector<std::size_t> rows(std::min(samples, n));
    std::iota(rows.begin(), rows.end(), 0);
    const SampleResult s = resample_tail(model, sched, ref, rows, seed);
    double acc = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) acc += reward(s.samples.row(i));
    return acc / static_cast<double>(rows.size());
  }
  const StepSet steps = StepSet::last(ref.tuned_steps);
  const auto lp = traj_log_probs(model, std::span<const Trajectory>(ref.trajectories), sched, steps);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::exp(clamp_log_ratio(lp[i] - ref.log_probs[i], log_clamp));
    num += r * reward(ref.outputs.row(i));
    den += r;
  }
  return num / den;
}

struct InnerResult {
  std::vector<ParamList> iterates;  // theta_1 .. theta_K
  InnerTrace trace;
  DualState dual;
};

/// Alternates surrogate ascent on theta with dual updates on mu for
/// cfg.ppo.iterations rounds. `model` holds the starting parameters and is
/// left at theta_K; `opt` carries Adam state across calls.
inline InnerResult inner_max_run(const RewardFn& reward, ScoreModel& model, const ScoreModel& reference,
                                 const ReferenceSet& ref, const Tensor& s0, const NoiseSchedule& sched,
                                 const InnerMaxConfig& cfg, DualState dual, OptimizerState& opt,
                                 std::uint64_t seed) {
  cfg.ppo.validate(sched.T);
  if (ref.tuned_steps != cfg.ppo.tuned_steps) throw InvalidArgument("reference set kept a different T'");
  if (ref.size() == 0) throw InvalidArgument("empty reference set");
  if (reference.dim() != model.dim()) throw ShapeError("reference and fine-tuned models differ in dimension");
  if (s0.rows() == 0) throw InvalidArgument("empty nominal dataset");
  InnerResult out;
  out.dual = dual;
  const std::size_t K = cfg.ppo.iterations;
  if (K == 0) return out;
  if (opt.first_moment.size() != model.params.size()) opt = OptimizerState(cfg.adam, model.params);

  const StepSet steps = StepSet::last(cfg.ppo.tuned_steps);
  const std::size_t n = ref.size();
  const std::size_t batch = std::min(cfg.batch, n);
  const std::size_t updates = cfg.updates ? cfg.updates : (n + batch - 1) / batch;
  const std::size_t cbatch = std::min(cfg.constraint_batch, s0.rows());
  Rng rng(derive_seed(seed, 0x1a7e));
  const std::uint64_t eval_seed = derive_seed(seed, 0xe7a1);

  // Rewards of the reference chains are fixed for the whole call.
  std::vector<double> ref_reward(n);
  for (std::size_t i = 0; i < n; ++i) ref_reward[i] = reward(ref.outputs.row(i));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  Tensor cdata({cbatch, s0.cols()});

  auto fail = [&](const std::string& what) { throw InnerMaxDiverged(what, out.trace); };

  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t u = 0; u < updates; ++u) {
      std::vector<std::size_t> rows;
      rows.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        if (cursor == n) {
          rng.shuffle(order.begin(), order.end());
          cursor = 0;
        }
        rows.push_back(order[cursor++]);
      }
      for (std::size_t r = 0; r < cbatch; ++r) {
        const auto src = s0.row(rng.index(s0.rows()));
        std::copy(src.begin(), src.end(), cdata.row(r).begin());
      }
      const DsmDraw draw = draw_dsm(cdata, sched, steps, rng.next_u64());

      Graph g;
      auto pv = bind_params(g, model.params, "theta");
      SurrogateGraph sg;
      try {
        if (cfg.ppo.kind == Surrogate::ppo) {
          std::vector<Trajectory> trajs;
          std::vector<double> lp_ref, f;
          for (std::size_t r : rows) {
            trajs.push_back(ref.trajectories[r]);
            lp_ref.push_back(ref.log_probs[r]);
            f.push_back(ref_reward[r]);
          }
          if (cfg.reward_baseline) f = detail::centered(f);
          sg = ppo_objective_graph(g, model, pv, trajs, lp_ref, f, cfg.ppo.kappa, out.dual.mu, draw, sched, steps,
                                   cfg.log_ratio_clamp);
        } else {
          SampleResult fresh = resample_tail(model, sched, ref, rows, rng.next_u64());
          std::vector<double> f(rows.size());
          for (std::size_t i = 0; i < rows.size(); ++i) f[i] = reward(fresh.samples.row(i));
          if (cfg.reward_baseline) f = detail::centered(f);
          sg = pg_objective_graph(g, model, pv, fresh.trajectories, f, out.dual.mu, draw, sched, steps);
        }
      } catch (const NumericError& e) {
        fail(std::string("inner maximization diverged: ") + e.what());
      }
      const double obj = g.value(sg.objective).item();
      if (!std::isfinite(obj)) fail("inner maximization objective is not finite");
      std::vector<Tensor> ascent = collect_grads(g.backward(sg.objective), pv);
      for (Tensor& t : ascent) {
        for (double& v : t.data()) v = -v;
      }
      adam_step(model.params, ascent, opt);
    }

    const double j = dsm_loss(model, s0, sched, steps, eval_seed);
    if (!std::isfinite(j)) fail("constraint value is not finite");
    out.dual = dual_update(out.dual, j);
    out.trace.constraint.push_back(j);
    out.trace.dual.push_back(out.dual.mu);
    out.trace.expected_loss.push_back(expected_reward(model, sched, ref, reward, cfg.trace_samples,
                                                      derive_seed(seed, 0xf00d), cfg.log_ratio_clamp));
    out.iterates.push_back(model.params);
  }
  return out;
}

}  // namespace ddro
