#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ddro/diffusion.hpp"
#include "ddro/error.hpp"
#include "ddro/predictor.hpp"
#include "ddro/rng.hpp"
#include "ddro/trainer.hpp"

namespace ddro {

/// mean_i ||predict(window_i) - horizon_i||^2 / L_out.
inline double mse_eval(const DecisionModel& w, const Dataset& data) {
  if (data.empty()) throw InvalidArgument("mse_eval: empty dataset");
  const Batch b = make_batch(data);
  const Tensor p = w.predict(b.windows);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - b.horizons[i];
    s += e * e;
  }
  return s / static_cast<double>(p.size());
}

/// 1-d empirical W1 through the quantile coupling: the integral over
/// u in (0,1) of |F_a^{-1}(u) - F_b^{-1}(u)|.
inline double wasserstein1(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("wasserstein1: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const std::size_t n = x.size(), m = y.size();
  if (n == m) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(x[i] - y[i]);
    return s / static_cast<double>(n);
  }
  // walk the merged breakpoints i/n and j/m in exact integer arithmetic
  double s = 0.0;
  std::size_t i = 0, j = 0;
  std::uint64_t pos = 0;  // in units of 1/(n m)
  const std::uint64_t total = static_cast<std::uint64_t>(n) * m;
  while (pos < total) {
    const std::uint64_t next_a = static_cast<std::uint64_t>(i + 1) * m;
    const std::uint64_t next_b = static_cast<std::uint64_t>(j + 1) * n;
    const std::uint64_t next = std::min(next_a, next_b);
    s += static_cast<double>(next - pos) * std::abs(x[i] - y[j]);
    pos = next;
    if (next == next_a) ++i;
    if (next == next_b) ++j;
  }
  return s / static_cast<double>(total);
}

/// KL(N(m1, v1) || N(m2, v2)).
inline double gaussian_kl(double m1, double v1, double m2, double v2) {
  if (!(v1 > 0.0) || !(v2 > 0.0)) throw InvalidArgument("gaussian_kl: variances must be positive");
  const double dm = m2 - m1;
  return 0.5 * (v1 / v2 + dm * dm / v2 - 1.0 + std::log(v2 / v1));
}

/// Score of P_t = N(sqrt(abar_t) m0, abar_t v0 + 1 - abar_t).
inline double analytic_gaussian_score(double x, std::size_t t, double m0, double v0, const NoiseSchedule& sched) {
  if (!(v0 > 0.0)) throw InvalidArgument("analytic score needs v0 > 0");
  const double ab = sched.alpha_bar_at(t);
  return -(x - std::sqrt(ab) * m0) / (ab * v0 + 1.0 - ab);
}

/// Exact noise predictor for data with independent N(m0, v0) coordinates:
/// eps(x, t) = -sqrt(1 - abar_t) * score(x, t).
class AnalyticGaussianPredictor {
 public:
  AnalyticGaussianPredictor(std::size_t dim, double m0, double v0, const NoiseSchedule& sched)
      : dim_(dim), m0_(m0), v0_(v0), sched_(&sched) {
    if (dim == 0) throw InvalidArgument("predictor dimension must be positive");
    if (!(v0 > 0.0)) throw InvalidArgument("analytic predictor needs v0 > 0");
  }

  std::size_t dim() const { return dim_; }

  Tensor predict_noise(const Tensor& x, std::span<const std::size_t> steps) const {
    if (x.cols() != dim_ || x.rows() != steps.size()) throw ShapeError("analytic predictor input shape");
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const std::size_t t = steps[r];
      const double k = -std::sqrt(1.0 - sched_->alpha_bar_at(t));
      for (std::size_t j = 0; j < dim_; ++j) out.at(r, j) = k * analytic_gaussian_score(x.at(r, j), t, m0_, v0_, *sched_);
    }
    return out;
  }

 private:
  std::size_t dim_;
  double m0_, v0_;
  const NoiseSchedule* sched_;
};

struct Estimate {
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;  // 0 for closed-form quantities
};

struct ProbeReport {
  std::string probe;
  std::map<std::string, Estimate> estimates;
  std::map<std::string, double> slopes;
  std::map<std::string, bool> flags;
};

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("mean of an empty sequence");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline Estimate sample_estimate(std::span<const double> v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double n = static_cast<double>(v.size());
  const double se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  return {m, se, v.size()};
}

/// Centered moving average; the window is truncated at the ends.
inline std::vector<double> moving_average(std::span<const double> v, std::size_t width) {
  if (width == 0) throw InvalidArgument("moving average width must be positive");
  const std::size_t half = width / 2, n = v.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0, hi = std::min(n - 1, i + half);
    double s = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) s += v[k];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

/// Least-squares slope of v against its index.
inline double ls_slope(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  const double xm = (static_cast<double>(n) - 1.0) / 2.0, ym = mean_of(v);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xm;
    num += dx * (v[i] - ym);
    den += dx * dx;
  }
  return num / den;
}

inline double smoothed_slope(std::span<const double> v, std::size_t width = 5) {
  const auto s = moving_average(v, width);
  return ls_slope(s);
}

/// Ranks starting at 1; ties get their average rank.
inline std::vector<double> ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation (Pearson correlation of the ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("spearman needs two equal-length samples (n >= 2)");
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

struct GaussianSpec {
  double mean = 0.0;
  double var = 1.0;
};

struct LemmaProbeConfig {
  std::size_t samples = 10000;      // reverse samples for the moment fit
  std::size_t loss_samples = 10000; // (x0, t, xi) draws for the loss terms
  std::size_t bootstrap = 200;
  std::uint64_t seed = 0;
};

/// Measurable sides of the output-distribution bound for 1-d Gaussian data:
///  score_loss   E |eps_hat - eps*|^2 over t uniform on 1..T, where eps* is
///               the exact denoiser (the score-matching loss in noise units)
///  dsm_loss     the denoising loss E |xi - eps_hat|^2 on the same draws
///  output_kl    KL(P0 || Gaussian moment fit of reverse samples)
///  prior_kl     KL(P_T || N(0, 1)), closed form
template <NoisePredictor M>
ProbeReport lemma1_probe(const M& model, const NoiseSchedule& sched, const GaussianSpec& p0,
                         const LemmaProbeConfig& cfg) {
  if (model.dim() != 1) throw InvalidArgument("lemma1_probe expects a 1-d model");
  if (!(p0.var > 0.0)) throw InvalidArgument("lemma1_probe needs a positive data variance");
  if (cfg.samples < 2 || cfg.loss_samples < 2) throw InvalidArgument("lemma1_probe needs at least 2 samples");
  ProbeReport rep;
  rep.probe = "lemma1";

  Rng rng(derive_seed(cfg.seed, 0x10));
  Tensor x0({cfg.loss_samples, 1});
  for (double& v : x0.data()) v = p0.mean + std::sqrt(p0.var) * rng.normal();
  std::vector<std::size_t> all(sched.T);
  std::iota(all.begin(), all.end(), 1);
  const DsmDraw d = draw_dsm(x0, sched, StepSet(all), derive_seed(cfg.seed, 0x11));
  const Tensor eps = model.predict_noise(d.perturbed, d.steps);
  const AnalyticGaussianPredictor exact(1, p0.mean, p0.var, sched);
  const Tensor eps_star = exact.predict_noise(d.perturbed, d.steps);
  std::vector<double> excess(cfg.loss_samples), raw(cfg.loss_samples);
  for (std::size_t i = 0; i < cfg.loss_samples; ++i) {
    excess[i] = (eps[i] - eps_star[i]) * (eps[i] - eps_star[i]);
    raw[i] = (d.noise[i] - eps[i]) * (d.noise[i] - eps[i]);
  }
  rep.estimates["score_loss"] = sample_estimate(excess);
  rep.estimates["dsm_loss"] = sample_estimate(raw);

  const Tensor xs = reverse_sample(model, sched, cfg.samples, derive_seed(cfg.seed, 0x12)).samples;
  auto fit_kl = [&](const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return gaussian_kl(p0.mean, p0.var, m, ss / static_cast<double>(v.size() - 1));
  };
  const double kl = fit_kl(xs.data());
  Rng boot(derive_seed(cfg.seed, 0x13));
  std::vector<double> reps;
  std::vector<double> resample(cfg.samples);
  for (std::size_t b = 0; b < cfg.bootstrap; ++b) {
    for (double& v : resample) v = xs[boot.index(cfg.samples)];
    reps.push_back(fit_kl(resample));
  }
  double se = 0.0;
  if (reps.size() > 1) {
    const double m = mean_of(reps);
    for (double r : reps) se += (r - m) * (r - m);
    se = std::sqrt(se / static_cast<double>(reps.size() - 1));
  }
  rep.estimates["output_kl"] = {kl, se, cfg.samples};

  const double ab = sched.alpha_bar_at(sched.T);
  rep.estimates["prior_kl"] = {gaussian_kl(std::sqrt(ab) * p0.mean, ab * p0.var + 1.0 - ab, 0.0, 1.0), 0.0, 0};
  return rep;
}

/// Directional check across checkpoints of one training run: does the
/// output KL fall as the score-matching loss falls?
inline ProbeReport lemma1_trend(std::span<const double> losses, std::span<const double> kls) {
  ProbeReport rep;
  rep.probe = "lemma1_trend";
  const double rho = spearman(losses, kls);
  rep.estimates["spearman"] = {rho, 0.0, losses.size()};
  rep.flags["kl_tracks_loss"] = rho > 0.0;
  return rep;
}

struct TrainingTrend {
  std::vector<std::size_t> steps;  // cumulative optimizer steps at each checkpoint
  std::vector<ProbeReport> probes;
  ProbeReport trend;
};

/// Trains a 1-d score model on Gaussian data and runs lemma1_probe at each
/// checkpoint (cumulative step counts, increasing). The probe seed is the
/// same at every checkpoint so the loss draws are shared.
inline TrainingTrend lemma1_training_trend(const GaussianSpec& p0, const NoiseSchedule& sched,
                                           std::span<const std::size_t> checkpoints, std::size_t data_size,
                                           const DiffusionTrainConfig& train, const LemmaProbeConfig& probe,
                                           const ScoreModelSpec& spec = {}) {
  if (checkpoints.size() < 2) throw InvalidArgument("a trend needs at least two checkpoints");
  if (!std::is_sorted(checkpoints.begin(), checkpoints.end())) throw InvalidArgument("checkpoints must increase");
  if (spec.dim != 1) throw InvalidArgument("lemma1_training_trend expects a 1-d model");
  Rng rng(derive_seed(train.seed, 0xda));
  Tensor data({data_size, 1});
  for (double& v : data.data()) v = p0.mean + std::sqrt(p0.var) * rng.normal();
  ScoreModel model(spec, sched.T, derive_seed(train.seed, 0x5c));
  TrainingTrend out;
  std::size_t done = 0;
  std::vector<double> losses, kls;
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    if (checkpoints[c] > done) {
      DiffusionTrainConfig tc = train;
      tc.steps = checkpoints[c] - done;
      tc.seed = derive_seed(train.seed, c);
      train_score_model(model, data, sched, tc);
      done = checkpoints[c];
    }
    out.steps.push_back(done);
    out.probes.push_back(lemma1_probe(model, sched, p0, probe));
    losses.push_back(out.probes.back().estimates.at("dsm_loss").value);
    kls.push_back(out.probes.back().estimates.at("output_kl").value);
  }
  out.trend = lemma1_trend(losses, kls);
  return out;
}

/// Trace diagnostics of a run: the constraint violation of the inner loop,
/// the trend of E[f] across inner iterates and the smoothed outer
/// gradient-norm trace.
inline ProbeReport convergence_probe(const RunResult& res, double epsilon) {
  const std::size_t I = res.outer_loss.size();
  if (I == 0 || res.grad_norm.size() != I || res.inner_traces.size() != I) {
    throw InvalidArgument("convergence_probe: run result has missing or misaligned traces");
  }
  ProbeReport rep;
  rep.probe = "convergence";
  std::vector<double> violation, ef_slope;
  for (const InnerTrace& tr : res.inner_traces) {
    if (tr.size() == 0) continue;
    if (tr.dual.size() != tr.size() || tr.expected_loss.size() != tr.size()) {
      throw InvalidArgument("convergence_probe: inner trace fields differ in length");
    }
    violation.push_back(std::max(0.0, mean_of(tr.constraint) - epsilon));
    ef_slope.push_back(smoothed_slope(tr.expected_loss));
  }
  if (!violation.empty()) {
    rep.estimates["constraint_violation"] = sample_estimate(violation);
    rep.slopes["inner_expected_loss"] = mean_of(ef_slope);
    rep.flags["inner_loss_increasing"] = rep.slopes["inner_expected_loss"] > 0.0;
  }
  rep.slopes["outer_grad_norm"] = smoothed_slope(res.grad_norm);
  rep.slopes["outer_loss"] = smoothed_slope(res.outer_loss);
  rep.estimates["final_grad_norm"] = {res.grad_norm.back(), 0.0, 1};
  rep.flags["grad_norm_decreasing"] = rep.slopes["outer_grad_norm"] <= 0.0;
  return rep;
}

}  // namespace ddro
