#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ddro/metrics.hpp"

using namespace ddro;
using Catch::Approx;

namespace {

// min over all pairings of the mean absolute difference
double brute_w1(std::vector<double> a, const std::vector<double>& b) {
  std::sort(a.begin(), a.end());
  double best = 1e300;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    best = std::min(best, s / static_cast<double>(a.size()));
  } while (std::next_permutation(a.begin(), a.end()));
  return best;
}

double log_marginal(double x, std::size_t t, double m0, double v0, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar_at(t);
  const double mu = std::sqrt(ab) * m0, s = ab * v0 + 1.0 - ab;
  return -0.5 * std::log(2.0 * std::numbers::pi * s) - (x - mu) * (x - mu) / (2.0 * s);
}

RunResult with_trace(std::vector<double> constraint, std::vector<double> ef, std::vector<double> grad) {
  RunResult r;
  InnerTrace tr;
  tr.constraint = std::move(constraint);
  tr.expected_loss = std::move(ef);
  tr.dual.assign(tr.constraint.size(), 0.0);
  r.inner_traces = {tr};
  r.outer_loss = {1.0};
  r.grad_norm = std::move(grad);
  return r;
}

}  // namespace

TEST_CASE("mse evaluation") {
  // bias-only predictor: zero window weight, bias b
  DecisionModel w(PredictorSpec{2, 1, {}}, 0);
  for (double& v : w.params[0].data()) v = 0.0;
  w.params[1][0] = 1.0;
  const Dataset ones{{{0.3, 0.1}, {1.0}}, {{-2.0, 4.0}, {1.0}}};
  CHECK(mse_eval(w, ones) == 0.0);
  w.params[1][0] = 0.0;
  CHECK(mse_eval(w, ones) == 1.0);

  DecisionModel m(PredictorSpec{3, 2, {5}}, 7);
  Rng rng(1);
  Dataset d(9);
  for (auto& s : d) {
    s.window = {rng.normal(), rng.normal(), rng.normal()};
    s.horizon = {rng.normal(), rng.normal()};
  }
  double acc = 0.0;
  for (const auto& s : d) acc += mse_eval(m, Dataset{s});
  CHECK(mse_eval(m, d) == Approx(acc / 9.0).margin(1e-12));
  CHECK_THROWS_AS(mse_eval(m, Dataset{}), InvalidArgument);
}

TEST_CASE("wasserstein-1") {
  const std::vector<double> a{0.0, 1.0}, b{0.5, 2.0};
  CHECK(wasserstein1(a, a) == 0.0);
  CHECK(wasserstein1(std::vector<double>{0.0}, std::vector<double>{1.0}) == 1.0);
  CHECK(wasserstein1(a, b) == Approx(std::min(0.5 + 1.0, 2.0 + 0.0) / 2.0).margin(1e-15));
  CHECK(wasserstein1(a, b) == Approx(brute_w1(a, b)).margin(1e-15));
  CHECK_THROWS_AS(wasserstein1(std::vector<double>{}, a), InvalidArgument);

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(6);
    std::vector<double> x(n), y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = rng.uniform(-2.0, 2.0);
      z[i] = rng.normal() * 3.0;
    }
    CHECK(std::abs(wasserstein1(x, y) - brute_w1(x, y)) <= 1e-12);
    CHECK(wasserstein1(x, y) == wasserstein1(y, x));
    CHECK(wasserstein1(x, z) <= wasserstein1(x, y) + wasserstein1(y, z) + 1e-12);
  }

  // unequal sizes match the equal-size problem on replicated atoms
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.index(4), m = 1 + rng.index(4);
    std::vector<double> x(n), y(m), xr, yr;
    for (double& v : x) v = rng.normal();
    for (double& v : y) v = rng.normal();
    for (double v : x) xr.insert(xr.end(), m, v);
    for (double v : y) yr.insert(yr.end(), n, v);
    CHECK(wasserstein1(x, y) == Approx(wasserstein1(xr, yr)).margin(1e-12));
  }
}

TEST_CASE("gaussian KL") {
  CHECK(gaussian_kl(0.3, 2.0, 0.3, 2.0) == 0.0);
  CHECK(gaussian_kl(1.0, 1.0, 0.0, 1.0) == Approx(0.5).margin(1e-15));
  CHECK(gaussian_kl(0.0, 4.0, 0.0, 1.0) == Approx((4.0 - 1.0 - std::log(4.0)) / 2.0).margin(1e-15));
  CHECK(gaussian_kl(0.0, 4.0, 0.0, 1.0) == Approx(0.80685).margin(1e-5));
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    CHECK(gaussian_kl(rng.normal(), rng.uniform(0.1, 3.0), rng.normal(), rng.uniform(0.1, 3.0)) >= 0.0);
  }
  CHECK_THROWS_AS(gaussian_kl(0.0, 0.0, 0.0, 1.0), InvalidArgument);
  CHECK_THROWS_AS(gaussian_kl(0.0, 1.0, 0.0, -1.0), InvalidArgument);
}

TEST_CASE("analytic gaussian score") {
  const NoiseSchedule barely = build_schedule(5, 1e-12, 1e-11);
  CHECK(analytic_gaussian_score(2.0, 1, 0.5, 4.0, barely) == Approx(-(2.0 - 0.5) / 4.0).margin(1e-9));
  const NoiseSchedule full = build_schedule(200, 0.5, 0.9);
  CHECK(analytic_gaussian_score(1.7, 200, 3.0, 0.2, full) == Approx(-1.7).margin(1e-9));

  const NoiseSchedule sched = build_schedule(50, 1e-4, 0.2);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.normal() * 2.0, m0 = rng.normal(), v0 = rng.uniform(0.2, 3.0);
    const std::size_t t = 1 + rng.index(50);
    const double h = 1e-5;
    const double fd = (log_marginal(x + h, t, m0, v0, sched) - log_marginal(x - h, t, m0, v0, sched)) / (2.0 * h);
    CHECK(std::abs(analytic_gaussian_score(x, t, m0, v0, sched) - fd) < 1e-6);
    // linear in x
    const double s0 = analytic_gaussian_score(0.0, t, m0, v0, sched), s1 = analytic_gaussian_score(1.0, t, m0, v0, sched);
    CHECK(analytic_gaussian_score(x, t, m0, v0, sched) == Approx(s0 + x * (s1 - s0)).margin(1e-12));
  }
  CHECK_THROWS_AS(analytic_gaussian_score(0.0, 1, 0.0, 0.0, sched), InvalidArgument);
}

TEST_CASE("output-distribution probe") {
  const NoiseSchedule sched = build_schedule(50, 1e-4, 0.2);
  LemmaProbeConfig cfg;
  cfg.seed = 3;

  const AnalyticGaussianPredictor exact(1, 1.5, 0.5, sched);
  const ProbeReport r = lemma1_probe(exact, sched, GaussianSpec{1.5, 0.5}, cfg);
  CHECK(r.probe == "lemma1");
  CHECK(r.estimates.at("output_kl").value < 0.02);
  CHECK(r.estimates.at("output_kl").count == 10000);
  CHECK(r.estimates.at("output_kl").stderr_ > 0.0);
  CHECK(r.estimates.at("score_loss").value == 0.0);
  CHECK(r.estimates.at("dsm_loss").count == 10000);
  // the exact denoiser leaves the posterior variance of the noise
  double floor = 0.0;
  for (std::size_t t = 1; t <= 50; ++t) {
    const double ab = sched.alpha_bar_at(t);
    floor += ab * 0.5 / (ab * 0.5 + 1.0 - ab) / 50.0;
  }
  const Estimate dl = r.estimates.at("dsm_loss");
  CHECK(std::abs(dl.value - floor) < 4.0 * dl.stderr_);

  const AnalyticGaussianPredictor stationary(1, 0.0, 1.0, sched);
  const ProbeReport st = lemma1_probe(stationary, sched, GaussianSpec{0.0, 1.0}, cfg);
  CHECK(st.estimates.at("output_kl").value < 0.02);
  CHECK(st.estimates.at("prior_kl").value < 0.02);
  CHECK(st.estimates.at("score_loss").value < 0.02);

  const AnalyticGaussianPredictor two(2, 0.0, 1.0, sched);
  CHECK_THROWS_AS(lemma1_probe(two, sched, GaussianSpec{}, cfg), InvalidArgument);
}

TEST_CASE("probe along a training run") {
  const NoiseSchedule sched = build_schedule(50, 1e-4, 0.2);
  const std::vector<std::size_t> checkpoints{0, 1500};
  LemmaProbeConfig probe;
  probe.samples = 5000;
  probe.loss_samples = 5000;
  probe.bootstrap = 20;
  const TrainingTrend tr = lemma1_training_trend(GaussianSpec{2.0, 0.25}, sched, checkpoints, 2000,
                                                 DiffusionTrainConfig{.steps = 0, .batch = 256, .lr = 3e-3, .seed = 4},
                                                 probe, ScoreModelSpec{1, {32, 32}, 4});
  REQUIRE(tr.probes.size() == 2);
  CHECK(tr.steps == checkpoints);
  const double kl0 = tr.probes[0].estimates.at("output_kl").value, kl1 = tr.probes[1].estimates.at("output_kl").value;
  CHECK(kl1 < kl0);
  CHECK(tr.probes[1].estimates.at("dsm_loss").value < tr.probes[0].estimates.at("dsm_loss").value);
  CHECK(tr.trend.flags.at("kl_tracks_loss"));

  const std::vector<std::size_t> back{5, 2};
  CHECK_THROWS_AS(lemma1_training_trend(GaussianSpec{}, sched, back, 10, DiffusionTrainConfig{}, probe), InvalidArgument);
}

TEST_CASE("rank correlation and slopes") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{10, 20, 25, 26, 40}, c{5, 4, 3, 2, 1};
  CHECK(spearman(a, b) == Approx(1.0));
  CHECK(spearman(a, c) == Approx(-1.0));
  const std::vector<double> tied{1, 1, 2}, other{3, 3, 1};
  CHECK(spearman(tied, other) == Approx(-1.0));
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), InvalidArgument);

  std::vector<double> line(20);
  for (std::size_t i = 0; i < line.size(); ++i) line[i] = 3.0 - 0.5 * static_cast<double>(i);
  CHECK(ls_slope(line) == Approx(-0.5));
  CHECK(smoothed_slope(std::vector<double>(12, 2.0)) == 0.0);

  const Estimate e = sample_estimate(std::vector<double>{1.0, 3.0});
  CHECK(e.value == 2.0);
  CHECK(e.stderr_ == Approx(1.0));
  CHECK(e.count == 2);
}

TEST_CASE("convergence probe") {
  const double eps = 0.5;
  const RunResult flat = with_trace(std::vector<double>(8, 0.7), std::vector<double>(8, 1.0), {0.3});
  const ProbeReport f = convergence_probe(flat, eps);
  CHECK(f.estimates.at("constraint_violation").value == Approx(0.2).margin(1e-15));
  CHECK(f.slopes.at("inner_expected_loss") == 0.0);
  CHECK(f.slopes.at("outer_grad_norm") == 0.0);
  CHECK(f.flags.at("grad_norm_decreasing"));
  CHECK(convergence_probe(with_trace(std::vector<double>(8, 0.2), std::vector<double>(8, 1.0), {0.3}), eps)
            .estimates.at("constraint_violation")
            .value == 0.0);

  const std::size_t K = 40;
  std::vector<double> j(K), ef(K);
  double direct = 0.0;
  for (std::size_t k = 1; k <= K; ++k) {
    j[k - 1] = eps + 1.0 / std::sqrt(static_cast<double>(k));
    ef[k - 1] = static_cast<double>(k);
    direct += 1.0 / std::sqrt(static_cast<double>(k)) / static_cast<double>(K);
  }
  const ProbeReport s = convergence_probe(with_trace(j, ef, {0.3}), eps);
  CHECK(s.estimates.at("constraint_violation").value == Approx(direct).margin(1e-12));
  CHECK(s.flags.at("inner_loss_increasing"));

  RunResult broken = flat;
  broken.grad_norm.clear();
  CHECK_THROWS_AS(convergence_probe(broken, eps), InvalidArgument);
  broken = flat;
  broken.inner_traces[0].dual.pop_back();
  CHECK_THROWS_AS(convergence_probe(broken, eps), InvalidArgument);
}
