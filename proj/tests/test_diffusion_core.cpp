#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <numbers>

#include "ddro/diffusion.hpp"
#include "ddro/metrics.hpp"

using namespace ddro;
using Catch::Approx;

namespace {

// Predicts a fixed noise value for every row.
struct ConstNoise {
  std::size_t d = 1;
  double value = 0.0;
  std::size_t dim() const { return d; }
  Tensor predict_noise(const Tensor& x, std::span<const std::size_t>) const { return Tensor(x.shape(), value); }
};

// eps_hat(x, t) = a x + b t
struct LinearNoise {
  double a = 0.0, b = 0.0;
  std::size_t dim() const { return 1; }
  Tensor predict_noise(const Tensor& x, std::span<const std::size_t> steps) const {
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = a * x[r] + b * static_cast<double>(steps[r]);
    return out;
  }
};

double product_alpha_bar(std::size_t T, double lo, double hi) {
  double p = 1.0;
  for (std::size_t i = 0; i < T; ++i) p *= 1.0 - (lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(T - 1));
  return p;
}

}  // namespace

TEST_CASE("schedule construction") {
  const NoiseSchedule s = build_schedule(500, 1e-4, 0.02);
  CHECK(s.alpha_bar_at(1) == Approx(1.0 - 1e-4).epsilon(1e-15));
  for (std::size_t t = 2; t <= 500; ++t) {
    CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    CHECK(s.alpha_bar_at(t) > 0.0);
  }
  CHECK(s.beta_at(500) == Approx(0.02));
  CHECK(s.alpha_bar_at(500) == Approx(product_alpha_bar(500, 1e-4, 0.02)).epsilon(1e-12));
  CHECK(s.alpha_bar_at(500) == Approx(6.35e-3).epsilon(0.01));

  const NoiseSchedule one = build_schedule(1, 0.3, 0.5);
  CHECK(one.alpha_bar_at(1) == Approx(0.7).epsilon(1e-15));

  const NoiseSchedule tuned = build_schedule(50, 1e-4, 0.2, 0.3, StepSet::last(15));
  CHECK(tuned.sigma_at(1) == 0.3);
  CHECK(tuned.sigma_at(15) == 0.3);
  CHECK(tuned.sigma_at(16) == Approx(std::sqrt(tuned.beta_at(16))));

  CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 0.02, 1e-4), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 0.02, 0.0, StepSet::last(2)), InvalidArgument);
}

TEST_CASE("forward perturbation") {
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.2);
  const std::vector<double> zero{0.0, 0.0}, xi{0.5, -1.5}, x0{1.0, 2.0};
  const auto pure = forward_perturb(zero, 10, xi, s);
  CHECK(pure[0] == Approx(std::sqrt(1.0 - s.alpha_bar_at(10)) * 0.5));
  CHECK(pure[1] == Approx(std::sqrt(1.0 - s.alpha_bar_at(10)) * -1.5));
  // abar -> 1: first step of a tiny schedule
  const NoiseSchedule tiny = build_schedule(1, 1e-15, 1e-15);
  const auto same = forward_perturb(x0, 1, xi, tiny);
  CHECK(same[0] == Approx(1.0).margin(1e-7));
  CHECK(same[1] == Approx(2.0).margin(1e-7));
  CHECK_THROWS_AS(forward_perturb(x0, 0, xi, s), InvalidArgument);
  CHECK_THROWS_AS(forward_perturb(x0, 51, xi, s), InvalidArgument);

  // linear in (x0, xi)
  const auto a = forward_perturb(x0, 20, xi, s);
  const std::vector<double> x2{3.0, -1.0}, xi2{0.1, 0.2};
  const auto b = forward_perturb(x2, 20, xi2, s);
  const std::vector<double> xs{4.0, 1.0}, xis{0.6, -1.3};
  const auto c = forward_perturb(xs, 20, xis, s);
  CHECK(c[0] == Approx(a[0] + b[0]));
  CHECK(c[1] == Approx(a[1] + b[1]));
}

TEST_CASE("forward perturbation moments") {
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.2);
  Rng rng(3);
  const std::size_t n = 100000;
  const std::vector<double> x0{1.7};
  for (std::size_t t : {1, 10, 50}) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<double> xi{rng.normal()};
      const double v = forward_perturb(x0, t, xi, s)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    const double m_true = std::sqrt(s.alpha_bar_at(t)) * 1.7, v_true = 1.0 - s.alpha_bar_at(t);
    CHECK(std::abs(mean - m_true) < 3.0 * std::sqrt(v_true / n));
    // standard error of a Gaussian sample variance
    CHECK(std::abs(var - v_true) < 3.0 * v_true * std::sqrt(2.0 / n));
  }
}

TEST_CASE("denoising loss") {
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.2);
  const StepSet all = StepSet::last(50);

  // teacher-forced: predict exactly the noise that was drawn
  Tensor x0({64, 1}, 0.4);
  const DsmDraw d = draw_dsm(x0, s, all, 9);
  struct Oracle {
    const DsmDraw* d;
    std::size_t dim() const { return 1; }
    Tensor predict_noise(const Tensor&, std::span<const std::size_t>) const { return d->noise; }
  };
  CHECK(dsm_loss(Oracle{&d}, x0, s, all, 9) == 0.0);

  // zero predictor: mean of xi^2
  Tensor big({20000, 1});
  Rng(1).fill_normal(big.data());
  const double l0 = dsm_loss(ConstNoise{1, 0.0}, big, s, all, 4);
  CHECK(std::abs(l0 - 1.0) < 3.0 * std::sqrt(2.0 / 20000.0));

  // one row, one step, linear model
  const StepSet one(std::vector<std::size_t>{7});
  const Tensor x1({1, 1}, 0.9);
  const DsmDraw d1 = draw_dsm(x1, s, one, 21);
  REQUIRE(d1.steps[0] == 7);
  const double xi = d1.noise[0];
  const double xt = std::sqrt(s.alpha_bar_at(7)) * 0.9 + std::sqrt(1.0 - s.alpha_bar_at(7)) * xi;
  const double resid = xi - (0.3 * xt + 0.01 * 7);
  CHECK(dsm_loss(LinearNoise{0.3, 0.01}, x1, s, one, 21) == Approx(resid * resid).epsilon(1e-12));

  CHECK(dsm_loss(LinearNoise{0.3, 0.01}, big, s, all, 5) == dsm_loss(LinearNoise{0.3, 0.01}, big, s, all, 5));
  CHECK_THROWS_AS(dsm_loss(ConstNoise{}, x1, s, StepSet(), 1), InvalidArgument);
}

TEST_CASE("reverse sampling") {
  const NoiseSchedule s = build_schedule(30, 1e-4, 0.2);
  const ScoreModel m(ScoreModelSpec{2, {8}, 2}, 30, 1);
  const auto a = reverse_sample(m, s, 5, 77);
  const auto b = reverse_sample(m, s, 5, 77);
  CHECK(a.samples == b.samples);

  // zero noise prediction and zero sigma: x_0 = x_T / sqrt(abar_T)
  NoiseSchedule quiet = s;
  quiet.sigma.assign(quiet.T, 0.0);
  const StepSet keep = StepSet::last(30);
  const auto r = reverse_sample(ConstNoise{1, 0.0}, quiet, 4, 5, &keep);
  for (std::size_t i = 0; i < 4; ++i) {
    const double xT = r.trajectories[i].at(30)[0];
    CHECK(r.samples[i] == Approx(xT / std::sqrt(s.alpha_bar_at(30))).epsilon(1e-13));
  }

  // exploding predictor aborts with the step reported
  try {
    reverse_sample(ConstNoise{1, std::numeric_limits<double>::infinity()}, s, 1, 1);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 30") != std::string::npos);
  }
  CHECK_THROWS_AS(reverse_sample(m, s, 0, 1), InvalidArgument);
}

TEST_CASE("trained model reproduces a Gaussian mean") {
  const NoiseSchedule s = build_schedule(50, 1e-4, 0.2);
  // antithetic pairs so the data mean is exactly 2
  Tensor data({4000, 1});
  Rng rng(12);
  for (std::size_t i = 0; i < 4000; i += 2) {
    data[i] = 2.0 + 0.5 * rng.normal();
    data[i + 1] = 4.0 - data[i];
  }
  ScoreModel m(ScoreModelSpec{1, {32, 32}, 4}, 50, 2);
  train_score_model(m, data, s, DiffusionTrainConfig{.steps = 2000, .batch = 256, .lr = 3e-3, .seed = 2});
  train_score_model(m, data, s, DiffusionTrainConfig{.steps = 1500, .batch = 512, .lr = 2e-4, .seed = 102});
  const std::size_t n = 10000;
  const auto r = reverse_sample(m, s, n, 8);
  double sum = 0.0, sq = 0.0;
  for (double v : r.samples.data()) {
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean - 2.0) < 3.0 * sd / std::sqrt(static_cast<double>(n)));

  // the exact Gaussian noise predictor gives the same result
  const AnalyticGaussianPredictor exact(1, 2.0, 0.25, s);
  const auto e = reverse_sample(exact, s, n, 8);
  double es = 0.0;
  for (double v : e.samples.data()) es += v;
  CHECK(std::abs(es / n - 2.0) < 3.0 * 0.5 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("trajectory log probability") {
  NoiseSchedule s = build_schedule(5, 1e-3, 0.1);
  const StepSet steps = StepSet::last(5);

  // states that follow the mean exactly
  const LinearNoise lin{0.2, 0.05};
  Trajectory exact;
  exact.top = 5;
  exact.states.assign(6, {0.0});
  exact.states[5] = {1.3};
  for (std::size_t t = 5; t >= 1; --t) exact.states[t - 1] = {reverse_mean(lin, Tensor({1, 1}, exact.states[t]), t, s)[0]};
  CHECK(traj_log_prob(lin, exact, s, steps) == Approx(0.0).margin(1e-15));

  // one step, sigma 1, residual norm^2 = 2
  NoiseSchedule one = build_schedule(1, 0.1, 0.1);
  one.sigma[0] = 1.0;
  const ConstNoise zero{2, 0.0};
  Trajectory t1;
  t1.top = 1;
  const double k = 1.0 / std::sqrt(one.alpha_at(1));
  t1.states = {{0.5 * k + 1.0, -0.25 * k - 1.0}, {0.5, -0.25}};
  CHECK(traj_log_prob(zero, t1, one, StepSet::last(1)) == Approx(-1.0).epsilon(1e-14));

  // random trajectory against summed Gaussian log densities
  s.set_sigma(steps, 0.3);
  Rng rng(4);
  Trajectory tr;
  tr.top = 5;
  for (int i = 0; i < 6; ++i) tr.states.push_back({rng.normal()});
  double direct = 0.0, norm = 0.0;
  for (std::size_t t = 1; t <= 5; ++t) {
    const double sig = s.sigma_at(t);
    const double mu = (tr.states[t][0] - s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t)) *
                                             (0.2 * tr.states[t][0] + 0.05 * static_cast<double>(t))) /
                      std::sqrt(s.alpha_at(t));
    const double z = (tr.states[t - 1][0] - mu) / sig;
    direct += -0.5 * z * z - std::log(sig) - 0.5 * std::log(2.0 * std::numbers::pi);
    norm += -std::log(sig) - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  const double lp = traj_log_prob(lin, tr, s, steps);
  CHECK(std::abs(lp + norm - direct) < 1e-10);

  // order of the step terms does not matter
  const StepSet shuffled(std::vector<std::size_t>{4, 2, 5, 1, 3});
  CHECK(std::abs(traj_log_prob(lin, tr, s, shuffled) - lp) < 1e-12);

  NoiseSchedule dead = s;
  dead.sigma[2] = 0.0;
  CHECK_THROWS_AS(traj_log_prob(lin, tr, dead, steps), InvalidArgument);
  Trajectory short_tr = tr;
  short_tr.top = 3;
  short_tr.states.resize(4);
  CHECK_THROWS_AS(traj_log_prob(lin, short_tr, s, steps), InvalidArgument);
}

TEST_CASE("graph log probability matches the direct evaluation") {
  const NoiseSchedule s = build_schedule(20, 1e-4, 0.2, 0.3, StepSet::last(6));
  const ScoreModel m(ScoreModelSpec{2, {16}, 3}, 20, 5);
  const StepSet steps = StepSet::last(6);
  const auto r = reverse_sample(m, s, 3, 11, &steps);
  const auto direct = traj_log_probs(m, std::span<const Trajectory>(r.trajectories), s, steps);
  Graph g;
  auto pv = bind_params(g, m.params, "th");
  Var lp = traj_log_prob_graph(g, m, pv, r.trajectories, s, steps);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.value(lp)[i] == Approx(direct[i]).epsilon(1e-12));
}

TEST_CASE("score and noise prediction agree") {
  const NoiseSchedule s = build_schedule(40, 1e-4, 0.2);
  const ScoreModel m(ScoreModelSpec{3, {8, 8}, 2}, 40, 2);
  Tensor x({4, 3});
  Rng(6).fill_normal(x.data());
  for (std::size_t t : {1, 17, 40}) {
    const Tensor sc = score(m, x, t, s);
    const std::vector<std::size_t> steps(4, t);
    const Tensor eps = m.predict_noise(x, steps);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(sc[i] * std::sqrt(1.0 - s.alpha_bar_at(t)) == Approx(-eps[i]).epsilon(1e-13));
    }
  }
}
