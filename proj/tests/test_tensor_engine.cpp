#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <limits>

#include "ddro/graph.hpp"
#include "ddro/mlp.hpp"
#include "ddro/optim.hpp"

using namespace ddro;
using Catch::Approx;

namespace {

// tanh from its exponential definition, summed as series
double tanh_series(double x) {
  auto expo = [](double v) {
    double term = 1.0, s = 1.0;
    for (int k = 1; k < 40; ++k) {
      term *= v / k;
      s += term;
    }
    return s;
  };
  const double e2 = expo(2.0 * x);
  return (e2 - 1.0) / (e2 + 1.0);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("forward evaluation on hand cases") {
  Graph g;
  Var x = g.input("x", Tensor::vector({1, 2, 3}));
  CHECK(g.value(x).data() == std::vector<double>{1, 2, 3});

  Graph m;
  Var a = m.input("a", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = m.input("b", Tensor::matrix(2, 1, {1, 1}));
  Var c = m.matmul(a, b);
  CHECK(m.value(c).shape() == Shape{2, 1});
  CHECK(m.value(c).data() == std::vector<double>{3, 7});

  Graph t;
  Var h = t.tanh(t.input("h", Tensor::scalar(0.5)));
  CHECK(t.value(h).item() == Approx(tanh_series(0.5)).epsilon(1e-14));
  CHECK(t.value(h).item() == Approx(0.4621171572600098).epsilon(1e-14));
}

TEST_CASE("forward rejects bad inputs") {
  Graph g;
  Var a = g.input("a", Shape{2, 2});
  Var b = g.input("b", Shape{3, 1});
  CHECK_THROWS_AS(g.matmul(a, b), ShapeError);
  Var s = g.sum(g.log(a));
  CHECK_THROWS_AS(g.forward({{"a", Tensor({3, 2})}}), ShapeError);
  CHECK_THROWS_AS(g.forward({}), InvalidArgument);
  CHECK_THROWS_AS(g.forward({{"a", Tensor({2, 2}, -1.0)}, {"b", Tensor({3, 1})}}), NumericError);
  const auto ev = g.forward({{"a", Tensor({2, 2}, 1.0)}, {"b", Tensor({3, 1})}});
  CHECK(ev[s].item() == 0.0);
}

TEST_CASE("scalar derivatives") {
  Graph g;
  Var x = g.input("x", Tensor::scalar(3.0));
  Var y = g.square(x);
  CHECK(g.backward(y)["x"].item() == Approx(6.0).epsilon(1e-15));

  Graph h;
  Var z = h.input("z", Tensor::scalar(0.0));
  CHECK(h.backward(h.tanh(z))["z"].item() == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("backward needs a forward pass of the same graph") {
  Graph g, other;
  Var x = g.input("x", Shape{1});
  Var y = g.square(x);
  Evaluation empty;
  CHECK_THROWS_AS(g.backward(empty, y), InvalidArgument);
  other.input("x", Tensor::scalar(1.0));
  CHECK_THROWS_AS(g.backward(other.eager_evaluation(), y), InvalidArgument);
  CHECK_THROWS_AS(g.backward(y), InvalidArgument);
}

TEST_CASE("gradients of a two-layer network match central differences") {
  const ParamList params = init_params({3, 5, 2}, 11);
  Rng rng(5);
  Tensor x({4, 3});
  rng.fill_normal(x.data());
  Tensor y({4, 2});
  rng.fill_normal(y.data());

  auto loss_value = [&](const ParamList& p) {
    const Tensor out = mlp_apply(p, x, Activation::tanh);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += (out[i] - y[i]) * (out[i] - y[i]);
    return s / static_cast<double>(out.size());
  };

  Graph g;
  auto pv = bind_params(g, params, "p");
  Var out = mlp_graph(g, pv, g.constant(x), Activation::tanh);
  Var loss = g.mean(g.square(g.sub(out, g.constant(y))));
  CHECK(g.value(loss).item() == Approx(loss_value(params)).epsilon(1e-14));
  const auto grads = collect_grads(g.backward(loss), pv);

  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      ParamList up = params, down = params;
      up[i][j] += h;
      down[i][j] -= h;
      const double fd = (loss_value(up) - loss_value(down)) / (2.0 * h);
      worst = std::max(worst, rel_err(grads[i][j], fd));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(17);
  auto rand_t = [&](Shape s, double lo, double hi) {
    Tensor t(std::move(s));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  };
  const Tensor a0 = rand_t({2, 3}, 0.3, 1.5);
  const Tensor b0 = rand_t({2, 3}, 0.3, 1.5);
  const Tensor m0 = rand_t({3, 2}, -1.0, 1.0);
  const Tensor r0 = rand_t({1, 3}, -1.0, 1.0);
  const Tensor w0 = rand_t({2, 3}, -1.0, 1.0);  // random projection to a scalar

  // builds sum(w * op(a, b, m, r)) so that every element's gradient matters
  using Build = std::function<Var(Graph&, Var, Var, Var, Var)>;
  const std::vector<std::pair<const char*, Build>> ops{
      {"add", [](Graph& g, Var a, Var b, Var, Var) { return g.add(a, b); }},
      {"mul", [](Graph& g, Var a, Var b, Var, Var) { return g.mul(a, b); }},
      {"matmul", [](Graph& g, Var a, Var, Var m, Var) { return g.concat({g.matmul(a, m), g.slice(a, 1, 0, 1)}, 1); }},
      {"tanh", [](Graph& g, Var a, Var, Var, Var) { return g.tanh(a); }},
      {"relu", [](Graph& g, Var a, Var b, Var, Var) { return g.relu(g.sub(a, b)); }},
      {"square", [](Graph& g, Var a, Var, Var, Var) { return g.square(a); }},
      {"exp", [](Graph& g, Var a, Var, Var, Var) { return g.exp(a); }},
      {"log", [](Graph& g, Var a, Var, Var, Var) { return g.log(a); }},
      {"sum", [](Graph& g, Var a, Var, Var, Var) { return g.broadcast(g.sum(g.square(a)), {2, 3}); }},
      {"mean", [](Graph& g, Var a, Var, Var, Var) { return g.broadcast(g.mean(g.exp(a)), {2, 3}); }},
      {"concat", [](Graph& g, Var a, Var b, Var, Var) {
         return g.slice(g.concat({g.square(a), b}, 0), 0, 1, 3);
       }},
      {"broadcast", [](Graph& g, Var a, Var, Var, Var r) { return g.mul(a, g.broadcast(r, {2, 3})); }},
  };
  for (const auto& [name, build] : ops) {
    auto value = [&](const Tensor& a, const Tensor& b, const Tensor& m, const Tensor& r) {
      Graph g;
      Var out = build(g, g.input("a", a), g.input("b", b), g.input("m", m), g.input("r", r));
      return g.value(g.sum(g.mul(out, g.constant(w0)))).item();
    };
    Graph g;
    Var out = build(g, g.input("a", a0), g.input("b", b0), g.input("m", m0), g.input("r", r0));
    const auto grads = g.backward(g.sum(g.mul(out, g.constant(w0)))).by_name();
    double worst = 0.0;
    const double h = 1e-6;
    for (const char* in : {"a", "b", "m", "r"}) {
      Tensor base = grads.at(in);
      for (std::size_t j = 0; j < base.size(); ++j) {
        Tensor a = a0, b = b0, m = m0, r = r0;
        Tensor* p = std::string(in) == "a" ? &a : std::string(in) == "b" ? &b : std::string(in) == "m" ? &m : &r;
        (*p)[j] += h;
        const double up = value(a, b, m, r);
        (*p)[j] -= 2.0 * h;
        const double down = value(a, b, m, r);
        worst = std::max(worst, rel_err(base[j], (up - down) / (2.0 * h)));
      }
    }
    INFO(name);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("fan-out accumulates and reverse mode is linear") {
  Graph g;
  Var x = g.input("x", Tensor::vector({0.3, -0.7}));
  Var f = g.sum(g.tanh(g.mul(x, x)));
  Var twice = g.add(f, f);
  const Tensor gf = g.backward(f)["x"];
  const Tensor g2 = g.backward(twice)["x"];
  for (std::size_t i = 0; i < gf.size(); ++i) CHECK(g2[i] == Approx(2.0 * gf[i]).epsilon(1e-15));

  Var other = g.sum(g.exp(x));
  Var both = g.add(f, other);
  const Tensor go = g.backward(other)["x"];
  const Tensor gb = g.backward(both)["x"];
  for (std::size_t i = 0; i < gf.size(); ++i) CHECK(gb[i] == Approx(gf[i] + go[i]).epsilon(1e-14));
}

TEST_CASE("forward is deterministic") {
  Graph g;
  const ParamList p = init_params({2, 4, 1}, 3);
  auto pv = bind_params(g, p, "w");
  Var x = g.input("x", Shape{5, 2});
  Var y = g.mean(mlp_graph(g, pv, x, Activation::relu));
  Tensor xv({5, 2});
  Rng(9).fill_normal(xv.data());
  const auto e1 = g.forward({{"x", xv}});
  const auto e2 = g.forward({{"x", xv}});
  CHECK(e1[y].item() == e2[y].item());
  CHECK(g.backward(e1, y)["w0"] == g.backward(e2, y)["w0"]);
}

TEST_CASE("adam single steps") {
  ParamList p{Tensor::vector({1.0, -2.0})};
  OptimizerState s(AdamConfig{.lr = 0.01}, p);
  adam_step(p, {Tensor::vector({0.0, 0.0})}, s);
  CHECK(p[0].data() == std::vector<double>{1.0, -2.0});
  CHECK(s.step == 1);

  ParamList q{Tensor::vector({1.0})};
  OptimizerState t(AdamConfig{.lr = 0.01}, q);
  adam_step(q, {Tensor::vector({1.0})}, t);
  // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
  CHECK(q[0][0] == Approx(1.0 - 0.01 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(t.step == 1);

  CHECK_THROWS_AS(adam_step(q, {Tensor::vector({1.0, 2.0})}, t), ShapeError);
  CHECK_THROWS_AS(OptimizerState(AdamConfig{.lr = 0.0}, q), InvalidArgument);
}

TEST_CASE("adam trajectories are reproducible") {
  auto run = [] {
    ParamList p = init_params({3, 2}, 42);
    OptimizerState s(AdamConfig{}, p);
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
      std::vector<Tensor> g;
      for (const auto& t : p) {
        Tensor d(t.shape());
        rng.fill_normal(d.data());
        g.push_back(d);
      }
      adam_step(p, g, s);
    }
    return p;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("init shapes, scale and determinism") {
  const ParamList p = init_params({4, 8, 2}, 7);
  REQUIRE(p.size() == 4);
  CHECK(p[0].shape() == Shape{4, 8});
  CHECK(p[1].shape() == Shape{1, 8});
  CHECK(p[2].shape() == Shape{8, 2});
  CHECK(p[3].shape() == Shape{1, 2});
  const ParamList q = init_params({4, 8, 2}, 7);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == q[i]);

  const ParamList big = init_params({64, 64}, 1);
  double s = 0.0, ss = 0.0;
  for (double v : big[0].data()) {
    s += v;
    ss += v * v;
  }
  const double n = static_cast<double>(big[0].size());
  const double sd = std::sqrt(ss / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 1.0 / 8.0) < 0.2 / 8.0);

  CHECK_THROWS_AS(init_params({4, 0, 2}, 1), InvalidArgument);
  CHECK_THROWS_AS(init_params({4}, 1), InvalidArgument);
}
