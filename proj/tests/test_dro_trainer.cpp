#include <catch_amalgamated.hpp>

#include <cmath>

#include "ddro/baselines.hpp"
#include "ddro/trainer.hpp"

using namespace ddro;
using Catch::Approx;

namespace {

struct Fixture {
  NoiseSchedule sched = build_schedule(10, 1e-4, 0.2, 0.3, StepSet::last(3));
  Dataset train;
  ScoreModel reference;
  TrainInputs in;

  Fixture() {
    SynthSpec s;
    s.length = 80;
    s.seasonal = {Seasonal{12.0, 1.0, 0.0}};
    s.innovation_sigma = 0.1;
    train = windowize(synth_generate(s, 1), 4, 1, 1);
    reference = ScoreModel(ScoreModelSpec{5, {16}, 2}, 10, 3);
    in.train = &train;
    in.reference = &reference;
    in.sched = &sched;
    in.initial = DecisionModel(PredictorSpec{4, 1, {8}}, 5);
    in.map = DataMap::fit(to_matrix(train));
    train_score_model(reference, in.map.to_model(to_matrix(train)), sched,
                      DiffusionTrainConfig{.steps = 150, .batch = 32, .lr = 3e-3, .seed = 1});
  }

  DdroConfig config() const {
    DdroConfig c;
    c.inner.ppo.tuned_steps = 3;
    c.inner.ppo.iterations = 2;
    c.inner.batch = 16;
    c.inner.updates = 1;
    c.inner.adam.lr = 1e-3;
    c.dual = DualState{1.0, 0.01, 0.5};
    c.outer.iterations = 3;
    c.outer.epochs = 1;
    c.outer.batch = 16;
    c.seed = 9;
    return c;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("adversarial dataset sampling") {
  const Fixture& f = fixture();
  const Dataset one = sample_adversarial_dataset(f.reference, f.sched, 1, 4, 4);
  REQUIRE(one.size() == 1);
  CHECK(one[0].window.size() == 4);
  CHECK(one[0].horizon.size() == 1);

  const Dataset a = sample_adversarial_dataset(f.reference, f.sched, 50, 4, 4);
  const Dataset b = sample_adversarial_dataset(f.reference, f.sched, 50, 4, 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].window == b[i].window);
    CHECK(a[i].horizon == b[i].horizon);
  }

  // two independent seeds agree on the mean of the generated horizon
  const std::size_t n = 4000;
  const Dataset c = sample_adversarial_dataset(f.reference, f.sched, n, 11, 4);
  const Dataset d = sample_adversarial_dataset(f.reference, f.sched, n, 12, 4);
  double mc = 0.0, md = 0.0, vc = 0.0, vd = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mc += c[i].horizon[0] / n;
    md += d[i].horizon[0] / n;
  }
  for (std::size_t i = 0; i < n; ++i) {
    vc += (c[i].horizon[0] - mc) * (c[i].horizon[0] - mc) / n;
    vd += (d[i].horizon[0] - md) * (d[i].horizon[0] - md) / n;
  }
  CHECK(std::abs(mc - md) < 3.0 * std::sqrt((vc + vd) / n));

  CHECK_THROWS_AS(sample_adversarial_dataset(f.reference, f.sched, 0, 4, 4), InvalidArgument);
  CHECK_THROWS_AS(sample_adversarial_dataset(f.reference, f.sched, 3, 4, 5), ShapeError);
}

TEST_CASE("outer step") {
  // a bias-only predictor is f(w, x) = (w - x)^2 when the window weight is zero
  DecisionModel w(PredictorSpec{1, 1, {}}, 0);
  w.params[0][0] = 0.0;
  w.params[1][0] = 1.0;
  const Dataset s{{{0.0}, {3.0}}};
  const DecisionModel next = outer_step(w, s, 0.1);
  CHECK(next.params[1][0] == Approx(1.4).epsilon(1e-14));
  CHECK(next.params[0][0] == 0.0);

  const DecisionModel same = outer_step(w, s, 0.0);
  CHECK(same.params == w.params);
  CHECK_THROWS_AS(outer_step(w, Dataset{}, 0.1), InvalidArgument);
}

TEST_CASE("batch gradient is the mean of per-sample gradients") {
  const Fixture& f = fixture();
  const DecisionModel& w = f.in.initial;
  Dataset sub(f.train.begin(), f.train.begin() + 12);
  const LossGrad all = loss_and_grad(w, make_batch(sub));
  std::vector<Tensor> acc;
  for (const auto& t : all.grads) acc.emplace_back(t.shape());
  for (const auto& s : sub) {
    const LossGrad one = loss_and_grad(w, make_batch(Dataset{s}));
    for (std::size_t i = 0; i < acc.size(); ++i) {
      for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += one.grads[i][k] / static_cast<double>(sub.size());
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    for (std::size_t k = 0; k < acc[i].size(); ++k) CHECK(std::abs(acc[i][k] - all.grads[i][k]) < 1e-10);
  }

  // the full-batch step uses exactly this gradient
  const DecisionModel next = outer_step(w, sub, 0.05);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    for (std::size_t k = 0; k < acc[i].size(); ++k) {
      CHECK(next.params[i][k] == Approx(w.params[i][k] - 0.05 * all.grads[i][k]).margin(1e-14));
    }
  }
}

TEST_CASE("training runs") {
  const Fixture& f = fixture();
  DdroConfig c = f.config();

  c.outer.iterations = 0;
  const RunResult none = ddro_train(f.in, c);
  CHECK(none.model.params == f.in.initial.params);
  CHECK(none.outer_loss.empty());
  CHECK(none.inner_traces.empty());

  c = f.config();
  const RunResult a = ddro_train(f.in, c);
  const RunResult b = ddro_train(f.in, c);
  CHECK(a.outer_loss.size() == 3);
  CHECK(a.grad_norm.size() == 3);
  CHECK(a.inner_traces.size() == 3);
  CHECK(a.diffusion_iterates.size() == 3);
  CHECK(a.decision_iterates.size() == 3);
  CHECK(a.outer_loss == b.outer_loss);
  CHECK(a.model.params == b.model.params);
  CHECK(a.diffusion_iterates == b.diffusion_iterates);
  for (const auto& tr : a.inner_traces) CHECK(tr.size() == 2);

  // the outer loss is the mean f over the S_j regenerated from the selected iterate
  ScoreModel chosen = f.reference;
  chosen.params = a.diffusion_iterates[1];
  const ReferenceSet z0 = make_reference_set(f.reference, f.sched, f.train.size(), 3, derive_seed(c.seed, 0x20));
  std::vector<std::size_t> rows(f.train.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const Dataset sj = from_matrix(f.in.map.to_data(resample_tail(chosen, f.sched, z0, rows, z0.seed).samples), 4);
  DecisionModel w1 = f.in.initial;
  w1.params = a.decision_iterates[0];
  CHECK(a.outer_loss[1] == Approx(loss_and_grad(w1, make_batch(sj)).loss).epsilon(1e-12));

  // uniform return rule picks one of the iterates
  c.outer.select = ReturnRule::uniform;
  const RunResult u = ddro_train(f.in, c);
  REQUIRE(u.selected >= 1);
  REQUIRE(u.selected <= 3);
  CHECK(u.model.params == u.decision_iterates[u.selected - 1]);
}

TEST_CASE("a frozen adversary reduces to the augmented baseline") {
  const Fixture& f = fixture();
  DdroConfig c = f.config();
  c.inner.ppo.iterations = 0;
  c.dual.mu = 123.0;
  const RunResult frozen = ddro_train(f.in, c);
  BaselineConfig bc;
  bc.run = f.config();
  const RunResult dml = train_baseline(Method::dml, f.in, bc);
  CHECK(frozen.outer_loss == dml.outer_loss);
  CHECK(frozen.grad_norm == dml.grad_norm);
  CHECK(frozen.model.params == dml.model.params);
}

TEST_CASE("a one-sample training set") {
  const Fixture& f = fixture();
  const Dataset single{f.train.front()};
  TrainInputs in = f.in;
  in.train = &single;
  DdroConfig c = f.config();
  const RunResult r = ddro_train(in, c);
  CHECK(r.outer_loss.size() == 3);
  for (double l : r.outer_loss) CHECK(std::isfinite(l));
}

TEST_CASE("mismatched inputs are rejected") {
  const Fixture& f = fixture();
  TrainInputs in = f.in;
  in.initial = DecisionModel(PredictorSpec{3, 1, {8}}, 1);
  CHECK_THROWS_AS(ddro_train(in, f.config()), ShapeError);
  in = f.in;
  in.train = nullptr;
  CHECK_THROWS_AS(ddro_train(in, f.config()), InvalidArgument);
}
