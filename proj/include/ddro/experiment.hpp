#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddro/baselines.hpp"
#include "ddro/data.hpp"
#include "ddro/diffusion.hpp"
#include "ddro/error.hpp"
#include "ddro/inner_max.hpp"
#include "ddro/metrics.hpp"
#include "ddro/predictor.hpp"
#include "ddro/rng.hpp"
#include "ddro/trainer.hpp"

namespace ddro {

struct DiffusionBlock {
  std::size_t T = 50;
  double beta_min = 1e-4;
  double beta_max = 0.2;
  std::optional<double> sigma;  // constant reverse std on the tuned steps; unset = sqrt(beta_t)
  std::size_t tuned_steps = 15;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t time_frequencies = 4;
  DiffusionTrainConfig train;
};

struct InnerBlock {
  std::size_t iterations = 10;
  double epsilon = 0.015;
  double eta = 0.01;
  double kappa = 0.4;
  double mu0 = 1.0;
  Surrogate surrogate = Surrogate::ppo;
  ResetMode reset = ResetMode::continuous;
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t updates = 0;
  std::size_t constraint_batch = 64;
  bool reward_baseline = false;
  std::size_t trace_samples = 0;
};

struct PredictorBlock {
  PredictorSpec spec;
  std::size_t pretrain_epochs = 30;
  std::size_t pretrain_batch = 64;
  double pretrain_lr = 1e-3;
};

/// A named series: synthetic (spec) or read from a CSV file (path).
struct SeriesSource {
  std::string name;
  std::optional<SynthSpec> synth;
  std::string csv;
};

struct DataBlock {
  SeriesSource train;
  std::vector<SeriesSource> tests;
  std::size_t stride = 1;
  // chronological split of the training series, used when no test sets are
  // listed; the validation share is always cut from the end of training
  double validation = 0.0;
  double test = 0.0;
};

struct NoiseBlock {
  NoiseSpec base;
  std::vector<double> levels;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::vector<Method> methods{Method::ml, Method::dml, Method::ddro};
  DiffusionBlock diffusion;
  InnerBlock inner;
  OuterConfig outer;
  std::size_t samples = 0;  // |z0| = |S_j|; 0 = |S0|
  PredictorBlock predictor;
  DataBlock data;
  std::vector<NoiseBlock> noise;
  WdroConfig wdro;
  double kl_budget = 4.0;
  std::vector<double> epsilon_sweep;
  std::string output = "runs";

  void validate() const {
    if (methods.empty() && epsilon_sweep.empty()) throw InvalidArgument("no method to run");
    if (diffusion.T < 1) throw InvalidArgument("diffusion.T must be >= 1");
    if (!(diffusion.beta_min > 0.0 && diffusion.beta_min <= diffusion.beta_max && diffusion.beta_max < 1.0)) {
      throw InvalidArgument("diffusion beta bounds must satisfy 0 < beta_min <= beta_max < 1");
    }
    if (diffusion.sigma && !(*diffusion.sigma > 0.0)) throw InvalidArgument("diffusion.sigma must be positive");
    if (diffusion.tuned_steps < 1 || diffusion.tuned_steps > diffusion.T) {
      throw InvalidArgument("diffusion.tuned_steps must lie in 1..T");
    }
    if (!(inner.kappa > 0.0 && inner.kappa < 1.0)) throw InvalidArgument("inner.kappa must lie in (0,1)");
    if (!(inner.epsilon > 0.0)) throw InvalidArgument("inner.epsilon must be positive");
    if (!(inner.eta > 0.0)) throw InvalidArgument("inner.eta must be positive");
    if (!(inner.mu0 >= 0.0)) throw InvalidArgument("inner.mu0 must be non-negative");
    if (!(inner.lr > 0.0) || !(outer.lr > 0.0)) throw InvalidArgument("learning rates must be positive");
    if (inner.batch < 1 || outer.batch < 1) throw InvalidArgument("batch sizes must be >= 1");
    predictor.spec.validate();
    if (!(wdro.budget >= 0.0)) throw InvalidArgument("wdro.budget must be non-negative");
    if (!(kl_budget > 0.0)) throw InvalidArgument("kldro.budget must be positive");
    for (double e : epsilon_sweep) {
      if (!(e > 0.0)) throw InvalidArgument("sweep epsilons must be positive");
    }
    if (!(data.validation >= 0.0 && data.test >= 0.0 && data.validation + data.test < 1.0)) {
      throw InvalidArgument("data split fractions must be non-negative and sum below 1");
    }
    if (data.tests.empty() && data.test == 0.0) throw InvalidArgument("no test data configured");
    for (const auto& nb : noise) nb.base.validate();
  }
};

/// Defaults sized for a laptop run: T = 50 with beta up to 0.2 so the chain
/// reaches its prior, and learning rates raised to 1e-3.
inline ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.name = "desk";
  c.methods = {Method::ml, Method::dml, Method::ddro, Method::wdro, Method::kldro};
  SynthSpec base;
  base.length = 400;
  base.level = 10.0;
  base.seasonal = {Seasonal{24.0, 3.0, 0.0}, Seasonal{12.0, 1.0, 0.5}};
  base.innovation_sigma = 0.4;
  base.ar_coef = 0.5;
  c.data.train = {"train", base, ""};
  // shifts in volatility and seasonal amplitude; level and trend shifts are
  // left to user configs
  SynthSpec a = base, b = base, d = base;
  a.seasonal[0].amplitude = 4.5;
  a.innovation_sigma = 0.7;
  b.innovation_sigma = 0.9;
  b.ar_coef = 0.2;
  d.innovation_sigma = 0.7;
  d.ar_coef = 0.0;
  c.data.tests = {{"amplitude", a, ""}, {"volatile", b, ""}, {"white", d, ""}};
  // J is per-dimension (about 0.4 at the reference on this data), so the
  // budget sits well above it; the penalty starts small
  c.inner.epsilon = 1.0;
  c.inner.mu0 = 0.01;
  c.inner.updates = 1;
  NoiseBlock gn{NoiseSpec{}, {0.0, 0.05, 0.1, 0.2}};
  NoiseBlock pn{NoiseSpec{.kind = NoiseKind::perlin}, {0.1, 0.2}};
  NoiseBlock cn{NoiseSpec{.kind = NoiseKind::cutout}, {0.1, 0.3}};
  c.noise = {gn, pn, cn};
  c.predictor.spec.window = 24;
  c.predictor.spec.horizon = 1;
  c.predictor.spec.hidden = {32};
  return c;
}

/// The hyperparameters stated for the full-scale study, on the desk data.
inline ExperimentConfig paper_preset() {
  ExperimentConfig c = desk_preset();
  c.name = "paper";
  c.diffusion.T = 500;
  c.diffusion.beta_max = 0.02;
  c.diffusion.sigma = 0.3;
  c.diffusion.tuned_steps = 15;
  c.inner.iterations = 10;
  c.inner.epsilon = 0.015;
  c.inner.eta = 0.01;
  c.inner.mu0 = 1.0;
  c.inner.updates = 0;
  c.inner.kappa = 0.4;
  c.inner.lr = 1e-5;
  c.inner.batch = 64;
  c.outer.iterations = 15;
  c.outer.epochs = 2;
  c.outer.lr = 1e-5;
  c.outer.batch = 64;
  c.wdro.budget = 0.3;
  c.kl_budget = 4.0;
  return c;
}

struct MetricRow {
  std::string method;
  double epsilon = 0.0;  // only meaningful for ddro
  std::string dataset;
  std::string noise;     // "clean" or a noise kind
  double level = 0.0;
  double mse = 0.0;
};

struct MethodOutcome {
  Method method = Method::ml;
  double epsilon = 0.0;
  bool sweep = false;
  RunResult run;
  std::vector<MetricRow> metrics;
  std::optional<ProbeReport> convergence;
  std::string error;  // non-empty when training aborted; metrics then use the partial result

  /// Mean clean MSE over the test sets.
  double mean_test_mse() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& m : metrics) {
      if (m.noise == "clean" && m.dataset != "validation") {
        s += m.mse;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : std::nan("");
  }
};

struct NamedDataset {
  std::string name;
  Dataset data;
  double shift = 0.0;  // W1 between the scaled test and training values
};

/// Owns the data, the pretrained reference diffusion model and the
/// pretrained predictor shared by every method of one experiment.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_data();
    build_schedule_();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Dataset& train() const { return train_; }
  const std::vector<NamedDataset>& tests() const { return tests_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const MinMaxScaler& scaler() const { return scaler_; }

  /// Fits the reference diffusion model and the predictor on S0.
  void pretrain() {
    if (pretrained_) return;
    const std::size_t d = cfg_.predictor.spec.window + cfg_.predictor.spec.horizon;
    ScoreModelSpec ms{d, cfg_.diffusion.hidden, cfg_.diffusion.time_frequencies, Activation::tanh};
    reference_ = ScoreModel(ms, cfg_.diffusion.T, derive_seed(cfg_.seed, 0xd1ff));
    DiffusionTrainConfig tc = cfg_.diffusion.train;
    tc.seed = derive_seed(cfg_.seed, 0xd1f7);
    const Tensor s0 = to_matrix(train_);
    map_ = DataMap::fit(s0);
    diffusion_trace_ = train_score_model(reference_, map_.to_model(s0), sched_, tc);

    predictor_ = DecisionModel(cfg_.predictor.spec, derive_seed(cfg_.seed, 0x9ed));
    OptimizerState opt(AdamConfig{.lr = cfg_.predictor.pretrain_lr}, predictor_.params);
    Rng rng(derive_seed(cfg_.seed, 0x9ee));
    pretrain_trace_ = fit_epochs(predictor_, train_, cfg_.predictor.pretrain_epochs, cfg_.predictor.pretrain_batch,
                                 opt, rng);
    pretrained_ = true;
  }

  const ScoreModel& reference() const { return reference_; }
  const DataMap& data_map() const { return map_; }
  const DecisionModel& predictor() const { return predictor_; }
  const std::vector<double>& diffusion_trace() const { return diffusion_trace_; }
  const std::vector<double>& pretrain_trace() const { return pretrain_trace_; }

  DdroConfig ddro_config(double epsilon) const {
    DdroConfig dc;
    dc.inner.ppo.kappa = cfg_.inner.kappa;
    dc.inner.ppo.tuned_steps = cfg_.diffusion.tuned_steps;
    dc.inner.ppo.iterations = cfg_.inner.iterations;
    dc.inner.ppo.kind = cfg_.inner.surrogate;
    dc.inner.adam.lr = cfg_.inner.lr;
    dc.inner.batch = cfg_.inner.batch;
    dc.inner.updates = cfg_.inner.updates;
    dc.inner.constraint_batch = cfg_.inner.constraint_batch;
    dc.inner.reward_baseline = cfg_.inner.reward_baseline;
    dc.inner.trace_samples = cfg_.inner.trace_samples;
    dc.dual = DualState{cfg_.inner.mu0, cfg_.inner.eta, epsilon};
    dc.outer = cfg_.outer;
    dc.reset = cfg_.inner.reset;
    dc.samples = cfg_.samples;
    dc.seed = derive_seed(cfg_.seed, 0x7a1);
    return dc;
  }

  MethodOutcome run_method(Method m, std::optional<double> epsilon = std::nullopt) {
    pretrain();
    TrainInputs in{&train_, &reference_, &sched_, predictor_, map_};
    MethodOutcome out;
    out.method = m;
    out.epsilon = epsilon.value_or(cfg_.inner.epsilon);
    out.sweep = epsilon.has_value();
    const DdroConfig dc = ddro_config(out.epsilon);
    try {
      if (m == Method::ddro) {
        out.run = ddro_train(in, dc);
      } else {
        BaselineConfig bc{dc, cfg_.wdro, cfg_.kl_budget};
        out.run = train_baseline(m, in, bc);
      }
    } catch (const TrainingAborted& e) {
      out.run = e.partial;
      out.error = e.what();
    }
    if (out.run.iterations() > 0) {
      try {
        out.convergence = convergence_probe(out.run, out.epsilon);
      } catch (const Error&) {
      }
    }
    out.metrics = evaluate(out.run.model, method_name(m), out.epsilon);
    return out;
  }

  /// Clean and perturbed test MSE for one predictor.
  std::vector<MetricRow> evaluate(const DecisionModel& w, const std::string& method, double epsilon) const {
    std::vector<MetricRow> rows;
    for (std::size_t di = 0; di < tests_.size(); ++di) {
      const auto& ds = tests_[di];
      rows.push_back({method, epsilon, ds.name, "clean", 0.0, mse_eval(w, ds.data)});
      if (ds.name == "validation") continue;
      for (std::size_t ni = 0; ni < cfg_.noise.size(); ++ni) {
        const auto& nb = cfg_.noise[ni];
        for (std::size_t li = 0; li < nb.levels.size(); ++li) {
          const NoiseSpec spec = nb.base.with_level(nb.levels[li]);
          const std::uint64_t s = derive_seed(derive_seed(cfg_.seed, 0x9015e, di), ni, li);
          rows.push_back({method, epsilon, ds.name, noise_name(spec.kind), nb.levels[li],
                          mse_eval(w, apply_noise(ds.data, spec, s))});
        }
      }
    }
    return rows;
  }

  /// Every configured method, then the epsilon sweep.
  std::vector<MethodOutcome> run_all() {
    std::vector<MethodOutcome> out;
    for (Method m : cfg_.methods) out.push_back(run_method(m));
    for (double e : cfg_.epsilon_sweep) out.push_back(run_method(Method::ddro, e));
    return out;
  }

 private:
  Series load(const SeriesSource& src, std::uint64_t seed) const {
    if (src.synth) return synth_generate(*src.synth, seed);
    if (src.csv.empty()) throw InvalidArgument("series '" + src.name + "' has neither a synthetic spec nor a path");
    return read_series_csv(src.csv);
  }

  void build_data() {
    const auto& ps = cfg_.predictor.spec;
    Series train = load(cfg_.data.train, derive_seed(cfg_.seed, 0xda7a, 0));
    const std::size_t len = train.size();
    const auto cut = [&](double frac) { return static_cast<std::size_t>(std::floor(frac * static_cast<double>(len))); };
    const std::size_t n_test = cut(cfg_.data.test), n_val = cut(cfg_.data.validation);
    const std::size_t n_train = len - n_test - n_val;
    Series tr = train, va = train, te = train;
    tr.values.assign(train.values.begin(), train.values.begin() + static_cast<std::ptrdiff_t>(n_train));
    va.values.assign(train.values.begin() + static_cast<std::ptrdiff_t>(n_train),
                     train.values.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    te.values.assign(train.values.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), train.values.end());
    scaler_ = MinMaxScaler::fit(tr.values);
    tr = scaler_.transform(tr);
    train_ = windowize(tr, ps.window, ps.horizon, cfg_.data.stride);
    auto add = [&](const std::string& name, const Series& raw) {
      const Series s = scaler_.transform(raw);
      tests_.push_back({name, windowize(s, ps.window, ps.horizon, cfg_.data.stride), wasserstein1(tr.values, s.values)});
    };
    if (n_val > 0) add("validation", va);
    if (n_test > 0) add(cfg_.data.train.name + "_test", te);
    for (std::size_t i = 0; i < cfg_.data.tests.size(); ++i) {
      add(cfg_.data.tests[i].name, load(cfg_.data.tests[i], derive_seed(cfg_.seed, 0xda7a, i + 1)));
    }
  }

  void build_schedule_() {
    const auto& db = cfg_.diffusion;
    sched_ = db.sigma ? build_schedule(db.T, db.beta_min, db.beta_max, *db.sigma, StepSet::last(db.tuned_steps))
                      : build_schedule(db.T, db.beta_min, db.beta_max);
  }

  ExperimentConfig cfg_;
  Dataset train_;
  std::vector<NamedDataset> tests_;
  MinMaxScaler scaler_;
  NoiseSchedule sched_;
  bool pretrained_ = false;
  ScoreModel reference_;
  DataMap map_;
  DecisionModel predictor_;
  std::vector<double> diffusion_trace_;
  std::vector<double> pretrain_trace_;
};

}  // namespace ddro
