// Command-line front end: synth, train (run), perturb, eval, verify, report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddro/bundle.hpp"
#include "ddro/config.hpp"
#include "ddro/ddro.hpp"
#include "ddro/report.hpp"

namespace fs = std::filesystem;
using namespace ddro;

namespace {

struct Common {
  std::string config;
  std::string preset_name;
  std::vector<std::string> methods;
  long long seed = -1;
};

ExperimentConfig resolve(const Common& c) {
  if (!c.config.empty() && !c.preset_name.empty()) throw InvalidArgument("give either --config or --preset, not both");
  ExperimentConfig cfg = c.config.empty() ? preset(c.preset_name.empty() ? "desk" : c.preset_name) : load_config(c.config);
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  if (!c.methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : c.methods) cfg.methods.push_back(parse_method(m));
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "experiment config (YAML)")->check(CLI::ExistingFile);
  app->add_option("-p,--preset", c.preset_name, "built-in preset: desk or paper");
  app->add_option("-s,--seed", c.seed, "override the config seed");
}

Series source_series(const SeriesSource& src, std::uint64_t seed) {
  if (src.synth) return synth_generate(*src.synth, seed);
  return read_series_csv(src.csv);
}

std::string window_csv(const Dataset& d) {
  std::string s;
  if (d.empty()) return s;
  for (std::size_t i = 0; i < d[0].window.size(); ++i) s += "x" + std::to_string(i) + ",";
  for (std::size_t i = 0; i < d[0].horizon.size(); ++i) {
    s += "y" + std::to_string(i) + (i + 1 < d[0].horizon.size() ? "," : "\n");
  }
  for (const auto& x : d) {
    for (double v : x.window) s += fmt_num(v) + ",";
    for (std::size_t i = 0; i < x.horizon.size(); ++i) s += fmt_num(x.horizon[i]) + (i + 1 < x.horizon.size() ? "," : "\n");
  }
  return s;
}

int cmd_synth(const Common& c, const std::string& out) {
  const ExperimentConfig cfg = resolve(c);
  fs::create_directories(out);
  // same stream ids as the experiment, so the files match what a run sees
  write_series_csv(source_series(cfg.data.train, derive_seed(cfg.seed, 0xda7a, 0)), (fs::path(out) / "train.csv").string());
  for (std::size_t i = 0; i < cfg.data.tests.size(); ++i) {
    const auto& t = cfg.data.tests[i];
    write_series_csv(source_series(t, derive_seed(cfg.seed, 0xda7a, i + 1)), (fs::path(out) / (t.name + ".csv")).string());
  }
  std::printf("wrote %zu series to %s\n", cfg.data.tests.size() + 1, out.c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& out, const std::vector<double>& sweep) {
  ExperimentConfig cfg = resolve(c);
  if (!sweep.empty()) cfg.epsilon_sweep = sweep;
  const fs::path dir = out.empty() ? default_bundle_dir(cfg) : fs::path(out);
  const RunSummary s = run_experiment(cfg, dir);
  for (const auto& o : s.outcomes) {
    std::printf("%-16s mean test mse %s%s\n", outcome_tag(o).c_str(), fmt_num(o.mean_test_mse()).c_str(),
                o.error.empty() ? "" : ("  [aborted: " + o.error + "]").c_str());
  }
  std::printf("bundle: %s%s\n", dir.string().c_str(), s.partial ? " (partial)" : "");
  return s.partial ? 3 : 0;
}

int cmd_perturb(const Common& c, const std::string& out) {
  const ExperimentConfig cfg = resolve(c);
  const Experiment e(cfg);
  fs::create_directories(out);
  std::size_t files = 0;
  for (std::size_t di = 0; di < e.tests().size(); ++di) {
    const auto& ds = e.tests()[di];
    write_text(fs::path(out) / (ds.name + "_clean.csv"), window_csv(ds.data));
    ++files;
    if (ds.name == "validation") continue;
    for (std::size_t ni = 0; ni < cfg.noise.size(); ++ni) {
      const auto& nb = cfg.noise[ni];
      for (std::size_t li = 0; li < nb.levels.size(); ++li) {
        const NoiseSpec spec = nb.base.with_level(nb.levels[li]);
        const std::uint64_t s = derive_seed(derive_seed(cfg.seed, 0x9015e, di), ni, li);
        write_text(fs::path(out) / (ds.name + "_" + noise_name(spec.kind) + "_" + fmt_num(nb.levels[li]) + ".csv"),
                   window_csv(apply_noise(ds.data, spec, s)));
        ++files;
      }
    }
  }
  std::printf("wrote %zu window files to %s\n", files, out.c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& model, const std::string& out) {
  const ExperimentConfig cfg = resolve(c);
  const Experiment e(cfg);
  const DecisionModel w = load_model(model);
  if (w.window() != cfg.predictor.spec.window || w.horizon() != cfg.predictor.spec.horizon) {
    throw ShapeError("model window/horizon differ from the config");
  }
  const std::string text = std::string(metrics_header) + metrics_lines(e.evaluate(w, "model", 0.0), false);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

int cmd_verify(long long seed, const std::string& out) {
  const std::uint64_t s = seed < 0 ? 0 : static_cast<std::uint64_t>(seed);
  const NoiseSchedule sched = build_schedule(50, 1e-4, 0.2);
  const GaussianSpec p0{0.5, 0.25};
  LemmaProbeConfig pc;
  pc.seed = s;
  const ProbeReport analytic = lemma1_probe(AnalyticGaussianPredictor(1, p0.mean, p0.var, sched), sched, p0, pc);
  pc.samples = 4000;
  pc.loss_samples = 4000;
  pc.bootstrap = 50;
  DiffusionTrainConfig tc;
  tc.seed = s;
  const std::vector<std::size_t> checkpoints{0, 50, 200, 600, 1500};
  const TrainingTrend tr = lemma1_training_trend(p0, sched, checkpoints, 2000, tc, pc, ScoreModelSpec{1, {32, 32}, 4});

  nlohmann::ordered_json j;
  j["seed"] = s;
  j["analytic"] = probe_json(analytic);
  auto& cps = j["checkpoints"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < tr.steps.size(); ++i) {
    cps.push_back({{"steps", tr.steps[i]}, {"probe", probe_json(tr.probes[i])}});
  }
  j["trend"] = probe_json(tr.trend);
  const double kl = analytic.estimates.at("output_kl").value;
  j["flags"] = {{"analytic_kl_below_0.02", kl < 0.02}, {"kl_tracks_loss", tr.trend.flags.at("kl_tracks_loss")}};
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& bundles, const std::string& out) {
  std::vector<BundleData> data;
  for (const auto& b : bundles) data.push_back(load_bundle(b));
  const Report rep = make_report(data);
  write_report(out, rep);
  std::cout << rep.table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-model-based distributionally robust training of time-series predictors"};
  app.require_subcommand(1);

  Common synth_c, train_c, perturb_c, eval_c;
  std::string synth_out = "data", train_out, perturb_out = "perturbed", eval_model, eval_out, verify_out, report_out = "report";
  std::vector<double> sweep;
  long long verify_seed = 0;
  std::vector<std::string> bundles;

  auto* synth = app.add_subcommand("synth", "write the configured train and test series as CSV");
  add_common(synth, synth_c);
  synth->add_option("-o,--out", synth_out, "output directory");

  auto* train = app.add_subcommand("train", "pretrain, run the configured methods and write a result bundle");
  train->alias("run");
  add_common(train, train_c);
  train->add_option("-m,--method", train_c.methods, "methods to run (overrides the config)");
  train->add_option("--sweep", sweep, "epsilon values for a D-DRO sweep (overrides the config)");
  train->add_option("-o,--out", train_out, "bundle directory (default: <output root>/<name>/seed-<seed>)");

  auto* perturb = app.add_subcommand("perturb", "write clean and perturbed test windows");
  add_common(perturb, perturb_c);
  perturb->add_option("-o,--out", perturb_out, "output directory");

  auto* eval = app.add_subcommand("eval", "evaluate a saved predictor on the configured test sets");
  add_common(eval, eval_c);
  eval->add_option("-w,--model", eval_model, "model file from a bundle's models/ directory")->required()->check(CLI::ExistingFile);
  eval->add_option("-o,--out", eval_out, "metrics CSV (default: stdout)");

  auto* verify = app.add_subcommand("verify", "run the output-distribution probes on a 1-d Gaussian");
  verify->add_option("-s,--seed", verify_seed, "probe seed");
  verify->add_option("-o,--out", verify_out, "probe JSON (default: stdout)");

  auto* report = app.add_subcommand("report", "tables and plot data from result bundles");
  report->add_option("bundles", bundles, "bundle directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("-o,--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return cmd_synth(synth_c, synth_out);
    if (*train) return cmd_train(train_c, train_out, sweep);
    if (*perturb) return cmd_perturb(perturb_c, perturb_out);
    if (*eval) return cmd_eval(eval_c, eval_model, eval_out);
    if (*verify) return cmd_verify(verify_seed, verify_out);
    if (*report) return cmd_report(bundles, report_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
