#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddro/config.hpp"
#include "ddro/error.hpp"
#include "ddro/experiment.hpp"

namespace ddro {

namespace fs = std::filesystem;

/// Fixed-precision decimal used by every columnar file, so equal doubles
/// always print the same bytes.
inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// DDRO_OUTPUT_ROOT wins over the config's output directory.
inline fs::path output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("DDRO_OUTPUT_ROOT"); env && *env) return env;
  return cfg.output;
}

inline fs::path default_bundle_dir(const ExperimentConfig& cfg) {
  return output_root(cfg) / cfg.name / ("seed-" + std::to_string(cfg.seed));
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed for " + p.string());
}

inline nlohmann::ordered_json model_json(const DecisionModel& w) {
  nlohmann::ordered_json j;
  const auto& s = w.spec();
  j["window"] = s.window;
  j["horizon"] = s.horizon;
  j["hidden"] = s.hidden;
  j["arch"] = arch_name(s.arch);
  j["activation"] = activation_name(s.activation);
  auto& ps = j["params"] = nlohmann::ordered_json::array();
  for (const auto& t : w.params) ps.push_back({{"shape", t.shape()}, {"values", t.data()}});
  return j;
}

inline DecisionModel model_from_json(const nlohmann::json& j) {
  PredictorSpec s;
  s.window = j.at("window").get<std::size_t>();
  s.horizon = j.at("horizon").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.arch = parse_predictor_arch(j.at("arch").get<std::string>());
  s.activation = j.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::tanh;
  DecisionModel w(s, 0);
  const auto& ps = j.at("params");
  if (ps.size() != w.params.size()) throw InvalidArgument("saved model has the wrong number of parameter tensors");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor t(ps[i].at("shape").get<Shape>(), ps[i].at("values").get<std::vector<double>>());
    if (t.shape() != w.params[i].shape()) throw ShapeError("saved parameter " + std::to_string(i) + " has the wrong shape");
    w.params[i] = std::move(t);
  }
  return w;
}

inline DecisionModel load_model(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InvalidArgument("cannot open model file " + p.string());
  return model_from_json(nlohmann::json::parse(in));
}

inline std::string outcome_tag(const MethodOutcome& o) {
  std::string tag = method_name(o.method);
  if (o.sweep) tag += "_eps" + fmt_num(o.epsilon);
  return tag;
}

inline const char* metrics_header = "method,epsilon,sweep,dataset,noise,level,mse\n";

inline std::string metrics_lines(const std::vector<MetricRow>& rows, bool sweep) {
  std::string s;
  for (const auto& r : rows) {
    s += r.method + "," + (r.method == "ddro" ? fmt_num(r.epsilon) : "") + "," + (sweep ? "1" : "0") + "," +
         r.dataset + "," + r.noise + "," + fmt_num(r.level) + "," + fmt_num(r.mse) + "\n";
  }
  return s;
}

inline nlohmann::ordered_json probe_json(const ProbeReport& p) {
  nlohmann::ordered_json j;
  j["probe"] = p.probe;
  auto& e = j["estimates"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : p.estimates) e[k] = {{"value", v.value}, {"stderr", v.stderr_}, {"count", v.count}};
  auto& s = j["slopes"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : p.slopes) s[k] = v;
  auto& f = j["flags"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : p.flags) f[k] = v;
  return j;
}

/// Writes one result bundle. Everything but metadata.json is a function of
/// the config alone.
inline void write_bundle(const fs::path& dir, const ExperimentConfig& cfg, const Experiment& e,
                         const std::vector<MethodOutcome>& outcomes, const std::string& started,
                         const std::string& finished) {
  fs::create_directories(dir / "models");
  bool partial = false;
  nlohmann::ordered_json errors = nlohmann::ordered_json::object();
  for (const auto& o : outcomes) {
    if (!o.error.empty()) {
      partial = true;
      errors[outcome_tag(o)] = o.error;
    }
  }

  nlohmann::ordered_json run;
  run["config_hash"] = config_hash(cfg);
  run["benchmark"] = benchmark_id(cfg);
  run["seed"] = cfg.seed;
  run["status"] = partial ? "partial" : "complete";
  run["errors"] = errors;
  auto& ds = run["datasets"] = nlohmann::ordered_json::array();
  ds.push_back({{"name", "train"}, {"windows", e.train().size()}, {"w1_shift", 0.0}});
  for (const auto& t : e.tests()) ds.push_back({{"name", t.name}, {"windows", t.data.size()}, {"w1_shift", t.shift}});
  run["config"] = config_json(cfg);
  write_text(dir / "run.json", run.dump(2) + "\n");

  nlohmann::ordered_json meta;
  meta["config_hash"] = run["config_hash"];
  meta["seed"] = cfg.seed;
  meta["started"] = started;
  meta["finished"] = finished;
  write_text(dir / "metadata.json", meta.dump(2) + "\n");

  std::string metrics = metrics_header;
  for (const auto& o : outcomes) metrics += metrics_lines(o.metrics, o.sweep);
  write_text(dir / "metrics.csv", metrics);

  std::string outer = "run,epsilon,iteration,outer_loss,grad_norm\n";
  std::string inner = "run,epsilon,iteration,step,constraint,dual,expected_loss\n";
  std::string sweep = "epsilon,mean_test_mse\n";
  nlohmann::ordered_json probes;
  probes["pretrain"] = {{"dsm_final", e.diffusion_trace().empty() ? 0.0 : e.diffusion_trace().back()},
                        {"predictor_final", e.pretrain_trace().empty() ? 0.0 : e.pretrain_trace().back()}};
  auto& runs = probes["runs"] = nlohmann::ordered_json::array();
  for (const auto& o : outcomes) {
    const std::string m = outcome_tag(o);
    const std::string eps = o.method == Method::ddro ? fmt_num(o.epsilon) : "";
    const RunResult& r = o.run;
    for (std::size_t j = 0; j < r.outer_loss.size(); ++j) {
      outer += m + "," + eps + "," + std::to_string(j + 1) + "," + fmt_num(r.outer_loss[j]) + "," +
               fmt_num(r.grad_norm[j]) + "\n";
    }
    for (std::size_t j = 0; j < r.inner_traces.size(); ++j) {
      const auto& tr = r.inner_traces[j];
      for (std::size_t k = 0; k < tr.size(); ++k) {
        inner += m + "," + eps + "," + std::to_string(j + 1) + "," + std::to_string(k + 1) + "," +
                 fmt_num(tr.constraint[k]) + "," + fmt_num(tr.dual[k]) + "," + fmt_num(tr.expected_loss[k]) + "\n";
      }
    }
    if (o.sweep) sweep += fmt_num(o.epsilon) + "," + fmt_num(o.mean_test_mse()) + "\n";
    nlohmann::ordered_json pr;
    pr["run"] = outcome_tag(o);
    pr["selected"] = r.selected;
    pr["convergence"] = o.convergence ? probe_json(*o.convergence) : nlohmann::ordered_json(nullptr);
    runs.push_back(pr);
    write_text(dir / "models" / (outcome_tag(o) + ".json"), model_json(r.model).dump() + "\n");
  }
  write_text(dir / "traces.csv", outer);
  write_text(dir / "inner_traces.csv", inner);
  write_text(dir / "probes.json", probes.dump(2) + "\n");
  if (!cfg.epsilon_sweep.empty()) write_text(dir / "sweep.csv", sweep);
}

struct RunSummary {
  fs::path dir;
  std::vector<MethodOutcome> outcomes;
  bool partial = false;
};

/// Pretraining, every configured method and the epsilon sweep, then the
/// bundle. A method that aborts is kept with its partial result and flagged.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& dir) {
  const std::string started = utc_timestamp();
  Experiment e(cfg);
  e.pretrain();
  RunSummary s;
  s.dir = dir;
  s.outcomes = e.run_all();
  for (const auto& o : s.outcomes) s.partial = s.partial || !o.error.empty();
  write_bundle(dir, cfg, e, s.outcomes, started, utc_timestamp());
  return s;
}

}  // namespace ddro
