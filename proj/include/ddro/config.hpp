#pragma once

#include <openssl/sha.h>
#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddro/error.hpp"
#include "ddro/experiment.hpp"

namespace ddro {

/// Config parse or validation failure; `where` is "file:line:col" when known.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& where, const std::string& what)
      : Error(where.empty() ? what : where + ": " + what), where(where) {}
  std::string where;
};

inline const char* reset_name(ResetMode r) { return r == ResetMode::reset ? "reset" : "continuous"; }
inline const char* optimizer_name(OuterOptimizer o) { return o == OuterOptimizer::adam ? "adam" : "sgd"; }
inline const char* select_name(ReturnRule r) { return r == ReturnRule::uniform ? "uniform" : "last"; }
inline const char* arch_name(PredictorArch a) { return a == PredictorArch::rnn ? "rnn" : "mlp"; }
inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline ExperimentConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw InvalidArgument("unknown preset '" + name + "' (expected desk or paper)");
}

namespace detail {

inline std::string mark_str(const std::string& file, const YAML::Mark& m) {
  if (m.is_null()) return file;
  return file + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

/// A mapping node whose keys must all be consumed.
class Section {
 public:
  Section(YAML::Node node, std::string path, const std::string& file) : node_(std::move(node)), path_(std::move(path)), file_(file) {
    if (!node_.IsMap()) fail(node_, "'" + path_ + "' must be a mapping");
  }

  bool has(const std::string& key) const { return static_cast<bool>(node_[key]); }

  template <class T>
  void get(const std::string& key, T& out) {
    YAML::Node n = take(key);
    if (!n) return;
    out = as<T>(n, key);
  }

  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    YAML::Node n = take(key);
    if (!n) return;
    if (n.IsNull()) {
      out.reset();
      return;
    }
    out = as<T>(n, key);
  }

  template <class T>
  void get(const std::string& key, std::vector<T>& out) {
    YAML::Node n = take(key);
    if (!n) return;
    if (!n.IsSequence()) fail(n, "'" + qualified(key) + "' must be a list");
    out.clear();
    for (const auto& e : n) out.push_back(as<T>(e, key));
  }

  /// Enum-valued key parsed through `parse`.
  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse&& parse) {
    YAML::Node n = take(key);
    if (!n) return;
    const std::string s = as<std::string>(n, key);
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(n, std::string("'") + qualified(key) + "': " + e.what());
    }
  }

  Section sub(const std::string& key) {
    YAML::Node n = take(key);
    return Section(n, qualified(key), file_);
  }

  YAML::Node take(const std::string& key) {
    used_.insert(key);
    return node_[key];
  }

  /// Rejects keys nobody asked for.
  void finish() const {
    for (const auto& kv : node_) {
      const std::string k = kv.first.as<std::string>();
      if (!used_.count(k)) fail(kv.first, "unknown key '" + qualified(k) + "'");
    }
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[noreturn]] void fail(const YAML::Node& n, const std::string& what) const {
    throw ConfigError(mark_str(file_, n.Mark()), what);
  }
  const std::string& file() const { return file_; }
  const YAML::Node& node() const { return node_; }

 private:
  template <class T>
  T as(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(n, "'" + qualified(key) + "' must be a scalar");
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        const std::string s = n.Scalar();
        if (!s.empty() && s[0] == '-') fail(n, "'" + qualified(key) + "' must be non-negative");
      }
      return n.as<T>();
    } catch (const YAML::BadConversion&) {
      fail(n, "'" + qualified(key) + "' has an invalid value '" + n.Scalar() + "'");
    }
  }

  YAML::Node node_;
  std::string path_;
  std::string file_;
  std::set<std::string> used_;
};

inline void read_synth(Section s, SynthSpec& out) {
  s.get("length", out.length);
  s.get("level", out.level);
  s.get("trend", out.trend);
  s.get("innovation_sigma", out.innovation_sigma);
  s.get("ar_coef", out.ar_coef);
  s.get("shift_start", out.shift_start);
  s.get("shift_level", out.shift_level);
  s.get("shift_amplitude_scale", out.shift_amplitude_scale);
  s.get("interval", out.interval);
  if (s.has("seasonal")) {
    YAML::Node list = s.take("seasonal");
    if (!list.IsSequence()) s.fail(list, "'" + s.qualified("seasonal") + "' must be a list");
    out.seasonal.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      Section e(list[i], s.qualified("seasonal") + "[" + std::to_string(i) + "]", s.file());
      Seasonal sea;
      e.get("period", sea.period);
      e.get("amplitude", sea.amplitude);
      e.get("phase", sea.phase);
      e.finish();
      out.seasonal.push_back(sea);
    }
  }
  s.finish();
  try {
    out.validate();
  } catch (const Error& e) {
    s.fail(s.node(), e.what());
  }
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal().string();
}

/// `tmpl` supplies defaults when the entry does not name a file.
inline SeriesSource read_source(Section s, const SeriesSource& tmpl, const std::filesystem::path& base) {
  SeriesSource out = tmpl;
  s.get("name", out.name);
  if (s.has("csv")) {
    YAML::Node n = s.take("csv");
    out.csv = resolve_path(n.as<std::string>(), base);
    out.synth.reset();
    if (!std::filesystem::exists(out.csv)) s.fail(n, "file '" + out.csv + "' does not exist");
  }
  if (s.has("synth")) {
    if (!out.csv.empty()) s.fail(s.node(), "'" + s.qualified("synth") + "' and csv are mutually exclusive");
    SynthSpec spec = out.synth.value_or(SynthSpec{});
    read_synth(s.sub("synth"), spec);
    out.synth = spec;
  }
  if (out.name.empty()) s.fail(s.node(), "'" + s.qualified("name") + "' is required");
  if (!out.synth && out.csv.empty()) s.fail(s.node(), "series '" + out.name + "' needs a synth block or a csv path");
  s.finish();
  return out;
}

inline NoiseBlock read_noise(Section s) {
  NoiseBlock nb;
  s.get_enum("kind", nb.base.kind, parse_noise_kind);
  s.get("sigma", nb.base.sigma);
  s.get("octaves", nb.base.octaves);
  s.get("amplitude", nb.base.amplitude);
  s.get("wavelength", nb.base.wavelength);
  s.get("ratio", nb.base.ratio);
  s.get("fill", nb.base.fill);
  s.get("levels", nb.levels);
  s.finish();
  return nb;
}

/// Position of the dotted key a validation message starts with, if the
/// document sets it.
inline YAML::Mark key_mark(const YAML::Node& node, const std::string& key) {
  if (!node.IsMap()) return YAML::Mark::null_mark();
  const std::size_t dot = key.find('.');
  const std::size_t space = key.find(' ');
  const std::string head = key.substr(0, std::min(dot, space));
  const YAML::Node child = node[head];
  if (!child) return YAML::Mark::null_mark();
  if (dot == std::string::npos || dot > space) return child.Mark();
  return key_mark(child, key.substr(dot + 1));
}

}  // namespace detail

/// Parses a YAML experiment document. A top-level `preset` key picks the
/// base (desk when absent); every other key overrides it. Relative csv
/// paths are taken from `base_dir`.
inline ExperimentConfig parse_config(const std::string& text, const std::string& file = "<config>",
                                     const std::filesystem::path& base_dir = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(detail::mark_str(file, e.mark), e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  detail::Section top(root, "", file);

  std::string base = "desk";
  top.get("preset", base);
  ExperimentConfig c;
  try {
    c = preset(base);
  } catch (const Error& e) {
    top.fail(root["preset"], e.what());
  }

  top.get("name", c.name);
  top.get("seed", c.seed);
  top.get("output", c.output);
  top.get("samples", c.samples);
  if (top.has("methods")) {
    YAML::Node list = top.take("methods");
    if (!list.IsSequence()) top.fail(list, "'methods' must be a list");
    c.methods.clear();
    for (const auto& m : list) {
      try {
        c.methods.push_back(parse_method(m.as<std::string>()));
      } catch (const Error& e) {
        top.fail(m, e.what());
      }
    }
  }
  if (top.has("diffusion")) {
    auto s = top.sub("diffusion");
    s.get("T", c.diffusion.T);
    s.get("beta_min", c.diffusion.beta_min);
    s.get("beta_max", c.diffusion.beta_max);
    s.get("sigma", c.diffusion.sigma);
    s.get("tuned_steps", c.diffusion.tuned_steps);
    s.get("hidden", c.diffusion.hidden);
    s.get("time_frequencies", c.diffusion.time_frequencies);
    if (s.has("train")) {
      auto t = s.sub("train");
      t.get("steps", c.diffusion.train.steps);
      t.get("batch", c.diffusion.train.batch);
      t.get("lr", c.diffusion.train.lr);
      t.finish();
    }
    s.finish();
  }
  if (top.has("inner")) {
    auto s = top.sub("inner");
    s.get("iterations", c.inner.iterations);
    s.get("epsilon", c.inner.epsilon);
    s.get("eta", c.inner.eta);
    s.get("kappa", c.inner.kappa);
    s.get("mu0", c.inner.mu0);
    s.get_enum("surrogate", c.inner.surrogate, [](const std::string& v) {
      if (v == "ppo") return Surrogate::ppo;
      if (v == "policy_gradient") return Surrogate::policy_gradient;
      throw InvalidArgument("expected ppo or policy_gradient");
    });
    s.get_enum("reset", c.inner.reset, [](const std::string& v) {
      if (v == "continuous") return ResetMode::continuous;
      if (v == "reset") return ResetMode::reset;
      throw InvalidArgument("expected continuous or reset");
    });
    s.get("lr", c.inner.lr);
    s.get("batch", c.inner.batch);
    s.get("updates", c.inner.updates);
    s.get("constraint_batch", c.inner.constraint_batch);
    s.get("reward_baseline", c.inner.reward_baseline);
    s.get("trace_samples", c.inner.trace_samples);
    s.finish();
  }
  if (top.has("outer")) {
    auto s = top.sub("outer");
    s.get("iterations", c.outer.iterations);
    s.get("epochs", c.outer.epochs);
    s.get_enum("optimizer", c.outer.optimizer, [](const std::string& v) {
      if (v == "adam") return OuterOptimizer::adam;
      if (v == "sgd") return OuterOptimizer::sgd;
      throw InvalidArgument("expected adam or sgd");
    });
    s.get("lr", c.outer.lr);
    s.get("batch", c.outer.batch);
    s.get_enum("select", c.outer.select, [](const std::string& v) {
      if (v == "last") return ReturnRule::last;
      if (v == "uniform") return ReturnRule::uniform;
      throw InvalidArgument("expected last or uniform");
    });
    s.finish();
  }
  if (top.has("predictor")) {
    auto s = top.sub("predictor");
    s.get("window", c.predictor.spec.window);
    s.get("horizon", c.predictor.spec.horizon);
    s.get("hidden", c.predictor.spec.hidden);
    s.get_enum("arch", c.predictor.spec.arch, parse_predictor_arch);
    s.get_enum("activation", c.predictor.spec.activation, [](const std::string& v) {
      if (v == "tanh") return Activation::tanh;
      if (v == "relu") return Activation::relu;
      throw InvalidArgument("expected tanh or relu");
    });
    s.get("pretrain_epochs", c.predictor.pretrain_epochs);
    s.get("pretrain_batch", c.predictor.pretrain_batch);
    s.get("pretrain_lr", c.predictor.pretrain_lr);
    s.finish();
  }
  if (top.has("data")) {
    auto s = top.sub("data");
    s.get("stride", c.data.stride);
    s.get("validation", c.data.validation);
    s.get("test", c.data.test);
    if (s.has("train")) c.data.train = detail::read_source(s.sub("train"), c.data.train, base_dir);
    if (s.has("tests")) {
      YAML::Node list = s.take("tests");
      if (!list.IsSequence()) s.fail(list, "'data.tests' must be a list");
      c.data.tests.clear();
      for (std::size_t i = 0; i < list.size(); ++i) {
        // a test series starts from the training spec, so shifts are stated as differences
        c.data.tests.push_back(detail::read_source(detail::Section(list[i], "data.tests[" + std::to_string(i) + "]", file),
                                                   SeriesSource{"", c.data.train.synth, ""}, base_dir));
      }
    }
    s.finish();
  }
  if (top.has("noise")) {
    YAML::Node list = top.take("noise");
    if (!list.IsSequence()) top.fail(list, "'noise' must be a list");
    c.noise.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      c.noise.push_back(detail::read_noise(detail::Section(list[i], "noise[" + std::to_string(i) + "]", file)));
    }
  }
  if (top.has("wdro")) {
    auto s = top.sub("wdro");
    s.get("budget", c.wdro.budget);
    s.get("steps", c.wdro.steps);
    s.get("step_size", c.wdro.step_size);
    s.finish();
  }
  if (top.has("kldro")) {
    auto s = top.sub("kldro");
    s.get("budget", c.kl_budget);
    s.finish();
  }
  if (top.has("sweep")) {
    auto s = top.sub("sweep");
    s.get("epsilon", c.epsilon_sweep);
    s.finish();
  }
  top.finish();

  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(detail::mark_str(file, detail::key_mark(root, e.what())), e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path, std::filesystem::path(path).parent_path());
}

inline nlohmann::ordered_json synth_json(const SynthSpec& s) {
  nlohmann::ordered_json j;
  j["length"] = s.length;
  j["level"] = s.level;
  j["trend"] = s.trend;
  auto& sea = j["seasonal"] = nlohmann::ordered_json::array();
  for (const auto& x : s.seasonal) sea.push_back({{"period", x.period}, {"amplitude", x.amplitude}, {"phase", x.phase}});
  j["innovation_sigma"] = s.innovation_sigma;
  j["ar_coef"] = s.ar_coef;
  j["shift_start"] = s.shift_start;
  j["shift_level"] = s.shift_level;
  j["shift_amplitude_scale"] = s.shift_amplitude_scale;
  j["interval"] = s.interval;
  return j;
}

inline nlohmann::ordered_json source_json(const SeriesSource& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  if (s.synth) j["synth"] = synth_json(*s.synth);
  if (!s.csv.empty()) j["csv"] = s.csv;
  return j;
}

/// Every setting spelled out, in a fixed key order. Also the input of the
/// config hash.
inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  auto& ms = j["methods"] = nlohmann::ordered_json::array();
  for (Method m : c.methods) ms.push_back(method_name(m));
  j["output"] = c.output;
  j["samples"] = c.samples;
  auto& d = j["diffusion"];
  d["T"] = c.diffusion.T;
  d["beta_min"] = c.diffusion.beta_min;
  d["beta_max"] = c.diffusion.beta_max;
  d["sigma"] = c.diffusion.sigma ? nlohmann::ordered_json(*c.diffusion.sigma) : nlohmann::ordered_json(nullptr);
  d["tuned_steps"] = c.diffusion.tuned_steps;
  d["hidden"] = c.diffusion.hidden;
  d["time_frequencies"] = c.diffusion.time_frequencies;
  d["train"] = {{"steps", c.diffusion.train.steps}, {"batch", c.diffusion.train.batch}, {"lr", c.diffusion.train.lr}};
  auto& in = j["inner"];
  in["iterations"] = c.inner.iterations;
  in["epsilon"] = c.inner.epsilon;
  in["eta"] = c.inner.eta;
  in["kappa"] = c.inner.kappa;
  in["mu0"] = c.inner.mu0;
  in["surrogate"] = surrogate_name(c.inner.surrogate);
  in["reset"] = reset_name(c.inner.reset);
  in["lr"] = c.inner.lr;
  in["batch"] = c.inner.batch;
  in["updates"] = c.inner.updates;
  in["constraint_batch"] = c.inner.constraint_batch;
  in["reward_baseline"] = c.inner.reward_baseline;
  in["trace_samples"] = c.inner.trace_samples;
  auto& o = j["outer"];
  o["iterations"] = c.outer.iterations;
  o["epochs"] = c.outer.epochs;
  o["optimizer"] = optimizer_name(c.outer.optimizer);
  o["lr"] = c.outer.lr;
  o["batch"] = c.outer.batch;
  o["select"] = select_name(c.outer.select);
  auto& p = j["predictor"];
  p["window"] = c.predictor.spec.window;
  p["horizon"] = c.predictor.spec.horizon;
  p["hidden"] = c.predictor.spec.hidden;
  p["arch"] = arch_name(c.predictor.spec.arch);
  p["activation"] = activation_name(c.predictor.spec.activation);
  p["pretrain_epochs"] = c.predictor.pretrain_epochs;
  p["pretrain_batch"] = c.predictor.pretrain_batch;
  p["pretrain_lr"] = c.predictor.pretrain_lr;
  auto& da = j["data"];
  da["stride"] = c.data.stride;
  da["validation"] = c.data.validation;
  da["test"] = c.data.test;
  da["train"] = source_json(c.data.train);
  auto& ts = da["tests"] = nlohmann::ordered_json::array();
  for (const auto& t : c.data.tests) ts.push_back(source_json(t));
  auto& nz = j["noise"] = nlohmann::ordered_json::array();
  for (const auto& nb : c.noise) {
    nz.push_back({{"kind", noise_name(nb.base.kind)},
                  {"sigma", nb.base.sigma},
                  {"octaves", nb.base.octaves},
                  {"amplitude", nb.base.amplitude},
                  {"wavelength", nb.base.wavelength},
                  {"ratio", nb.base.ratio},
                  {"fill", nb.base.fill},
                  {"levels", nb.levels}});
  }
  j["wdro"] = {{"budget", c.wdro.budget}, {"steps", c.wdro.steps}, {"step_size", c.wdro.step_size}};
  j["kldro"] = {{"budget", c.kl_budget}};
  j["sweep"] = {{"epsilon", c.epsilon_sweep}};
  return j;
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md);
  std::ostringstream os;
  for (unsigned char b : md) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(config_json(c).dump()); }

/// Identity of the benchmark a run was evaluated on: data, noise battery
/// and window shape, without seed, method or optimization settings.
/// Bundles can only be compared in a report when these match.
inline std::string benchmark_id(const ExperimentConfig& c) {
  nlohmann::ordered_json j = config_json(c);
  nlohmann::ordered_json b;
  b["data"] = j["data"];
  b["noise"] = j["noise"];
  b["window"] = j["predictor"]["window"];
  b["horizon"] = j["predictor"]["horizon"];
  return sha256_hex(b.dump()).substr(0, 16);
}

}  // namespace ddro
