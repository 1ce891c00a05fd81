#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddro/baselines.hpp"
#include "ddro/bundle.hpp"
#include "ddro/error.hpp"

namespace ddro {

struct MetricRecord {
  std::string method;
  double epsilon = 0.0;
  bool sweep = false;
  std::string dataset;
  std::string noise;
  double level = 0.0;
  double mse = 0.0;
};

struct BundleData {
  std::string path;
  std::string benchmark;
  std::uint64_t seed = 0;
  std::vector<MetricRecord> metrics;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<MetricRecord> parse_metrics_csv(std::istream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line) || line + "\n" != metrics_header) throw InvalidArgument(what + ": unexpected metrics header");
  std::vector<MetricRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw InvalidArgument(what + ":" + std::to_string(lineno) + ": expected 7 fields");
    try {
      rows.push_back({f[0], f[1].empty() ? 0.0 : std::stod(f[1]), f[2] == "1", f[3], f[4], std::stod(f[5]),
                      std::stod(f[6])});
    } catch (const std::logic_error&) {
      throw InvalidArgument(what + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

inline BundleData load_bundle(const fs::path& dir) {
  std::ifstream rj(dir / "run.json");
  if (!rj) throw InvalidArgument("no run.json in " + dir.string());
  const auto run = nlohmann::json::parse(rj);
  BundleData b;
  b.path = dir.string();
  b.benchmark = run.at("benchmark").get<std::string>();
  b.seed = run.at("seed").get<std::uint64_t>();
  std::ifstream mc(dir / "metrics.csv");
  if (!mc) throw InvalidArgument("no metrics.csv in " + dir.string());
  b.metrics = parse_metrics_csv(mc, (dir / "metrics.csv").string());
  return b;
}

/// Plain-text columnar outputs of a report.
struct Report {
  std::string table;                               // method x dataset, mean, improvement over ml
  std::map<std::string, std::string> noise_curves;  // per noise kind: level x method
  std::string sweep;                               // epsilon, mean test mse
};

namespace detail {

inline int method_rank(const std::string& m) {
  static const std::vector<std::string> order{"ml", "dml", "ddro", "wdro", "kldro"};
  const auto it = std::find(order.begin(), order.end(), m);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double get() const { return sum / static_cast<double>(n); }
};

}  // namespace detail

/// Averages clean and perturbed test MSE over bundles (seeds). Validation
/// rows are left out. All bundles must come from the same benchmark.
inline Report make_report(const std::vector<BundleData>& bundles) {
  if (bundles.empty()) throw InvalidArgument("report needs at least one bundle");
  for (const auto& b : bundles) {
    if (b.benchmark != bundles.front().benchmark) {
      throw InvalidArgument("bundles come from different benchmarks: " + bundles.front().path + " (" +
                            bundles.front().benchmark + ") vs " + b.path + " (" + b.benchmark + ")");
    }
  }
  std::vector<std::string> methods, datasets;
  std::map<std::pair<std::string, std::string>, detail::Mean> clean;
  // per bundle, the mean over datasets, then averaged over bundles
  std::map<std::string, detail::Mean> mean_row;
  std::map<std::string, std::map<std::pair<double, std::string>, detail::Mean>> curves;
  std::map<double, detail::Mean> sweep;

  for (const auto& b : bundles) {
    std::map<std::string, detail::Mean> per_method;
    std::map<double, detail::Mean> per_eps;
    std::map<std::string, std::map<std::pair<double, std::string>, detail::Mean>> per_curve;
    for (const auto& r : b.metrics) {
      if (r.dataset == "validation") continue;
      if (r.sweep) {
        if (r.noise == "clean") per_eps[r.epsilon].add(r.mse);
        continue;
      }
      if (r.noise == "clean") {
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
        if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
        clean[{r.method, r.dataset}].add(r.mse);
        per_method[r.method].add(r.mse);
      } else {
        per_curve[r.noise][{r.level, r.method}].add(r.mse);
      }
    }
    for (const auto& [m, v] : per_method) mean_row[m].add(v.get());
    for (const auto& [e, v] : per_eps) sweep[e].add(v.get());
    for (const auto& [k, c] : per_curve) {
      for (const auto& [key, v] : c) curves[k][key].add(v.get());
    }
    // clean values anchor every curve at level 0
    for (const auto& [m, v] : per_method) {
      for (auto& [k, c] : per_curve) {
        (void)c;
        curves[k][{0.0, m}].add(v.get());
      }
    }
  }
  std::stable_sort(methods.begin(), methods.end(),
                   [](const std::string& a, const std::string& b) { return detail::method_rank(a) < detail::method_rank(b); });

  Report rep;
  std::ostringstream t;
  t << "method";
  for (const auto& d : datasets) t << "," << d;
  t << ",mean,improvement_pct\n";
  const bool have_ml = mean_row.count("ml") > 0;
  for (const auto& m : methods) {
    t << m;
    for (const auto& d : datasets) {
      const auto it = clean.find({m, d});
      t << "," << (it == clean.end() ? "" : fmt_num(it->second.get()));
    }
    const double mean = mean_row[m].get();
    t << "," << fmt_num(mean) << ",";
    if (have_ml && m != "ml") {
      const double ml = mean_row["ml"].get();
      t << fmt_num(100.0 * (ml - mean) / ml);
    }
    t << "\n";
  }
  rep.table = t.str();

  for (const auto& [kind, c] : curves) {
    std::vector<double> levels;
    for (const auto& [key, v] : c) {
      (void)v;
      if (std::find(levels.begin(), levels.end(), key.first) == levels.end()) levels.push_back(key.first);
    }
    std::sort(levels.begin(), levels.end());
    std::ostringstream o;
    o << "level";
    for (const auto& m : methods) o << "," << m;
    o << "\n";
    for (double l : levels) {
      o << fmt_num(l);
      for (const auto& m : methods) {
        const auto it = c.find({l, m});
        o << "," << (it == c.end() ? "" : fmt_num(it->second.get()));
      }
      o << "\n";
    }
    rep.noise_curves[kind] = o.str();
  }

  std::ostringstream s;
  s << "epsilon,mean_test_mse,bundles\n";
  for (const auto& [e, v] : sweep) s << fmt_num(e) << "," << fmt_num(v.get()) << "," << v.n << "\n";
  rep.sweep = s.str();
  return rep;
}

inline void write_report(const fs::path& dir, const Report& rep) {
  fs::create_directories(dir);
  write_text(dir / "table.csv", rep.table);
  for (const auto& [kind, text] : rep.noise_curves) write_text(dir / ("noise_" + kind + ".csv"), text);
  write_text(dir / "sweep.csv", rep.sweep);
}

}  // namespace ddro
