#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ddro/error.hpp"
#include "ddro/rng.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

struct Series {
  std::vector<double> values;
  std::string interval = "hourly";
  std::string source = "synthetic";

  std::size_t size() const { return values.size(); }
};

struct SequenceSample {
  std::vector<double> window;
  std::vector<double> horizon;
};

using Dataset = std::vector<SequenceSample>;

struct Seasonal {
  double period = 24.0;
  double amplitude = 1.0;
  double phase = 0.0;
};

/// Knobs of the synthetic generator. From `shift_start` on (when non-zero)
/// seasonal amplitudes are scaled by `shift_amplitude_scale` and the level
/// moves by `shift_level`.
struct SynthSpec {
  std::size_t length = 512;
  double level = 0.0;
  double trend = 0.0;
  std::vector<Seasonal> seasonal{Seasonal{}};
  double innovation_sigma = 0.0;
  double ar_coef = 0.0;
  std::size_t shift_start = 0;
  double shift_level = 0.0;
  double shift_amplitude_scale = 1.0;
  std::string interval = "hourly";
  std::string source = "synthetic";

  void validate() const {
    if (length < 1) throw InvalidArgument("synthetic series length must be positive");
    for (const auto& s : seasonal) {
      if (!(s.period > 0.0)) throw InvalidArgument("seasonal period must be positive");
    }
    if (!(innovation_sigma >= 0.0)) throw InvalidArgument("innovation sigma must be non-negative");
    if (!(std::abs(ar_coef) < 1.0)) throw InvalidArgument("AR coefficient must lie in (-1, 1)");
    if (!(shift_amplitude_scale >= 0.0)) throw InvalidArgument("shift amplitude scale must be non-negative");
  }
};

/// level + trend t + sum_k A_k sin(2 pi t / P_k + phi_k) + AR(1) innovations,
/// with an optional regime shift.
inline Series synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Series s;
  s.interval = spec.interval;
  s.source = spec.source;
  s.values.resize(spec.length);
  double innov = 0.0;
  for (std::size_t i = 0; i < spec.length; ++i) {
    const double t = static_cast<double>(i);
    const bool shifted = spec.shift_start > 0 && i >= spec.shift_start;
    const double amp_scale = shifted ? spec.shift_amplitude_scale : 1.0;
    double v = spec.level + spec.trend * t + (shifted ? spec.shift_level : 0.0);
    for (const auto& sea : spec.seasonal) {
      v += amp_scale * sea.amplitude * std::sin(2.0 * std::numbers::pi * t / sea.period + sea.phase);
    }
    if (spec.innovation_sigma > 0.0) {
      innov = spec.ar_coef * innov + spec.innovation_sigma * rng.normal();
      v += innov;
    }
    s.values[i] = v;
  }
  return s;
}

/// Sliding windows at offsets 0, stride, 2 stride, ... while window and
/// horizon fit.
inline Dataset windowize(const Series& series, std::size_t l_in, std::size_t l_out, std::size_t stride) {
  if (l_in < 1 || l_out < 1 || stride < 1) throw InvalidArgument("window, horizon and stride must be >= 1");
  if (series.size() < l_in + l_out) {
    throw InvalidArgument("series of length " + std::to_string(series.size()) + " is shorter than window + horizon (" +
                          std::to_string(l_in + l_out) + ")");
  }
  const std::size_t count = (series.size() - l_in - l_out) / stride + 1;
  Dataset out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto first = series.values.begin() + static_cast<std::ptrdiff_t>(k * stride);
    SequenceSample s;
    s.window.assign(first, first + static_cast<std::ptrdiff_t>(l_in));
    s.horizon.assign(first + static_cast<std::ptrdiff_t>(l_in), first + static_cast<std::ptrdiff_t>(l_in + l_out));
    out.push_back(std::move(s));
  }
  return out;
}

/// Rows [window, horizon].
inline Tensor to_matrix(const Dataset& data) {
  if (data.empty()) throw InvalidArgument("empty dataset");
  const std::size_t li = data.front().window.size(), lo = data.front().horizon.size();
  Tensor m({data.size(), li + lo});
  for (std::size_t r = 0; r < data.size(); ++r) {
    if (data[r].window.size() != li || data[r].horizon.size() != lo) throw ShapeError("ragged dataset");
    auto row = m.row(r);
    std::copy(data[r].window.begin(), data[r].window.end(), row.begin());
    std::copy(data[r].horizon.begin(), data[r].horizon.end(), row.begin() + static_cast<std::ptrdiff_t>(li));
  }
  return m;
}

/// Splits each row into the first l_in values (window) and the rest.
inline Dataset from_matrix(const Tensor& m, std::size_t l_in) {
  if (l_in == 0 || l_in >= m.cols()) throw ShapeError("window length must leave room for a horizon");
  Dataset out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    out[r].window.assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(l_in));
    out[r].horizon.assign(row.begin() + static_cast<std::ptrdiff_t>(l_in), row.end());
  }
  return out;
}

/// Min-max transform fitted on one series and reused on others.
struct MinMaxScaler {
  double lo = 0.0;
  double hi = 1.0;

  static MinMaxScaler fit(const std::vector<double>& v) {
    if (v.empty()) throw InvalidArgument("cannot fit a scaler on an empty series");
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    if (!(*mx > *mn)) throw InvalidArgument("cannot fit a scaler on a constant series");
    return {*mn, *mx};
  }

  double apply(double x) const { return (x - lo) / (hi - lo); }
  double invert(double y) const { return lo + y * (hi - lo); }

  Series transform(Series s) const {
    for (double& v : s.values) v = apply(v);
    return s;
  }
};

enum class NoiseKind { gaussian, perlin, cutout };

inline const char* noise_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::gaussian: return "gaussian";
    case NoiseKind::perlin: return "perlin";
    case NoiseKind::cutout: return "cutout";
  }
  return "?";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "gaussian") return NoiseKind::gaussian;
  if (s == "perlin") return NoiseKind::perlin;
  if (s == "cutout") return NoiseKind::cutout;
  throw InvalidArgument("unknown noise kind '" + s + "'");
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::gaussian;
  double sigma = 0.1;
  std::size_t octaves = 8;
  double amplitude = 1.0;
  double wavelength = 16.0;  // lowest-octave wavelength, in samples
  double ratio = 0.3;
  double fill = 1.0;

  void validate() const {
    switch (kind) {
      case NoiseKind::gaussian:
        if (!(sigma >= 0.0)) throw InvalidArgument("gaussian sigma must be non-negative");
        break;
      case NoiseKind::perlin:
        if (octaves < 1) throw InvalidArgument("perlin needs at least one octave");
        if (!(amplitude >= 0.0)) throw InvalidArgument("perlin amplitude must be non-negative");
        if (!(wavelength > 0.0)) throw InvalidArgument("perlin wavelength must be positive");
        break;
      case NoiseKind::cutout:
        if (!(ratio >= 0.0 && ratio <= 1.0)) throw InvalidArgument("cutout ratio must lie in [0,1]");
        break;
    }
  }

  /// The strength knob swept in robustness curves.
  double level() const {
    switch (kind) {
      case NoiseKind::gaussian: return sigma;
      case NoiseKind::perlin: return amplitude;
      case NoiseKind::cutout: return ratio;
    }
    return 0.0;
  }

  NoiseSpec with_level(double v) const {
    NoiseSpec s = *this;
    switch (kind) {
      case NoiseKind::gaussian: s.sigma = v; break;
      case NoiseKind::perlin: s.amplitude = v; break;
      case NoiseKind::cutout: s.ratio = v; break;
    }
    return s;
  }
};

/// 1-d gradient noise on a seeded 256-cell lattice.
class PerlinNoise1D {
 public:
  explicit PerlinNoise1D(std::uint64_t seed) {
    Rng rng(seed);
    for (double& g : gradients_) g = rng.uniform(-1.0, 1.0);
  }

  /// Single octave; |value| <= 0.5.
  double operator()(double x) const {
    const double fl = std::floor(x);
    const double f = x - fl;
    const auto i0 = static_cast<std::size_t>(static_cast<std::int64_t>(fl) & 255);
    const std::size_t i1 = (i0 + 1) & 255;
    const double a = gradients_[i0] * f;
    const double b = gradients_[i1] * (f - 1.0);
    const double u = f * f * f * (f * (f * 6.0 - 15.0) + 10.0);
    return a + u * (b - a);
  }

  /// Octaves with doubling frequency and halving amplitude.
  double octaves(double x, std::size_t count) const {
    double v = 0.0, amp = 1.0, freq = 1.0;
    for (std::size_t o = 0; o < count; ++o) {
      v += amp * (*this)(x * freq);
      amp *= 0.5;
      freq *= 2.0;
    }
    return v;
  }

 private:
  std::array<double, 256> gradients_{};
};

/// Additive Perlin fields for `count` windows of length `len`, one lattice
/// offset per window, rescaled jointly so max |field| equals the amplitude.
inline std::vector<std::vector<double>> perlin_fields(std::size_t count, std::size_t len, const NoiseSpec& spec,
                                                      std::uint64_t seed) {
  PerlinNoise1D noise(derive_seed(seed, 0x9e71));
  Rng rng(derive_seed(seed, 0x0ff5));
  std::vector<std::vector<double>> fields(count, std::vector<double>(len));
  double peak = 0.0;
  for (auto& f : fields) {
    const double offset = rng.uniform(0.0, 256.0);
    for (std::size_t i = 0; i < len; ++i) {
      f[i] = noise.octaves(offset + static_cast<double>(i) / spec.wavelength, spec.octaves);
      peak = std::max(peak, std::abs(f[i]));
    }
  }
  const double k = peak > 0.0 ? spec.amplitude / peak : 0.0;
  for (auto& f : fields) {
    for (double& v : f) v *= k;
  }
  return fields;
}

/// Number of window positions a cutout of `ratio` masks.
inline std::size_t cutout_count(double ratio, std::size_t len) {
  const double raw = ratio * static_cast<double>(len);
  // 0.3 * 10 is 3.0000000000000004 in binary floating point.
  return std::min(len, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

/// Perturbs windows only; horizons, size and order are preserved.
inline Dataset apply_noise(Dataset data, const NoiseSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (data.empty()) return data;
  switch (spec.kind) {
    case NoiseKind::gaussian: {
      if (spec.sigma == 0.0) return data;
      Rng rng(seed);
      for (auto& s : data) {
        for (double& v : s.window) v += spec.sigma * rng.normal();
      }
      break;
    }
    case NoiseKind::perlin: {
      const auto fields = perlin_fields(data.size(), data.front().window.size(), spec, seed);
      for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t i = 0; i < data[r].window.size(); ++i) data[r].window[i] += fields[r][i];
      }
      break;
    }
    case NoiseKind::cutout: {
      Rng rng(seed);
      for (auto& s : data) {
        const std::size_t len = s.window.size();
        const std::size_t m = cutout_count(spec.ratio, len);
        std::vector<std::size_t> idx(len);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < m; ++i) {
          std::swap(idx[i], idx[i + rng.index(len - i)]);
          s.window[idx[i]] = spec.fill;
        }
      }
      break;
    }
  }
  return data;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

/// Reads a two-column `timestamp,value` CSV with a header row.
inline Series read_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument(path + ": empty file");
  if (detail::trim(line) != "timestamp,value") {
    throw InvalidArgument(path + ":1: expected header 'timestamp,value'");
  }
  Series s;
  s.source = path;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": expected two comma-separated columns");
    }
    const std::string field = detail::trim(line.substr(comma + 1));
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(field, &used);
      if (used != field.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": cannot parse value '" + field + "'");
    }
    if (!std::isfinite(v)) throw InvalidArgument(path + ":" + std::to_string(lineno) + ": non-finite value");
    s.values.push_back(v);
  }
  if (s.values.empty()) throw InvalidArgument(path + ": no data rows");
  return s;
}

/// Writes integer step indices as timestamps.
inline void write_series_csv(const Series& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << "timestamp,value\n";
  out.precision(17);
  for (std::size_t i = 0; i < s.size(); ++i) out << i << ',' << s.values[i] << '\n';
}

}  // namespace ddro
