#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/dataset.hpp"
#include "margin_lab/error.hpp"
#include "margin_lab/format.hpp"
#include "margin_lab/matrix.hpp"
#include "margin_lab/network.hpp"

namespace margin_lab {

/// Binary: f(x) * y. k-way: f(x)_y - max_{i != y} f(x)_i.
inline double margin(std::span<const double> output, int label, bool binary) {
  if (binary) {
    if (output.size() != 1) throw ConfigError("margin: binary task needs one output");
    if (label != 1 && label != -1) {
      throw ConfigError("margin: binary label must be +1 or -1, got " + std::to_string(label));
    }
    return output[0] * label;
  }
  if (label < 0 || static_cast<std::size_t>(label) >= output.size()) {
    throw ConfigError("margin: label " + std::to_string(label) + " out of range for " +
                      std::to_string(output.size()) + " outputs");
  }
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (static_cast<int>(i) != label) best_other = std::max(best_other, output[i]);
  }
  return output[static_cast<std::size_t>(label)] - best_other;
}

inline double margin(const Mlp& net, std::span<const double> x, int label, bool binary) {
  Matrix row(1, x.size(), std::vector<double>(x.begin(), x.end()));
  const Matrix out = predict(net, row);
  return margin(out.row(0), label, binary);
}

/// Fraction of rows with positive margin.
inline double accuracy(const Matrix& outputs, std::span<const int> labels, bool binary) {
  if (outputs.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < outputs.rows(); ++i) {
    if (margin(outputs.row(i), labels[i], binary) > 0.0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.rows());
}

inline double accuracy(const Mlp& net, const Task& task) {
  return accuracy(predict(net, task.inputs), task.labels, task.binary);
}

/// Reference weights M_l, fixed before training.
struct ReferenceNet {
  std::vector<Matrix> layers;

  static ReferenceNet from(const Mlp& net) { return {net.weights}; }
  static ReferenceNet zeros_like(const Mlp& net) {
    ReferenceNet r;
    for (const auto& w : net.weights) r.layers.emplace_back(w.rows(), w.cols());
    return r;
  }
};

struct SpectralComplexity {
  double value = 0.0;
  std::vector<double> spectral_norms;   ///< ||W_l||_sigma
  std::vector<double> distance_norms;   ///< ||W_l^T - M_l^T||_{2,1}
  bool converged = true;
};

inline constexpr std::uint64_t kSpectralSeed = 0x5EC7A1ull;

/// (prod_l ||W_l||_sigma) * (sum_l ||W_l^T - M_l^T||_{2,1}^{2/3} / ||W_l||_sigma^{2/3})^{3/2}
inline SpectralComplexity spectral_complexity(const Mlp& net, const ReferenceNet& ref,
                                              SpectralOptions opts = {}) {
  if (ref.layers.size() != net.depth()) throw ConfigError("spectral_complexity: depth mismatch");
  SpectralComplexity out;
  SeededRng rng(kSpectralSeed);
  double product = 1.0;
  double sum = 0.0;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    const auto& w = net.weights[l];
    const auto& m = ref.layers[l];
    if (m.rows() != w.rows() || m.cols() != w.cols()) {
      throw ConfigError("spectral_complexity: reference layer " + std::to_string(l + 1) +
                        " is " + m.shape_string() + ", network layer is " + w.shape_string());
    }
    SeededRng layer_rng = rng.split(l);
    const auto sn = spectral_norm(w, opts, layer_rng);
    if (!(sn.value > 0.0)) {
      throw NumericalError("spectral_complexity: layer " + std::to_string(l + 1) +
                           " has zero spectral norm");
    }
    out.converged = out.converged && sn.converged;
    const double dist = two_one_norm(transpose(w - m));
    out.spectral_norms.push_back(sn.value);
    out.distance_norms.push_back(dist);
    product *= sn.value;
    sum += std::cbrt(dist * dist) / std::cbrt(sn.value * sn.value);
  }
  out.value = product * std::pow(sum, 1.5);
  return out;
}

/// Per-example margins of a network on a task.
struct MarginReport {
  std::vector<double> raw;
  std::vector<double> frobenius;
  std::vector<double> spectral;
  std::vector<std::uint8_t> correct;
  std::vector<std::uint8_t> clean;
  double spectral_complexity = 0.0;
  double frobenius_factor = 1.0;  ///< prod_l sqrt(d_l) / ||W_l||_F

  std::size_t size() const noexcept { return raw.size(); }
};

/// Margins of `net` on every row of `task`. Spectral norms are computed once
/// per layer; the input factor sqrt(d0)/||x||_2 is applied per example.
inline MarginReport report(const Mlp& net, const Task& task, const ReferenceNet& ref,
                           SpectralOptions opts = {}) {
  const auto sc = spectral_complexity(net, ref, opts);
  MarginReport r;
  r.spectral_complexity = sc.value;
  r.frobenius_factor = frobenius_denominator_inverse(net);
  const Matrix out = predict(net, task.inputs);
  const double root_d0 = std::sqrt(static_cast<double>(task.inputs.cols()));
  const std::size_t n = task.size();
  r.raw.resize(n);
  r.frobenius.resize(n);
  r.spectral.resize(n);
  r.correct.resize(n);
  r.clean = task.clean;
  if (r.clean.size() != n) r.clean.assign(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = margin(out.row(i), task.labels[i], task.binary);
    const double input_factor = root_d0 / norm2(task.inputs.row(i));
    r.raw[i] = g;
    r.frobenius[i] = g * r.frobenius_factor * input_factor;
    r.spectral[i] = g / sc.value * input_factor;
    r.correct[i] = g > 0.0 ? 1 : 0;
  }
  return r;
}

enum class MarginKind { raw, frobenius, spectral };
enum class MarginFilter { all, correct_only, clean_only };

inline std::string to_string(MarginKind k) {
  switch (k) {
    case MarginKind::raw: return "raw";
    case MarginKind::frobenius: return "frob";
    case MarginKind::spectral: return "spectral";
  }
  return "raw";
}

inline std::string to_string(MarginFilter f) {
  switch (f) {
    case MarginFilter::all: return "all";
    case MarginFilter::correct_only: return "correct-only";
    case MarginFilter::clean_only: return "clean-only";
  }
  return "all";
}

inline MarginKind parse_margin_kind(const std::string& s) {
  if (s == "raw") return MarginKind::raw;
  if (s == "frob") return MarginKind::frobenius;
  if (s == "spectral") return MarginKind::spectral;
  throw ConfigError("margin kind must be raw, frob or spectral");
}

inline MarginFilter parse_margin_filter(const std::string& s) {
  if (s == "all") return MarginFilter::all;
  if (s == "correct-only") return MarginFilter::correct_only;
  if (s == "clean-only") return MarginFilter::clean_only;
  throw ConfigError("margin filter must be all, correct-only or clean-only");
}

inline std::vector<double> select_margins(const MarginReport& r, MarginKind kind,
                                          MarginFilter filter) {
  const auto& src = kind == MarginKind::raw         ? r.raw
                    : kind == MarginKind::frobenius ? r.frobenius
                                                    : r.spectral;
  std::vector<double> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (filter == MarginFilter::correct_only && !r.correct[i]) continue;
    if (filter == MarginFilter::clean_only && !r.clean[i]) continue;
    out.push_back(src[i]);
  }
  return out;
}

/// Empirical CDF: sorted values with cumulative fractions (i+1)/n.
struct Cdf {
  std::vector<double> values;
  std::vector<double> fractions;

  std::size_t size() const noexcept { return values.size(); }
};

inline Cdf empirical_cdf(std::vector<double> values) {
  if (values.empty()) throw ConfigError("empirical_cdf: no values");
  std::sort(values.begin(), values.end());
  Cdf c;
  const double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) c.fractions.push_back(static_cast<double>(i + 1) / n);
  c.values = std::move(values);
  return c;
}

inline Cdf margin_cdf(const MarginReport& r, MarginKind kind, MarginFilter filter) {
  auto v = select_margins(r, kind, filter);
  if (v.empty()) {
    throw ConfigError("margin_cdf: no examples left after filter " + to_string(filter));
  }
  return empirical_cdf(std::move(v));
}

/// Linear-interpolation quantile of sorted values (q in [0, 1]).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ConfigError("quantile: no values");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return sorted[lo] + t * (sorted[hi] - sorted[lo]);
}

inline double median(const Cdf& c) { return quantile_sorted(c.values, 0.5); }

/// W1 distance: integral of |F_a(x) - F_b(x)| over x.
inline double wasserstein1(const Cdf& a, const Cdf& b) {
  std::vector<double> grid = a.values;
  grid.insert(grid.end(), b.values.begin(), b.values.end());
  std::sort(grid.begin(), grid.end());
  auto cdf_at = [](const Cdf& c, double x) {
    const auto it = std::upper_bound(c.values.begin(), c.values.end(), x);
    return static_cast<double>(it - c.values.begin()) / static_cast<double>(c.size());
  };
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const double width = grid[i + 1] - grid[i];
    if (width > 0.0) total += width * std::abs(cdf_at(a, grid[i]) - cdf_at(b, grid[i]));
  }
  return total;
}

struct MarginSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double min = 0.0;
  double max = 0.0;
};

inline MarginSummary summarize(const Cdf& c) {
  MarginSummary s;
  s.count = c.size();
  double total = 0.0;
  for (double v : c.values) total += v;
  s.mean = total / static_cast<double>(c.size());
  s.median = median(c);
  s.q1 = quantile_sorted(c.values, 0.25);
  s.q3 = quantile_sorted(c.values, 0.75);
  s.min = c.values.front();
  s.max = c.values.back();
  return s;
}

/// Distribution summary JSON: median, mean, quartiles, R_w and the filter used.
inline nlohmann::json summary_json(const MarginReport& r, MarginKind kind, MarginFilter filter) {
  const auto s = summarize(margin_cdf(r, kind, filter));
  return {{"kind", to_string(kind)},   {"filter", to_string(filter)}, {"count", s.count},
          {"mean", s.mean},            {"median", s.median},          {"q1", s.q1},
          {"q3", s.q3},                {"min", s.min},                {"max", s.max},
          {"R_w", r.spectral_complexity}};
}

/// CSV with columns example_index, raw_margin, frob_margin, spectral_margin, correct, clean.
inline std::string report_csv(const MarginReport& r) {
  std::string out = "example_index,raw_margin,frob_margin,spectral_margin,correct,clean\n";
  for (std::size_t i = 0; i < r.size(); ++i) {
    out += std::to_string(i) + ',' + format_double(r.raw[i]) + ',' + format_double(r.frobenius[i]) +
           ',' + format_double(r.spectral[i]) + ',' + std::to_string(int{r.correct[i]}) + ',' +
           std::to_string(int{r.clean[i]}) + '\n';
  }
  return out;
}

/// CSV with columns value, cumulative_fraction.
inline std::string cdf_csv(const Cdf& c) {
  std::string out = "value,cumulative_fraction\n";
  for (std::size_t i = 0; i < c.size(); ++i) {
    out += format_double(c.values[i]) + ',' + format_double(c.fractions[i]) + '\n';
  }
  return out;
}

}  // namespace margin_lab
