#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/error.hpp"
#include "margin_lab/matrix.hpp"
#include "margin_lab/rng.hpp"

namespace margin_lab {

/// h(t) = (sqrt(1 - t^2) + t (pi - arccos t)) / pi, with t clamped to [-1, 1].
inline double arccos_step(double t) {
  t = std::clamp(t, -1.0, 1.0);
  return (std::sqrt(1.0 - t * t) + t * (std::numbers::pi - std::acos(t))) / std::numbers::pi;
}

/// h composed (depth - 1) times.
inline double compose_arccos(double t, std::size_t depth) {
  for (std::size_t i = 1; i < depth; ++i) t = arccos_step(t);
  return t;
}

/// Kernel with the sigma^{2L} prefactor divided out.
inline double normalized_kernel(std::span<const double> x, std::span<const double> y,
                                std::size_t depth) {
  if (depth < 1) throw ConfigError("kernel: depth must be at least 1");
  if (x.size() != y.size()) throw ConfigError("kernel: input dimensions differ");
  return compose_arccos(dot(x, y) / static_cast<double>(x.size()), depth);
}

/// Compositional arccosine kernel sigma^{2L} h^{L-1}(x^T x' / d0).
inline double kernel(std::span<const double> x, std::span<const double> y, std::size_t depth,
                     double sigma) {
  return std::pow(sigma, 2.0 * static_cast<double>(depth)) * normalized_kernel(x, y, depth);
}

/// Normalized Gram matrix of the rows of `x`; exactly symmetric.
inline Matrix normalized_gram(const Matrix& x, std::size_t depth) {
  if (depth < 1) throw ConfigError("kernel: depth must be at least 1");
  Matrix g = matmul_transpose_b(x, x);
  const double d0 = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = compose_arccos(g(i, j) / d0, depth);
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

/// Normalized cross-Gram: entry (i, j) pairs row i of `a` with row j of `b`.
inline Matrix normalized_cross_gram(const Matrix& a, const Matrix& b, std::size_t depth) {
  if (depth < 1) throw ConfigError("kernel: depth must be at least 1");
  Matrix g = matmul_transpose_b(a, b);
  const double d0 = static_cast<double>(a.cols());
  for (auto& v : g.values()) v = compose_arccos(v / d0, depth);
  return g;
}

/// Interpolating NN-GP posterior for binary labels scaled by gamma.
///
/// Only the sigma-free Gram matrix is factorized; sigma enters at prediction.
struct GpModel {
  std::size_t depth = 1;
  double sigma = 1.0;
  double gamma = 1.0;
  Matrix inputs;
  std::vector<double> labels;
  CholeskyFactor factor;
  std::vector<double> solve;  ///< normalized Gram^{-1} Y

  std::size_t size() const noexcept { return labels.size(); }
  double sigma_power() const { return std::pow(sigma, static_cast<double>(depth)); }
  double normalized_margin() const { return gamma / sigma_power(); }
};

inline GpModel fit_gp(const Matrix& inputs, std::span<const double> labels, std::size_t depth,
                      double sigma, double gamma, CholeskyOptions chol = {}) {
  if (depth < 1) throw ConfigError("fit_gp: depth must be at least 1");
  if (!(sigma > 0.0) || !(gamma > 0.0)) throw ConfigError("fit_gp: sigma and gamma must be positive");
  if (inputs.rows() != labels.size() || labels.empty()) {
    throw ConfigError("fit_gp: " + std::to_string(inputs.rows()) + " inputs vs " +
                      std::to_string(labels.size()) + " labels");
  }
  for (double y : labels) {
    if (y != 1.0 && y != -1.0) throw ConfigError("fit_gp: labels must be +1 or -1");
  }
  GpModel m;
  m.depth = depth;
  m.sigma = sigma;
  m.gamma = gamma;
  m.inputs = inputs;
  m.labels.assign(labels.begin(), labels.end());
  m.factor = cholesky(normalized_gram(inputs, depth), chol);
  m.solve = cholesky_solve(m.factor.lower, m.labels);
  return m;
}

inline GpModel fit_gp(const Matrix& inputs, std::span<const int> labels, std::size_t depth,
                      double sigma, double gamma, CholeskyOptions chol = {}) {
  std::vector<double> y(labels.begin(), labels.end());
  return fit_gp(inputs, y, depth, sigma, gamma, chol);
}

/// C1 and C2 of the normalized posterior, plus the scaled mean and variance.
struct PosteriorAtPoint {
  double c1 = 0.0;
  double c2 = 0.0;
  double mean = 0.0;      ///< gamma * C1
  double variance = 0.0;  ///< sigma^{2L} * C2
};

inline constexpr double kVarianceTolerance = 1e-8;

namespace detail {

inline double clamp_variance(double c2) {
  if (c2 < -kVarianceTolerance) {
    std::ostringstream msg;
    msg << "posterior variance " << c2 << " is below -" << kVarianceTolerance;
    throw NumericalError(msg.str());
  }
  return std::max(c2, 0.0);
}

inline PosteriorAtPoint scale_posterior(const GpModel& m, double c1, double c2) {
  PosteriorAtPoint p;
  p.c1 = c1;
  p.c2 = clamp_variance(c2);
  p.mean = m.gamma * c1;
  const double sp = m.sigma_power();
  p.variance = sp * sp * p.c2;
  return p;
}

}  // namespace detail

inline PosteriorAtPoint posterior_at(const GpModel& m, std::span<const double> x) {
  if (x.size() != m.inputs.cols()) throw ConfigError("posterior_at: input dimension mismatch");
  std::vector<double> k(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) k[i] = normalized_kernel(x, m.inputs.row(i), m.depth);
  const double c1 = dot(k, m.solve);
  const auto v = solve_lower(m.factor.lower, k);
  const double c2 = normalized_kernel(x, x, m.depth) - dot(v, v);
  return detail::scale_posterior(m, c1, c2);
}

/// Posterior at every row of `x`, using blocked solves.
inline std::vector<PosteriorAtPoint> posterior_batch(const GpModel& m, const Matrix& x) {
  if (x.cols() != m.inputs.cols()) throw ConfigError("posterior_batch: input dimension mismatch");
  const Matrix cross = normalized_cross_gram(m.inputs, x, m.depth);  // n x t
  const Matrix v = solve_lower(m.factor.lower, cross);
  std::vector<double> quad(x.rows(), 0.0);
  std::vector<double> c1(x.rows(), 0.0);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const auto vi = v.row(i);
    const auto ki = cross.row(i);
    const double si = m.solve[i];
    for (std::size_t j = 0; j < vi.size(); ++j) {
      quad[j] += vi[j] * vi[j];
      c1[j] += ki[j] * si;
    }
  }
  std::vector<PosteriorAtPoint> out(x.rows());
  for (std::size_t j = 0; j < x.rows(); ++j) {
    const double self = normalized_kernel(x.row(j), x.row(j), m.depth);
    out[j] = detail::scale_posterior(m, c1[j], self - quad[j]);
  }
  return out;
}

/// One draw of the average of m posterior samples, N(gamma C1, sigma^{2L} C2 / m).
struct EnsembleDraw {
  double draw = 0.0;
  int sign = 0;  ///< +1 or -1; ties go to +1
};

inline EnsembleDraw ensemble_draw(const PosteriorAtPoint& p, std::size_t m, SeededRng& rng) {
  if (m < 1) throw ConfigError("ensemble_predict: m must be at least 1");
  const double z = rng.normal();
  EnsembleDraw d;
  d.draw = p.mean + std::sqrt(p.variance / static_cast<double>(m)) * z;
  d.sign = d.draw >= 0.0 ? 1 : -1;
  return d;
}

inline EnsembleDraw ensemble_predict(const GpModel& model, std::span<const double> x,
                                     std::size_t m, SeededRng& rng) {
  return ensemble_draw(posterior_at(model, x), m, rng);
}

/// Posterior with gamma and sigma replaced, reusing C1 and C2.
inline PosteriorAtPoint rescale_posterior(const PosteriorAtPoint& p, std::size_t depth,
                                          double sigma, double gamma) {
  PosteriorAtPoint q = p;
  q.mean = gamma * p.c1;
  const double sp = std::pow(sigma, static_cast<double>(depth));
  q.variance = sp * sp * p.c2;
  return q;
}

/// Model dump for audit: L, sigma, gamma, n, jitter and the solve vector.
inline nlohmann::json to_json(const GpModel& m) {
  return {{"depth", m.depth},         {"sigma", m.sigma},   {"gamma", m.gamma},
          {"n", m.size()},            {"jitter", m.factor.jitter},
          {"normalized_margin", m.normalized_margin()}, {"solve", m.solve}};
}

}  // namespace margin_lab
