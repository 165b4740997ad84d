#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "margin_lab/error.hpp"
#include "margin_lab/rng.hpp"

namespace margin_lab {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: " + std::to_string(data_.size()) + " entries for shape " +
                        std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ConfigError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  Matrix& operator*=(double c) noexcept {
    for (auto& v : data_) v *= c;
    return *this;
  }
  Matrix& operator+=(const Matrix& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  friend Matrix operator*(double c, Matrix m) { return m *= c; }
  friend Matrix operator*(Matrix m, double c) { return m *= c; }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }

  bool operator==(const Matrix&) const = default;

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void require_same_shape(const Matrix& other, const char* op) const {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
      throw ConfigError(std::string("Matrix ") + op + ": shape " + shape_string() + " vs " +
                        other.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const EigenRowMajor> view(const Matrix& m) {
  return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<EigenRowMajor> view(Matrix& m) {
  return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

inline void require_dims(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ConfigError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                      b.shape_string());
  }
}

}  // namespace detail

inline bool all_finite(const Matrix& m) noexcept {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!all_finite(m)) throw NumericalError(what + ": non-finite entry");
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require_dims(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  if (a.cols() > 0) detail::view(out).noalias() = detail::view(a) * detail::view(b);
  require_finite(out, "matmul");
  return out;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
  detail::require_dims(a.cols() == b.cols(), "matmul_transpose_b", a, b);
  Matrix out(a.rows(), b.rows());
  if (a.cols() > 0) detail::view(out).noalias() = detail::view(a) * detail::view(b).transpose();
  require_finite(out, "matmul_transpose_b");
  return out;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
  detail::require_dims(a.rows() == b.rows(), "matmul_transpose_a", a, b);
  Matrix out(a.cols(), b.cols());
  if (a.rows() > 0) detail::view(out).noalias() = detail::view(a).transpose() * detail::view(b);
  require_finite(out, "matmul_transpose_a");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

inline double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

inline double frobenius_norm(const Matrix& a) { return norm2(a.values()); }

/// Sum over columns of each column's Euclidean norm.
inline double two_one_norm(const Matrix& a) {
  std::vector<double> col_sq(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) col_sq[c] += row[c] * row[c];
  }
  double total = 0.0;
  for (double s : col_sq) total += std::sqrt(s);
  return total;
}

struct SpectralOptions {
  double tol = 1e-9;
  std::size_t max_iter = 1000;
};

struct SpectralNorm {
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Largest singular value by power iteration on a^T a.
///
/// Stops when the relative change of the Rayleigh estimate ||a v||^2 drops
/// below `opts.tol`; otherwise returns the last estimate with converged=false.
inline SpectralNorm spectral_norm(const Matrix& a, SpectralOptions opts, SeededRng& rng) {
  if (!(opts.tol > 0.0)) throw ConfigError("spectral_norm: tol must be positive");
  SpectralNorm result;
  if (a.empty()) {
    result.converged = true;
    return result;
  }
  std::vector<double> v = gaussian_sample(rng, a.cols());
  double vn = norm2(v);
  for (auto& x : v) x /= vn;

  std::vector<double> av(a.rows());
  double previous = -1.0;
  for (std::size_t it = 1; it <= opts.max_iter; ++it) {
    for (std::size_t r = 0; r < a.rows(); ++r) av[r] = dot(a.row(r), v);
    const double rayleigh = dot(av, av);
    result.value = std::sqrt(rayleigh);
    result.iterations = it;
    if (rayleigh == 0.0) {
      result.converged = true;
      return result;
    }
    if (previous >= 0.0 && std::abs(rayleigh - previous) < opts.tol * rayleigh) {
      result.converged = true;
      return result;
    }
    previous = rayleigh;
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const auto row = a.row(r);
      for (std::size_t c = 0; c < a.cols(); ++c) v[c] += row[c] * av[r];
    }
    vn = norm2(v);
    for (auto& x : v) x /= vn;
  }
  return result;
}

inline SpectralNorm spectral_norm(const Matrix& a, SeededRng& rng) {
  return spectral_norm(a, SpectralOptions{}, rng);
}

struct CholeskyOptions {
  double jitter = 1e-10;      ///< initial jitter, relative to mean(diag(a))
  double jitter_cap = 1e-4;   ///< escalation stops once the jitter would exceed this
};

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;  ///< relative jitter actually applied
};

namespace detail {

/// Returns the index of the first non-positive pivot, or -1 on success.
inline long try_cholesky(const Matrix& a, double shift, Matrix& l, double& bad_pivot) {
  const std::size_t n = a.rows();
  l = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto lj = l.row(j);
    double d = a(j, j) + shift;
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0) || !std::isfinite(d)) {
      bad_pivot = d;
      return static_cast<long>(j);
    }
    const double djj = std::sqrt(d);
    l(j, j) = djj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const auto li = l.row(i);
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l(i, j) = s / djj;
    }
  }
  return -1;
}

}  // namespace detail

/// Lower-triangular L with L L^T = a + jitter * mean(diag(a)) * I.
///
/// On a failed pivot the jitter is multiplied by 10 (starting from 1e-10 if
/// it was zero) until it would exceed `jitter_cap`.
inline CholeskyFactor cholesky(const Matrix& a, CholeskyOptions opts = {}) {
  if (a.rows() != a.cols()) throw ConfigError("cholesky: matrix is " + a.shape_string());
  const std::size_t n = a.rows();
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-10) {
        throw ConfigError("cholesky: matrix not symmetric at (" + std::to_string(i) + ", " +
                          std::to_string(j) + ")");
      }
    }
    mean_diag += a(i, i);
  }
  mean_diag = n > 0 ? mean_diag / static_cast<double>(n) : 0.0;

  CholeskyFactor out;
  double jitter = opts.jitter;
  double smallest_pivot = 0.0;
  long failed_at = -1;
  while (true) {
    failed_at = detail::try_cholesky(a, jitter * mean_diag, out.lower, smallest_pivot);
    if (failed_at < 0) {
      out.jitter = jitter;
      return out;
    }
    const double next = jitter == 0.0 ? 1e-10 : jitter * 10.0;
    if (next > opts.jitter_cap * (1.0 + 1e-12)) break;
    jitter = next;
  }
  std::ostringstream msg;
  msg << "cholesky: not positive definite after jitter " << jitter << " (pivot " << failed_at
      << " = " << smallest_pivot << ")";
  throw NumericalError(msg.str());
}

/// Solves L x = b for lower-triangular L.
inline std::vector<double> solve_lower(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    const auto li = l.row(i);
    double s = x[i];
    for (std::size_t k = 0; k < i; ++k) s -= li[k] * x[k];
    x[i] = s / li[i];
  }
  return x;
}

/// Solves L^T x = b for lower-triangular L.
inline std::vector<double> solve_lower_transpose(const Matrix& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t ii = n; ii-- > 0;) {
    x[ii] /= l(ii, ii);
    const double xi = x[ii];
    const auto li = l.row(ii);
    for (std::size_t k = 0; k < ii; ++k) x[k] -= li[k] * xi;
  }
  return x;
}

/// Solves (L L^T) x = b.
inline std::vector<double> cholesky_solve(const Matrix& l, std::span<const double> b) {
  return solve_lower_transpose(l, solve_lower(l, b));
}

/// Solves L X = B column-wise for a block of right-hand sides (B is n x k).
inline Matrix solve_lower(const Matrix& l, const Matrix& b) {
  if (l.rows() != b.rows()) detail::require_dims(false, "solve_lower", l, b);
  Matrix x = b;
  const std::size_t k = b.cols();
  for (std::size_t i = 0; i < l.rows(); ++i) {
    const auto li = l.row(i);
    auto xi = x.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      const double lij = li[j];
      if (lij == 0.0) continue;
      const auto xj = x.row(j);
      for (std::size_t c = 0; c < k; ++c) xi[c] -= lij * xj[c];
    }
    for (std::size_t c = 0; c < k; ++c) xi[c] /= li[i];
  }
  return x;
}

}  // namespace margin_lab
