#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "margin_lab/matrix.hpp"
#include "margin_lab/rng.hpp"

namespace margin_lab::testing {

inline std::filesystem::path data_dir() { return MARGIN_LAB_TEST_DATA; }

inline Matrix random_matrix(std::size_t rows, std::size_t cols, SeededRng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = scale * rng.normal();
  return m;
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  }
  return e;
}

/// Triple-loop product.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

/// Largest singular value from a dense SVD.
inline double svd_spectral_norm(const Matrix& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  return svd.singularValues()(0);
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("margin_lab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace margin_lab::testing

#include "margin_lab/network.hpp"
#include "margin_lab/training.hpp"

namespace margin_lab::testing {

/// Central finite-difference gradient of the squared loss, entry by entry.
inline std::vector<Matrix> numeric_gradient(const Mlp& net, const Matrix& x, const Matrix& y,
                                            double h) {
  auto loss_of = [&](const Mlp& n) {
    Matrix r = predict(n, x) - y;
    return dot(r.values(), r.values());
  };
  std::vector<Matrix> out;
  Mlp probe = net;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    Matrix g(net.weights[l].rows(), net.weights[l].cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double w0 = net.weights[l].values()[i];
      probe.weights[l].values()[i] = w0 + h;
      const double up = loss_of(probe);
      probe.weights[l].values()[i] = w0 - h;
      const double down = loss_of(probe);
      probe.weights[l].values()[i] = w0;
      g.values()[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Largest entrywise |a - b| / max(|a|, |b|); pairs below `floor` in both
/// magnitudes are compared on an absolute scale of `floor`.
inline double max_relative_error(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t i = 0; i < a[l].size(); ++i) {
      const double x = a[l].values()[i], y = b[l].values()[i];
      const double scale = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / scale);
    }
  }
  return worst;
}

}  // namespace margin_lab::testing
