#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/error.hpp"
#include "margin_lab/matrix.hpp"
#include "margin_lab/rng.hpp"

namespace margin_lab {

/// Bias-free ReLU MLP: f(x) = W_L phi(W_{L-1} ... phi(W_1 x)).
///
/// weights[l] has shape dims[l+1] x dims[l]; the last layer is linear.
struct Mlp {
  std::vector<std::size_t> dims;
  std::vector<Matrix> weights;

  std::size_t depth() const noexcept { return weights.size(); }
  std::size_t input_dim() const noexcept { return dims.front(); }
  std::size_t output_dim() const noexcept { return dims.back(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.size();
    return n;
  }

  /// Throws unless dims and weight shapes agree.
  void validate() const {
    if (dims.size() < 2 || weights.size() + 1 != dims.size()) {
      throw ConfigError("Mlp: need dims.size() == weights.size() + 1 >= 2");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != dims[l + 1] || weights[l].cols() != dims[l]) {
        throw ConfigError("Mlp: layer " + std::to_string(l + 1) + " has shape " +
                          weights[l].shape_string() + ", expected " + std::to_string(dims[l + 1]) +
                          "x" + std::to_string(dims[l]));
      }
    }
  }

  bool operator==(const Mlp&) const = default;
};

enum class InitRule { all_layers, first_layer_only };

inline InitRule parse_init_rule(const std::string& s) {
  if (s == "all-layers") return InitRule::all_layers;
  if (s == "first-layer-only") return InitRule::first_layer_only;
  throw ConfigError("init rule must be all-layers or first-layer-only, got '" + s + "'");
}

inline std::string to_string(InitRule r) {
  return r == InitRule::all_layers ? "all-layers" : "first-layer-only";
}

/// Gaussian initialization with entry variance scale^2 / fan_in.
///
/// With scale = 1 this is the prior of the NN-GP model at sigma = 1. Under
/// `first_layer_only` the remaining layers use scale 1.
inline Mlp init_mlp(const std::vector<std::size_t>& dims, double scale, InitRule rule,
                    SeededRng& rng) {
  if (!(scale > 0.0)) throw ConfigError("init_mlp: scale must be positive");
  if (dims.size() < 2) throw ConfigError("init_mlp: need at least input and output dims");
  Mlp net;
  net.dims = dims;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double layer_scale = (rule == InitRule::all_layers || l == 0) ? scale : 1.0;
    const double sd = layer_scale / std::sqrt(static_cast<double>(dims[l]));
    Matrix w(dims[l + 1], dims[l]);
    for (auto& v : w.values()) v = sd * rng.normal();
    net.weights.push_back(std::move(w));
  }
  return net;
}

/// Pre- and post-activations of one batch. post[0] is the input batch.
struct ForwardTrace {
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
};

struct ForwardResult {
  Matrix outputs;
  ForwardTrace trace;
};

inline void relu_inplace(Matrix& m) noexcept {
  for (auto& v : m.values()) v = v > 0.0 ? v : 0.0;
}

/// Outputs only; no trace is kept.
inline Matrix predict(const Mlp& net, const Matrix& inputs) {
  if (inputs.cols() != net.input_dim()) {
    throw ConfigError("forward: inputs have " + std::to_string(inputs.cols()) +
                      " columns, network expects " + std::to_string(net.input_dim()));
  }
  Matrix a = inputs;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    a = matmul_transpose_b(a, net.weights[l]);
    if (l + 1 < net.depth()) relu_inplace(a);
  }
  return a;
}

inline ForwardResult forward(const Mlp& net, const Matrix& inputs) {
  if (inputs.cols() != net.input_dim()) {
    throw ConfigError("forward: inputs have " + std::to_string(inputs.cols()) +
                      " columns, network expects " + std::to_string(net.input_dim()));
  }
  ForwardResult r;
  r.trace.post.push_back(inputs);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    Matrix z = matmul_transpose_b(r.trace.post.back(), net.weights[l]);
    r.trace.pre.push_back(z);
    if (l + 1 < net.depth()) {
      relu_inplace(z);
      r.trace.post.push_back(std::move(z));
    } else {
      r.outputs = std::move(z);
    }
  }
  return r;
}

/// Exact weight gradients given dLoss/dOutputs. ReLU'(0) is taken as 0.
inline std::vector<Matrix> backward(const Mlp& net, const ForwardTrace& trace,
                                    const Matrix& output_grad) {
  const std::size_t depth = net.depth();
  if (trace.pre.size() != depth || trace.post.size() != depth) {
    throw ConfigError("backward: trace depth does not match network");
  }
  const std::size_t n = trace.post.front().rows();
  if (output_grad.rows() != n || output_grad.cols() != net.output_dim()) {
    throw ConfigError("backward: output gradient is " + output_grad.shape_string() +
                      ", expected " + std::to_string(n) + "x" + std::to_string(net.output_dim()));
  }
  for (std::size_t l = 0; l < depth; ++l) {
    if (trace.pre[l].rows() != n || trace.pre[l].cols() != net.dims[l + 1]) {
      throw ConfigError("backward: stale trace at layer " + std::to_string(l + 1));
    }
  }
  std::vector<Matrix> grads(depth);
  Matrix delta = output_grad;
  for (std::size_t l = depth; l-- > 0;) {
    grads[l] = matmul_transpose_a(delta, trace.post[l]);
    if (l == 0) break;
    Matrix upstream = matmul(delta, net.weights[l]);
    const auto pre = trace.pre[l - 1].values();
    auto up = upstream.values();
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (!(pre[i] > 0.0)) up[i] = 0.0;
    }
    delta = std::move(upstream);
  }
  return grads;
}

/// W_l <- W_l * sqrt(d_l) / ||W_l||_F for every layer.
inline Mlp frobenius_project(Mlp net) {
  for (std::size_t l = 0; l < net.depth(); ++l) {
    auto& w = net.weights[l];
    const double fn = frobenius_norm(w);
    if (!(fn > 0.0)) {
      throw ConfigError("frobenius_project: layer " + std::to_string(l + 1) + " is all zero");
    }
    w *= std::sqrt(static_cast<double>(w.rows())) / fn;
  }
  return net;
}

/// Centers each row to zero sum and scales it to unit length.
///
/// Rows of width 1 cannot be centered and are only normalized.
inline void nero_project_layer(Matrix& w, std::size_t layer_index) {
  const std::size_t cols = w.cols();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    if (cols > 1) {
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(cols);
      for (auto& v : row) v -= mean;
    }
    const double n = norm2(row);
    if (!(n > 0.0)) {
      throw ConfigError("nero_project: layer " + std::to_string(layer_index + 1) + " row " +
                        std::to_string(r) + " is constant");
    }
    for (auto& v : row) v /= n;
  }
}

inline Mlp nero_project(Mlp net) {
  for (std::size_t l = 0; l < net.depth(); ++l) nero_project_layer(net.weights[l], l);
  return net;
}

/// prod_l sqrt(d_l) / ||W_l||_F; equals 1 after either projection.
inline double frobenius_denominator_inverse(const Mlp& net) {
  double p = 1.0;
  for (const auto& w : net.weights) p *= std::sqrt(static_cast<double>(w.rows())) / frobenius_norm(w);
  return p;
}

inline nlohmann::json to_json(const Mlp& net) {
  nlohmann::json j;
  j["format"] = "margin-lab-mlp";
  j["version"] = 1;
  j["dims"] = net.dims;
  auto& ws = j["weights"] = nlohmann::json::array();
  for (const auto& w : net.weights) ws.push_back(w.storage());
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "margin-lab-mlp") throw ParseError("checkpoint: wrong format tag");
  if (j.value("version", 0) != 1) throw ParseError("checkpoint: unsupported version");
  Mlp net;
  net.dims = j.at("dims").get<std::vector<std::size_t>>();
  const auto& ws = j.at("weights");
  if (ws.size() + 1 != net.dims.size()) throw ParseError("checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < ws.size(); ++l) {
    auto data = ws[l].get<std::vector<double>>();
    if (data.size() != net.dims[l] * net.dims[l + 1]) {
      throw ParseError("checkpoint: layer " + std::to_string(l + 1) + " has wrong entry count");
    }
    net.weights.emplace_back(net.dims[l + 1], net.dims[l], std::move(data));
  }
  return net;
}

inline void save_checkpoint(const Mlp& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out << to_json(net).dump() << '\n';
}

inline Mlp load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  return mlp_from_json(j);
}

}  // namespace margin_lab
