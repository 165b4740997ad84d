#pragma once

#include <cmath>
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

enum class OptimizerKind { gd, nero };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::gd ? "gd" : "nero"; }

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "gd") return OptimizerKind::gd;
  if (s == "nero") return OptimizerKind::nero;
  throw ConfigError("optimizer must be gd or nero, got '" + s + "'");
}

/// Full-batch optimizer settings.
///
/// The step size at update t is learning_rate * lr_decay^t. Training stops
/// at the first evaluated state with loss < stop_loss (when stop_loss > 0),
/// with train accuracy >= stop_accuracy (when stop_accuracy > 0), or after
/// `epochs` updates.
struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::nero;
  double learning_rate = 0.01;
  double lr_decay = 1.0;
  double nero_beta = 0.999;
  double nero_epsilon = 1e-8;
  std::size_t epochs = 1000;
  double stop_loss = 0.0;
  double stop_accuracy = 0.0;
  double divergence_threshold = 1e12;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning rate must be a finite non-negative number");
    }
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr decay must be in (0, 1]");
    if (!(nero_beta >= 0.0 && nero_beta < 1.0)) throw ConfigError("nero beta must be in [0, 1)");
    if (!(nero_epsilon > 0.0)) throw ConfigError("nero epsilon must be positive");
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"learning_rate", c.learning_rate},
                     {"lr_decay", c.lr_decay},
                     {"nero_beta", c.nero_beta},
                     {"nero_epsilon", c.nero_epsilon},
                     {"epochs", c.epochs},
                     {"stop_loss", c.stop_loss},
                     {"stop_accuracy", c.stop_accuracy},
                     {"divergence_threshold", c.divergence_threshold}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  c.kind = parse_optimizer_kind(j.value("kind", to_string(d.kind)));
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.nero_beta = j.value("nero_beta", d.nero_beta);
  c.nero_epsilon = j.value("nero_epsilon", d.nero_epsilon);
  c.epochs = j.value("epochs", d.epochs);
  c.stop_loss = j.value("stop_loss", d.stop_loss);
  c.stop_accuracy = j.value("stop_accuracy", d.stop_accuracy);
  c.divergence_threshold = j.value("divergence_threshold", d.divergence_threshold);
  c.validate();
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Matrix> grads;
  Matrix outputs;
};

/// sum_i ||f(x_i) - target_i||^2 and its weight gradients.
inline LossAndGrad loss_and_grad(const Mlp& net, const Matrix& inputs, const Matrix& targets) {
  auto fwd = forward(net, inputs);
  if (fwd.outputs.rows() != targets.rows() || fwd.outputs.cols() != targets.cols()) {
    throw ConfigError("loss_and_grad: outputs " + fwd.outputs.shape_string() + " vs targets " +
                      targets.shape_string());
  }
  LossAndGrad r;
  Matrix residual = fwd.outputs - targets;
  r.loss = dot(residual.values(), residual.values());
  residual *= 2.0;
  r.grads = backward(net, fwd.trace, residual);
  r.outputs = std::move(fwd.outputs);
  return r;
}

inline LossAndGrad loss_and_grad(const Mlp& net, const Task& task) {
  return loss_and_grad(net, task.inputs, task.targets());
}

/// Fraction of rows whose predicted class matches the target's class:
/// sign agreement for one output column, argmax agreement otherwise.
inline double target_accuracy(const Matrix& outputs, const Matrix& targets) {
  if (outputs.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < outputs.rows(); ++i) {
    if (outputs.cols() == 1) {
      if ((outputs(i, 0) > 0.0) == (targets(i, 0) > 0.0) && outputs(i, 0) != 0.0) ++hits;
    } else {
      const auto o = outputs.row(i);
      const auto t = targets.row(i);
      const auto po = std::max_element(o.begin(), o.end()) - o.begin();
      const auto pt = std::max_element(t.begin(), t.end()) - t.begin();
      if (po == pt) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.rows());
}

struct TrainLogEntry {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Mlp net;
  std::vector<TrainLogEntry> log;
  std::string stop_reason;

  double final_loss() const { return log.empty() ? 0.0 : log.back().loss; }
  double final_accuracy() const { return log.empty() ? 0.0 : log.back().train_accuracy; }
  std::size_t updates() const { return log.empty() ? 0 : log.back().epoch; }
};

namespace detail {

/// Per-row running averages of squared gradient norms.
struct NeroState {
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

inline void nero_step(Mlp& net, const std::vector<Matrix>& grads, NeroState& state, double lr,
                      const OptimizerConfig& cfg) {
  if (state.second_moment.empty()) {
    for (const auto& w : net.weights) state.second_moment.emplace_back(w.rows(), 0.0);
  }
  ++state.step;
  const double bias_correction = 1.0 - std::pow(cfg.nero_beta, static_cast<double>(state.step));
  for (std::size_t l = 0; l < net.depth(); ++l) {
    auto& w = net.weights[l];
    const auto& g = grads[l];
    auto& v = state.second_moment[l];
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const auto grow = g.row(r);
      auto wrow = w.row(r);
      const double gn2 = dot(grow, grow);
      v[r] = cfg.nero_beta * v[r] + (1.0 - cfg.nero_beta) * gn2;
      const double denom = std::sqrt(v[r] / bias_correction) + cfg.nero_epsilon;
      const double step = lr * norm2(wrow) / denom;
      for (std::size_t c = 0; c < wrow.size(); ++c) wrow[c] -= step * grow[c];
    }
    nero_project_layer(w, l);
  }
}

inline TrainResult run_training(Mlp net, const Matrix& inputs, const Matrix& targets,
                                const OptimizerConfig& cfg) {
  cfg.validate();
  net.validate();
  TrainResult result;
  NeroState nero;
  if (cfg.kind == OptimizerKind::nero) net = nero_project(std::move(net));
  double lr = cfg.learning_rate;
  for (std::size_t epoch = 0;; ++epoch) {
    auto lg = loss_and_grad(net, inputs, targets);
    if (!std::isfinite(lg.loss) || lg.loss > cfg.divergence_threshold) {
      std::ostringstream msg;
      msg << "training diverged at epoch " << epoch << ": loss " << lg.loss << " (lr " << lr << ")";
      throw DivergenceError(msg.str());
    }
    const double acc = target_accuracy(lg.outputs, targets);
    result.log.push_back({epoch, lg.loss, acc, lr});
    if (cfg.stop_loss > 0.0 && lg.loss < cfg.stop_loss) {
      result.stop_reason = "loss";
      break;
    }
    if (cfg.stop_accuracy > 0.0 && acc >= cfg.stop_accuracy) {
      result.stop_reason = "accuracy";
      break;
    }
    if (epoch >= cfg.epochs) {
      result.stop_reason = "budget";
      break;
    }
    if (cfg.kind == OptimizerKind::gd) {
      for (std::size_t l = 0; l < net.depth(); ++l) {
        auto w = net.weights[l].values();
        const auto g = lg.grads[l].values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      }
    } else {
      nero_step(net, lg.grads, nero, lr, cfg);
    }
    lr *= cfg.lr_decay;
  }
  result.net = std::move(net);
  return result;
}

}  // namespace detail

/// Full-batch gradient descent on the targeted-margin squared loss.
inline TrainResult train_gd(Mlp net, const Matrix& inputs, const Matrix& targets,
                            const OptimizerConfig& cfg) {
  if (cfg.kind != OptimizerKind::gd) throw ConfigError("train_gd: optimizer kind is not gd");
  return detail::run_training(std::move(net), inputs, targets, cfg);
}

/// Nero: per-row normalized steps followed by row centering and normalization.
/// The initial network is projected before the first step.
inline TrainResult train_nero(Mlp net, const Matrix& inputs, const Matrix& targets,
                              const OptimizerConfig& cfg) {
  if (cfg.kind != OptimizerKind::nero) throw ConfigError("train_nero: optimizer kind is not nero");
  return detail::run_training(std::move(net), inputs, targets, cfg);
}

inline TrainResult train(Mlp net, const Matrix& inputs, const Matrix& targets,
                         const OptimizerConfig& cfg) {
  return detail::run_training(std::move(net), inputs, targets, cfg);
}

inline TrainResult train(Mlp net, const Task& task, const OptimizerConfig& cfg) {
  return train(std::move(net), task.inputs, task.targets(), cfg);
}

/// CSV with columns epoch, loss, train_accuracy, lr.
inline std::string training_log_csv(const std::vector<TrainLogEntry>& log) {
  std::string out = "epoch,loss,train_accuracy,lr\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + ',' + format_double(e.loss) + ',' +
           format_double(e.train_accuracy) + ',' + format_double(e.lr) + '\n';
  }
  return out;
}

}  // namespace margin_lab
