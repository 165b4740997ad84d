#include <gtest/gtest.h>

#include "margin_lab/dataset.hpp"
#include "margin_lab/margins.hpp"
#include "margin_lab/training.hpp"
#include "support/helpers.hpp"

using namespace margin_lab;
using margin_lab::testing::random_matrix;

namespace {

struct Toy {
  Matrix x, y;
};

Toy toy_problem(SeededRng& rng, std::size_t n = 12) {
  Toy t{normalize_inputs(random_matrix(n, 6, rng)), Matrix(n, 1)};
  for (std::size_t i = 0; i < n; ++i) t.y(i, 0) = t.x(i, 0) > 0 ? 1.0 : -1.0;
  return t;
}

}  // namespace

TEST(Training, LossIsSumOfSquares) {
  SeededRng rng(1);
  const auto net = init_mlp({6, 5, 2}, 1.0, InitRule::all_layers, rng);
  const Matrix x = random_matrix(4, 6, rng);
  const Matrix y = random_matrix(4, 2, rng);
  const auto lg = loss_and_grad(net, x, y);
  const Matrix out = predict(net, x);
  double expected = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = out.values()[i] - y.values()[i];
    expected += d * d;
  }
  EXPECT_NEAR(lg.loss, expected, 1e-12);
  EXPECT_THROW(loss_and_grad(net, x, Matrix(4, 3)), ConfigError);
}

TEST(Training, GradientMatchesFiniteDifferences) {
  SeededRng rng(2);
  const auto net = init_mlp({6, 7, 4, 2}, 1.0, InitRule::all_layers, rng);
  const Matrix x = random_matrix(5, 6, rng);
  const Matrix y = random_matrix(5, 2, rng);
  const auto lg = loss_and_grad(net, x, y);
  const auto fd = margin_lab::testing::numeric_gradient(net, x, y, 1e-5);
  EXPECT_LT(margin_lab::testing::max_relative_error(lg.grads, fd), 1e-5);
}

TEST(Training, TargetAccuracy) {
  Matrix o{{0.5}, {-0.1}, {0.0}};
  Matrix t{{1}, {1}, {1}};
  EXPECT_NEAR(target_accuracy(o, t), 1.0 / 3.0, 1e-15);
  Matrix o3{{0.1, 0.9, 0.0}, {1.0, 0.0, 0.0}};
  Matrix t3{{0, 2, 0}, {0, 0, 2}};
  EXPECT_EQ(target_accuracy(o3, t3), 0.5);
}

TEST(Training, GradientDescentDecreasesLoss) {
  SeededRng rng(3);
  const auto toy = toy_problem(rng);
  const auto net = init_mlp({6, 16, 1}, 1.0, InitRule::all_layers, rng);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::gd;
  cfg.learning_rate = 0.002;
  cfg.epochs = 300;
  const auto r = train_gd(net, toy.x, toy.y, cfg);
  EXPECT_EQ(r.stop_reason, "budget");
  EXPECT_EQ(r.updates(), 300u);
  EXPECT_LT(r.final_loss(), 0.5 * r.log.front().loss);
  EXPECT_THROW(train_nero(net, toy.x, toy.y, cfg), ConfigError);
}

TEST(Training, ZeroLearningRateLeavesWeights) {
  SeededRng rng(4);
  const auto toy = toy_problem(rng);
  const auto net = init_mlp({6, 8, 1}, 1.0, InitRule::all_layers, rng);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::gd;
  cfg.learning_rate = 0.0;
  cfg.epochs = 5;
  EXPECT_EQ(train(net, toy.x, toy.y, cfg).net, net);
}

TEST(Training, NeroKeepsRowsOnConstraintSet) {
  SeededRng rng(5);
  const auto toy = toy_problem(rng, 20);
  const auto net = init_mlp({6, 16, 16, 1}, 1.0, InitRule::all_layers, rng);
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.lr_decay = 0.99;
  cfg.epochs = 200;
  const auto r = train_nero(net, toy.x, toy.y, cfg);
  for (const auto& w : r.net.weights) {
    for (std::size_t row = 0; row < w.rows(); ++row) {
      double s = 0;
      for (double v : w.row(row)) s += v;
      EXPECT_NEAR(s, 0.0, 1e-10);
      EXPECT_NEAR(norm2(w.row(row)), 1.0, 1e-12);
    }
  }
  EXPECT_LT(r.final_loss(), r.log.front().loss);
  EXPECT_NEAR(r.log.back().lr, 0.01 * std::pow(0.99, 200), 1e-15);
}

TEST(Training, NeroStepSizeIsRelativeToRowNorm) {
  // One step with beta = 0: the normalized gradient step moves each row by
  // lr * ||w_row|| before projection.
  Mlp net;
  net.dims = {3, 1};
  net.weights = {Matrix{{1.0, 0.0, -1.0}}};
  net = nero_project(net);
  Matrix x{{1, 2, 3}};
  Matrix y{{5}};
  OptimizerConfig cfg;
  cfg.nero_beta = 0.0;
  cfg.learning_rate = 0.1;
  cfg.epochs = 1;
  const auto lg = loss_and_grad(net, x, y);
  const auto r = train_nero(net, x, y, cfg);
  const auto g = lg.grads[0].row(0);
  const double gn = norm2(g);
  Matrix expected = net.weights[0];
  for (std::size_t c = 0; c < 3; ++c) expected(0, c) -= 0.1 * g[c] / (gn + 1e-8);
  nero_project_layer(expected, 0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(r.net.weights[0](0, c), expected(0, c), 1e-12);
}

TEST(Training, StopRules) {
  SeededRng rng(6);
  const auto toy = toy_problem(rng);
  const auto net = init_mlp({6, 32, 1}, 1.0, InitRule::all_layers, rng);
  OptimizerConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.lr_decay = 0.99;
  cfg.epochs = 2000;
  cfg.stop_accuracy = 1.0;
  const auto acc = train(net, toy.x, toy.y, cfg);
  EXPECT_EQ(acc.stop_reason, "accuracy");
  EXPECT_EQ(acc.final_accuracy(), 1.0);
  cfg.stop_accuracy = 0.0;
  cfg.stop_loss = 0.5;
  const auto loss = train(net, toy.x, toy.y, cfg);
  EXPECT_EQ(loss.stop_reason, "loss");
  EXPECT_LT(loss.final_loss(), 0.5);
  // The logged loss belongs to the returned weights.
  EXPECT_NEAR(loss_and_grad(loss.net, toy.x, toy.y).loss, loss.final_loss(), 1e-12);
}

TEST(Training, DivergenceIsReported) {
  SeededRng rng(7);
  const auto toy = toy_problem(rng);
  const auto net = init_mlp({6, 16, 1}, 1.0, InitRule::all_layers, rng);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::gd;
  cfg.learning_rate = 10.0;
  cfg.epochs = 200;
  EXPECT_THROW(train(net, toy.x, toy.y, cfg), DivergenceError);
}

TEST(Training, ConfigValidationAndJson) {
  OptimizerConfig c;
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_decay = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.nero_beta = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.kind = OptimizerKind::gd;
  c.epochs = 77;
  c.stop_loss = 1e-3;
  nlohmann::json j;
  to_json(j, c);
  const auto back = j.get<OptimizerConfig>();
  EXPECT_EQ(back.kind, OptimizerKind::gd);
  EXPECT_EQ(back.epochs, 77u);
  EXPECT_EQ(back.stop_loss, 1e-3);
  EXPECT_THROW(parse_optimizer_kind("adam"), ConfigError);
}

TEST(Training, TrainingLogCsv) {
  std::vector<TrainLogEntry> log{{0, 2.5, 0.5, 0.01}, {1, 1.25, 1.0, 0.005}};
  EXPECT_EQ(training_log_csv(log), "epoch,loss,train_accuracy,lr\n0,2.5,0.5,0.01\n1,1.25,1,0.005\n");
}
