// Acceptance suite: one test per criterion, one PASS/FAIL line per test.
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <sys/wait.h>

#include "margin_lab/harness/studies.hpp"
#include "support/helpers.hpp"

using namespace margin_lab;
using margin_lab::testing::random_matrix;
using margin_lab::testing::to_eigen;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> g_notes;

void note(const std::string& key, double v) {
  std::ostringstream s;
  s << v;
  g_notes[key] = s.str();
}
void note(const std::string& key, const std::string& v) { g_notes[key] = v; }

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

const StudyData& data() {
  static const StudyData d = load_study_data(margin_lab::testing::data_dir());
  return d;
}

fs::path out_dir(const std::string& name) {
  const fs::path p = fs::current_path() / "acceptance_results" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentResult run_and_save(const ExperimentConfig& cfg, const std::string& name) {
  const auto r = run_study(cfg, data());
  write_result(r, out_dir(name));
  return r;
}

std::vector<std::map<std::string, std::string>> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::getline(in, line);
  header = split(line);
  while (std::getline(in, line)) {
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(row);
  }
  return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& key) {
  return std::stod(row.at(key));
}

Task random_task(SeededRng& rng, std::size_t n, std::size_t d, int out) {
  Task t;
  t.inputs = normalize_inputs(random_matrix(n, d, rng));
  t.binary = out == 1;
  t.classes = t.binary ? 2 : out;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t.classes)));
    t.labels.push_back(t.binary ? (c == 0 ? 1 : -1) : c);
  }
  t.alpha.assign(n, 0.5 + rng.uniform());
  t.clean.assign(n, 1);
  return t;
}

struct Summary {
  double mean, sem;
};

// (mode, margin, m) -> mean and SEM
std::map<std::tuple<std::string, double, std::size_t>, Summary> grid_summary(const ExperimentResult& r) {
  std::map<std::tuple<std::string, double, std::size_t>, Summary> out;
  for (const auto& row : parse_csv(r.files.at("grid_summary.csv"))) {
    out[{row.at("mode"), num(row, "normalized_margin"), static_cast<std::size_t>(num(row, "m"))}] = {
        num(row, "accuracy_mean"), num(row, "accuracy_sem")};
  }
  return out;
}

// Monotone non-decreasing in m at each margin, allowing one SEM of slack.
std::size_t monotonicity_violations(
    const std::map<std::tuple<std::string, double, std::size_t>, Summary>& grid, const std::string& mode,
    const std::vector<double>& margins, const std::vector<std::size_t>& sizes) {
  std::size_t bad = 0;
  for (double r : margins) {
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      const auto a = grid.at({mode, r, sizes[k]});
      const auto b = grid.at({mode, r, sizes[k + 1]});
      const bool ok = b.mean >= a.mean - std::max(a.sem, b.sem);
      std::cout << "  " << mode << " margin " << r << ": m=" << sizes[k] << " " << a.mean << " (sem "
                << a.sem << ") -> m=" << sizes[k + 1] << " " << b.mean << " (sem " << b.sem << ")"
                << (ok ? "" : "  VIOLATION") << "\n";
      bad += ok ? 0 : 1;
    }
  }
  return bad;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(MARGIN_LAB_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::map<std::string, std::string> csv_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[e.path().filename().string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

class CriterionPrinter : public ::testing::EmptyTestEventListener {
 public:
  void OnTestStart(const ::testing::TestInfo&) override { g_notes.clear(); }
  void OnTestEnd(const ::testing::TestInfo& info) override {
    std::string line = std::string(info.result()->Passed() ? "PASS" : "FAIL") + " " + info.name();
    for (const auto& [k, v] : g_notes) line += " " + k + "=" + v;
    std::cout << "[criterion] " << line << std::endl;
  }
};

}  // namespace

TEST(Acceptance, GradientCorrectness) {
  const Timer timer;
  SeededRng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::vector<std::size_t> dims{2 + rng.uniform_index(9), 1 + rng.uniform_index(8),
                                        1 + rng.uniform_index(6), 1 + rng.uniform_index(4)};
    const auto net = init_mlp(dims, 0.5 + rng.uniform(), InitRule::all_layers, rng);
    const auto task = random_task(rng, 6, dims[0], static_cast<int>(dims[3] == 1 ? 1 : dims[3]));
    const Matrix y = task.targets();
    const auto lg = loss_and_grad(net, task);
    const auto fd = margin_lab::testing::numeric_gradient(net, task.inputs, y, 1e-5);
    worst = std::max(worst, margin_lab::testing::max_relative_error(lg.grads, fd));
  }
  note("max_rel_error", worst);
  note("seconds", timer.seconds());
  EXPECT_LT(worst, 1e-5);
  EXPECT_LT(timer.seconds(), 10.0);
}

TEST(Acceptance, NormOracles) {
  const Timer timer;
  SeededRng rng(102);
  double worst = 0.0;
  std::size_t chain_failures = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t r = 1 + rng.uniform_index(30), c = 1 + rng.uniform_index(30);
    const Matrix a = random_matrix(r, c, rng, 0.1 + 3.0 * rng.uniform());
    SeededRng prng = rng.split(static_cast<std::uint64_t>(t));
    const auto sn = spectral_norm(a, prng);
    const Eigen::MatrixXd e = to_eigen(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e);
    const double oracle = std::sqrt(es.eigenvalues().maxCoeff());
    worst = std::max(worst, std::abs(sn.value - oracle) / oracle);
    const double f = frobenius_norm(a);
    const double lower = f / std::sqrt(static_cast<double>(std::min(r, c)));
    if (sn.value < lower * (1 - 1e-6) || sn.value > f * (1 + 1e-6)) ++chain_failures;
  }
  note("max_rel_error", worst);
  note("chain_failures", static_cast<double>(chain_failures));
  note("seconds", timer.seconds());
  EXPECT_LT(worst, 1e-6);
  EXPECT_EQ(chain_failures, 0u);
  EXPECT_LT(timer.seconds(), 5.0);
}

TEST(Acceptance, RecipeControl) {
  const Timer timer;
  TaskSpec spec;
  spec.subset = 100;
  spec.alpha = 1.0;
  const Task task = make_task(data().train, spec);
  SeededRng rng(103);
  const Mlp start = nero_project(init_mlp({784, 512, 512, 10}, 1.0, InitRule::all_layers, rng));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::nero;
  opt.learning_rate = 0.01;
  opt.lr_decay = 0.995;
  opt.epochs = 3000;
  opt.stop_loss = 1e-4;
  const auto trained = train(start, task, opt);
  const auto rep = report(trained.net, task, ReferenceNet::from(start));
  double worst_dev = 0.0, worst_identity = 0.0;
  for (std::size_t i = 0; i < rep.size(); ++i) {
    worst_dev = std::max(worst_dev, std::abs(rep.frobenius[i] - 1.0));
    worst_identity = std::max(worst_identity, std::abs(rep.frobenius[i] - rep.raw[i]) / std::abs(rep.raw[i]));
  }
  note("epochs", static_cast<double>(trained.updates()));
  note("final_loss", trained.final_loss());
  note("max_frob_margin_deviation", worst_dev);
  note("frob_vs_raw_rel_gap", worst_identity);
  note("frobenius_factor", rep.frobenius_factor);
  note("seconds", timer.seconds());
  EXPECT_LT(trained.final_loss(), 1e-4);
  EXPECT_LT(worst_dev, 0.01);
  EXPECT_LT(worst_identity, 1e-12);
  EXPECT_LT(timer.seconds(), 300.0);
}

TEST(Acceptance, KernelGpSuite) {
  const Timer timer;
  EXPECT_NEAR(arccos_step(1.0), 1.0, 1e-15);
  EXPECT_NEAR(arccos_step(0.0), 1.0 / std::numbers::pi, 1e-15);
  EXPECT_NEAR(arccos_step(-1.0), 0.0, 1e-15);

  TaskSpec spec;
  spec.subset = 200;
  spec.classes = ClassFilter::parse("evenodd");
  const Task task = make_task(data().train, spec);
  double min_eig = 1e300;
  for (std::size_t depth : {1u, 2u, 5u}) {
    const Matrix g = normalized_gram(task.inputs, depth);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(g));
    min_eig = std::min(min_eig, es.eigenvalues().minCoeff());
  }
  note("gram_min_eigenvalue", min_eig);
  EXPECT_GE(min_eig, -1e-8);

  const std::size_t depth = 5;
  const double sigma = 1.5, gamma = 2.0;
  const auto model = fit_gp(task.inputs, task.labels, depth, sigma, gamma);
  const auto at_train = posterior_batch(model, task.inputs);
  const double s2l = std::pow(sigma, 2.0 * depth);
  double mean_err = 0.0, var_ratio = 0.0;
  for (std::size_t i = 0; i < task.size(); ++i) {
    mean_err = std::max(mean_err, std::abs(at_train[i].mean - gamma * task.labels[i]));
    var_ratio = std::max(var_ratio, at_train[i].variance / s2l);
  }
  note("train_mean_error", mean_err);
  note("train_variance_over_s2l", var_ratio);
  EXPECT_LT(mean_err, 1e-6);
  EXPECT_LE(var_ratio, 1e-8);

  // Equal gamma / sigma^L and matched seeds give identical predictions.
  const Task eval = make_eval_task(data().test, spec, 300);
  const auto base = fit_gp(task.inputs, task.labels, depth, 1.0, 1.0);
  std::size_t mismatches = 0;
  for (double s : {2.0, 3.0, 0.7}) {
    const auto scaled = fit_gp(task.inputs, task.labels, depth, s, std::pow(s, 5.0));
    for (std::size_t m : {1u, 10u}) {
      SeededRng ra(7), rb(7);
      for (std::size_t j = 0; j < eval.size(); ++j) {
        const int a = ensemble_predict(base, eval.inputs.row(j), m, ra).sign;
        const int b = ensemble_predict(scaled, eval.inputs.row(j), m, rb).sign;
        mismatches += a != b;
      }
    }
  }
  note("prediction_mismatches", static_cast<double>(mismatches));
  note("seconds", timer.seconds());
  EXPECT_EQ(mismatches, 0u);
  EXPECT_LT(timer.seconds(), 60.0);
}

TEST(Acceptance, GpEnsembles) {
  const Timer timer;
  auto cfg = ExperimentConfig::defaults_for("ensembles");
  cfg.mode = "gp";
  cfg.gp_depth = 5;
  cfg.n_train = 1000;
  cfg.n_test = 2000;
  cfg.ensemble_sizes = {1, 10, 100};
  cfg.margins = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
  cfg.dump_predictions = true;
  const auto r = run_and_save(cfg, "GpEnsembles");
  const auto grid = grid_summary(r);
  // Closed-form expected accuracy from C1, C2, for reading the sampled grid.
  const auto post = parse_csv(r.files.at("gp_posterior.csv"));
  for (double margin : cfg.margins) {
    std::cout << "  expected accuracy at margin " << margin << ":";
    for (std::size_t m : cfg.ensemble_sizes) {
      double acc = 0.0;
      for (const auto& row : post) {
        const double z = num(row, "label") * num(row, "c1");
        const double c2 = num(row, "c2");
        acc += c2 > 0.0 ? 0.5 * std::erfc(-margin * z * std::sqrt(double(m) / c2) / std::sqrt(2.0))
                        : (z >= 0.0 ? 1.0 : 0.0);
      }
      std::cout << " m=" << m << " " << acc / static_cast<double>(post.size());
    }
    std::cout << "\n";
  }
  const auto bad = monotonicity_violations(grid, "gp", cfg.margins, cfg.ensemble_sizes);
  // m = 100 at margin r has the spread of m = 1 at margin 10 r.
  double worst_gap = 0.0;
  for (std::size_t i = 0; i + 1 < cfg.margins.size(); ++i) {
    const double small = grid.at({"gp", cfg.margins[i], 100}).mean;
    const double large = grid.at({"gp", cfg.margins[i + 1], 1}).mean;
    std::cout << "  m=100 margin " << cfg.margins[i] << ": " << small << " vs m=1 margin "
              << cfg.margins[i + 1] << ": " << large << "\n";
    worst_gap = std::max(worst_gap, std::abs(small - large));
  }
  note("seeds", static_cast<double>(cfg.seeds.size()));
  note("monotonicity_violations", static_cast<double>(bad));
  note("max_ensemble_vs_margin_gap", worst_gap);
  note("seconds", timer.seconds());
  EXPECT_EQ(r.effective_trials(), cfg.seeds.size());
  EXPECT_EQ(bad, 0u);
  EXPECT_LE(worst_gap, 0.02);
  EXPECT_LT(timer.seconds(), 600.0);
}

TEST(Acceptance, NnEnsembles) {
  const Timer timer;
  auto cfg = ExperimentConfig::defaults_for("ensembles");
  cfg.mode = "nn";
  cfg.depth = 3;
  cfg.width = 256;
  cfg.n_train = 1000;
  cfg.n_test = 2000;
  cfg.ensemble_sizes = {1, 8, 32};
  cfg.margins = {0.01, 1.0};
  cfg.seeds = {0, 1, 2, 3, 4};
  cfg.optimizer.epochs = 200;
  const auto r = run_and_save(cfg, "NnEnsembles");
  const auto bad = monotonicity_violations(grid_summary(r), "nn", cfg.margins, cfg.ensemble_sizes);
  note("monotonicity_violations", static_cast<double>(bad));
  note("seconds", timer.seconds());
  EXPECT_EQ(r.effective_trials(), cfg.seeds.size() * cfg.margins.size());
  EXPECT_EQ(bad, 0u);
  EXPECT_LT(timer.seconds(), 3600.0);
}

TEST(Acceptance, SpectralReversal) {
  const Timer timer;
  const auto cfg = ExperimentConfig::defaults_for("spectral-reversal");
  const auto r = run_and_save(cfg, "SpectralReversal");
  ASSERT_EQ(r.effective_trials(), 2u);
  const auto& a = r.aggregates;
  const double true_spec = a["true"]["median_spectral_margin_mean"];
  const double random_spec = a["random"]["median_spectral_margin_mean"];
  const double true_acc = a["true"]["test_accuracy_mean"];
  const double random_acc = a["random"]["test_accuracy_mean"];
  note("true_median_spectral", true_spec);
  note("random_median_spectral", random_spec);
  note("true_test_accuracy", true_acc);
  note("random_test_accuracy", random_acc);
  note("seconds", timer.seconds());
  EXPECT_GT(random_spec, true_spec);
  EXPECT_LT(random_acc, 0.15);
  EXPECT_GT(true_acc, 0.60);
  EXPECT_LT(timer.seconds(), 1800.0);
}

TEST(Acceptance, AttackTwin) {
  const Timer timer;
  auto cfg = ExperimentConfig::defaults_for("twin-attack");
  cfg.width = 512;
  cfg.n_train = 500;
  cfg.attack_count = 1000;
  const auto r = run_and_save(cfg, "AttackTwin");
  ASSERT_EQ(r.effective_trials(), 2u);
  const auto rows = parse_csv(r.files.at("pairs.csv"));
  ASSERT_EQ(rows.size(), 1u);
  const double gap = num(rows[0], "accuracy_gap");
  const double w = num(rows[0], "wasserstein");
  const double mean_margin = num(rows[0], "control_mean_clean_margin");
  note("control_test_accuracy", num(rows[0], "control_test_accuracy"));
  note("attack_test_accuracy", num(rows[0], "attack_test_accuracy"));
  note("wasserstein", w);
  note("mean_clean_margin", mean_margin);
  note("seconds", timer.seconds());
  EXPECT_GE(gap, 0.20);
  EXPECT_LT(w, 0.1 * mean_margin);
  EXPECT_LT(timer.seconds(), 3600.0);
}

TEST(Acceptance, TwinMarginMatching) {
  const Timer timer;
  auto cfg = ExperimentConfig::defaults_for("twin-sample");
  cfg.classes = "0v1";
  cfg.n_train = 5;
  cfg.pairs = 100;
  cfg.widths = {64};
  const auto r = run_and_save(cfg, "TwinMarginMatching");
  const auto rows = parse_csv(r.files.at("pairs.csv"));
  double worst_l2 = 0.0, worst_rel = 0.0;
  for (const auto& row : rows) {
    worst_l2 = std::max(worst_l2, num(row, "l2_difference"));
    worst_rel = std::max(worst_rel, num(row, "relative_margin_error"));
  }
  note("pairs", static_cast<double>(rows.size()));
  note("max_l2_difference", worst_l2);
  note("worst_relative_margin_error", worst_rel);
  note("seconds", timer.seconds());
  EXPECT_EQ(rows.size(), 100u);
  EXPECT_LT(worst_l2, 1e-6);
  EXPECT_LT(worst_rel, 1e-4);
  EXPECT_LT(timer.seconds(), 1800.0);
}

TEST(Acceptance, Determinism) {
  const Timer timer;
  const fs::path root = out_dir("Determinism");
  const std::map<std::string, nlohmann::json> configs{
      {"spectral-reversal", {{"n_train", 40}, {"n_test", 100}, {"width", 32}, {"seeds", {5}},
                             {"optimizer", {{"epochs", 30}}}}},
      {"twin-attack", {{"n_train", 30}, {"n_test", 100}, {"attack_count", 20}, {"width", 32},
                       {"seeds", {5}}, {"optimizer", {{"epochs", 30}}}}},
      {"twin-sample", {{"n_test", 100}, {"depth", 3}, {"widths", {16}}, {"pairs", 4},
                       {"optimizer", {{"epochs", 50}}}}},
      {"margin-sweep", {{"n_train", 40}, {"n_test", 100}, {"width", 32}, {"grid", {0.5, 2}},
                        {"optimizer", {{"epochs", 30}}}}},
      {"ensembles", {{"mode", "both"}, {"n_train", 60}, {"n_test", 100}, {"width", 32},
                     {"ensemble_sizes", {1, 3}}, {"margins", {0.1, 1}}, {"seeds", {5, 6}},
                     {"optimizer", {{"epochs", 20}}}}}};
  std::size_t compared = 0, differing = 0;
  for (const auto& [study, j] : configs) {
    const auto cfg_path = root / (study + ".json");
    std::ofstream(cfg_path) << j.dump(2);
    std::map<std::string, std::string> runs[2];
    for (int k = 0; k < 2; ++k) {
      const auto dir = root / (study + "_run" + std::to_string(k));
      // different thread counts must not change the bytes either
      const auto res = run_cli(study + " --config " + cfg_path.string() + " --data " +
                               margin_lab::testing::data_dir().string() + " --threads " +
                               std::to_string(1 + 2 * k) + " --out " + dir.string());
      ASSERT_EQ(res.code, 0) << res.out;
      runs[k] = csv_files(dir);
    }
    ASSERT_FALSE(runs[0].empty()) << study;
    EXPECT_EQ(runs[0].size(), runs[1].size()) << study;
    for (const auto& [name, text] : runs[0]) {
      ++compared;
      const auto it = runs[1].find(name);
      if (it == runs[1].end() || it->second != text) {
        ++differing;
        ADD_FAILURE() << study << ": " << name << " differs between runs";
      }
    }
  }
  note("csv_files_compared", static_cast<double>(compared));
  note("differing", static_cast<double>(differing));
  note("seconds", timer.seconds());
  EXPECT_EQ(differing, 0u);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new CriterionPrinter);
  return RUN_ALL_TESTS();
}
