#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "margin_lab/dataset.hpp"
#include "margin_lab/error.hpp"
#include "margin_lab/harness/config.hpp"
#include "margin_lab/harness/results.hpp"
#include "margin_lab/harness/studies.hpp"
#include "margin_lab/margins.hpp"
#include "margin_lab/network.hpp"
#include "margin_lab/training.hpp"

namespace margin_lab {

namespace detail {

/// Study flags; each one overrides the config only when given.
struct StudyFlags {
  std::string config_path;
  std::string out;
  std::string data;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 0;
  std::string classes;
  std::size_t n_train = 0, n_test = 0, depth = 0, width = 0, epochs = 0;
  double lr = 0.0, decay = 1.0, init_scale = 1.0;
  std::string reference;
  std::string control;
  double alpha_true = 1.0, alpha_random = 1.0;
  std::size_t attack = 0;
  std::vector<double> alphas;
  std::vector<std::size_t> widths;
  std::size_t pairs = 0;
  std::uint64_t cap = 0;
  std::string sweep;
  std::vector<double> grid;
  std::string mode;
  std::vector<std::size_t> m;
  std::vector<double> margins;
  std::size_t gp_depth = 0;
  double sigma = 1.0;
  bool dump = false;
  std::map<std::string, CLI::Option*> opts;

  bool given(const std::string& name) const {
    auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }
};

inline void add_study_flags(CLI::App* sub, StudyFlags& f) {
  auto& o = f.opts;
  o["config"] = sub->add_option("--config", f.config_path, "JSON config file")->check(CLI::ExistingFile);
  o["out"] = sub->add_option("--out", f.out, "Output directory (default results/<study>)");
  o["data"] = sub->add_option("--data", f.data, "MNIST directory (default $MARGIN_LAB_DATA or data/mnist)");
  o["seed"] = sub->add_option("--seed", f.seed, "Single seed");
  o["seeds"] = sub->add_option("--seeds", f.seeds, "Seed list")->delimiter(',');
  o["threads"] = sub->add_option("--threads", f.threads, "Worker threads (0: all cores)");
  o["classes"] = sub->add_option("--classes", f.classes, "all, evenodd or AvB");
  o["n-train"] = sub->add_option("--n-train", f.n_train, "Training subset size");
  o["n-test"] = sub->add_option("--n-test", f.n_test, "Test points (0: whole split)");
  o["depth"] = sub->add_option("--depth", f.depth, "Number of layers");
  o["width"] = sub->add_option("--width", f.width, "Hidden width");
  o["epochs"] = sub->add_option("--epochs", f.epochs, "Update budget");
  o["lr"] = sub->add_option("--lr", f.lr, "Initial learning rate");
  o["decay"] = sub->add_option("--decay", f.decay, "Learning rate decay per update");
  o["init-scale"] = sub->add_option("--init-scale", f.init_scale, "Initialization scale");
  o["reference"] = sub->add_option("--reference", f.reference, "Spectral reference: init or zero");
}

inline void apply_flags(ExperimentConfig& c, const StudyFlags& f) {
  if (f.given("out")) c.output_dir = f.out;
  if (f.given("data")) c.data_dir = f.data;
  if (f.given("seed")) c.seeds = {f.seed};
  if (f.given("seeds")) c.seeds = f.seeds;
  if (f.given("threads")) c.threads = f.threads;
  if (f.given("classes")) c.classes = f.classes;
  if (f.given("n-train")) c.n_train = f.n_train;
  if (f.given("n-test")) c.n_test = f.n_test;
  if (f.given("depth")) c.depth = f.depth;
  if (f.given("width")) c.width = f.width;
  if (f.given("epochs")) c.optimizer.epochs = f.epochs;
  if (f.given("lr")) c.optimizer.learning_rate = f.lr;
  if (f.given("decay")) c.optimizer.lr_decay = f.decay;
  if (f.given("init-scale")) c.init_scale = f.init_scale;
  if (f.given("reference")) c.reference = f.reference;
  if (f.given("control")) c.control = f.control;
  if (f.given("alpha-true")) c.alpha_true = f.alpha_true;
  if (f.given("alpha-random")) c.alpha_random = f.alpha_random;
  if (f.given("attack")) c.attack_count = f.attack;
  if (f.given("alphas")) c.alphas = f.alphas;
  if (f.given("widths")) c.widths = f.widths;
  if (f.given("pairs")) c.pairs = f.pairs;
  if (f.given("cap")) c.rejection_cap = f.cap;
  if (f.given("sweep")) c.sweep = f.sweep;
  if (f.given("grid")) c.grid = f.grid;
  if (f.given("mode")) c.mode = f.mode;
  if (f.given("m")) c.ensemble_sizes = f.m;
  if (f.given("margin")) c.margins = f.margins;
  if (f.given("gp-depth")) c.gp_depth = f.gp_depth;
  if (f.given("sigma")) c.gp_sigma = f.sigma;
  if (f.given("dump-predictions")) c.dump_predictions = f.dump;
}

inline int run_study_command(const std::string& study, const StudyFlags& f) {
  ExperimentConfig cfg = f.config_path.empty() ? ExperimentConfig::defaults_for(study)
                                               : load_config(study, f.config_path);
  if (!f.given("out") && f.config_path.empty()) cfg.output_dir = (std::filesystem::path("results") / study).string();
  apply_flags(cfg, f);
  cfg.validate();
  const StudyData data = load_study_data(cfg.resolved_data_dir());
  const auto result = run_study(cfg, data);
  write_result(result, cfg.output_dir);
  std::cout << study << ": " << result.effective_trials() << "/" << result.trials.size()
            << " trials ok, results in " << cfg.output_dir << "\n";
  return 0;
}

inline std::filesystem::path data_dir_from(const std::string& flag) {
  ExperimentConfig c;
  c.data_dir = flag;
  return c.resolved_data_dir();
}

struct TrainFlags {
  std::string task = "mnist:subset=500";
  std::string data;
  std::string out;
  std::size_t depth = 3, width = 512;
  double init_scale = 1.0;
  std::string init_rule = "all-layers";
  std::string optimizer = "nero";
  double lr = 0.01, decay = 1.0, beta = 0.999, stop_loss = 0.0, stop_accuracy = 0.0;
  std::size_t epochs = 1000;
  std::uint64_t seed = 0;
};

inline int run_train_command(const TrainFlags& f) {
  const auto spec = TaskSpec::parse(f.task);
  OptimizerConfig opt;
  opt.kind = parse_optimizer_kind(f.optimizer);
  opt.learning_rate = f.lr;
  opt.lr_decay = f.decay;
  opt.nero_beta = f.beta;
  opt.epochs = f.epochs;
  opt.stop_loss = f.stop_loss;
  opt.stop_accuracy = f.stop_accuracy;
  opt.validate();
  const auto dir = data_dir_from(f.data);
  const RawDataset train_raw = load_mnist(dir, spec.split);
  const RawDataset test_raw = load_mnist(dir, Split::test);
  const Task task = make_task(train_raw, spec);
  const Task eval = make_eval_task(test_raw, spec);
  SeededRng rng(f.seed);
  SeededRng init_rng = rng.split(0);
  const Mlp start = starting_point(
      init_mlp(mlp_dims(task.input_dim(), f.depth, f.width, task.output_dim()), f.init_scale,
               parse_init_rule(f.init_rule), init_rng),
      opt);
  const auto trained = train(start, task, opt);
  nlohmann::json opt_json;
  to_json(opt_json, opt);
  const nlohmann::json summary{{"task", spec.to_string()},
                               {"seed", f.seed},
                               {"dims", trained.net.dims},
                               {"optimizer", opt_json},
                               {"epochs", trained.updates()},
                               {"stop_reason", trained.stop_reason},
                               {"final_loss", trained.final_loss()},
                               {"train_accuracy", accuracy(trained.net, task)},
                               {"test_accuracy", accuracy(trained.net, eval)}};
  const std::filesystem::path out(f.out);
  atomic_write(out / "init.json", to_json(start).dump() + "\n");
  atomic_write(out / "checkpoint.json", to_json(trained.net).dump() + "\n");
  atomic_write(out / "train_log.csv", training_log_csv(trained.log));
  atomic_write(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "train: " << trained.stop_reason << " after " << trained.updates()
            << " updates, loss " << trained.final_loss() << ", results in " << out.string() << "\n";
  return 0;
}

struct ReportFlags {
  std::string checkpoint;
  std::string task = "mnist:subset=500";
  std::string reference = "init";
  std::string data;
  std::string out;
};

inline int run_report_command(const ReportFlags& f) {
  const auto spec = TaskSpec::parse(f.task);
  const Mlp net = load_checkpoint(f.checkpoint);
  net.validate();
  ReferenceNet ref;
  if (f.reference == "zero") {
    ref = ReferenceNet::zeros_like(net);
  } else {
    const auto path = f.reference == "init"
                          ? std::filesystem::path(f.checkpoint).parent_path() / "init.json"
                          : std::filesystem::path(f.reference);
    ref = ReferenceNet::from(load_checkpoint(path));
  }
  const RawDataset raw = load_mnist(data_dir_from(f.data), spec.split);
  const Task task = make_task(raw, spec);
  const auto rep = report(net, task, ref);
  const std::filesystem::path out(f.out);
  nlohmann::json summary{{"task", spec.to_string()},
                         {"accuracy", accuracy(net, task)},
                         {"spectral_complexity", rep.spectral_complexity},
                         {"frobenius_factor", rep.frobenius_factor}};
  std::map<std::string, std::string> files{{"margins.csv", report_csv(rep)}};
  for (MarginKind k : {MarginKind::raw, MarginKind::frobenius, MarginKind::spectral}) {
    files["cdf_" + to_string(k) + ".csv"] = cdf_csv(margin_cdf(rep, k, MarginFilter::all));
    summary[to_string(k)] = summary_json(rep, k, MarginFilter::all);
  }
  for (const auto& [name, text] : files) atomic_write(out / name, text);
  atomic_write(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "report: " << rep.size() << " examples, results in " << out.string() << "\n";
  return 0;
}

struct DataFlags {
  std::string data;
  std::string task;
  std::string out;
};

inline int run_data_command(const DataFlags& f) {
  const auto dir = data_dir_from(f.data);
  const StudyData d = load_study_data(dir);
  nlohmann::json j{{"data_dir", dir.string()}, {"files", d.hashes}};
  for (const auto* raw : {&d.train, &d.test}) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(raw->classes), 0);
    for (int l : raw->labels) ++counts[static_cast<std::size_t>(l)];
    j[raw == &d.train ? "train" : "test"] = {{"examples", raw->size()},
                                             {"rows", raw->image_rows},
                                             {"cols", raw->image_cols},
                                             {"class_counts", counts}};
  }
  if (!f.task.empty()) {
    const auto spec = TaskSpec::parse(f.task);
    const Task t = make_task(spec.split == Split::train ? d.train : d.test, spec);
    j["task"] = {{"spec", spec.to_string()},
                 {"examples", t.size()},
                 {"clean", t.clean_count()},
                 {"binary", t.binary},
                 {"output_dim", t.output_dim()}};
  }
  const std::string text = j.dump(2) + "\n";
  if (!f.out.empty()) atomic_write(std::filesystem::path(f.out) / "data.json", text);
  std::cout << text;
  return 0;
}

}  // namespace detail

/// Entry point of the margin-lab command line tool.
inline int cli_main(int argc, char** argv) {
  CLI::App app{"Margin and generalization experiments on MNIST MLPs and NN-GP models", "margin-lab"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  detail::DataFlags data_flags;
  auto* data = app.add_subcommand("data", "Check the dataset and print split and task statistics");
  data->add_option("--data", data_flags.data, "MNIST directory");
  data->add_option("--task", data_flags.task, "Task spec, e.g. mnist:subset=1000:labels=random");
  data->add_option("--out", data_flags.out, "Also write data.json here");

  detail::TrainFlags tf;
  auto* tr = app.add_subcommand("train", "Train one network and save checkpoints");
  tr->add_option("--task", tf.task, "Task spec")->capture_default_str();
  tr->add_option("--data", tf.data, "MNIST directory");
  tr->add_option("--out", tf.out, "Output directory")->required();
  tr->add_option("--depth", tf.depth, "Number of layers")->capture_default_str();
  tr->add_option("--width", tf.width, "Hidden width")->capture_default_str();
  tr->add_option("--init-scale", tf.init_scale, "Initialization scale")->capture_default_str();
  tr->add_option("--init-rule", tf.init_rule, "all-layers or first-layer-only")->capture_default_str();
  tr->add_option("--optimizer", tf.optimizer, "nero or gd")->capture_default_str();
  tr->add_option("--lr", tf.lr, "Initial learning rate")->capture_default_str();
  tr->add_option("--decay", tf.decay, "Learning rate decay per update")->capture_default_str();
  tr->add_option("--beta", tf.beta, "Nero beta")->capture_default_str();
  tr->add_option("--epochs", tf.epochs, "Update budget")->capture_default_str();
  tr->add_option("--stop-loss", tf.stop_loss, "Stop below this loss (0: off)")->capture_default_str();
  tr->add_option("--stop-accuracy", tf.stop_accuracy, "Stop at this train accuracy (0: off)");
  tr->add_option("--seed", tf.seed, "Initialization seed")->capture_default_str();

  detail::ReportFlags rf;
  auto* rp = app.add_subcommand("report", "Margin distributions of a saved network");
  rp->add_option("--checkpoint", rf.checkpoint, "Network checkpoint")->required()->check(CLI::ExistingFile);
  rp->add_option("--task", rf.task, "Task spec")->capture_default_str();
  rp->add_option("--reference", rf.reference, "init (sibling init.json), zero, or a checkpoint path")
      ->capture_default_str();
  rp->add_option("--data", rf.data, "MNIST directory");
  rp->add_option("--out", rf.out, "Output directory")->required();

  std::map<std::string, detail::StudyFlags> flags;
  std::map<std::string, CLI::App*> studies;
  const std::map<std::string, std::string> descriptions{
      {"spectral-reversal", "True-label vs random-label spectrally-normalized margins"},
      {"twin-attack", "Control vs attack-set twins with matched normalized margins"},
      {"twin-sample", "Rejection-sampled vs trained twins on a tiny binary task"},
      {"margin-sweep", "Test accuracy across init scale, target margin or normalized margin"},
      {"ensembles", "GP and NN ensemble accuracy over normalized margin and size"}};
  for (const auto& name : study_names()) {
    auto* sub = app.add_subcommand(name, descriptions.at(name));
    auto& f = flags[name];
    detail::add_study_flags(sub, f);
    studies[name] = sub;
  }
  {
    auto& f = flags["spectral-reversal"];
    auto* s = studies["spectral-reversal"];
    f.opts["control"] = s->add_option("--control", f.control, "frobenius or none");
    f.opts["alpha-true"] = s->add_option("--alpha-true", f.alpha_true, "Target margin, true labels");
    f.opts["alpha-random"] = s->add_option("--alpha-random", f.alpha_random, "Target margin, random labels");
  }
  {
    auto& f = flags["twin-attack"];
    auto* s = studies["twin-attack"];
    f.opts["attack"] = s->add_option("--attack", f.attack, "Attack set size");
    f.opts["alphas"] = s->add_option("--alphas", f.alphas, "Target margins")->delimiter(',');
  }
  {
    auto& f = flags["twin-sample"];
    auto* s = studies["twin-sample"];
    f.opts["widths"] = s->add_option("--widths", f.widths, "Hidden widths")->delimiter(',');
    f.opts["pairs"] = s->add_option("--pairs", f.pairs, "Pairs per width and seed");
    f.opts["cap"] = s->add_option("--cap", f.cap, "Rejection sampling attempt cap");
  }
  {
    auto& f = flags["margin-sweep"];
    auto* s = studies["margin-sweep"];
    f.opts["sweep"] = s->add_option("--sweep", f.sweep, "init, margin or normalized");
    f.opts["grid"] = s->add_option("--grid", f.grid, "Grid values")->delimiter(',');
  }
  {
    auto& f = flags["ensembles"];
    auto* s = studies["ensembles"];
    f.opts["mode"] = s->add_option("--mode", f.mode, "gp, nn or both");
    f.opts["m"] = s->add_option("--m", f.m, "Ensemble sizes")->delimiter(',');
    f.opts["margin"] = s->add_option("--margin", f.margins, "Normalized margins")->delimiter(',');
    f.opts["gp-depth"] = s->add_option("--gp-depth", f.gp_depth, "Kernel depth");
    f.opts["sigma"] = s->add_option("--sigma", f.sigma, "GP weight scale");
    f.opts["dump-predictions"] = s->add_flag("--dump-predictions", f.dump, "Also write C1 and C2 per test point");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (data->parsed()) return detail::run_data_command(data_flags);
    if (tr->parsed()) return detail::run_train_command(tf);
    if (rp->parsed()) return detail::run_report_command(rf);
    for (const auto& [name, sub] : studies) {
      if (sub->parsed()) return detail::run_study_command(name, flags[name]);
    }
  } catch (const std::exception& e) {
    std::cerr << "margin-lab: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace margin_lab
