#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/dataset.hpp"
#include "margin_lab/error.hpp"
#include "margin_lab/harness/config.hpp"
#include "margin_lab/harness/parallel.hpp"
#include "margin_lab/harness/results.hpp"
#include "margin_lab/harness/stats.hpp"
#include "margin_lab/margins.hpp"
#include "margin_lab/network.hpp"
#include "margin_lab/nngp.hpp"
#include "margin_lab/rng.hpp"
#include "margin_lab/training.hpp"

namespace margin_lab {

/// Both MNIST splits plus content hashes of the files they came from.
struct StudyData {
  RawDataset train;
  RawDataset test;
  std::map<std::string, std::string> hashes;
};

inline StudyData load_study_data(const std::filesystem::path& dir) {
  StudyData d;
  for (Split split : {Split::train, Split::test}) {
    auto [images, labels] = find_mnist_files(dir, split);
    d.hashes[images.filename().string()] = git_blob_hash_file(images);
    d.hashes[labels.filename().string()] = git_blob_hash_file(labels);
    (split == Split::train ? d.train : d.test) = load_idx(images, labels);
  }
  return d;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline void require_study(const ExperimentConfig& cfg, const char* name) {
  cfg.validate();
  if (cfg.study != name) {
    throw ConfigError("config is for study '" + cfg.study + "', expected '" + name + "'");
  }
}

inline ExperimentResult start_result(const ExperimentConfig& cfg, const StudyData& data) {
  ExperimentResult r;
  r.study = cfg.study;
  to_json(r.config, cfg);
  r.input_hashes = data.hashes;
  return r;
}

/// Input dim, depth - 1 hidden layers of `width`, output dim.
inline std::vector<std::size_t> mlp_dims(std::size_t input, std::size_t depth, std::size_t width,
                                         std::size_t output) {
  std::vector<std::size_t> dims{input};
  for (std::size_t l = 1; l < depth; ++l) dims.push_back(width);
  dims.push_back(output);
  return dims;
}

inline ReferenceNet reference_for(const ExperimentConfig& cfg, const Mlp& start) {
  return cfg.reference == "zero" ? ReferenceNet::zeros_like(start) : ReferenceNet::from(start);
}

/// Weights training actually starts from.
inline Mlp starting_point(Mlp net, const OptimizerConfig& opt) {
  return opt.kind == OptimizerKind::nero ? nero_project(std::move(net)) : net;
}

inline std::string tag(double v) { return format_double(v); }

/// Output slot of one trial. Trials fill their own slot; the driver
/// assembles slots in index order.
struct TrialSlot {
  TrialRecord record;
  std::vector<std::vector<std::string>> rows;
  std::map<std::string, std::string> files;
  nlohmann::json extra = nlohmann::json::object();
};

/// Runs fn over every slot. Numerical failures mark the trial failed; other
/// errors abort the run.
template <typename Fn>
void run_slots(std::vector<TrialSlot>& slots, std::size_t threads, Fn fn) {
  parallel_for(slots.size(), threads, [&](std::size_t i) {
    auto& slot = slots[i];
    slot.record.index = i;
    const auto t0 = Clock::now();
    try {
      fn(i, slot);
    } catch (const NumericalError& e) {
      slot.record.ok = false;
      slot.record.error = e.what();
      slot.rows.clear();
      slot.files.clear();
    }
    slot.record.wall_seconds = seconds_since(t0);
  });
}

inline void collect(ExperimentResult& r, std::vector<TrialSlot>& slots, CsvTable& table) {
  for (auto& s : slots) {
    for (const auto& row : s.rows) table.row_cells(row);
    for (auto& [name, text] : s.files) r.files[name] = std::move(text);
    r.trials.push_back(std::move(s.record));
  }
}

inline std::string cell(double v) { return format_double(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }

}  // namespace detail

/// True-label and random-label nets on the same subset and initialization;
/// raw and spectrally-normalized margin distributions of each.
inline ExperimentResult run_spectral_reversal(const ExperimentConfig& cfg, const StudyData& data) {
  detail::require_study(cfg, "spectral-reversal");
  const auto t0 = detail::Clock::now();
  auto result = detail::start_result(cfg, data);
  const bool controlled = cfg.control == "frobenius";
  const OptimizerConfig opt_true = controlled ? cfg.optimizer : cfg.gd_arm_optimizer();
  OptimizerConfig opt_random = controlled ? cfg.random_arm_optimizer() : cfg.gd_arm_optimizer();
  if (controlled && opt_true.kind != OptimizerKind::nero) {
    throw ConfigError("spectral-reversal: frobenius control needs the nero optimizer");
  }
  if (controlled) opt_random.kind = OptimizerKind::nero;

  const Task eval = make_eval_task(data.test, cfg.train_spec(1.0), cfg.n_test);
  const char* arms[] = {"true", "random"};
  std::vector<detail::TrialSlot> slots(cfg.seeds.size() * 2);

  detail::run_slots(slots, cfg.threads, [&](std::size_t i, detail::TrialSlot& slot) {
    const std::uint64_t seed = cfg.seeds[i / 2];
    const bool random = i % 2 == 1;
    const std::string arm = arms[i % 2];
    slot.record.seed = seed;
    slot.record.label = arm;
    const double alpha = random ? cfg.alpha_random : cfg.alpha_true;
    const Task task = make_task(data.train, cfg.train_spec(alpha, random ? LabelScheme::random_labels
                                                                         : LabelScheme::true_labels));
    const auto& opt = random ? opt_random : opt_true;
    SeededRng rng(seed);
    SeededRng init_rng = rng.split(0);
    const Mlp start = detail::starting_point(
        init_mlp(detail::mlp_dims(task.input_dim(), cfg.depth, cfg.width, task.output_dim()),
                 cfg.init_scale, parse_init_rule(cfg.init_rule), init_rng),
        opt);
    const auto trained = train(start, task, opt);
    const auto rep = report(trained.net, task, detail::reference_for(cfg, start));
    const double train_acc = accuracy(trained.net, task);
    const double test_acc = accuracy(trained.net, eval);
    slot.record.train_accuracy = train_acc;
    slot.record.test_accuracy = test_acc;
    slot.record.margin_summary = summary_json(rep, MarginKind::spectral, MarginFilter::all);

    const auto raw_cdf = margin_cdf(rep, MarginKind::raw, MarginFilter::all);
    const auto spec_cdf = margin_cdf(rep, MarginKind::spectral, MarginFilter::all);
    const auto frob_cdf = margin_cdf(rep, MarginKind::frobenius, MarginFilter::all);
    const std::string suffix = arm + "_seed" + std::to_string(seed) + ".csv";
    slot.files["margins_" + suffix] = report_csv(rep);
    slot.files["cdf_raw_" + suffix] = cdf_csv(raw_cdf);
    slot.files["cdf_spectral_" + suffix] = cdf_csv(spec_cdf);
    slot.rows.push_back({std::to_string(seed), arm, detail::cell(alpha),
                         detail::cell(trained.updates()), trained.stop_reason,
                         detail::cell(trained.final_loss()), detail::cell(train_acc),
                         detail::cell(test_acc), detail::cell(rep.spectral_complexity),
                         detail::cell(median(raw_cdf)), detail::cell(median(spec_cdf)),
                         detail::cell(median(frob_cdf))});
    slot.extra["median_spectral"] = median(spec_cdf);
  });

  CsvTable table({"seed", "arm", "alpha", "epochs", "stop_reason", "final_loss", "train_accuracy",
                  "test_accuracy", "spectral_complexity", "median_raw_margin",
                  "median_spectral_margin", "median_frobenius_margin"});
  std::map<std::string, std::vector<double>> test_acc, med_spec;
  for (const auto& s : slots) {
    if (!s.record.ok) continue;
    test_acc[s.record.label].push_back(s.record.test_accuracy);
    med_spec[s.record.label].push_back(s.extra["median_spectral"].get<double>());
  }
  detail::collect(result, slots, table);
  result.files["summary.csv"] = table.str();
  for (const char* arm : arms) {
    result.aggregates[arm] = {{"trials", test_acc[arm].size()},
                              {"test_accuracy_mean", mean_of(test_acc[arm])},
                              {"test_accuracy_sem", sem_of(test_acc[arm])},
                              {"median_spectral_margin_mean", mean_of(med_spec[arm])}};
  }
  if (!med_spec["true"].empty() && !med_spec["random"].empty()) {
    result.aggregates["reversed"] = mean_of(med_spec["random"]) > mean_of(med_spec["true"]);
  }
  result.wall_seconds = detail::seconds_since(t0);
  return result;
}

/// Control twin on the clean subset, attack twin on the clean subset plus a
/// randomly labeled attack set; same seed and architecture.
inline ExperimentResult run_twin_attack(const ExperimentConfig& cfg, const StudyData& data) {
  detail::require_study(cfg, "twin-attack");
  const auto t0 = detail::Clock::now();
  auto result = detail::start_result(cfg, data);
  if (cfg.optimizer.kind != OptimizerKind::nero) {
    throw ConfigError("twin-attack: the twins are trained with the nero optimizer");
  }
  const Task eval = make_eval_task(data.test, cfg.train_spec(1.0), cfg.n_test);
  const char* twins[] = {"control", "attack"};
  const std::size_t per_seed = cfg.alphas.size() * 2;
  std::vector<detail::TrialSlot> slots(cfg.seeds.size() * per_seed);

  detail::run_slots(slots, cfg.threads, [&](std::size_t i, detail::TrialSlot& slot) {
    const std::uint64_t seed = cfg.seeds[i / per_seed];
    const double alpha = cfg.alphas[(i % per_seed) / 2];
    const bool attack = i % 2 == 1;
    const std::string twin = twins[i % 2];
    slot.record.seed = seed;
    slot.record.label = twin + " alpha=" + detail::tag(alpha);
    const Task task = make_task(data.train, cfg.train_spec(alpha, LabelScheme::true_labels,
                                                           attack ? cfg.attack_count : 0));
    SeededRng rng(seed);
    SeededRng init_rng = rng.split(0);
    const Mlp start = detail::starting_point(
        init_mlp(detail::mlp_dims(task.input_dim(), cfg.depth, cfg.width, task.output_dim()),
                 cfg.init_scale, parse_init_rule(cfg.init_rule), init_rng),
        cfg.optimizer);
    const auto trained = train(start, task, cfg.optimizer);
    const auto rep = report(trained.net, task, detail::reference_for(cfg, start));
    const auto clean = select_margins(rep, MarginKind::frobenius, MarginFilter::clean_only);
    std::size_t clean_correct = 0;
    for (std::size_t k = 0; k < rep.size(); ++k) clean_correct += rep.clean[k] && rep.correct[k];
    const double clean_acc = static_cast<double>(clean_correct) / static_cast<double>(clean.size());
    const double train_acc = accuracy(trained.net, task);
    const double test_acc = accuracy(trained.net, eval);
    slot.record.train_accuracy = train_acc;
    slot.record.test_accuracy = test_acc;
    slot.record.margin_summary = summary_json(rep, MarginKind::frobenius, MarginFilter::clean_only);
    const auto cdf = empirical_cdf(clean);
    slot.files["cdf_frob_clean_" + twin + "_alpha" + detail::tag(alpha) + "_seed" +
               std::to_string(seed) + ".csv"] = cdf_csv(cdf);
    slot.rows.push_back({std::to_string(seed), detail::cell(alpha), twin,
                         detail::cell(task.size()), detail::cell(trained.updates()),
                         trained.stop_reason, detail::cell(trained.final_loss()),
                         detail::cell(train_acc), detail::cell(clean_acc), detail::cell(test_acc),
                         detail::cell(mean_of(cdf.values)), detail::cell(median(cdf))});
    slot.extra["clean_margins"] = cdf.values;
  });

  CsvTable pairs({"seed", "alpha", "control_test_accuracy", "attack_test_accuracy",
                  "accuracy_gap", "wasserstein", "control_mean_clean_margin",
                  "attack_mean_clean_margin"});
  std::vector<double> gaps, ratios;
  for (std::size_t p = 0; p < slots.size(); p += 2) {
    const auto& c = slots[p];
    const auto& a = slots[p + 1];
    if (!c.record.ok || !a.record.ok) continue;
    const Cdf cc = empirical_cdf(c.extra["clean_margins"].get<std::vector<double>>());
    const Cdf ac = empirical_cdf(a.extra["clean_margins"].get<std::vector<double>>());
    const double w = wasserstein1(cc, ac);
    const double gap = c.record.test_accuracy - a.record.test_accuracy;
    const double cm = mean_of(cc.values);
    pairs.row(c.record.seed, cfg.alphas[(p % per_seed) / 2], c.record.test_accuracy,
              a.record.test_accuracy, gap, w, cm, mean_of(ac.values));
    gaps.push_back(gap);
    ratios.push_back(w / cm);
  }
  CsvTable table({"seed", "alpha", "twin", "train_size", "epochs", "stop_reason", "final_loss",
                  "train_accuracy", "clean_train_accuracy", "test_accuracy",
                  "mean_clean_frob_margin", "median_clean_frob_margin"});
  detail::collect(result, slots, table);
  result.files["twins.csv"] = table.str();
  result.files["pairs.csv"] = pairs.str();
  result.aggregates = {{"pairs", gaps.size()},
                       {"accuracy_gap_mean", mean_of(gaps)},
                       {"accuracy_gap_sem", sem_of(gaps)},
                       {"wasserstein_over_mean_margin_mean", mean_of(ratios)}};
  result.wall_seconds = detail::seconds_since(t0);
  return result;
}

/// Outcome of rejection sampling a projected net that fits a binary task.
struct SampledNet {
  Mlp net;
  std::uint64_t attempts = 0;
  bool found = false;
};

/// Draws Gaussian nets, projects them and keeps the first that classifies
/// every training point correctly.
inline SampledNet rejection_sample(const std::vector<std::size_t>& dims, const Task& task,
                                   std::uint64_t cap, SeededRng& rng) {
  if (!task.binary) throw ConfigError("rejection_sample: task must be binary");
  SampledNet out;
  while (out.attempts < cap) {
    ++out.attempts;
    Mlp net = nero_project(init_mlp(dims, 1.0, InitRule::all_layers, rng));
    const Matrix o = predict(net, task.inputs);
    bool all = true;
    for (std::size_t i = 0; i < task.size() && all; ++i) all = o(i, 0) * task.labels[i] > 0.0;
    if (all) {
      out.net = std::move(net);
      out.found = true;
      break;
    }
  }
  return out;
}

/// Sampled/trained twins: a rejection-sampled projected net and a Nero-trained
/// net fitted to its training-set outputs.
inline ExperimentResult run_twin_sample(const ExperimentConfig& cfg, const StudyData& data) {
  detail::require_study(cfg, "twin-sample");
  const auto t0 = detail::Clock::now();
  auto result = detail::start_result(cfg, data);
  const auto spec = cfg.train_spec(1.0);
  if (!spec.classes.binary()) throw ConfigError("twin-sample: classes must be a binary task");
  if (cfg.optimizer.kind != OptimizerKind::nero) {
    throw ConfigError("twin-sample: the trained twin uses the nero optimizer");
  }
  OptimizerConfig opt = cfg.optimizer;
  opt.stop_loss = cfg.match_tolerance * cfg.match_tolerance;  // loss is the squared L2 difference
  opt.stop_accuracy = 0.0;
  const Task task = make_task(data.train, spec);
  const Task eval = make_eval_task(data.test, spec, cfg.n_test);
  const std::size_t per_width = cfg.seeds.size() * cfg.pairs;
  std::vector<detail::TrialSlot> slots(cfg.widths.size() * per_width);

  detail::run_slots(slots, cfg.threads, [&](std::size_t i, detail::TrialSlot& slot) {
    const std::size_t wi = i / per_width;
    const std::size_t width = cfg.widths[wi];
    const std::uint64_t seed = cfg.seeds[(i % per_width) / cfg.pairs];
    const std::size_t pair = i % cfg.pairs;
    slot.record.seed = seed;
    slot.record.label = "width=" + std::to_string(width) + " pair=" + std::to_string(pair);
    const auto dims = detail::mlp_dims(task.input_dim(), cfg.depth, width, 1);
    SeededRng rng = SeededRng(seed).split(wi).split(pair);
    SeededRng sample_rng = rng.split(0);
    SeededRng init_rng = rng.split(1);
    const auto sampled = rejection_sample(dims, task, cfg.rejection_cap, sample_rng);
    if (!sampled.found) {
      slot.record.ok = false;
      slot.record.error = "rejection sampling hit the cap of " + std::to_string(cfg.rejection_cap) +
                          " attempts";
      return;
    }
    const Matrix target = predict(sampled.net, task.inputs);
    const Mlp start = init_mlp(dims, cfg.init_scale, parse_init_rule(cfg.init_rule), init_rng);
    const auto trained = train(start, task.inputs, target, opt);
    const Matrix out = predict(trained.net, task.inputs);
    Matrix diff = out;
    diff -= target;
    const double l2 = frobenius_norm(diff);
    const ReferenceNet ref = ReferenceNet::zeros_like(sampled.net);
    const auto rs = report(sampled.net, task, ref);
    const auto rt = report(trained.net, task, ref);
    // relative error: L2 margin gap over the L2 size of the sampled margins
    double gap2 = 0.0, scale2 = 0.0, pointwise = 0.0;
    for (std::size_t k = 0; k < rs.size(); ++k) {
      const double d = rt.frobenius[k] - rs.frobenius[k];
      gap2 += d * d;
      scale2 += rs.frobenius[k] * rs.frobenius[k];
      pointwise = std::max(pointwise, std::abs(d) / std::abs(rs.frobenius[k]));
    }
    const double rel = std::sqrt(gap2 / scale2);
    const double acc_s = accuracy(sampled.net, eval);
    const double acc_t = accuracy(trained.net, eval);
    const bool matched = l2 < cfg.match_tolerance;
    slot.record.train_accuracy = accuracy(trained.net, task);
    slot.record.test_accuracy = acc_t;
    slot.record.margin_summary = summary_json(rt, MarginKind::frobenius, MarginFilter::all);
    slot.rows.push_back({std::to_string(width), std::to_string(seed), std::to_string(pair),
                         std::to_string(sampled.attempts), detail::cell(trained.updates()),
                         detail::cell(l2), detail::cell(rel), detail::cell(pointwise), detail::cell(acc_s),
                         detail::cell(acc_t), matched ? "1" : "0"});
    slot.extra = {{"sampled", acc_s}, {"trained", acc_t}, {"matched", matched}, {"worst", rel}, {"pointwise", pointwise}};
  });

  CsvTable widths({"width", "pairs", "skipped", "unmatched", "sampled_mean", "sampled_sem",
                   "trained_mean", "trained_sem", "gap", "combined_sem", "significant",
                   "worst_relative_margin_error", "worst_pointwise_relative_error"});
  nlohmann::json per_width_json = nlohmann::json::array();
  for (std::size_t wi = 0; wi < cfg.widths.size(); ++wi) {
    std::vector<double> sa, ta;
    std::size_t skipped = 0, unmatched = 0;
    double worst = 0.0, worst_pointwise = 0.0;
    for (std::size_t k = wi * per_width; k < (wi + 1) * per_width; ++k) {
      const auto& s = slots[k];
      if (!s.record.ok) {
        ++skipped;
        continue;
      }
      sa.push_back(s.extra["sampled"].get<double>());
      ta.push_back(s.extra["trained"].get<double>());
      unmatched += s.extra["matched"].get<bool>() ? 0 : 1;
      worst = std::max(worst, s.extra["worst"].get<double>());
      worst_pointwise = std::max(worst_pointwise, s.extra["pointwise"].get<double>());
    }
    const double gap = mean_of(sa) - mean_of(ta);
    const double combined = std::sqrt(sem_of(sa) * sem_of(sa) + sem_of(ta) * sem_of(ta));
    const bool significant = std::abs(gap) > 2.0 * combined;
    widths.row(cfg.widths[wi], sa.size(), skipped, unmatched, mean_of(sa), sem_of(sa),
               mean_of(ta), sem_of(ta), gap, combined, significant, worst, worst_pointwise);
    per_width_json.push_back({{"width", cfg.widths[wi]},
                              {"pairs", sa.size()},
                              {"skipped", skipped},
                              {"unmatched", unmatched},
                              {"gap", gap},
                              {"significant", significant},
                              {"worst_relative_margin_error", worst},
                              {"worst_pointwise_relative_error", worst_pointwise}});
  }
  CsvTable table({"width", "seed", "pair", "attempts", "epochs", "l2_difference",
                  "relative_margin_error", "max_pointwise_relative_error", "sampled_test_accuracy", "trained_test_accuracy",
                  "matched"});
  detail::collect(result, slots, table);
  result.files["pairs.csv"] = table.str();
  result.files["widths.csv"] = widths.str();
  result.aggregates = {{"widths", per_width_json}};
  result.wall_seconds = detail::seconds_since(t0);
  return result;
}

/// One of the three controlled sweeps: initialization scale (target margin
/// fixed), target margin, or Frobenius-normalized margin under Nero control.
inline ExperimentResult run_margin_sweep(const ExperimentConfig& cfg, const StudyData& data) {
  detail::require_study(cfg, "margin-sweep");
  const auto t0 = detail::Clock::now();
  auto result = detail::start_result(cfg, data);
  const bool normalized = cfg.sweep == "normalized";
  OptimizerConfig opt = normalized ? cfg.optimizer : cfg.gd_arm_optimizer();
  if (normalized) opt.kind = OptimizerKind::nero;
  const Task eval = make_eval_task(data.test, cfg.train_spec(1.0), cfg.n_test);
  const std::size_t per_seed = cfg.grid.size();
  std::vector<detail::TrialSlot> slots(cfg.seeds.size() * per_seed);

  detail::run_slots(slots, cfg.threads, [&](std::size_t i, detail::TrialSlot& slot) {
    const std::uint64_t seed = cfg.seeds[i / per_seed];
    const double value = cfg.grid[i % per_seed];
    const double scale = cfg.sweep == "init" ? value : cfg.init_scale;
    const double alpha = cfg.sweep == "init" ? cfg.alpha_true : value;
    slot.record.seed = seed;
    slot.record.label = cfg.sweep + "=" + detail::tag(value);
    const Task task = make_task(data.train, cfg.train_spec(alpha));
    SeededRng rng(seed);
    SeededRng init_rng = rng.split(0);
    const Mlp start = detail::starting_point(
        init_mlp(detail::mlp_dims(task.input_dim(), cfg.depth, cfg.width, task.output_dim()), scale,
                 parse_init_rule(cfg.init_rule), init_rng),
        opt);
    const auto trained = train(start, task, opt);
    const auto rep = report(trained.net, task, detail::reference_for(cfg, start));
    const double train_acc = accuracy(trained.net, task);
    const double test_acc = accuracy(trained.net, eval);
    const double targeted = alpha * rep.frobenius_factor;
    const auto frob = margin_cdf(rep, MarginKind::frobenius, MarginFilter::all);
    slot.record.train_accuracy = train_acc;
    slot.record.test_accuracy = test_acc;
    slot.record.margin_summary = summary_json(rep, MarginKind::frobenius, MarginFilter::all);
    slot.rows.push_back({cfg.sweep, detail::cell(value), std::to_string(seed), detail::cell(alpha),
                         detail::cell(scale), detail::cell(trained.updates()), trained.stop_reason,
                         detail::cell(trained.final_loss()), detail::cell(train_acc),
                         detail::cell(test_acc), detail::cell(rep.frobenius_factor),
                         detail::cell(targeted), detail::cell(median(frob))});
    slot.extra = {{"targeted", targeted}, {"median_frob", median(frob)}};
  });

  CsvTable summary({"sweep", "value", "trials", "test_accuracy_mean", "test_accuracy_sem",
                    "train_accuracy_mean", "targeted_normalized_margin_mean",
                    "median_frob_margin_mean"});
  nlohmann::json agg = nlohmann::json::array();
  for (std::size_t g = 0; g < per_seed; ++g) {
    std::vector<double> te, tr, tn, mf;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      const auto& slot = slots[s * per_seed + g];
      if (!slot.record.ok) continue;
      te.push_back(slot.record.test_accuracy);
      tr.push_back(slot.record.train_accuracy);
      tn.push_back(slot.extra["targeted"].get<double>());
      mf.push_back(slot.extra["median_frob"].get<double>());
    }
    summary.row(cfg.sweep, cfg.grid[g], te.size(), mean_of(te), sem_of(te), mean_of(tr),
                mean_of(tn), mean_of(mf));
    agg.push_back({{"value", cfg.grid[g]},
                   {"trials", te.size()},
                   {"test_accuracy_mean", mean_of(te)},
                   {"test_accuracy_sem", sem_of(te)}});
  }
  CsvTable table({"sweep", "value", "seed", "alpha", "init_scale", "epochs", "stop_reason",
                  "final_loss", "train_accuracy", "test_accuracy", "frobenius_factor",
                  "targeted_normalized_margin", "median_frob_margin"});
  detail::collect(result, slots, table);
  result.files["sweep.csv"] = table.str();
  result.files["sweep_summary.csv"] = summary.str();
  result.aggregates = {{"grid", agg}};
  result.wall_seconds = detail::seconds_since(t0);
  return result;
}

namespace detail {

/// One ensemble draw per test point at the given normalized margin.
inline std::vector<EnsembleDraw> gp_ensemble_draws(const std::vector<PosteriorAtPoint>& post,
                                                   std::size_t depth, double sigma,
                                                   double normalized_margin, std::size_t m,
                                                   SeededRng& rng) {
  const double gamma = normalized_margin * std::pow(sigma, static_cast<double>(depth));
  std::vector<EnsembleDraw> out;
  out.reserve(post.size());
  for (const auto& p : post) out.push_back(ensemble_draw(rescale_posterior(p, depth, sigma, gamma), m, rng));
  return out;
}

inline double gp_ensemble_accuracy(const std::vector<PosteriorAtPoint>& post,
                                   std::span<const int> labels, std::size_t depth, double sigma,
                                   double normalized_margin, std::size_t m, SeededRng& rng) {
  const auto draws = gp_ensemble_draws(post, depth, sigma, normalized_margin, m, rng);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < draws.size(); ++j) hits += draws[j].sign == labels[j] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(post.size());
}

}  // namespace detail

/// Accuracy grid over (normalized margin, ensemble size) for GP draws and/or
/// trained Nero nets whose raw outputs are averaged before taking the sign.
inline ExperimentResult run_ensembles(const ExperimentConfig& cfg, const StudyData& data) {
  detail::require_study(cfg, "ensembles");
  const auto t0 = detail::Clock::now();
  auto result = detail::start_result(cfg, data);
  const auto spec = cfg.train_spec(1.0);
  if (!spec.classes.binary()) throw ConfigError("ensembles: classes must be a binary task");
  const Task task = make_task(data.train, spec);
  const Task eval = make_eval_task(data.test, spec, cfg.n_test);
  const bool gp = cfg.mode != "nn";
  const bool nn = cfg.mode != "gp";
  const std::size_t nm = cfg.margins.size();
  const std::size_t nk = cfg.ensemble_sizes.size();

  // Grid rows keyed by (mode, margin index, size index, seed index).
  struct Cell {
    std::string mode;
    std::size_t mi, ki, si;
    double accuracy;
  };
  std::vector<Cell> cells;
  std::vector<detail::TrialSlot> gp_slots, nn_slots;

  if (gp) {
    const auto model = fit_gp(task.inputs, task.labels, cfg.gp_depth, 1.0, 1.0);
    const auto post = posterior_batch(model, eval.inputs);
    if (cfg.dump_predictions) {
      CsvTable t({"test_index", "label", "c1", "c2"});
      for (std::size_t j = 0; j < post.size(); ++j) t.row(j, eval.labels[j], post[j].c1, post[j].c2);
      result.files["gp_posterior.csv"] = t.str();
      // draws of the first seed, same streams as its accuracy cells
      CsvTable pred({"normalized_margin", "seed", "test_index", "C1", "C2", "m", "draw", "sign"});
      for (std::size_t mi = 0; mi < nm; ++mi) {
        for (std::size_t ki = 0; ki < nk; ++ki) {
          SeededRng rng = SeededRng(cfg.seeds.front()).split(mi).split(ki);
          const auto draws = detail::gp_ensemble_draws(post, cfg.gp_depth, cfg.gp_sigma, cfg.margins[mi],
                                                       cfg.ensemble_sizes[ki], rng);
          for (std::size_t j = 0; j < draws.size(); ++j) {
            pred.row(cfg.margins[mi], cfg.seeds.front(), j, post[j].c1, post[j].c2,
                     cfg.ensemble_sizes[ki], draws[j].draw, draws[j].sign);
          }
        }
      }
      result.files["gp_predictions.csv"] = pred.str();
      result.files["gp_model.json"] = to_json(model).dump() + "\n";
    }
    result.aggregates["gp_jitter"] = model.factor.jitter;
    gp_slots.resize(cfg.seeds.size());
    detail::run_slots(gp_slots, cfg.threads, [&](std::size_t s, detail::TrialSlot& slot) {
      const std::uint64_t seed = cfg.seeds[s];
      slot.record.seed = seed;
      slot.record.label = "gp";
      std::vector<double> accs;
      for (std::size_t mi = 0; mi < nm; ++mi) {
        for (std::size_t ki = 0; ki < nk; ++ki) {
          SeededRng rng = SeededRng(seed).split(mi).split(ki);
          accs.push_back(detail::gp_ensemble_accuracy(post, eval.labels, cfg.gp_depth, cfg.gp_sigma,
                                                      cfg.margins[mi], cfg.ensemble_sizes[ki], rng));
        }
      }
      slot.extra["accuracy"] = accs;
      slot.record.test_accuracy = mean_of(accs);
    });
    for (std::size_t s = 0; s < gp_slots.size(); ++s) {
      if (!gp_slots[s].record.ok) continue;
      const auto accs = gp_slots[s].extra["accuracy"].get<std::vector<double>>();
      for (std::size_t mi = 0; mi < nm; ++mi) {
        for (std::size_t ki = 0; ki < nk; ++ki) cells.push_back({"gp", mi, ki, s, accs[mi * nk + ki]});
      }
    }
  }

  if (nn) {
    std::vector<std::size_t> sizes = cfg.ensemble_sizes;
    const std::size_t members = *std::max_element(sizes.begin(), sizes.end());
    const auto dims = detail::mlp_dims(task.input_dim(), cfg.depth, cfg.width, 1);
    OptimizerConfig opt = cfg.optimizer;
    opt.kind = OptimizerKind::nero;
    nn_slots.resize(cfg.seeds.size() * nm);
    detail::run_slots(nn_slots, cfg.threads, [&](std::size_t i, detail::TrialSlot& slot) {
      const std::uint64_t seed = cfg.seeds[i / nm];
      const std::size_t mi = i % nm;
      const double margin_target = cfg.margins[mi];
      slot.record.seed = seed;
      slot.record.label = "nn margin=" + detail::tag(margin_target);
      Task t = task;
      t.alpha.assign(t.size(), margin_target);
      const Matrix targets = t.targets();
      // Member k of every ensemble size shares one initialization stream.
      std::vector<Matrix> outputs;
      double train_acc = 0.0;
      for (std::size_t k = 0; k < members; ++k) {
        SeededRng init_rng = SeededRng(seed).split(k);
        const auto trained = train(init_mlp(dims, cfg.init_scale, parse_init_rule(cfg.init_rule), init_rng),
                                   t.inputs, targets, opt);
        if (k == 0) train_acc = accuracy(trained.net, t);
        outputs.push_back(predict(trained.net, eval.inputs));
      }
      std::vector<double> accs;
      for (std::size_t ki = 0; ki < nk; ++ki) {
        const std::size_t m = sizes[ki];
        std::size_t hits = 0;
        for (std::size_t j = 0; j < eval.size(); ++j) {
          double sum = 0.0;
          for (std::size_t k = 0; k < m; ++k) sum += outputs[k](j, 0);
          const int sign = sum / static_cast<double>(m) >= 0.0 ? 1 : -1;
          hits += sign == eval.labels[j] ? 1 : 0;
        }
        accs.push_back(static_cast<double>(hits) / static_cast<double>(eval.size()));
      }
      slot.extra["accuracy"] = accs;
      slot.record.train_accuracy = train_acc;
      slot.record.test_accuracy = accs.front();
    });
    for (std::size_t i = 0; i < nn_slots.size(); ++i) {
      if (!nn_slots[i].record.ok) continue;
      const auto accs = nn_slots[i].extra["accuracy"].get<std::vector<double>>();
      for (std::size_t ki = 0; ki < nk; ++ki) cells.push_back({"nn", i % nm, ki, i / nm, accs[ki]});
    }
  }

  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return std::tie(a.mode, a.mi, a.ki, a.si) < std::tie(b.mode, b.mi, b.ki, b.si);
  });
  CsvTable grid({"mode", "normalized_margin", "m", "seed", "accuracy"});
  CsvTable summary({"mode", "normalized_margin", "m", "trials", "accuracy_mean", "accuracy_sem"});
  nlohmann::json agg = nlohmann::json::array();
  for (std::size_t c = 0; c < cells.size();) {
    std::vector<double> accs;
    std::size_t e = c;
    for (; e < cells.size() && cells[e].mode == cells[c].mode && cells[e].mi == cells[c].mi &&
           cells[e].ki == cells[c].ki;
         ++e) {
      grid.row(cells[e].mode, cfg.margins[cells[e].mi], cfg.ensemble_sizes[cells[e].ki],
               cfg.seeds[cells[e].si], cells[e].accuracy);
      accs.push_back(cells[e].accuracy);
    }
    summary.row(cells[c].mode, cfg.margins[cells[c].mi], cfg.ensemble_sizes[cells[c].ki], accs.size(),
                mean_of(accs), sem_of(accs));
    agg.push_back({{"mode", cells[c].mode},
                   {"normalized_margin", cfg.margins[cells[c].mi]},
                   {"m", cfg.ensemble_sizes[cells[c].ki]},
                   {"trials", accs.size()},
                   {"accuracy_mean", mean_of(accs)},
                   {"accuracy_sem", sem_of(accs)}});
    c = e;
  }
  for (auto& s : gp_slots) result.trials.push_back(std::move(s.record));
  for (auto& s : nn_slots) result.trials.push_back(std::move(s.record));
  for (std::size_t i = 0; i < result.trials.size(); ++i) result.trials[i].index = i;
  result.files["grid.csv"] = grid.str();
  result.files["grid_summary.csv"] = summary.str();
  result.aggregates["grid"] = agg;
  result.wall_seconds = detail::seconds_since(t0);
  return result;
}

inline ExperimentResult run_study(const ExperimentConfig& cfg, const StudyData& data) {
  if (cfg.study == "spectral-reversal") return run_spectral_reversal(cfg, data);
  if (cfg.study == "twin-attack") return run_twin_attack(cfg, data);
  if (cfg.study == "twin-sample") return run_twin_sample(cfg, data);
  if (cfg.study == "margin-sweep") return run_margin_sweep(cfg, data);
  if (cfg.study == "ensembles") return run_ensembles(cfg, data);
  throw ConfigError("unknown study '" + cfg.study + "'");
}

}  // namespace margin_lab
