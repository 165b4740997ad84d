#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/dataset.hpp"
#include "margin_lab/error.hpp"
#include "margin_lab/training.hpp"

namespace margin_lab {

inline constexpr int kConfigSchemaVersion = 1;

inline const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names{"spectral-reversal", "twin-attack", "twin-sample",
                                              "margin-sweep", "ensembles"};
  return names;
}

/// Settings of one study run. Every field is optional in the JSON form;
/// missing fields take the study's desk-scale defaults.
struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string study;
  std::string data_dir;  ///< empty: $MARGIN_LAB_DATA, then ./data/mnist
  std::string output_dir = "results";
  std::size_t threads = 0;
  std::vector<std::uint64_t> seeds{0};
  std::uint64_t data_seed = 0;

  // Task
  std::string classes = "all";
  std::size_t n_train = 500;
  std::size_t n_test = 0;  ///< 0: the whole (class-filtered) test split
  bool balanced = false;

  // Architecture and optimization
  std::size_t depth = 3;
  std::size_t width = 512;
  double init_scale = 1.0;
  std::string init_rule = "all-layers";
  OptimizerConfig optimizer;
  std::string reference = "init";  ///< init | zero

  // spectral-reversal
  std::string control = "frobenius";  ///< frobenius (Nero) | none (plain GD)
  double alpha_true = 1.0;
  double alpha_random = 100.0;
  nlohmann::json optimizer_random = nullptr;  ///< overrides for the random-label arm
  /// overrides for runs without Frobenius control; the summed loss needs a small step
  nlohmann::json optimizer_gd = {{"kind", "gd"}, {"learning_rate", 1e-5}, {"lr_decay", 1.0}};

  // twin-attack
  std::size_t attack_count = 1000;
  std::vector<double> alphas{1.0};

  // twin-sample
  std::vector<std::size_t> widths{64};
  std::size_t pairs = 100;
  std::uint64_t rejection_cap = 1'000'000;
  double match_tolerance = 1e-6;

  // margin-sweep
  std::string sweep = "normalized";  ///< init | margin | normalized
  std::vector<double> grid{0.01, 0.1, 1.0, 10.0};

  // ensembles
  std::string mode = "gp";  ///< gp | nn | both
  std::vector<std::size_t> ensemble_sizes{1, 10, 100};
  std::vector<double> margins{1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::size_t gp_depth = 5;
  double gp_sigma = 1.0;
  bool dump_predictions = false;

  /// Desk-scale defaults of a study.
  static ExperimentConfig defaults_for(const std::string& study) {
    ExperimentConfig c;
    c.study = study;
    if (study == "spectral-reversal") {
      c.n_train = 500;
      c.depth = 3;
      c.width = 512;
      c.optimizer.learning_rate = 0.01;
      // same fixed budget for both arms, no early stop
      c.optimizer.lr_decay = 1.0;
      c.optimizer.epochs = 3000;
      c.optimizer.stop_loss = 0.0;
    } else if (study == "twin-attack") {
      c.n_train = 500;
      c.attack_count = 1000;
      c.depth = 2;
      c.width = 512;
      c.alphas = {1.0};
      c.optimizer.learning_rate = 0.01;
      c.optimizer.lr_decay = 0.999;
      c.optimizer.epochs = 5000;
      c.optimizer.stop_loss = 1e-4;
    } else if (study == "twin-sample") {
      c.classes = "0v1";
      c.n_train = 5;
      c.balanced = true;
      c.depth = 7;
      c.widths = {64};
      c.pairs = 100;
      c.optimizer.learning_rate = 0.01;
      c.optimizer.lr_decay = 0.995;
      c.optimizer.epochs = 20000;
    } else if (study == "margin-sweep") {
      c.n_train = 1000;
      c.depth = 2;
      c.width = 512;
      c.sweep = "normalized";
      c.grid = {0.01, 0.1, 1.0, 10.0};
      c.optimizer.learning_rate = 0.01;
      c.optimizer.lr_decay = 0.999;
      c.optimizer.epochs = 3000;
      c.optimizer.stop_loss = 1e-4;
    } else if (study == "ensembles") {
      c.classes = "evenodd";
      c.n_train = 1000;
      c.n_test = 2000;
      c.mode = "gp";
      c.depth = 3;
      c.width = 256;
      c.ensemble_sizes = {1, 10, 100};
      c.margins = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
      c.seeds.clear();
      for (std::uint64_t s = 0; s < 20; ++s) c.seeds.push_back(s);
      c.optimizer.learning_rate = 0.01;
      c.optimizer.lr_decay = 0.99;
      c.optimizer.nero_beta = 0.999;
      c.optimizer.epochs = 500;
    } else {
      throw ConfigError("unknown study '" + study + "'");
    }
    return c;
  }

  /// Data directory after applying $MARGIN_LAB_DATA and the default.
  std::filesystem::path resolved_data_dir() const {
    if (!data_dir.empty()) return data_dir;
    if (const char* env = std::getenv("MARGIN_LAB_DATA"); env != nullptr && *env != '\0') return env;
    return "data/mnist";
  }

  /// Task spec for the training split.
  TaskSpec train_spec(double alpha, LabelScheme labels = LabelScheme::true_labels,
                      std::size_t attack = 0) const {
    TaskSpec s;
    s.subset = n_train;
    s.classes = ClassFilter::parse(classes);
    s.labels = labels;
    s.attack = attack;
    s.seed = data_seed;
    s.alpha = alpha;
    s.balanced = balanced;
    return s;
  }

  /// `optimizer` with the fields of `overrides` replaced.
  OptimizerConfig merged_optimizer(const nlohmann::json& overrides) const {
    if (overrides.is_null()) return optimizer;
    if (!overrides.is_object()) throw ConfigError("config: optimizer overrides must be an object");
    nlohmann::json merged;
    to_json(merged, optimizer);
    merged.update(overrides);
    try {
      return merged.get<OptimizerConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  OptimizerConfig random_arm_optimizer() const { return merged_optimizer(optimizer_random); }

  /// Optimizer of the unconstrained (plain gradient descent) runs.
  OptimizerConfig gd_arm_optimizer() const {
    auto o = merged_optimizer(optimizer_gd);
    o.kind = OptimizerKind::gd;
    return o;
  }

  void validate() const {
    if (schema_version != kConfigSchemaVersion) {
      throw ConfigError("unsupported config schema_version " + std::to_string(schema_version));
    }
    if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
    if (depth < 1 || gp_depth < 1) throw ConfigError("config: depth must be at least 1");
    if (width < 1) throw ConfigError("config: width must be at least 1");
    if (!(init_scale > 0.0)) throw ConfigError("config: init_scale must be positive");
    if (reference != "init" && reference != "zero") throw ConfigError("config: reference must be init or zero");
    if (control != "frobenius" && control != "none") throw ConfigError("config: control must be frobenius or none");
    if (sweep != "init" && sweep != "margin" && sweep != "normalized") {
      throw ConfigError("config: sweep must be init, margin or normalized");
    }
    if (mode != "gp" && mode != "nn" && mode != "both") throw ConfigError("config: mode must be gp, nn or both");
    for (auto m : ensemble_sizes) {
      if (m < 1) throw ConfigError("config: ensemble sizes must be at least 1");
    }
    for (double v : margins) {
      if (!(v > 0.0)) throw ConfigError("config: margins must be positive");
    }
    for (double v : grid) {
      if (!(v > 0.0)) throw ConfigError("config: grid values must be positive");
    }
    for (double v : alphas) {
      if (!(v > 0.0)) throw ConfigError("config: alphas must be positive");
    }
    if (!(alpha_true > 0.0) || !(alpha_random > 0.0)) throw ConfigError("config: alphas must be positive");
    if (!(gp_sigma > 0.0)) throw ConfigError("config: gp_sigma must be positive");
    if (!(match_tolerance > 0.0)) throw ConfigError("config: match_tolerance must be positive");
    ClassFilter::parse(classes);
    parse_init_rule(init_rule);
    optimizer.validate();
    random_arm_optimizer().validate();
    gd_arm_optimizer().validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json opt;
  to_json(opt, c.optimizer);
  j = nlohmann::json{{"schema_version", c.schema_version},
                     {"study", c.study},
                     {"data_dir", c.data_dir},
                     {"output_dir", c.output_dir},
                     {"threads", c.threads},
                     {"seeds", c.seeds},
                     {"data_seed", c.data_seed},
                     {"classes", c.classes},
                     {"n_train", c.n_train},
                     {"n_test", c.n_test},
                     {"balanced", c.balanced},
                     {"depth", c.depth},
                     {"width", c.width},
                     {"init_scale", c.init_scale},
                     {"init_rule", c.init_rule},
                     {"optimizer", opt},
                     {"reference", c.reference},
                     {"control", c.control},
                     {"alpha_true", c.alpha_true},
                     {"alpha_random", c.alpha_random},
                     {"optimizer_random", c.optimizer_random},
                     {"optimizer_gd", c.optimizer_gd},
                     {"attack_count", c.attack_count},
                     {"alphas", c.alphas},
                     {"widths", c.widths},
                     {"pairs", c.pairs},
                     {"rejection_cap", c.rejection_cap},
                     {"match_tolerance", c.match_tolerance},
                     {"sweep", c.sweep},
                     {"grid", c.grid},
                     {"mode", c.mode},
                     {"ensemble_sizes", c.ensemble_sizes},
                     {"margins", c.margins},
                     {"gp_depth", c.gp_depth},
                     {"gp_sigma", c.gp_sigma},
                     {"dump_predictions", c.dump_predictions}};
}

/// Applies the fields present in `j` on top of `c`.
inline void apply_json(ExperimentConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known{
      "schema_version", "study",        "data_dir",     "output_dir",     "threads",
      "seeds",          "data_seed",    "classes",      "n_train",        "n_test",
      "balanced",       "depth",        "width",        "init_scale",     "init_rule",
      "optimizer",      "reference",    "control",      "alpha_true",     "alpha_random",
      "optimizer_random", "optimizer_gd", "attack_count", "alphas",     "widths",         "pairs",
      "rejection_cap",  "match_tolerance", "sweep",     "grid",           "mode",
      "ensemble_sizes", "margins",      "gp_depth",     "gp_sigma",       "dump_predictions"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config field '" + key + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("schema_version", c.schema_version);
    get("data_dir", c.data_dir);
    get("output_dir", c.output_dir);
    get("threads", c.threads);
    get("seeds", c.seeds);
    get("data_seed", c.data_seed);
    get("classes", c.classes);
    get("n_train", c.n_train);
    get("n_test", c.n_test);
    get("balanced", c.balanced);
    get("depth", c.depth);
    get("width", c.width);
    get("init_scale", c.init_scale);
    get("init_rule", c.init_rule);
    if (j.contains("optimizer")) {
      nlohmann::json merged;
      to_json(merged, c.optimizer);
      merged.update(j.at("optimizer"));
      c.optimizer = merged.get<OptimizerConfig>();
    }
    get("reference", c.reference);
    get("control", c.control);
    get("alpha_true", c.alpha_true);
    get("alpha_random", c.alpha_random);
    if (j.contains("optimizer_random")) c.optimizer_random = j.at("optimizer_random");
    if (j.contains("optimizer_gd")) {
      // merged into the defaults so a partial object keeps the default step size
      if (c.optimizer_gd.is_object() && j.at("optimizer_gd").is_object()) {
        c.optimizer_gd.update(j.at("optimizer_gd"));
      } else {
        c.optimizer_gd = j.at("optimizer_gd");
      }
    }
    get("attack_count", c.attack_count);
    get("alphas", c.alphas);
    get("widths", c.widths);
    get("pairs", c.pairs);
    get("rejection_cap", c.rejection_cap);
    get("match_tolerance", c.match_tolerance);
    get("sweep", c.sweep);
    get("grid", c.grid);
    get("mode", c.mode);
    get("ensemble_sizes", c.ensemble_sizes);
    get("margins", c.margins);
    get("gp_depth", c.gp_depth);
    get("gp_sigma", c.gp_sigma);
    get("dump_predictions", c.dump_predictions);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Study defaults overlaid with a JSON document; `study` in the document
/// must match when present.
inline ExperimentConfig config_from_json(const std::string& study, const nlohmann::json& j) {
  if (j.contains("study") && j.at("study").get<std::string>() != study) {
    throw ConfigError("config is for study '" + j.at("study").get<std::string>() + "', not '" +
                      study + "'");
  }
  auto c = ExperimentConfig::defaults_for(study);
  apply_json(c, j);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& study, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(study, j);
}

}  // namespace margin_lab
