#pragma once

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "margin_lab/error.hpp"
#include "margin_lab/matrix.hpp"
#include "margin_lab/rng.hpp"

namespace margin_lab {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Images scaled to [0, 1] plus class labels in [0, classes).
struct RawDataset {
  Matrix images;
  std::vector<int> labels;
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;
  int classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
};

namespace detail {

/// Reads a whole file; gzip-compressed files are inflated transparently.
inline std::vector<std::uint8_t> read_maybe_gz(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ParseError("no such file: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw ParseError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw ParseError("read error in " + path.string());
  return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::string& name) {
  if (offset + 4 > bytes.size()) throw ParseError(name + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace detail

/// Parses an IDX image/label file pair (plain or gzip). Pixels are divided by 255.
inline RawDataset load_idx(const std::filesystem::path& images_path,
                           const std::filesystem::path& labels_path) {
  const auto img = detail::read_maybe_gz(images_path);
  const auto lab = detail::read_maybe_gz(labels_path);
  const std::string img_name = images_path.filename().string();
  const std::string lab_name = labels_path.filename().string();

  const auto img_magic = detail::read_be32(img, 0, img_name);
  if (img_magic != kIdxImageMagic) {
    throw ParseError(img_name + ": bad magic number " + std::to_string(img_magic) +
                     " (expected 2051)");
  }
  const auto lab_magic = detail::read_be32(lab, 0, lab_name);
  if (lab_magic != kIdxLabelMagic) {
    throw ParseError(lab_name + ": bad magic number " + std::to_string(lab_magic) +
                     " (expected 2049)");
  }
  const std::size_t count = detail::read_be32(img, 4, img_name);
  const std::size_t rows = detail::read_be32(img, 8, img_name);
  const std::size_t cols = detail::read_be32(img, 12, img_name);
  const std::size_t label_count = detail::read_be32(lab, 4, lab_name);
  if (count != label_count) {
    throw ParseError("image/label count mismatch: " + std::to_string(count) + " images vs " +
                     std::to_string(label_count) + " labels");
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + count * dim) {
    throw ParseError(img_name + ": truncated pixel data (" + std::to_string(img.size() - 16) +
                     " of " + std::to_string(count * dim) + " bytes)");
  }
  if (lab.size() < 8 + count) {
    throw ParseError(lab_name + ": truncated label data (" + std::to_string(lab.size() - 8) +
                     " of " + std::to_string(count) + " bytes)");
  }

  RawDataset raw;
  raw.image_rows = rows;
  raw.image_cols = cols;
  raw.images = Matrix(count, dim);
  auto px = raw.images.values();
  for (std::size_t i = 0; i < count * dim; ++i) px[i] = static_cast<double>(img[16 + i]) / 255.0;
  raw.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    raw.labels[i] = lab[8 + i];
    max_label = std::max(max_label, raw.labels[i]);
  }
  raw.classes = std::max(10, max_label + 1);
  return raw;
}

/// Writes an uncompressed IDX pair. Pixels are rounded back to bytes.
inline void write_idx(const RawDataset& raw, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw ConfigError("write_idx: cannot open output files");
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(raw.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(raw.image_rows));
  detail::write_be32(img, static_cast<std::uint32_t>(raw.image_cols));
  for (double v : raw.images.values()) {
    const auto b = static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L));
    img.put(static_cast<char>(b));
  }
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(raw.size()));
  for (int l : raw.labels) lab.put(static_cast<char>(l));
}

enum class Split { train, test };

/// Locates `<prefix>-images-idx3-ubyte[.gz]` and the label file in `dir`.
inline std::pair<std::filesystem::path, std::filesystem::path> find_mnist_files(
    const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  auto pick = [&](const std::string& stem) {
    for (const char* ext : {"", ".gz"}) {
      auto p = dir / (stem + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw ConfigError("dataset file " + stem + "[.gz] not found in " + dir.string());
  };
  return {pick(prefix + "-images-idx3-ubyte"), pick(prefix + "-labels-idx1-ubyte")};
}

inline RawDataset load_mnist(const std::filesystem::path& dir, Split split) {
  auto [images, labels] = find_mnist_files(dir, split);
  return load_idx(images, labels);
}

/// Projects every row onto the sphere of radius sqrt(cols).
inline Matrix normalize_inputs(const Matrix& x) {
  Matrix out = x;
  const double radius = std::sqrt(static_cast<double>(x.cols()));
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = norm2(row);
    if (!(n > 0.0)) throw ConfigError("normalize_inputs: row " + std::to_string(r) + " has zero norm");
    const double s = radius / n;
    for (auto& v : row) v *= s;
  }
  return out;
}

inline Matrix normalize_inputs(const RawDataset& raw) { return normalize_inputs(raw.images); }

enum class LabelScheme { true_labels, random_labels };

/// Which classes participate and how they map to targets.
struct ClassFilter {
  enum class Kind { all, even_odd, pair } kind = Kind::all;
  int positive = 0;  ///< pair: class mapped to +1
  int negative = 1;  ///< pair: class mapped to -1

  bool binary() const noexcept { return kind != Kind::all; }
  bool accepts(int label) const noexcept {
    return kind != Kind::pair || label == positive || label == negative;
  }
  /// Even digits and the first class of a pair map to +1.
  int binary_label(int label) const noexcept {
    if (kind == Kind::even_odd) return label % 2 == 0 ? 1 : -1;
    return label == positive ? 1 : -1;
  }

  static ClassFilter parse(std::string_view text) {
    ClassFilter f;
    if (text == "all") return f;
    if (text == "evenodd" || text == "even-odd") {
      f.kind = Kind::even_odd;
      return f;
    }
    const auto v = text.find('v');
    if (v != std::string_view::npos && v > 0 && v + 1 < text.size()) {
      int a = -1, b = -1;
      const auto ra = std::from_chars(text.data(), text.data() + v, a);
      const auto rb = std::from_chars(text.data() + v + 1, text.data() + text.size(), b);
      if (ra.ec == std::errc{} && rb.ec == std::errc{} && ra.ptr == text.data() + v &&
          rb.ptr == text.data() + text.size() && a >= 0 && b >= 0 && a != b) {
        f.kind = Kind::pair;
        f.positive = a;
        f.negative = b;
        return f;
      }
    }
    throw ConfigError("invalid class filter '" + std::string(text) +
                      "' (expected all, evenodd or <a>v<b>)");
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::all: return "all";
      case Kind::even_odd: return "evenodd";
      case Kind::pair: return std::to_string(positive) + "v" + std::to_string(negative);
    }
    return "all";
  }
};

/// Parameters of a training or evaluation task.
///
/// Text form: `mnist:subset=1000:labels=random:seed=7:alpha=100`, with
/// optional `classes=`, `attack=`, `split=` and `balanced=` keys.
struct TaskSpec {
  std::string source = "mnist";
  Split split = Split::train;
  std::size_t subset = 0;  ///< 0 takes every eligible example
  ClassFilter classes;
  LabelScheme labels = LabelScheme::true_labels;
  std::size_t attack = 0;  ///< randomly labeled points appended after the clean subset
  std::uint64_t seed = 0;
  double alpha = 1.0;
  bool balanced = false;

  static TaskSpec parse(std::string_view text) {
    TaskSpec spec;
    std::size_t pos = 0;
    bool first = true;
    while (pos <= text.size()) {
      auto end = text.find(':', pos);
      if (end == std::string_view::npos) end = text.size();
      const auto token = text.substr(pos, end - pos);
      pos = end + 1;
      if (first) {
        first = false;
        if (token.find('=') == std::string_view::npos) {
          if (token != "mnist") throw ConfigError("unknown dataset '" + std::string(token) + "'");
          spec.source = std::string(token);
          continue;
        }
      }
      const auto eq = token.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("task spec token '" + std::string(token) + "' is not key=value");
      }
      const auto key = token.substr(0, eq);
      const std::string value(token.substr(eq + 1));
      if (key == "subset") {
        spec.subset = parse_count(value, key);
      } else if (key == "attack") {
        spec.attack = parse_count(value, key);
      } else if (key == "seed") {
        spec.seed = parse_count(value, key);
      } else if (key == "alpha") {
        spec.alpha = parse_positive(value, key);
      } else if (key == "labels") {
        if (value == "true") spec.labels = LabelScheme::true_labels;
        else if (value == "random") spec.labels = LabelScheme::random_labels;
        else throw ConfigError("labels must be true or random, got '" + value + "'");
      } else if (key == "classes") {
        spec.classes = ClassFilter::parse(value);
      } else if (key == "split") {
        if (value == "train") spec.split = Split::train;
        else if (value == "test") spec.split = Split::test;
        else throw ConfigError("split must be train or test, got '" + value + "'");
      } else if (key == "balanced") {
        spec.balanced = value == "1" || value == "true";
        if (!spec.balanced && value != "0" && value != "false") {
          throw ConfigError("balanced must be 0/1/true/false");
        }
      } else {
        throw ConfigError("unknown task spec key '" + std::string(key) + "'");
      }
      if (end == text.size()) break;
    }
    return spec;
  }

  std::string to_string() const {
    std::string s = source;
    s += ":split=" + std::string(split == Split::train ? "train" : "test");
    s += ":subset=" + std::to_string(subset);
    s += ":classes=" + classes.to_string();
    s += ":labels=" + std::string(labels == LabelScheme::true_labels ? "true" : "random");
    s += ":attack=" + std::to_string(attack);
    s += ":seed=" + std::to_string(seed);
    std::ostringstream a;
    a.precision(17);
    a << alpha;
    s += ":alpha=" + a.str();
    s += ":balanced=" + std::string(balanced ? "1" : "0");
    return s;
  }

 private:
  static std::uint64_t parse_count(const std::string& v, std::string_view key) {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
      throw ConfigError("task spec: " + std::string(key) + "='" + v + "' is not a count");
    }
    return out;
  }
  static double parse_positive(const std::string& v, std::string_view key) {
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || !(out > 0.0) || !std::isfinite(out)) {
      throw ConfigError("task spec: " + std::string(key) + "='" + v + "' is not a positive number");
    }
    return out;
  }
};

/// Normalized inputs with labels, per-example target margins and clean flags.
///
/// `labels` holds class indices for k-way tasks and +1/-1 for binary tasks.
struct Task {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<double> alpha;
  std::vector<std::uint8_t> clean;        ///< 0 for attack-set rows
  std::vector<std::size_t> source_index;  ///< row in the raw dataset
  int classes = 10;
  bool binary = false;
  TaskSpec spec;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return inputs.cols(); }
  std::size_t output_dim() const noexcept { return binary ? 1 : static_cast<std::size_t>(classes); }
  std::size_t clean_count() const noexcept {
    return static_cast<std::size_t>(std::count(clean.begin(), clean.end(), std::uint8_t{1}));
  }

  /// alpha_i * y_i: +-alpha_i for binary tasks, alpha_i-scaled one-hot rows otherwise.
  Matrix targets() const {
    Matrix t(size(), output_dim());
    for (std::size_t i = 0; i < size(); ++i) {
      if (binary) t(i, 0) = alpha[i] * labels[i];
      else t(i, static_cast<std::size_t>(labels[i])) = alpha[i];
    }
    return t;
  }
};

/// Builds a task from a raw split.
///
/// Eligible indices are shuffled with `spec.seed`; the first `subset` become
/// the clean rows and the next `attack` rows form the attack set. Random
/// labels are resampled uniformly over the classes from a separate stream.
inline Task make_task(const RawDataset& raw, const TaskSpec& spec) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (spec.classes.accepts(raw.labels[i])) eligible.push_back(i);
  }
  SeededRng rng(spec.seed);
  SeededRng order_rng = rng.split(0);
  SeededRng label_rng = rng.split(1);
  order_rng.shuffle(eligible);

  const bool binary = spec.classes.binary();
  const int classes = binary ? 2 : raw.classes;
  const std::size_t clean_n = spec.subset == 0 ? eligible.size() - std::min(eligible.size(), spec.attack)
                                               : spec.subset;
  if (clean_n + spec.attack > eligible.size()) {
    throw ConfigError("make_task: requested " + std::to_string(clean_n) + " clean + " +
                      std::to_string(spec.attack) + " attack examples but only " +
                      std::to_string(eligible.size()) + " match classes=" +
                      spec.classes.to_string());
  }

  std::vector<std::size_t> chosen;
  if (spec.balanced) {
    // Per-class quotas, earlier classes take the remainder.
    std::vector<int> class_ids;
    for (std::size_t i : eligible) {
      const int c = binary ? spec.classes.binary_label(raw.labels[i]) : raw.labels[i];
      if (std::find(class_ids.begin(), class_ids.end(), c) == class_ids.end()) class_ids.push_back(c);
    }
    if (binary) std::sort(class_ids.begin(), class_ids.end(), std::greater<>{});
    else std::sort(class_ids.begin(), class_ids.end());
    const std::size_t k = class_ids.size();
    std::vector<std::size_t> taken(k, 0);
    std::vector<std::uint8_t> used(eligible.size(), 0);
    for (std::size_t ci = 0; ci < k; ++ci) {
      const std::size_t quota = clean_n / k + (ci < clean_n % k ? 1 : 0);
      for (std::size_t j = 0; j < eligible.size() && taken[ci] < quota; ++j) {
        const int c = binary ? spec.classes.binary_label(raw.labels[eligible[j]])
                             : raw.labels[eligible[j]];
        if (c == class_ids[ci] && !used[j]) {
          used[j] = 1;
          ++taken[ci];
        }
      }
      if (taken[ci] < quota) {
        throw ConfigError("make_task: class " + std::to_string(class_ids[ci]) + " has only " +
                          std::to_string(taken[ci]) + " examples, " + std::to_string(quota) +
                          " requested");
      }
    }
    for (std::size_t j = 0; j < eligible.size(); ++j) {
      if (used[j]) chosen.push_back(eligible[j]);
    }
    std::size_t extra = 0;
    for (std::size_t j = 0; j < eligible.size() && extra < spec.attack; ++j) {
      if (!used[j]) {
        chosen.push_back(eligible[j]);
        ++extra;
      }
    }
  } else {
    chosen.assign(eligible.begin(), eligible.begin() + static_cast<long>(clean_n + spec.attack));
  }

  Task task;
  task.spec = spec;
  task.binary = binary;
  task.classes = classes;
  const std::size_t n = chosen.size();
  Matrix x(n, raw.images.cols());
  task.labels.resize(n);
  task.alpha.assign(n, spec.alpha);
  task.clean.assign(n, 1);
  task.source_index = chosen;
  for (std::size_t r = 0; r < n; ++r) {
    const auto src = raw.images.row(chosen[r]);
    std::copy(src.begin(), src.end(), x.row(r).begin());
    const int truth = raw.labels[chosen[r]];
    const bool attack_row = r >= clean_n;
    const bool random = attack_row || spec.labels == LabelScheme::random_labels;
    if (random) {
      const auto draw = static_cast<int>(label_rng.uniform_index(static_cast<std::uint64_t>(classes)));
      task.labels[r] = binary ? (draw == 0 ? 1 : -1) : draw;
    } else {
      task.labels[r] = binary ? spec.classes.binary_label(truth) : truth;
    }
    if (attack_row) task.clean[r] = 0;
  }
  task.inputs = normalize_inputs(x);
  return task;
}

/// The full split restricted to `spec`'s classes, with true labels.
inline Task make_eval_task(const RawDataset& raw, const TaskSpec& spec, std::size_t limit = 0) {
  TaskSpec eval;
  eval.source = spec.source;
  eval.split = Split::test;
  eval.classes = spec.classes;
  eval.alpha = spec.alpha;
  eval.seed = spec.seed;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (spec.classes.accepts(raw.labels[i])) idx.push_back(i);
  }
  if (limit > 0 && limit < idx.size()) idx.resize(limit);
  eval.subset = idx.size();

  Task task;
  task.spec = eval;
  task.binary = spec.classes.binary();
  task.classes = task.binary ? 2 : raw.classes;
  Matrix x(idx.size(), raw.images.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = raw.images.row(idx[r]);
    std::copy(src.begin(), src.end(), x.row(r).begin());
    const int truth = raw.labels[idx[r]];
    task.labels.push_back(task.binary ? spec.classes.binary_label(truth) : truth);
  }
  task.alpha.assign(idx.size(), spec.alpha);
  task.clean.assign(idx.size(), 1);
  task.source_index = idx;
  task.inputs = normalize_inputs(x);
  return task;
}

}  // namespace margin_lab
