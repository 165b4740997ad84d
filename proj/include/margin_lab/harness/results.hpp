#pragma once

#include <openssl/evp.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "margin_lab/error.hpp"
#include "margin_lab/format.hpp"

namespace margin_lab {

/// Builds a CSV document row by row.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : columns_(header.size()) {
    append_row(header);
  }

  template <typename... Fields>
  void row(const Fields&... fields) {
    static_assert(sizeof...(Fields) > 0);
    std::vector<std::string> cells{cell(fields)...};
    if (cells.size() != columns_) throw ConfigError("CsvTable: wrong number of fields");
    append_row(cells);
  }

  void row_cells(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw ConfigError("CsvTable: wrong number of fields");
    append_row(cells);
  }

  const std::string& str() const noexcept { return text_; }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  template <typename T>
    requires std::is_integral_v<T>
  static std::string cell(T v) {
    return std::to_string(v);
  }

  void append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  std::size_t columns_;
  std::string text_;
};

/// Writes `content` to a temporary sibling and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw ConfigError("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
inline std::string git_blob_hash(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string git_blob_hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot hash " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return git_blob_hash(buf.str());
}

/// One trial of a study.
struct TrialRecord {
  std::size_t index = 0;
  std::string label;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  nlohmann::json margin_summary = nlohmann::json::object();
  double wall_seconds = 0.0;
};

/// Everything a study run produces. CSV contents are deterministic given the
/// config; wall times appear only in the manifest.
struct ExperimentResult {
  std::string study;
  nlohmann::json config;
  std::vector<TrialRecord> trials;
  std::map<std::string, std::string> files;  ///< file name -> CSV text
  nlohmann::json aggregates = nlohmann::json::object();
  std::map<std::string, std::string> input_hashes;
  double wall_seconds = 0.0;

  std::size_t effective_trials() const {
    std::size_t n = 0;
    for (const auto& t : trials) n += t.ok ? 1 : 0;
    return n;
  }

  std::string trials_csv() const {
    CsvTable t({"trial", "label", "seed", "status", "train_accuracy", "test_accuracy"});
    for (const auto& r : trials) {
      t.row(r.index, r.label, r.seed, std::string(r.ok ? "ok" : "failed"), r.train_accuracy,
            r.test_accuracy);
    }
    return t.str();
  }

  nlohmann::json manifest() const {
    nlohmann::json trial_list = nlohmann::json::array();
    for (const auto& r : trials) {
      trial_list.push_back({{"trial", r.index},
                            {"label", r.label},
                            {"seed", r.seed},
                            {"status", r.ok ? "ok" : "failed"},
                            {"error", r.error},
                            {"train_accuracy", r.train_accuracy},
                            {"test_accuracy", r.test_accuracy},
                            {"margin_summary", r.margin_summary},
                            {"wall_seconds", r.wall_seconds}});
    }
    nlohmann::json files_json = nlohmann::json::object();
    for (const auto& [name, text] : files) files_json[name] = git_blob_hash(text);
    files_json["trials.csv"] = git_blob_hash(trials_csv());
    return {{"study", study},
            {"config", config},
            {"trials", trial_list},
            {"trial_count", trials.size()},
            {"effective_trial_count", effective_trials()},
            {"aggregates", aggregates},
            {"inputs", input_hashes},
            {"outputs", files_json},
            {"wall_seconds", wall_seconds}};
  }
};

/// Writes every CSV, trials.csv and manifest.json under `dir`, each atomically.
inline void write_result(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : r.files) atomic_write(dir / name, text);
  atomic_write(dir / "trials.csv", r.trials_csv());
  atomic_write(dir / "manifest.json", r.manifest().dump(2) + "\n");
}

}  // namespace margin_lab
