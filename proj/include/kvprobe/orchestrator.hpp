#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvprobe/protocol.hpp"
#include "kvprobe/steering.hpp"

namespace kvprobe {

std::string engine_version();

// Sweep used to pick the injection coefficient when the config says "calibrate".
struct CalibrationSettings {
  std::string prompt = "Tell me something.";
  std::vector<double> sweep = {1, 2, 3, 4, 5, 6, 8, 10, 12, 16};
  int n_generate = 64;
  double threshold = 2.0;
  // Concept -> strings whose tokens count as the concept. Missing concepts fall back to
  // the lowercase and capitalized stem of the name.
  std::map<std::string, std::vector<std::string>> concept_tokens;
};

struct RunConfig {
  std::filesystem::path model_path;
  std::string tokenizer = "byte";  // "byte" or a vocabulary file
  std::string chat_template = "compact";
  std::string corpus = "mini";
  std::vector<ConditionSpec> conditions;   // empty in JSON: the 16 core conditions
  std::vector<std::string> concepts;       // empty in JSON: every corpus concept
  std::vector<std::uint64_t> seeds;
  std::optional<double> coefficient;          // none: calibrate
  std::optional<std::set<int>> probe_layers;  // none: all layers
  std::set<int> injection_layers;             // empty: middle third
  std::filesystem::path out_dir;
  int workers = 1;
  bool include_controls = false;
  int contrastive_pairs = 32;
  CalibrationSettings calibration;

  // Throws InvalidArgument on unknown keys, empty seeds, or concepts outside the corpus.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // The fields that determine record contents; out_dir and workers are left out.
  nlohmann::json snapshot() const;
  void validate() const;
};

struct TrialKey {
  ConditionSpec condition;
  std::string concept_name;
  std::uint64_t seed = 0;
  TrialKind kind = TrialKind::detection;

  std::string str() const;  // "<condition>/<concept>/<seed>/<kind>"
  static TrialKey parse(std::string_view s);
  auto operator<=>(const TrialKey&) const = default;
};

// conditions x concepts x seeds x kinds, in that nesting order.
std::vector<TrialKey> grid_keys(const RunConfig& config, const std::set<TrialKind>& kinds);

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, std::string> corpus_checksums;
  std::string engine_version;
  std::set<std::string> completed;  // TrialKey::str()
  std::optional<double> coefficient;
  nlohmann::json calibration = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static std::optional<RunManifest> load(const std::filesystem::path& out_dir);
  // Written to a temporary file and renamed into place.
  void save(const std::filesystem::path& out_dir) const;
};

struct GridSummary {
  RunManifest manifest;
  std::size_t executed = 0;
  std::size_t skipped = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // key, message

  bool ok() const { return failures.empty(); }
};

// Loads the model, trains or reuses the steering vectors the grid needs, calibrates the
// coefficient if asked, then runs every key not already in the manifest.
//
// Layout of out_dir:
//   manifest.json   config snapshot, corpus checksums, engine version, completed keys
//   records.jsonl   one record per line, sorted by key
//   timings.jsonl   wall-clock per key (not part of the deterministic output)
//   errors.jsonl    key and message of each failed trial
//   vectors/        cached steering vectors
GridSummary run_grid(const RunConfig& config,
                     const std::set<TrialKind>& kinds = {TrialKind::detection, TrialKind::identification});

// Steering vector for (concept, seed), trained on first use and cached under out_dir/vectors.
SteeringVector ensure_vector(const RunConfig& config, const Model& model, const Tokenizer& tokenizer,
                             const ChatTemplate& chat, const std::string& concept_name, std::uint64_t seed);

struct CalibrationOutcome {
  std::optional<double> coefficient;  // smallest swept value meeting the threshold for some concept
  nlohmann::json details;             // per concept: chosen value and the swept ratios
};

CalibrationOutcome calibrate_run(const RunConfig& config, const Model& model, const Tokenizer& tokenizer,
                                 const ChatTemplate& chat);

// Runs calibration and stores the result in the manifest (creating it if needed).
CalibrationOutcome calibrate(const RunConfig& config);

Tokenizer make_tokenizer(const std::string& mode);

// records_dir/records.jsonl -> CSV tables in out_dir. Output bytes do not depend on the
// order of lines in the record file.
void analyze(const std::filesystem::path& records_dir, const std::filesystem::path& out_dir);

// Summary tables -> plot-data CSVs. Throws InvalidArgument naming every missing table.
void report(const std::filesystem::path& summaries_dir, const std::filesystem::path& out_dir);

}  // namespace kvprobe
