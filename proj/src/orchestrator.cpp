#include "kvprobe/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "kvprobe/error.hpp"

#ifndef KVPROBE_VERSION
#define KVPROBE_VERSION "0.0.0"
#endif

namespace kvprobe {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kRecordsFile = "records.jsonl";

void write_atomically(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string stem_of(const std::string& name) {
  std::string s;
  for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s.size() > 3 && s.back() == 's') s.pop_back();
  if (s.size() > 4) s.resize(4);
  return s;
}

std::set<int> resolve_injection_layers(const RunConfig& c, const Model& m) {
  return c.injection_layers.empty() ? middle_third_layers(m.config().n_layers) : c.injection_layers;
}

std::set<int> resolve_probe_layers(const RunConfig& c, const Model& m) {
  if (c.probe_layers) return *c.probe_layers;
  std::set<int> all;
  for (int l = 0; l < m.config().n_layers; ++l) all.insert(l);
  return all;
}

void check_layers(const std::set<int>& layers, const Model& m, const char* what) {
  for (int l : layers)
    if (l < 0 || l >= m.config().n_layers)
      throw InvalidArgument(std::string(what) + " layer " + std::to_string(l) + " outside the model's " +
                            std::to_string(m.config().n_layers) + " layers");
}

// Record groups keyed by trial key, each holding serialized record lines in production order.
using RecordGroups = std::map<TrialKey, std::vector<std::string>>;

RecordGroups read_record_file(const fs::path& path) {
  RecordGroups groups;
  std::ifstream in(path);
  if (!in) return groups;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    groups[TrialKey::parse(j.at("key").get<std::string>())].push_back(line);
  }
  return groups;
}

void read_part_files(const fs::path& dir, RecordGroups& groups) {
  if (!fs::exists(dir)) return;
  std::vector<fs::path> parts;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") parts.push_back(e.path());
  std::sort(parts.begin(), parts.end());
  for (const auto& p : parts) {
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error&) {
        continue;  // torn final line from an interrupted run
      }
      std::vector<std::string> lines;
      for (const auto& r : j.at("records")) lines.push_back(r.dump());
      groups[TrialKey::parse(j.at("key").get<std::string>())] = std::move(lines);
    }
  }
}

void write_record_file(const fs::path& path, const RecordGroups& groups, const std::set<std::string>& completed) {
  std::string text;
  for (const auto& [key, lines] : groups) {
    if (!completed.contains(key.str())) continue;
    for (const auto& l : lines) text += l + "\n";
  }
  write_atomically(path, text);
}

struct Grid {
  const RunConfig& config;
  Model model;
  Tokenizer tokenizer;
  ChatTemplate chat;
  const PromptCorpus& corpus;
  AnswerFormat format;
  std::set<int> probe_layers;
  std::set<int> injection_layers;
  double coefficient = 0.0;
  std::map<std::pair<std::string, std::uint64_t>, SteeringVector> vectors;
};

std::vector<json> run_key(const Grid& g, const TrialKey& key) {
  const SteeringVector& vec = g.vectors.at({key.concept_name, key.seed});
  const TrialContext ctx{g.model, g.tokenizer, g.chat, &vec};
  TrialSpec spec;
  spec.condition = key.condition;
  spec.concept_name = key.concept_name;
  spec.seed = key.seed;
  spec.coefficient = g.coefficient;
  spec.probe_layers = g.probe_layers;
  spec.injection_layers = g.injection_layers;
  spec.corpus = g.corpus.name();
  spec.kind = key.kind;

  std::vector<json> out;
  auto add = [&](json j) {
    j["key"] = key.str();
    out.push_back(std::move(j));
  };
  switch (key.kind) {
    case TrialKind::detection: {
      spec.answer_sets = g.format.sets;
      auto [base, inj] = run_paired_trials(ctx, g.corpus.render_detection_prompt(key.condition), spec);
      add(to_json(base));
      add(to_json(inj));
      break;
    }
    case TrialKind::control: {
      spec.answer_sets = g.format.sets;
      const auto& battery = control_battery();
      for (std::size_t i = 0; i < battery.size(); ++i) {
        spec.question_index = static_cast<int>(i);
        auto [base, inj] = run_paired_trials(ctx, g.corpus.render_control_prompt(key.condition, battery[i]), spec);
        add(to_json(base));
        add(to_json(inj));
      }
      break;
    }
    case TrialKind::identification: {
      const auto digits = digit_tokens(g.tokenizer);
      for (int k = 0; k < 10; ++k) spec.answer_sets[std::to_string(k)] = {digits[static_cast<std::size_t>(k)]};
      add(to_json(run_identification_trial(ctx, g.corpus, g.corpus.concepts(), spec, shuffle_orderings(key.seed))));
      break;
    }
  }
  return out;
}

// Runs fn(i) for i in [0, n) on `workers` threads; fn receives the worker index too.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  auto loop = [&](int w) {
    for (std::size_t i = next++; i < n; i = next++) fn(i, w);
  };
  const int count = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  std::vector<std::thread> threads;
  for (int w = 1; w < count; ++w) threads.emplace_back(loop, w);
  loop(0);
  for (auto& t : threads) t.join();
}

}  // namespace

std::string engine_version() { return KVPROBE_VERSION; }

Tokenizer make_tokenizer(const std::string& mode) {
  if (mode == "byte") return Tokenizer::byte_level();
  return Tokenizer::from_vocab_file(mode);
}

// ---- RunConfig ----

RunConfig RunConfig::from_json(const json& j) {
  static const std::set<std::string> known = {"model",         "tokenizer",       "chat_template",    "corpus",
                                              "conditions",    "concepts",        "seeds",            "coefficient",
                                              "probe_layers",  "injection_layers", "out",             "workers",
                                              "include_controls", "contrastive_pairs", "calibration"};
  if (!j.is_object()) throw InvalidArgument("run config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw InvalidArgument("unknown run config key '" + k + "'");
  RunConfig c;
  try {
    c.model_path = j.value("model", std::string());
    c.tokenizer = j.value("tokenizer", c.tokenizer);
    c.chat_template = j.value("chat_template", c.chat_template);
    c.corpus = j.value("corpus", c.corpus);
    const auto& corpus = PromptCorpus::by_name(c.corpus);

    const json conds = j.value("conditions", json("core"));
    if (conds.is_string() && conds == "core") {
      c.conditions = core_conditions();
    } else if (conds.is_string() && conds == "all") {
      c.conditions = all_conditions();
    } else {
      for (const auto& s : conds) c.conditions.push_back(ConditionSpec::parse(s.get<std::string>()));
    }

    const json concepts = j.value("concepts", json("all"));
    if (concepts.is_string() && concepts == "all")
      c.concepts = corpus.concepts();
    else
      c.concepts = concepts.get<std::vector<std::string>>();

    c.seeds = j.value("seeds", std::vector<std::uint64_t>{});

    const json coef = j.value("coefficient", json("calibrate"));
    if (coef.is_string()) {
      if (coef != "calibrate") throw InvalidArgument("coefficient must be a number or \"calibrate\"");
    } else {
      c.coefficient = coef.get<double>();
    }

    const json probe = j.value("probe_layers", json("all"));
    if (probe.is_string()) {
      if (probe != "all") throw InvalidArgument("probe_layers must be \"all\" or a list");
    } else {
      c.probe_layers = probe.get<std::set<int>>();
    }
    c.injection_layers = j.value("injection_layers", std::set<int>{});
    c.out_dir = j.value("out", std::string());
    c.workers = j.value("workers", 1);
    c.include_controls = j.value("include_controls", false);
    c.contrastive_pairs = j.value("contrastive_pairs", 32);

    if (j.contains("calibration")) {
      const json& k = j.at("calibration");
      c.calibration.prompt = k.value("prompt", c.calibration.prompt);
      c.calibration.sweep = k.value("sweep", c.calibration.sweep);
      c.calibration.n_generate = k.value("n_generate", c.calibration.n_generate);
      c.calibration.threshold = k.value("threshold", c.calibration.threshold);
      c.calibration.concept_tokens =
          k.value("concept_tokens", std::map<std::string, std::vector<std::string>>{});
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  RunConfig c = from_json(j);
  if (!c.model_path.empty() && c.model_path.is_relative()) c.model_path = path.parent_path() / c.model_path;
  if (c.tokenizer != "byte" && fs::path(c.tokenizer).is_relative())
    c.tokenizer = (path.parent_path() / c.tokenizer).string();
  return c;
}

void RunConfig::validate() const {
  if (seeds.empty()) throw InvalidArgument("run config needs at least one seed");
  if (conditions.empty()) throw InvalidArgument("run config needs at least one condition");
  if (concepts.empty()) throw InvalidArgument("run config needs at least one concept");
  const auto& known = PromptCorpus::by_name(corpus).concepts();
  for (const auto& c : concepts)
    if (std::find(known.begin(), known.end(), c) == known.end())
      throw InvalidArgument("concept '" + c + "' is not in the " + corpus + " corpus");
  if (workers < 1) throw InvalidArgument("workers must be at least 1");
  if (contrastive_pairs < 2) throw InvalidArgument("contrastive_pairs must be at least 2");
  if (calibration.sweep.empty()) throw InvalidArgument("calibration sweep is empty");
}

json RunConfig::snapshot() const {
  json j;
  j["model"] = model_path.string();
  j["tokenizer"] = tokenizer;
  j["chat_template"] = chat_template;
  j["corpus"] = corpus;
  j["conditions"] = json::array();
  for (const auto& c : conditions) j["conditions"].push_back(c.name());
  j["concepts"] = concepts;
  j["seeds"] = seeds;
  j["coefficient"] = coefficient ? json(*coefficient) : json("calibrate");
  j["probe_layers"] = probe_layers ? json(*probe_layers) : json("all");
  j["injection_layers"] = injection_layers;
  j["include_controls"] = include_controls;
  j["contrastive_pairs"] = contrastive_pairs;
  j["calibration"] = {{"prompt", calibration.prompt},
                      {"sweep", calibration.sweep},
                      {"n_generate", calibration.n_generate},
                      {"threshold", calibration.threshold},
                      {"concept_tokens", calibration.concept_tokens}};
  return j;
}

json RunConfig::to_json() const {
  json j = snapshot();
  j["out"] = out_dir.string();
  j["workers"] = workers;
  return j;
}

// ---- TrialKey ----

std::string TrialKey::str() const {
  return condition.name() + "/" + concept_name + "/" + std::to_string(seed) + "/" + std::string(to_string(kind));
}

TrialKey TrialKey::parse(std::string_view s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == '/') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  if (parts.size() != 4) throw InvalidArgument("malformed trial key '" + std::string(s) + "'");
  TrialKey k;
  k.condition = ConditionSpec::parse(parts[0]);
  k.concept_name = parts[1];
  try {
    std::size_t used = 0;
    k.seed = std::stoull(parts[2], &used);
    if (used != parts[2].size()) throw std::invalid_argument("seed");
  } catch (const std::logic_error&) {
    throw InvalidArgument("malformed seed in trial key '" + std::string(s) + "'");
  }
  k.kind = trial_kind_from_string(parts[3]);
  return k;
}

std::vector<TrialKey> grid_keys(const RunConfig& config, const std::set<TrialKind>& kinds) {
  std::vector<TrialKey> keys;
  for (const auto& cond : config.conditions)
    for (const auto& concept_name : config.concepts)
      for (auto seed : config.seeds)
        for (auto kind : kinds) {
          if (kind == TrialKind::control && !config.include_controls) continue;
          keys.push_back({cond, concept_name, seed, kind});
        }
  return keys;
}

// ---- RunManifest ----

json RunManifest::to_json() const {
  json j;
  j["config"] = config;
  j["corpus_checksums"] = corpus_checksums;
  j["engine_version"] = engine_version;
  j["completed"] = completed;
  j["coefficient"] = coefficient ? json(*coefficient) : json(nullptr);
  j["calibration"] = calibration;
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.config = j.at("config");
    m.corpus_checksums = j.at("corpus_checksums").get<std::map<std::string, std::string>>();
    m.engine_version = j.at("engine_version").get<std::string>();
    m.completed = j.at("completed").get<std::set<std::string>>();
    if (!j.at("coefficient").is_null()) m.coefficient = j.at("coefficient").get<double>();
    m.calibration = j.value("calibration", json::object());
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest: ") + e.what());
  }
}

std::optional<RunManifest> RunManifest::load(const fs::path& out_dir) {
  const fs::path p = out_dir / kManifestFile;
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream in(p);
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw SchemaError("manifest " + p.string() + ": " + e.what());
  }
}

void RunManifest::save(const fs::path& out_dir) const {
  fs::create_directories(out_dir);
  write_atomically(out_dir / kManifestFile, to_json().dump(1) + "\n");
}

namespace {

RunManifest open_manifest(const RunConfig& config) {
  if (config.out_dir.empty()) throw InvalidArgument("run config has no output directory");
  const json snap = config.snapshot();
  if (auto m = RunManifest::load(config.out_dir)) {
    if (m->config != snap)
      throw InvalidArgument("output directory " + config.out_dir.string() +
                            " holds a run with a different configuration; use a fresh directory");
    if (m->corpus_checksums != corpus_checksums())
      throw InvalidArgument("output directory " + config.out_dir.string() + " was produced from a different corpus");
    return *m;
  }
  RunManifest m;
  m.config = snap;
  m.corpus_checksums = corpus_checksums();
  m.engine_version = engine_version();
  return m;
}

std::vector<std::vector<int>> concept_token_sequences(const RunConfig& config, const Tokenizer& tok,
                                                      const std::string& concept_name) {
  std::vector<std::string> words;
  if (auto it = config.calibration.concept_tokens.find(concept_name); it != config.calibration.concept_tokens.end()) {
    words = it->second;
  } else {
    std::string stem = stem_of(concept_name);
    words.push_back(stem);
    stem[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(stem[0])));
    words.push_back(stem);
  }
  std::vector<std::vector<int>> out;
  for (const auto& w : words) out.push_back(tok.encode(w));
  return out;
}

}  // namespace

SteeringVector ensure_vector(const RunConfig& config, const Model& model, const Tokenizer& tokenizer,
                             const ChatTemplate& chat, const std::string& concept_name, std::uint64_t seed) {
  const std::set<int> layers = resolve_injection_layers(config, model);
  const fs::path dir = config.out_dir / "vectors";
  const fs::path path = dir / (concept_name + "-seed" + std::to_string(seed) + ".kvt");
  if (fs::exists(path)) {
    SteeringVector v = load_steering_vector(path);
    std::set<int> have;
    for (const auto& [l, _] : v.per_layer) have.insert(l);
    if (have == layers && v.dim() == model.config().d_model && v.concept_name == concept_name &&
        v.train_seed == seed && v.pair_count == config.contrastive_pairs)
      return v;
  }
  const auto& corpus = PromptCorpus::by_name(config.corpus);
  const auto pairs = make_contrastive_pairs(corpus.contrastive(), concept_name, config.contrastive_pairs, seed);
  SteeringVector v =
      train_steering_vector(collect_contrastive_activations(model, tokenizer, chat, pairs, layers), concept_name, seed);
  fs::create_directories(dir);
  save_steering_vector(path, v);
  return v;
}

CalibrationOutcome calibrate_run(const RunConfig& config, const Model& model, const Tokenizer& tokenizer,
                                 const ChatTemplate& chat) {
  const std::set<int> layers = resolve_injection_layers(config, model);
  const auto prompt =
      render_turns(tokenizer, chat, {{SpanLabel::User1, config.calibration.prompt}, {SpanLabel::AssistantPrefix, "", true}});
  const std::uint64_t seed = config.seeds.front();
  CalibrationOutcome out;
  out.details = {{"seed", seed}, {"layers", layers}, {"threshold", config.calibration.threshold},
                 {"prompt", config.calibration.prompt}, {"concepts", json::object()}};
  for (const auto& concept_name : config.concepts) {
    const SteeringVector v = ensure_vector(config, model, tokenizer, chat, concept_name, seed);
    const auto result =
        calibrate_coefficient(model, v, layers, prompt.tokens, concept_token_sequences(config, tokenizer, concept_name),
                              config.calibration.n_generate, config.calibration.sweep, config.calibration.threshold);
    json sweep = json::array();
    for (const auto& [alpha, r] : result.sweep) {
      const double ratio = r.ratio();
      sweep.push_back({{"coefficient", alpha},
                       {"baseline_frequency", r.baseline_frequency},
                       {"steered_frequency", r.steered_frequency},
                       {"ratio", std::isfinite(ratio) ? json(ratio) : json("inf")},
                       {"degenerate", r.degenerate_repetition}});
    }
    out.details["concepts"][concept_name] = {
        {"coefficient", result.coefficient ? json(*result.coefficient) : json(nullptr)}, {"sweep", sweep}};
    if (result.coefficient && (!out.coefficient || *result.coefficient < *out.coefficient))
      out.coefficient = result.coefficient;
  }
  return out;
}

CalibrationOutcome calibrate(const RunConfig& config) {
  config.validate();
  RunManifest manifest = open_manifest(config);
  const Model model = Model::load(config.model_path);
  const Tokenizer tok = make_tokenizer(config.tokenizer);
  const ChatTemplate chat = ChatTemplate::by_name(config.chat_template);
  CalibrationOutcome out = calibrate_run(config, model, tok, chat);
  manifest.calibration = out.details;
  if (!config.coefficient) manifest.coefficient = out.coefficient;
  manifest.save(config.out_dir);
  return out;
}

GridSummary run_grid(const RunConfig& config, const std::set<TrialKind>& kinds) {
  config.validate();
  fs::create_directories(config.out_dir);
  RunManifest manifest = open_manifest(config);

  Grid g{config,
         Model::load(config.model_path),
         make_tokenizer(config.tokenizer),
         ChatTemplate::by_name(config.chat_template),
         PromptCorpus::by_name(config.corpus),
         {},
         {},
         {},
         0.0,
         {}};
  g.format = AnswerFormat::yes_no(g.tokenizer);
  g.probe_layers = resolve_probe_layers(config, g.model);
  g.injection_layers = resolve_injection_layers(config, g.model);
  check_layers(g.probe_layers, g.model, "probe");
  check_layers(g.injection_layers, g.model, "injection");

  // A key counts as done only if its records are on disk as well.
  const fs::path records_path = config.out_dir / kRecordsFile;
  const fs::path parts_dir = config.out_dir / "parts";
  RecordGroups groups = read_record_file(records_path);
  read_part_files(parts_dir, groups);
  for (auto it = manifest.completed.begin(); it != manifest.completed.end();) {
    if (!groups.contains(TrialKey::parse(*it)))
      it = manifest.completed.erase(it);
    else
      ++it;
  }

  std::vector<TrialKey> todo;
  GridSummary summary;
  for (const auto& key : grid_keys(config, kinds)) {
    if (manifest.completed.contains(key.str()))
      ++summary.skipped;
    else
      todo.push_back(key);
  }

  // Vectors for every (concept, seed) still needed, trained in parallel.
  std::vector<std::pair<std::string, std::uint64_t>> needed;
  for (const auto& k : todo) needed.emplace_back(k.concept_name, k.seed);
  if (!config.coefficient && !manifest.coefficient)
    for (const auto& c : config.concepts) needed.emplace_back(c, config.seeds.front());
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  std::vector<std::optional<SteeringVector>> trained(needed.size());
  std::vector<std::string> vector_errors(needed.size());
  parallel_for(needed.size(), config.workers, [&](std::size_t i, int) {
    try {
      trained[i] = ensure_vector(config, g.model, g.tokenizer, g.chat, needed[i].first, needed[i].second);
    } catch (const std::exception& e) {
      vector_errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < needed.size(); ++i) {
    if (!trained[i])
      throw Error("steering vector for " + needed[i].first + " seed " + std::to_string(needed[i].second) +
                  " failed: " + vector_errors[i]);
    g.vectors.emplace(needed[i], std::move(*trained[i]));
  }

  if (config.coefficient) {
    g.coefficient = *config.coefficient;
  } else {
    if (!manifest.coefficient) {
      const auto cal = calibrate_run(config, g.model, g.tokenizer, g.chat);
      manifest.calibration = cal.details;
      if (!cal.coefficient) {
        manifest.save(config.out_dir);
        throw Error("calibration found no coefficient reaching the threshold; see calibration in manifest.json");
      }
      manifest.coefficient = cal.coefficient;
    }
    g.coefficient = *manifest.coefficient;
  }
  manifest.save(config.out_dir);

  fs::create_directories(parts_dir);
  std::mutex mu;
  std::vector<std::ofstream> part_files(static_cast<std::size_t>(std::max(1, config.workers)));
  for (std::size_t w = 0; w < part_files.size(); ++w)
    part_files[w].open(parts_dir / ("worker-" + std::to_string(w) + ".jsonl"), std::ios::app);
  std::ofstream timings(config.out_dir / "timings.jsonl", std::ios::app);
  std::ofstream errors(config.out_dir / "errors.jsonl", std::ios::app);

  parallel_for(todo.size(), config.workers, [&](std::size_t i, int w) {
    const TrialKey& key = todo[i];
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<json> records;
    std::string failure;
    try {
      records = run_key(g, key);
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard lock(mu);
    if (!failure.empty()) {
      errors << json{{"key", key.str()}, {"error", failure}}.dump() << "\n" << std::flush;
      summary.failures.emplace_back(key.str(), failure);
      return;
    }
    auto& part = part_files[static_cast<std::size_t>(w)];
    part << json{{"key", key.str()}, {"records", records}}.dump() << "\n" << std::flush;
    std::vector<std::string> lines;
    for (const auto& r : records) lines.push_back(r.dump());
    groups[key] = std::move(lines);
    manifest.completed.insert(key.str());
    manifest.save(config.out_dir);
    timings << json{{"key", key.str()}, {"worker", w}, {"seconds", seconds}}.dump() << "\n" << std::flush;
    ++summary.executed;
  });

  for (auto& f : part_files) f.close();
  write_record_file(records_path, groups, manifest.completed);
  fs::remove_all(parts_dir);
  std::sort(summary.failures.begin(), summary.failures.end());
  summary.manifest = manifest;
  return summary;
}

}  // namespace kvprobe
