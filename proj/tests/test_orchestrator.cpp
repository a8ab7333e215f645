#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "kvprobe/error.hpp"
#include "kvprobe/metrics.hpp"
#include "kvprobe/orchestrator.hpp"
#include "support/fixtures.hpp"

using namespace kvprobe;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path = fs::temp_directory_path() / ("kvprobe-" + tag + "-" + std::to_string(rng()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

json base_config(const fs::path& out) {
  return {{"model", testing::desk_model_path().string()},
          {"corpus", "mini"},
          {"conditions", {"Accurate_Mechanism+No_Document"}},
          {"concepts", {"cats"}},
          {"seeds", {1}},
          {"coefficient", 4.0},
          {"contrastive_pairs", 8},
          {"out", out.string()}};
}

std::string table_cell(const fs::path& csv, const std::string& row_key, const std::string& col) {
  const auto lines = lines_of(slurp(csv));
  std::vector<std::string> header;
  for (const auto& l : lines) {
    if (l.rfind("# ", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(l);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (header.empty()) {
      header = cells;
      continue;
    }
    if (cells[0] == row_key) {
      const auto it = std::find(header.begin(), header.end(), col);
      REQUIRE(it != header.end());
      return cells[static_cast<std::size_t>(it - header.begin())];
    }
  }
  FAIL("row " << row_key << " not found in " << csv);
  return {};
}

TrialRecord hand_trial(const ConditionSpec& cond, const std::string& concept_name, bool injected, std::uint64_t seed,
                       double yes, std::map<int, double> by_layer) {
  TrialRecord r;
  r.spec.condition = cond;
  if (injected) r.spec.concept_name = concept_name;
  r.spec.pair_concept = concept_name;
  r.spec.seed = seed;
  r.spec.corpus = "mini";
  r.p_answer_final = {{"yes", yes}, {"no", 1.0 - yes}};
  r.logit_lse_final = {{"yes", std::log(yes)}, {"no", std::log(1.0 - yes)}};
  for (const auto& [l, p] : by_layer) r.p_answer_by_layer[l] = {{"yes", p}, {"no", 1.0 - p}};
  return r;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST_SUITE("orchestrator") {
  TEST_CASE("run config parsing and validation") {
    const RunConfig d = RunConfig::from_json({{"model", "m.kvt"}, {"seeds", {3}}});
    CHECK(d.conditions.size() == 16);
    CHECK(d.concepts.size() == 9);
    CHECK(!d.coefficient);
    CHECK(!d.probe_layers);
    CHECK(d.corpus == "mini");
    const RunConfig all = RunConfig::from_json({{"seeds", {1}}, {"conditions", "all"}, {"probe_layers", {1, 2}}});
    CHECK(all.conditions.size() == 20);
    CHECK(*all.probe_layers == std::set<int>{1, 2});

    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", json::array()}}), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", {1}}, {"concepts", {"dogs"}}}), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", {1}}, {"colour", 1}}), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", {1}}, {"coefficient", "big"}}), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", {1}}, {"workers", 0}}), InvalidArgument);
    CHECK_THROWS_AS(RunConfig::from_json({{"seeds", {1}}, {"conditions", {"Loud+No_Document"}}}), InvalidArgument);

    // Snapshot ignores where and how fast the run happens.
    RunConfig a = d, b = d;
    b.workers = 7;
    b.out_dir = "/elsewhere";
    CHECK(a.snapshot() == b.snapshot());
    b.seeds = {4};
    CHECK(a.snapshot() != b.snapshot());
  }

  TEST_CASE("trial keys") {
    const TrialKey k{ConditionSpec::parse("Vague_Mechanism+Poetic_Document"), "music", 7, TrialKind::identification};
    CHECK(k.str() == "Vague_Mechanism+Poetic_Document/music/7/identification");
    CHECK(TrialKey::parse(k.str()) == k);
    CHECK_THROWS_AS(TrialKey::parse("Vague_Mechanism+Poetic_Document/music/x/identification"), InvalidArgument);
    CHECK_THROWS_AS(TrialKey::parse("a/b"), InvalidArgument);

    RunConfig c = RunConfig::from_json({{"seeds", {1, 2}}});
    CHECK(grid_keys(c, {TrialKind::detection, TrialKind::identification}).size() == 16 * 9 * 2 * 2);
    CHECK(grid_keys(c, {TrialKind::control}).empty());
    c.include_controls = true;
    CHECK(grid_keys(c, {TrialKind::control}).size() == 16 * 9 * 2);
  }

  TEST_CASE("one condition, one concept, one seed: two detection records and one identification") {
    TempDir tmp("count");
    const RunConfig c = RunConfig::from_json(base_config(tmp.path));
    const GridSummary s = run_grid(c);
    CHECK(s.ok());
    CHECK(s.executed == 2);
    const auto lines = lines_of(slurp(tmp.path / "records.jsonl"));
    REQUIRE(lines.size() == 3);
    int det = 0, ident = 0;
    for (const auto& l : lines) {
      const json j = json::parse(l);
      if (j.at("record") == "trial") {
        const TrialRecord r = trial_record_from_json(j);
        CHECK(r.spec.kind == TrialKind::detection);
        CHECK(r.spec.pair_concept == std::optional<std::string>("cats"));
        CHECK(r.spec.coefficient == 4.0);
        ++det;
      } else {
        const IdentificationRecord r = identification_record_from_json(j);
        CHECK(r.orderings.size() == 5);
        ++ident;
      }
    }
    CHECK(det == 2);
    CHECK(ident == 1);

    // Manifest and records agree key for key.
    const auto m = RunManifest::load(tmp.path);
    REQUIRE(m);
    std::set<std::string> on_disk;
    for (const auto& l : lines) on_disk.insert(json::parse(l).at("key").get<std::string>());
    CHECK(on_disk == m->completed);
    CHECK(m->engine_version == engine_version());
    CHECK(m->corpus_checksums == corpus_checksums());
    CHECK(fs::exists(tmp.path / "vectors" / "cats-seed1.kvt"));
    CHECK(!fs::exists(tmp.path / "parts"));

    SUBCASE("analysis of the counting run gives one summary row") {
      analyze(tmp.path, tmp.path / "summaries");
      const auto rows = lines_of(slurp(tmp.path / "summaries" / "summary_detection.csv"));
      CHECK(rows.size() == 2);
    }
  }

  TEST_CASE("rerun skips completed keys; a removed key reruns alone") {
    TempDir tmp("resume");
    json cfg = base_config(tmp.path);
    cfg["concepts"] = {"cats", "music"};
    cfg["seeds"] = {1, 2};
    const RunConfig c = RunConfig::from_json(cfg);
    REQUIRE(run_grid(c).executed == 8);
    const std::string before = slurp(tmp.path / "records.jsonl");

    const GridSummary again = run_grid(c);
    CHECK(again.executed == 0);
    CHECK(again.skipped == 8);
    CHECK(slurp(tmp.path / "records.jsonl") == before);

    auto m = *RunManifest::load(tmp.path);
    m.completed.erase("Accurate_Mechanism+No_Document/music/2/detection");
    m.save(tmp.path);
    const std::size_t timing_lines = lines_of(slurp(tmp.path / "timings.jsonl")).size();
    const GridSummary resumed = run_grid(c);
    CHECK(resumed.executed == 1);
    CHECK(resumed.skipped == 7);
    CHECK(slurp(tmp.path / "records.jsonl") == before);
    const auto timings = lines_of(slurp(tmp.path / "timings.jsonl"));
    REQUIRE(timings.size() == timing_lines + 1);
    CHECK(json::parse(timings.back()).at("key") == "Accurate_Mechanism+No_Document/music/2/detection");

    // A different configuration is refused rather than mixed in.
    cfg["coefficient"] = 5.0;
    CHECK_THROWS_AS(run_grid(RunConfig::from_json(cfg)), InvalidArgument);
  }

  TEST_CASE("worker count does not change the records") {
    TempDir one("w1"), three("w3");
    json cfg = base_config(one.path);
    cfg["conditions"] = {"Accurate_Mechanism+No_Document", "Poetic_No_Mechanism+Poetic_Document"};
    cfg["concepts"] = {"cats", "bread", "love"};
    REQUIRE(run_grid(RunConfig::from_json(cfg)).ok());
    cfg["out"] = three.path.string();
    cfg["workers"] = 3;
    REQUIRE(run_grid(RunConfig::from_json(cfg)).ok());
    const std::string a = slurp(one.path / "records.jsonl"), b = slurp(three.path / "records.jsonl");
    CHECK(!a.empty());
    CHECK(a == b);
  }

  TEST_CASE("failing trials are recorded and the run continues") {
    TempDir tmp("fail");
    json cfg = base_config(tmp.path);
    cfg["corpus"] = "full";  // the verbatim document does not fit the desk model's context
    cfg["conditions"] = {"Accurate_Mechanism+Pro_Introspection_Document"};
    const GridSummary s = run_grid(RunConfig::from_json(cfg));
    CHECK(!s.ok());
    CHECK(s.failures.size() == 2);
    const auto errors = lines_of(slurp(tmp.path / "errors.jsonl"));
    REQUIRE(errors.size() == 2);
    CHECK(json::parse(errors[0]).at("error").get<std::string>().find("context") != std::string::npos);
    CHECK(RunManifest::load(tmp.path)->completed.empty());
  }

  TEST_CASE("calibration writes the coefficient into the manifest") {
    TempDir tmp("cal");
    json cfg = base_config(tmp.path);
    cfg["coefficient"] = "calibrate";
    cfg["concepts"] = {"bread"};
    cfg["calibration"] = {{"sweep", {2, 4, 5, 6}}};
    const CalibrationOutcome out = calibrate(RunConfig::from_json(cfg));
    const auto m = RunManifest::load(tmp.path);
    REQUIRE(m);
    CHECK(m->coefficient == out.coefficient);
    CHECK(m->calibration.at("concepts").contains("bread"));
    CHECK(m->calibration.at("concepts").at("bread").at("sweep").size() == 4);
  }

  TEST_CASE("analysis matches hand computation and ignores record order") {
    TempDir tmp("analyze");
    const ConditionSpec a = ConditionSpec::parse("Accurate_Mechanism+No_Document");
    const ConditionSpec b = ConditionSpec::parse("Wrong_Mechanism+Poetic_Document");
    std::vector<std::string> lines;
    auto add = [&](const TrialRecord& r) {
      json j = to_json(r);
      j["key"] = TrialKey{r.spec.condition, *r.spec.pair_concept, r.spec.seed, TrialKind::detection}.str();
      lines.push_back(j.dump());
    };
    add(hand_trial(a, "cats", false, 1, 0.10, {{2, 0.2}}));
    add(hand_trial(a, "cats", true, 1, 0.40, {{2, 0.5}}));
    add(hand_trial(a, "love", false, 1, 0.20, {{2, 0.4}}));
    add(hand_trial(a, "love", true, 1, 0.30, {{2, 0.7}}));
    add(hand_trial(b, "cats", false, 1, 0.05, {}));
    add(hand_trial(b, "cats", true, 1, 0.05, {}));
    // Identification for all nine concepts under condition a: concept i puts 0.6 on itself,
    // 0.4 on "(no injection)".
    const auto& concepts = PromptCorpus::mini().concepts();
    for (std::size_t i = 0; i < concepts.size(); ++i) {
      IdentificationRecord r;
      r.spec.condition = a;
      r.spec.concept_name = concepts[i];
      r.spec.seed = 1;
      r.spec.corpus = "mini";
      r.spec.kind = TrialKind::identification;
      r.p_digit_final[0] = 0.4;
      r.p_digit_final[i + 1] = 0.6;
      json j = to_json(r);
      j["key"] = TrialKey{a, concepts[i], 1, TrialKind::identification}.str();
      lines.push_back(j.dump());
    }
    fs::create_directories(tmp.path / "r1");
    write_lines(tmp.path / "r1" / "records.jsonl", lines);
    analyze(tmp.path / "r1", tmp.path / "s1");

    const fs::path summary = tmp.path / "s1" / "summary_detection.csv";
    CHECK(std::stod(table_cell(summary, a.name(), "p_yes_baseline")) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(std::stod(table_cell(summary, a.name(), "p_yes_injected")) == doctest::Approx(0.35).epsilon(1e-12));
    CHECK(std::stod(table_cell(summary, a.name(), "shift")) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(std::stod(table_cell(summary, a.name(), "balanced_accuracy")) == doctest::Approx(0.6).epsilon(1e-12));
    // Shifts 0.3 and 0.1: sample SD = 0.1 * sqrt(2).
    CHECK(std::stod(table_cell(summary, a.name(), "dispersion")) == doctest::Approx(0.1 * std::sqrt(2.0)).epsilon(1e-12));
    CHECK(std::stod(table_cell(summary, b.name(), "shift")) == 0.0);
    const fs::path by_layer = tmp.path / "s1" / "detection_by_layer.csv";
    CHECK(std::stod(table_cell(by_layer, a.name(), "p_yes_injected")) == doctest::Approx(0.6).epsilon(1e-12));
    const fs::path mi = tmp.path / "s1" / "mi_by_layer.csv";
    CHECK(std::stod(table_cell(mi, a.name(), "mi_bits")) == doctest::Approx(std::log2(9.0)).epsilon(1e-12));
    const fs::path lift = tmp.path / "s1" / "lift.csv";
    CHECK(std::stod(table_cell(lift, a.name(), "lift")) == doctest::Approx(9.0).epsilon(1e-12));
    const auto conf = lines_of(slurp(tmp.path / "s1" / "confusion" / "Accurate_Mechanism_No_Document__final.csv"));
    CHECK(conf[0].rfind("# condition=Accurate_Mechanism+No_Document layer=final records=9", 0) == 0);

    // Shuffled order gives byte-identical tables.
    std::mt19937_64 rng(5);
    std::shuffle(lines.begin(), lines.end(), rng);
    fs::create_directories(tmp.path / "r2");
    write_lines(tmp.path / "r2" / "records.jsonl", lines);
    analyze(tmp.path / "r2", tmp.path / "s2");
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(tmp.path / "s1")) {
      if (!e.is_regular_file()) continue;
      const fs::path other = tmp.path / "s2" / fs::relative(e.path(), tmp.path / "s1");
      CHECK_MESSAGE(slurp(e.path()) == slurp(other), e.path());
      ++compared;
    }
    CHECK(compared == 7);  // six tables plus one confusion grid

    SUBCASE("report passes summary values through") {
      report(tmp.path / "s1", tmp.path / "p");
      const fs::path bars = tmp.path / "p" / "plot_detection_bars.csv";
      const auto rows = lines_of(slurp(bars));
      REQUIRE(rows.size() == 3);  // header + one group per condition
      CHECK(rows[1] == "No_Document,Accurate_Mechanism," + table_cell(summary, a.name(), "p_yes_baseline") + "," +
                           table_cell(summary, a.name(), "p_yes_injected"));
      CHECK(table_cell(tmp.path / "p" / "plot_balanced_accuracy_grid.csv", "Accurate_Mechanism", "balanced_accuracy") ==
            table_cell(summary, a.name(), "balanced_accuracy"));
      CHECK(slurp(tmp.path / "p" / "plot_confusion" / "Accurate_Mechanism_No_Document__final.csv") ==
            slurp(tmp.path / "s1" / "confusion" / "Accurate_Mechanism_No_Document__final.csv"));
    }

    SUBCASE("schema mismatch is an error") {
      json j = json::parse(lines.front());
      j["schema_version"] = 99;
      lines.front() = j.dump();
      fs::create_directories(tmp.path / "r3");
      write_lines(tmp.path / "r3" / "records.jsonl", lines);
      CHECK_THROWS_AS(analyze(tmp.path / "r3", tmp.path / "s3"), SchemaError);
    }
  }

  TEST_CASE("report names every missing table") {
    TempDir tmp("report");
    try {
      report(tmp.path, tmp.path / "plots");
      FAIL("expected an error");
    } catch (const InvalidArgument& e) {
      const std::string msg = e.what();
      for (const char* t : {"summary_detection.csv", "detection_by_layer.csv", "mi_by_layer.csv", "lift.csv",
                            "mi_vs_sensitivity.csv", "correlation.csv"})
        CHECK_MESSAGE(msg.find(t) != std::string::npos, t);
    }
  }
}
