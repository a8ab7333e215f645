#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kvprobe/error.hpp"
#include "kvprobe/metrics.hpp"
#include "kvprobe/orchestrator.hpp"

namespace kvprobe {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string num(double x) {
  if (std::isnan(x)) return "NA";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

using Row = std::vector<std::string>;

struct Table {
  std::vector<std::string> comments;  // lines written before the header, without "# "
  Row header;
  std::vector<Row> rows;
};

void write_table(const fs::path& path, const Table& t) {
  std::ostringstream out;
  for (const auto& c : t.comments) out << "# " << c << "\n";
  auto line = [&](const Row& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << out.str();
}

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path.string());
  Table t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) == 0 && !have_header) {
      t.comments.push_back(line.substr(2));
      continue;
    }
    Row r;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) r.push_back(cell);
    if (!line.empty() && line.back() == ',') r.emplace_back();
    if (!have_header) {
      t.header = std::move(r);
      have_header = true;
    } else {
      t.rows.push_back(std::move(r));
    }
  }
  return t;
}

std::size_t column(const Table& t, const std::string& name) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) throw InvalidArgument("table lacks column '" + name + "'");
  return static_cast<std::size_t>(it - t.header.begin());
}

std::string layer_name(std::optional<int> layer) { return layer ? std::to_string(*layer) : "final"; }

std::string file_safe(std::string s) {
  std::replace(s.begin(), s.end(), '+', '_');
  return s;
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nan("");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

struct LoadedRecords {
  std::vector<TrialRecord> trials;
  std::vector<IdentificationRecord> identifications;
};

// Lines sorted by their full text so that aggregation order never depends on file order.
LoadedRecords load_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("no record file at " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  std::sort(lines.begin(), lines.end());
  LoadedRecords out;
  for (const auto& l : lines) {
    json j;
    try {
      j = json::parse(l);
    } catch (const json::parse_error& e) {
      throw SchemaError(std::string("unparseable record line: ") + e.what());
    }
    const std::string type = j.value("record", std::string());
    if (type == "trial")
      out.trials.push_back(trial_record_from_json(j));
    else if (type == "identification")
      out.identifications.push_back(identification_record_from_json(j));
    else
      throw SchemaError("record line has unknown type '" + type + "'");
  }
  return out;
}

std::string trial_group(const TrialRecord& r) {
  if (r.spec.kind == TrialKind::control) {
    const auto& battery = control_battery();
    const auto q = static_cast<std::size_t>(r.spec.question_index);
    if (r.spec.question_index < 0 || q >= battery.size()) throw SchemaError("control record without a valid question_index");
    return std::string(to_string(battery[q].category));
  }
  return "introspection";
}

}  // namespace

void analyze(const fs::path& records_dir, const fs::path& out_dir) {
  const LoadedRecords recs = load_records(records_dir / "records.jsonl");

  // Detection summaries per (condition, kind).
  std::map<std::pair<ConditionSpec, std::string>, std::vector<TrialRecord>> det;
  for (const auto& r : recs.trials) det[{r.spec.condition, trial_group(r)}].push_back(r);

  Table summary{{},
                {"condition", "framing", "document", "kind", "pairs", "p_yes_baseline", "p_yes_injected", "shift", "tpr",
                 "fpr", "balanced_accuracy", "dispersion", "sd_baseline", "sd_injected", "logit_shift_yes"},
                {}};
  Table by_layer{{}, {"condition", "layer", "p_yes_baseline", "p_yes_injected", "sd_baseline", "sd_injected"}, {}};
  std::map<ConditionSpec, double> sensitivity;
  for (const auto& [group, records] : det) {
    DetectionSummary s = summarize_detection(records);
    s.kind = group.second;
    summary.rows.push_back({group.first.name(), std::string(to_string(group.first.framing)),
                            std::string(to_string(group.first.document)), s.kind, std::to_string(s.pairs),
                            num(s.p_yes_baseline), num(s.p_yes_injected), num(s.shift), num(s.tpr), num(s.fpr),
                            num(s.balanced_accuracy), num(s.dispersion), num(s.sd_baseline), num(s.sd_injected),
                            num(s.logit_shift_yes)});
    if (group.second != "introspection") continue;
    sensitivity[group.first] = s.p_yes_injected;
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> layers;
    for (const auto& r : records)
      for (const auto& [layer, p] : r.p_answer_by_layer)
        (r.spec.concept_name ? layers[layer].second : layers[layer].first).push_back(p.at("yes"));
    for (const auto& [layer, v] : layers)
      by_layer.rows.push_back({group.first.name(), std::to_string(layer), num(mean_of(v.first)), num(mean_of(v.second)),
                               num(sample_sd(v.first)), num(sample_sd(v.second))});
  }
  write_table(out_dir / "summary_detection.csv", summary);
  write_table(out_dir / "detection_by_layer.csv", by_layer);

  // Identification: confusion per condition and layer, MI, lifts.
  std::map<ConditionSpec, std::vector<IdentificationRecord>> ids;
  for (const auto& r : recs.identifications) ids[r.spec.condition].push_back(r);
  Table mi{{}, {"condition", "layer", "mi_bits", "max_bits", "efficiency"}, {}};
  Table lifts{{}, {"condition", "concept", "diagonal", "background", "lift"}, {}};
  Table skipped{{}, {"condition", "reason"}, {}};
  std::map<ConditionSpec, double> final_mi;
  for (const auto& [cond, records] : ids) {
    const auto& concepts = PromptCorpus::by_name(records.front().spec.corpus).concepts();
    std::set<std::string> present;
    for (const auto& r : records)
      if (r.spec.concept_name) present.insert(*r.spec.concept_name);
    if (present.size() != concepts.size()) {
      skipped.rows.push_back({cond.name(), "identification covers " + std::to_string(present.size()) + " of " +
                                               std::to_string(concepts.size()) + " concepts"});
      continue;
    }
    std::vector<std::optional<int>> layers = {std::nullopt};
    for (const auto& [layer, _] : records.front().p_digit_by_layer) layers.push_back(layer);
    for (const auto& layer : layers) {
      ConfusionMatrix m = confusion_from_identification(records, concepts, layer);
      Table grid;
      grid.comments.push_back("condition=" + cond.name() + " layer=" + layer_name(layer) +
                              " records=" + std::to_string(records.size()) + " engine=" + engine_version());
      grid.header = {"injected"};
      for (const auto& c : concepts) grid.header.push_back(c);
      for (std::size_t i = 0; i < concepts.size(); ++i) {
        Row r = {concepts[i]};
        for (double x : m.rows[i]) r.push_back(num(x));
        grid.rows.push_back(std::move(r));
      }
      write_table(out_dir / "confusion" / (file_safe(cond.name()) + "__" + layer_name(layer) + ".csv"), grid);
      const MIResult res = mutual_information(m);
      mi.rows.push_back({cond.name(), layer_name(layer), num(res.bits), num(res.max_bits), num(res.efficiency)});
      if (!layer) {
        final_mi[cond] = res.bits;
        for (const auto& e : diagonal_lift(m))
          lifts.rows.push_back({cond.name(), e.label, num(e.diagonal), num(e.background), num(e.lift)});
      }
    }
  }
  write_table(out_dir / "mi_by_layer.csv", mi);
  write_table(out_dir / "lift.csv", lifts);
  if (!skipped.rows.empty()) write_table(out_dir / "skipped.csv", skipped);

  // MI against detection sensitivity across conditions.
  Table scatter{{}, {"condition", "sensitivity", "mi_bits"}, {}};
  std::vector<double> xs, ys;
  for (const auto& [cond, bits] : final_mi) {
    const auto it = sensitivity.find(cond);
    if (it == sensitivity.end()) continue;
    scatter.rows.push_back({cond.name(), num(it->second), num(bits)});
    xs.push_back(it->second);
    ys.push_back(bits);
  }
  write_table(out_dir / "mi_vs_sensitivity.csv", scatter);
  Table corr{{}, {"n", "r", "p"}, {}};
  try {
    const PearsonResult p = pearson_r(xs, ys);
    corr.rows.push_back({std::to_string(p.n), num(p.r), num(p.p)});
  } catch (const InvalidArgument&) {
    corr.rows.push_back({std::to_string(xs.size()), "NA", "NA"});
  }
  write_table(out_dir / "correlation.csv", corr);
}

void report(const fs::path& summaries_dir, const fs::path& out_dir) {
  const std::vector<std::string> required = {"summary_detection.csv", "detection_by_layer.csv", "mi_by_layer.csv",
                                             "lift.csv", "mi_vs_sensitivity.csv", "correlation.csv"};
  std::vector<std::string> missing;
  for (const auto& f : required)
    if (!fs::exists(summaries_dir / f)) missing.push_back(f);
  if (!missing.empty()) {
    std::string msg = "missing summary tables in " + summaries_dir.string() + ":";
    for (const auto& m : missing) msg += " " + m;
    throw InvalidArgument(msg);
  }

  const Table summary = read_table(summaries_dir / "summary_detection.csv");
  const auto c_cond = column(summary, "condition"), c_fr = column(summary, "framing"),
             c_doc = column(summary, "document"), c_kind = column(summary, "kind"),
             c_pb = column(summary, "p_yes_baseline"), c_pi = column(summary, "p_yes_injected"),
             c_shift = column(summary, "shift"), c_ba = column(summary, "balanced_accuracy"),
             c_disp = column(summary, "dispersion");

  Table bars{{}, {"document", "framing", "p_yes_baseline", "p_yes_injected"}, {}};
  Table shifts{{}, {"condition", "kind", "shift", "dispersion"}, {}};
  Table ba{{}, {"framing", "document", "balanced_accuracy"}, {}};
  for (const auto& r : summary.rows) {
    shifts.rows.push_back({r[c_cond], r[c_kind], r[c_shift], r[c_disp]});
    if (r[c_kind] != "introspection") continue;
    bars.rows.push_back({r[c_doc], r[c_fr], r[c_pb], r[c_pi]});
    ba.rows.push_back({r[c_fr], r[c_doc], r[c_ba]});
  }
  std::sort(bars.rows.begin(), bars.rows.end());
  write_table(out_dir / "plot_detection_bars.csv", bars);
  write_table(out_dir / "plot_control_shift.csv", shifts);
  write_table(out_dir / "plot_balanced_accuracy_grid.csv", ba);

  const Table layers = read_table(summaries_dir / "detection_by_layer.csv");
  Table curves{{}, {"condition", "layer", "p_yes_baseline", "p_yes_injected", "band_low", "band_high"}, {}};
  const auto l_cond = column(layers, "condition"), l_layer = column(layers, "layer"),
             l_pb = column(layers, "p_yes_baseline"), l_pi = column(layers, "p_yes_injected"),
             l_sd = column(layers, "sd_injected");
  for (const auto& r : layers.rows) {
    const double m = std::stod(r[l_pi]), sd = r[l_sd] == "NA" ? 0.0 : std::stod(r[l_sd]);
    curves.rows.push_back({r[l_cond], r[l_layer], r[l_pb], r[l_pi], num(m - sd), num(m + sd)});
  }
  write_table(out_dir / "plot_pyes_by_layer.csv", curves);

  const Table mi = read_table(summaries_dir / "mi_by_layer.csv");
  Table mi_curves{{}, {"condition", "layer", "mi_bits"}, {}};
  for (const auto& r : mi.rows)
    if (r[column(mi, "layer")] != "final")
      mi_curves.rows.push_back({r[column(mi, "condition")], r[column(mi, "layer")], r[column(mi, "mi_bits")]});
  write_table(out_dir / "plot_mi_by_layer.csv", mi_curves);

  const Table scatter = read_table(summaries_dir / "mi_vs_sensitivity.csv");
  const Table corr = read_table(summaries_dir / "correlation.csv");
  Table sc{{}, {"condition", "sensitivity", "mi_bits"}, {}};
  if (!corr.rows.empty())
    sc.comments.push_back("r=" + corr.rows[0][column(corr, "r")] + " p=" + corr.rows[0][column(corr, "p")] +
                          " n=" + corr.rows[0][column(corr, "n")]);
  for (const auto& r : scatter.rows) sc.rows.push_back(r);
  write_table(out_dir / "plot_mi_vs_sensitivity.csv", sc);

  const fs::path conf_dir = summaries_dir / "confusion";
  if (fs::exists(conf_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(conf_dir))
      if (e.path().filename().string().ends_with("__final.csv")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) write_table(out_dir / "plot_confusion" / f.filename(), read_table(f));
  }
}

}  // namespace kvprobe
