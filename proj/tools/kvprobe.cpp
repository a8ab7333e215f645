// kvprobe command-line entry point.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "kvprobe/error.hpp"
#include "kvprobe/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace kvprobe;

namespace {

struct Globals {
  std::string config;
  std::string out;
  int workers = 0;
  std::optional<std::uint64_t> seed;
};

fs::path default_out(const Globals& g) {
  if (!g.out.empty()) return g.out;
  if (const char* env = std::getenv("KVPROBE_OUT"); env && *env) return env;
  return "kvprobe-out";
}

RunConfig load_config(const Globals& g) {
  if (g.config.empty()) throw InvalidArgument("this command needs --config");
  RunConfig c = RunConfig::load(g.config);
  if (!g.out.empty() || c.out_dir.empty()) c.out_dir = default_out(g);
  if (g.workers > 0) c.workers = g.workers;
  if (g.seed) c.seeds = {*g.seed};
  c.validate();
  return c;
}

int finish(const GridSummary& s) {
  std::cout << "executed " << s.executed << ", skipped " << s.skipped << " completed, failed " << s.failures.size()
            << "\n";
  for (const auto& [key, msg] : s.failures) std::cerr << "failed " << key << ": " << msg << "\n";
  return s.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept injection and introspection probes over the KV cache"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run config (JSON)");
  app.add_option("--out", g.out, "Output directory (default: $KVPROBE_OUT or ./kvprobe-out)");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Run only this seed");

  auto* train = app.add_subcommand("train-vectors", "Train and cache steering vectors for every concept and seed");
  auto* detect = app.add_subcommand("run-detection", "Run paired detection trials (and controls if enabled)");
  auto* ident = app.add_subcommand("run-identification", "Run identification trials");
  auto* analyze_cmd = app.add_subcommand("analyze", "Summarize records into CSV tables");
  std::string records_dir, summaries_dir;
  analyze_cmd->add_option("--records", records_dir, "Directory holding records.jsonl (default: the output directory)");
  auto* report_cmd = app.add_subcommand("report", "Write plot-data CSVs from summary tables");
  report_cmd->add_option("--summaries", summaries_dir, "Summary directory (default: <out>/summaries)");
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Sweep the injection coefficient and store the result");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const RunConfig c = load_config(g);
      const Model model = Model::load(c.model_path);
      const Tokenizer tok = make_tokenizer(c.tokenizer);
      const ChatTemplate chat = ChatTemplate::by_name(c.chat_template);
      for (const auto& concept_name : c.concepts)
        for (auto seed : c.seeds) {
          const SteeringVector v = ensure_vector(c, model, tok, chat, concept_name, seed);
          std::cout << concept_name << " seed " << seed << ": " << v.per_layer.size() << " layers\n";
        }
      return 0;
    }
    if (detect->parsed()) return finish(run_grid(load_config(g), {TrialKind::detection, TrialKind::control}));
    if (ident->parsed()) return finish(run_grid(load_config(g), {TrialKind::identification}));
    if (analyze_cmd->parsed()) {
      const fs::path out = default_out(g);
      analyze(records_dir.empty() ? out : fs::path(records_dir), out / "summaries");
      std::cout << "wrote " << (out / "summaries").string() << "\n";
      return 0;
    }
    if (report_cmd->parsed()) {
      const fs::path out = default_out(g);
      report(summaries_dir.empty() ? out / "summaries" : fs::path(summaries_dir), out / "plots");
      std::cout << "wrote " << (out / "plots").string() << "\n";
      return 0;
    }
    if (calibrate_cmd->parsed()) {
      const CalibrationOutcome r = calibrate(load_config(g));
      for (const auto& [concept_name, d] : r.details.at("concepts").items())
        std::cout << concept_name << ": " << d.at("coefficient").dump() << "\n";
      if (!r.coefficient) {
        std::cerr << "no coefficient met the threshold\n";
        return 1;
      }
      std::cout << "coefficient " << *r.coefficient << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "kvprobe: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "kvprobe: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
