// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "kvprobe/metrics.hpp"
#include "kvprobe/orchestrator.hpp"
#include "kvprobe/protocol.hpp"
#include "kvprobe/steering.hpp"
#include "support/rig.hpp"

using namespace kvprobe;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path kDeskModel = fs::path(KVPROBE_TEST_DATA_DIR) / "desk_model.kvt";

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << x;
  return s.str();
}

std::vector<int> random_bytes(std::mt19937_64& rng, std::size_t n) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(32 + rng() % 95);
  return t;
}

std::string random_text(std::mt19937_64& rng, int words) {
  static const char* vocab[] = {"the", "cat", "sat", "on", "a", "warm", "mat", "and", "we", "think", "about",
                                "bread", "music", "river", "quiet", "door", "open", "today", "you", "here"};
  std::string s;
  for (int i = 0; i < words; ++i) s += std::string(i ? " " : "") + vocab[rng() % std::size(vocab)];
  return s + ".";
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

SteeringVector random_unit_vector(const std::set<int>& layers, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  SteeringVector v;
  v.concept_name = "random";
  for (int l : layers) {
    std::vector<float> x(static_cast<std::size_t>(d));
    double s = 0.0;
    for (float& e : x) s += static_cast<double>(e = n(rng)) * e;
    for (float& e : x) e = static_cast<float>(e / std::sqrt(s));
    v.per_layer[l] = x;
  }
  return v;
}

// ---- criteria ----

Outcome cache_equivalence() {
  const auto t0 = Clock::now();
  const Model m = Model::load(kDeskModel);
  if (m.config().n_layers != 4) return {false, "desk model has " + std::to_string(m.config().n_layers) + " layers"};
  std::mt19937_64 rng(101);
  const auto tokens = random_bytes(rng, 160);
  auto full_cache = m.new_cache();
  const auto full = m.forward_extend(full_cache, tokens);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t split = 1 + rng() % (tokens.size() - 1);
    auto cache = m.new_cache();
    const auto head = m.forward_extend(cache, std::span(tokens).first(split));
    const auto tail = m.forward_extend(cache, std::span(tokens).subspan(split));
    for (std::size_t p = 0; p < split; ++p) worst = std::max(worst, max_abs_diff(full.logits[p], head.logits[p]));
    for (std::size_t p = split; p < tokens.size(); ++p)
      worst = std::max(worst, max_abs_diff(full.logits[p], tail.logits[p - split]));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 30.0, "max |dlogit| " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome zero_coefficient_identity() {
  const Model m = Model::load(kDeskModel);
  const Tokenizer tok = Tokenizer::byte_level();
  const ChatTemplate chat = ChatTemplate::compact();
  const auto layers = middle_third_layers(m.config().n_layers);
  const SteeringVector v = random_unit_vector(layers, m.config().d_model, 5);
  const TrialContext ctx{m, tok, chat, &v};
  const AnswerFormat format = AnswerFormat::yes_no(tok);
  std::mt19937_64 rng(202);
  int identical = 0;
  for (int i = 0; i < 50; ++i) {
    ConversationScript s;
    s.system = random_text(rng, static_cast<int>(rng() % 4));
    s.user_1 = random_text(rng, 3 + static_cast<int>(rng() % 12));
    s.assistant_1 = random_text(rng, 1 + static_cast<int>(rng() % 6));
    s.user_2 = random_text(rng, 3 + static_cast<int>(rng() % 10)) + " Yes or no?";
    s.answer_prefix = "The answer is";
    TrialSpec spec;
    spec.concept_name = "random";
    spec.coefficient = 0.0;
    spec.probe_layers = {0, 1, 2, 3};
    spec.answer_sets = format.sets;
    const auto [base, inj] = run_paired_trials(ctx, s, spec);
    const bool same = base.p_answer_final == inj.p_answer_final && base.p_answer_by_layer == inj.p_answer_by_layer &&
                      base.logit_lse_final == inj.logit_lse_final && inj.interventions_turn1 > 0;
    identical += same;
  }
  return {identical == 50, std::to_string(identical) + "/50 scripts bit-identical"};
}

Outcome hook_exactness() {
  const Model m = Model::load(kDeskModel);
  const int d = m.config().d_model;
  std::mt19937_64 rng(303);
  double worst = 0.0, worst_first = 0.0;
  std::size_t sites = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto tokens = random_bytes(rng, 64);
    const auto layers = middle_third_layers(m.config().n_layers);
    const SteeringVector v = random_unit_vector(layers, d, 40 + trial);
    const double alpha = 0.5 + static_cast<double>(rng() % 80) / 10.0;
    const std::size_t b = rng() % 30;
    const auto plan = InjectionPlan::build(v, layers, {b, b + 1 + rng() % 30}, alpha);
    CaptureSpec spec;
    for (int l = 0; l < m.config().n_layers; ++l) spec.layers.push_back(l);
    spec.all_positions = true;
    spec.include_pre_hook = true;
    auto c1 = m.new_cache(), c2 = m.new_cache();
    const auto plain = m.forward_extend(c1, tokens, nullptr, spec);
    const auto hooked = m.forward_extend(c2, tokens, &plan, spec);
    const int first = *layers.begin();
    for (std::size_t i = 0; i < hooked.captures.size(); ++i) {
      const auto& h = hooked.captures[i];
      const bool planned = layers.contains(h.layer_index) && plan.span.contains(h.position);
      for (int k = 0; k < d; ++k) {
        const double expected = planned ? alpha * v.per_layer.at(h.layer_index)[static_cast<std::size_t>(k)] : 0.0;
        worst = std::max(worst, std::abs((static_cast<double>(h.hidden[static_cast<std::size_t>(k)]) -
                                          h.pre_hook[static_cast<std::size_t>(k)]) -
                                         expected));
        // At the first planned layer the unhooked run is the same state minus the hook.
        if (h.layer_index == first)
          worst_first = std::max(worst_first, std::abs((static_cast<double>(h.hidden[static_cast<std::size_t>(k)]) -
                                                        plain.captures[i].hidden[static_cast<std::size_t>(k)]) -
                                                       expected));
      }
      sites += planned;
    }
  }
  return {worst < 1e-6 && worst_first < 1e-6,
          std::to_string(sites) + " planned sites, max error " + fmt(std::max(worst, worst_first))};
}

Outcome lens_top_identity() {
  const Model m = Model::load(kDeskModel);
  std::mt19937_64 rng(404);
  const int top = m.config().n_layers - 1;
  double worst = 0.0;
  for (int s = 0; s < 20; ++s) {
    const auto tokens = random_bytes(rng, 20 + rng() % 60);
    CaptureSpec spec;
    spec.layers = {top};
    spec.all_positions = true;
    auto cache = m.new_cache();
    const auto r = m.forward_extend(cache, tokens, nullptr, spec);
    for (const auto& cap : r.captures) {
      const auto lens = m.logit_lens(cap);
      const auto out = next_token_distribution(r.logits[cap.position]);
      for (std::size_t j = 0; j < lens.size(); ++j) worst = std::max(worst, std::abs(lens[j] - out[j]));
    }
  }
  return {worst < 1e-5, "max |dp| " + fmt(worst)};
}

Outcome pca_recovery() {
  const int d = 64, samples = 64;
  double worst_noisy = 1.0, noiseless = 0.0;
  for (std::uint64_t seed = 0; seed < 21; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> amp(0.5, 1.5);
    std::vector<double> u(d);
    double norm = 0.0;
    for (double& x : u) norm += (x = n(rng)) * x;
    for (double& x : u) x /= std::sqrt(norm);
    const double sigma = seed == 20 ? 0.0 : 0.1;
    ContrastiveDifferences diffs;
    for (int i = 0; i < samples; ++i) {
      const double a = amp(rng);
      std::vector<float> row(d);
      for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = static_cast<float>(a * u[static_cast<std::size_t>(j)] + sigma * n(rng));
      diffs.per_layer[0].push_back(row);
    }
    const auto v = train_steering_vector(diffs, "planted", seed);
    double c = 0.0;
    for (int j = 0; j < d; ++j) c += v.per_layer.at(0)[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)];
    if (seed == 20)
      noiseless = c;
    else
      worst_noisy = std::min(worst_noisy, std::abs(c));
  }
  return {worst_noisy >= 0.99 && noiseless >= 0.999,
          "min |cos| over 20 noisy seeds " + fmt(worst_noisy, 5) + ", noiseless " + fmt(noiseless, 7)};
}

Outcome mi_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::vector<std::vector<double>> m(9, std::vector<double>(9));
    for (auto& row : m) {
      double s = 0.0;
      for (double& x : row) s += x = (u(rng) < 0.2 ? 0.0 : u(rng));
      if (s == 0.0) row[0] = s = 1.0;
      for (double& x : row) x /= s;
    }
    // Joint P(i, j) = m[i][j] / 9; sum P(i, j) log2(P(i, j) / (P(i) P(j))).
    std::vector<double> pj(9, 0.0);
    for (const auto& row : m)
      for (std::size_t j = 0; j < 9; ++j) pj[j] += row[j] / 9.0;
    double oracle = 0.0;
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j) {
        const double p = m[i][j] / 9.0;
        if (p > 0.0) oracle += p * std::log2(p / ((1.0 / 9.0) * pj[j]));
      }
    worst = std::max(worst, std::abs(mutual_information(m).bits - oracle));
  }
  std::vector<std::vector<double>> id(9, std::vector<double>(9, 0.0)), flat(9, std::vector<double>(9, 1.0 / 9.0));
  for (std::size_t i = 0; i < 9; ++i) id[i][i] = 1.0;
  const double id_bits = mutual_information(id).bits, flat_bits = mutual_information(flat).bits;
  const bool ok = worst <= 1e-9 && std::abs(id_bits - 3.1699) <= 1e-4 && std::abs(id_bits - std::log2(9.0)) <= 1e-6 &&
                  std::abs(flat_bits) <= 1e-12;
  return {ok, "max |dMI| " + fmt(worst) + ", identity " + fmt(id_bits, 6) + ", uniform " + fmt(flat_bits)};
}

Outcome lift_reproduction() {
  struct Row {
    const char* name;
    double diag, bg, lift;
  };
  const Row rows[] = {{"love", 25.93, 3.09, 8.4}, {"fear", 2.70, 0.34, 7.9}, {"programming", 98.74, 33.31, 3.0}};
  bool ok = true;
  std::string detail;
  for (const auto& r : rows) {
    const double l = std::round(lift(r.diag / 100.0, r.bg / 100.0) * 10.0) / 10.0;
    ok = ok && std::abs(l - r.lift) < 1e-9;
    detail += std::string(detail.empty() ? "" : ", ") + r.name + " " + fmt(l, 2) + "x";
  }
  return {ok, detail};
}

Outcome balanced_accuracy_check() {
  const double ba = balanced_accuracy(0.399, 0.008);
  return {std::abs(ba - 0.6955) <= 1e-12, "BA(0.399, 0.008) = " + fmt(ba, 12)};
}

Outcome pearson_fixture() {
  std::mt19937_64 rng(606);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    Eigen::VectorXd x(16), y(16);
    for (int i = 0; i < 16; ++i) {
      x[i] = n(rng);
      y[i] = 0.7 * x[i] + n(rng);
    }
    // r = <x - mean, y - mean> / (|x - mean| |y - mean|)
    const Eigen::VectorXd xc = x.array() - x.mean(), yc = y.array() - y.mean();
    const double oracle = xc.dot(yc) / (xc.norm() * yc.norm());
    const std::vector<double> xs(x.data(), x.data() + 16), ys(y.data(), y.data() + 16);
    worst = std::max(worst, std::abs(pearson_r(xs, ys).r - oracle));
  }
  return {worst <= 1e-12, "max |dr| " + fmt(worst)};
}

Outcome steering_effect() {
  // Part 1: calibrated steering on the trained desk model.
  const Model m = Model::load(kDeskModel);
  const Tokenizer tok = Tokenizer::byte_level();
  const ChatTemplate chat = ChatTemplate::compact();
  const auto& corpus = PromptCorpus::mini();
  const auto layers = middle_third_layers(m.config().n_layers);
  const auto prompt = render_turns(tok, chat, {{SpanLabel::User1, "Tell me something."}, {SpanLabel::AssistantPrefix, "", true}});
  const std::vector<double> sweep = {1, 2, 3, 4, 5, 6, 8, 10, 12, 16};
  int reached = 0;
  std::string which;
  for (const auto& c : corpus.concepts()) {
    const auto pairs = make_contrastive_pairs(corpus.contrastive(), c, 32, 1);
    const auto v = train_steering_vector(collect_contrastive_activations(m, tok, chat, pairs, layers), c, 1);
    std::string stem = c.size() > 3 && c.back() == 's' ? c.substr(0, c.size() - 1) : c;
    stem = stem.substr(0, 4);
    std::string cap = stem;
    cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
    const auto cal = calibrate_coefficient(m, v, layers, prompt.tokens, {tok.encode(stem), tok.encode(cap)}, 64, sweep);
    if (cal.coefficient) {
      ++reached;
      const auto& r = std::find_if(cal.sweep.begin(), cal.sweep.end(),
                                   [&](const auto& p) { return p.first == *cal.coefficient; })->second;
      which += std::string(which.empty() ? "" : ", ") + c + " at alpha " + fmt(*cal.coefficient) + " (" +
               fmt(r.baseline_frequency) + " -> " + fmt(r.steered_frequency) + ")";
    }
  }

  // Part 2: paired detection on the rigged fixture.
  const testing::Rig rig(corpus.concepts());
  const Model rm = rig.model();
  const AnswerFormat rf = AnswerFormat::yes_no(rig.tokenizer);
  const ConversationScript script =
      corpus.render_detection_prompt(ConditionSpec::parse("Accurate_Mechanism+Pro_Introspection_Document"));
  int positive = 0;
  double min_shift = 1.0;
  for (const auto& c : corpus.concepts()) {
    const SteeringVector v = rig.vector(c);
    const TrialContext ctx{rm, rig.tokenizer, chat, &v};
    TrialSpec spec;
    spec.concept_name = c;
    spec.coefficient = 1.0;
    spec.answer_sets = rf.sets;
    const auto [base, inj] = run_paired_trials(ctx, script, spec);
    const double shift = inj.p_answer_final.at("yes") - base.p_answer_final.at("yes");
    positive += shift > 0.0;
    min_shift = std::min(min_shift, shift);
  }
  const bool ok = reached >= 1 && positive == 9;
  return {ok, std::to_string(reached) + "/9 desk concepts reach 2x" + (which.empty() ? "" : " [" + which + "]") +
                  "; rig P(yes) shift > 0 for " + std::to_string(positive) + "/9 (min " + fmt(min_shift) + ")"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome grid_determinism() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / ("kvprobe-acceptance-" + std::to_string(std::random_device{}()));
  fs::create_directories(root);
  auto config = [&](const std::string& name, int workers) {
    return RunConfig::from_json({{"model", kDeskModel.string()},
                                 {"corpus", "mini"},
                                 {"conditions", "core"},
                                 {"concepts", "all"},
                                 {"seeds", {1, 2}},
                                 {"coefficient", "calibrate"},
                                 {"workers", workers},
                                 {"out", (root / name).string()}});
  };
  const RunConfig one = config("w1", 1), four = config("w4", 4);
  const GridSummary a = run_grid(one);
  const GridSummary b = run_grid(four);
  const std::string ra = slurp(root / "w1" / "records.jsonl"), rb = slurp(root / "w4" / "records.jsonl");
  const std::size_t lines = static_cast<std::size_t>(std::count(ra.begin(), ra.end(), '\n'));

  auto m = *RunManifest::load(root / "w4");
  const std::string victim = "Poetic_No_Mechanism+Matched_Lipsum_Filler/music/2/identification";
  const bool had = m.completed.erase(victim) == 1;
  m.save(root / "w4");
  const GridSummary c = run_grid(four);
  const std::string rc = slurp(root / "w4" / "records.jsonl");
  const double secs = seconds_since(t0);
  std::error_code ec;
  fs::remove_all(root, ec);

  const bool ok = a.ok() && b.ok() && c.ok() && a.executed == 576 && ra == rb && had && c.executed == 1 &&
                  c.skipped == 575 && rc == ra && lines == 288 * 3 && secs <= 600.0;
  return {ok, std::to_string(a.executed) + " keys, " + std::to_string(lines) + " records, workers 1 vs 4 " +
                  (ra == rb ? "identical" : "DIFFER") + "; resume re-ran " + std::to_string(c.executed) +
                  " key; coefficient " + (a.manifest.coefficient ? fmt(*a.manifest.coefficient) : "none") + "; " +
                  fmt(secs) + " s"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"cache equivalence", cache_equivalence},
      {"zero-coefficient identity", zero_coefficient_identity},
      {"hook exactness", hook_exactness},
      {"logit-lens top identity", lens_top_identity},
      {"PCA recovery", pca_recovery},
      {"MI oracle equivalence", mi_oracle},
      {"lift reproduction", lift_reproduction},
      {"balanced-accuracy arithmetic", balanced_accuracy_check},
      {"Pearson fixture", pearson_fixture},
      {"end-to-end steering effect", steering_effect},
      {"grid determinism and resumption", grid_determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << "  (" << o.detail << ")" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
