#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "kvprobe/error.hpp"
#include "kvprobe/prompts.hpp"
#include "kvprobe/steering.hpp"
#include "support/fixtures.hpp"

using namespace kvprobe;

namespace {

std::vector<float> unit_vector(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(d));
  double s = 0.0;
  for (double& x : v) {
    x = n(rng);
    s += x * x;
  }
  std::vector<float> out;
  for (double x : v) out.push_back(static_cast<float>(x / std::sqrt(s)));
  return out;
}

ContrastiveDifferences planted(const std::vector<float>& v, int samples, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  ContrastiveDifferences diffs;
  for (int i = 0; i < samples; ++i) {
    std::vector<float> d(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) d[j] = static_cast<float>(v[j] + n(rng));
    diffs.per_layer[1].push_back(std::move(d));
  }
  return diffs;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Top right singular vector of the stacked raw differences, by full SVD.
std::vector<float> svd_oracle(const std::vector<std::vector<float>>& rows) {
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
  std::vector<float> out;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(static_cast<float>(svd.matrixV()(j, 0)));
  return out;
}

ContrastiveTemplates mini_templates() {
  const auto j = nlohmann::json::parse(std::string(detail::corpus_resources().at("mini.json")));
  const auto& c = j.at("contrastive");
  return {c.at("positive_template"), c.at("negative_template"), c.at("assistant_prefixes")};
}

}  // namespace

TEST_SUITE("steering") {
  TEST_CASE("noiseless rank-1 differences recover the planted direction") {
    std::mt19937_64 rng(11);
    const auto v = unit_vector(64, rng);
    const auto vec = train_steering_vector(planted(v, 64, 0.0, 1), "x", 3);
    const double c = cosine(vec.per_layer.at(1), v);
    CHECK(c >= 0.999);  // positive: sign follows the raw differences
  }

  TEST_CASE("noisy rank-1 differences: |cos| >= 0.99 over 20 seeds, matching a full SVD") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      const auto v = unit_vector(64, rng);
      const auto diffs = planted(v, 64, 0.1, seed);
      const auto vec = train_steering_vector(diffs, "x", seed);
      const auto& dir = vec.per_layer.at(1);
      CHECK(std::abs(cosine(dir, v)) >= 0.99);
      CHECK(std::abs(cosine(dir, svd_oracle(diffs.per_layer.at(1)))) >= 1.0 - 1e-6);
    }
  }

  TEST_CASE("power iteration agrees with eigendecomposition") {
    std::mt19937_64 rng(5);
    const auto v = unit_vector(48, rng);
    const auto diffs = planted(v, 64, 0.1, 9);
    PcaOptions power;
    power.power_iteration_above = 0;
    const auto a = train_steering_vector(diffs, "x", 1);
    const auto b = train_steering_vector(diffs, "x", 1, power);
    CHECK(cosine(a.per_layer.at(1), b.per_layer.at(1)) >= 1.0 - 1e-6);
  }

  TEST_CASE("scale invariance, sign policy and seed determinism") {
    std::mt19937_64 rng(21);
    const auto v = unit_vector(32, rng);
    auto diffs = planted(v, 40, 0.3, 4);
    const auto base = train_steering_vector(diffs, "x", 8);
    for (float k : {1e-3f, 0.5f, 7.0f, 1e3f}) {
      ContrastiveDifferences scaled = diffs;
      for (auto& d : scaled.per_layer.at(1))
        for (float& x : d) x *= k;
      const auto s = train_steering_vector(scaled, "x", 8);
      CHECK(cosine(s.per_layer.at(1), base.per_layer.at(1)) >= 1.0 - 1e-5);
    }
    // Flip the differences; the direction flips with them.
    ContrastiveDifferences flipped = diffs;
    for (auto& d : flipped.per_layer.at(1))
      for (float& x : d) x = -x;
    const auto f = train_steering_vector(flipped, "x", 8);
    CHECK(cosine(f.per_layer.at(1), base.per_layer.at(1)) <= -1.0 + 1e-5);
    for (const auto* t : {&base, &f}) {
      const auto& src = t == &base ? diffs : flipped;
      double mean_proj = 0.0;
      for (const auto& d : src.per_layer.at(1)) mean_proj += cosine(d, t->per_layer.at(1));
      CHECK(mean_proj >= 0.0);
    }
    const auto again = train_steering_vector(diffs, "x", 8);
    CHECK(again.per_layer.at(1) == base.per_layer.at(1));
    double norm = 0.0;
    for (float x : base.per_layer.at(1)) norm += double(x) * x;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
  }

  TEST_CASE("all-zero differences are degenerate") {
    ContrastiveDifferences diffs;
    diffs.per_layer[2] = {std::vector<float>(16, 0.0f), std::vector<float>(16, 0.0f)};
    CHECK_THROWS_AS(train_steering_vector(diffs, "x", 0), DegenerateDirection);
  }

  TEST_CASE("centered pairs sum to zero") {
    const std::vector<std::vector<float>> d = {{1.0f, -2.0f, 3.0f}, {0.5f, 0.25f, -4.0f}};
    const auto c = centered_pairs(d);
    REQUIRE(c.size() == 4);
    for (std::size_t j = 0; j < 3; ++j) CHECK(c[0][j] + c[1][j] + c[2][j] + c[3][j] == 0.0f);
  }

  TEST_CASE("contrastive pairs differ only in the concept and cycle prefixes deterministically") {
    const auto t = mini_templates();
    const auto a = make_contrastive_pairs(t, "cats", 50, 3);
    const auto b = make_contrastive_pairs(t, "cats", 50, 3);
    REQUIRE(a.size() == 50);
    std::set<std::string> first_round;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].assistant_prefix == b[i].assistant_prefix);
      CHECK(a[i].positive_prompt.find("cats") != std::string::npos);
      CHECK(a[i].negative_prompt.find("cats") == std::string::npos);
      if (i < t.assistant_prefixes.size()) first_round.insert(a[i].assistant_prefix);
    }
    CHECK(first_round.size() == t.assistant_prefixes.size());
    const auto other = make_contrastive_pairs(t, "cats", 50, 4);
    const bool reordered = other[0].assistant_prefix != a[0].assistant_prefix || other[1].assistant_prefix != a[1].assistant_prefix;
    CHECK(reordered);
  }

  TEST_CASE("collect: identical prompts, counts and errors") {
    const Model m = kvprobe::testing::random_model(6);
    const auto tok = Tokenizer::byte_level();
    const auto chat = ChatTemplate::compact();
    std::vector<ContrastivePair> same = {{"think", "think", "Sure,"}, {"hm", "hm", "Okay."}};
    const auto d = collect_contrastive_activations(m, tok, chat, same, {2, 3});
    REQUIRE(d.per_layer.size() == 2);
    for (const auto& [layer, rows] : d.per_layer) {
      CHECK(rows.size() == 2);
      for (const auto& r : rows)
        for (float x : r) CHECK(x == 0.0f);
    }
    CHECK_THROWS_AS(collect_contrastive_activations(m, tok, chat, std::span(same).first(1), {2}), InvalidArgument);
    std::vector<ContrastivePair> empty = {{"", "", ""}, {"a", "b", "c"}};
    CHECK_THROWS_AS(collect_contrastive_activations(m, tok, chat, empty, {2}), InvalidArgument);
  }

  TEST_CASE("save and load round trip") {
    std::mt19937_64 rng(2);
    SteeringVector v;
    v.concept_name = "bread";
    v.train_seed = 99;
    v.pair_count = 32;
    v.per_layer[1] = unit_vector(24, rng);
    v.per_layer[2] = unit_vector(24, rng);
    const auto path = std::filesystem::temp_directory_path() / "kvprobe_steer_test.kvt";
    save_steering_vector(path, v);
    const auto back = load_steering_vector(path);
    CHECK(back.concept_name == "bread");
    CHECK(back.train_seed == 99);
    CHECK(back.pair_count == 32);
    CHECK(back.per_layer == v.per_layer);
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".meta.json");
  }

  TEST_CASE("verify: zero coefficient reproduces the baseline; huge coefficient still completes") {
    const Model m = kvprobe::testing::random_model(6);
    std::mt19937_64 rng(8);
    SteeringVector v;
    v.concept_name = "z";
    for (int l : middle_third_layers(6)) v.per_layer[l] = unit_vector(64, rng);
    const std::vector<int> prompt = {72, 105, 32, 116, 104, 101, 114, 101};
    const auto zero = verify_steering(m, v, middle_third_layers(6), 0.0, prompt, {{101}}, 24);
    CHECK(zero.steered_tokens == zero.baseline_tokens);
    CHECK(zero.steered_tokens.size() == 24);
    const auto huge = verify_steering(m, v, middle_third_layers(6), 1e6, prompt, {{101}}, 24);
    CHECK(huge.steered_tokens.size() == 24);
    CHECK(huge.degenerate_repetition);
  }

  TEST_CASE("desk model: collected differences match two independent forward passes") {
    if (!std::filesystem::exists(kvprobe::testing::desk_model_path())) {
      MESSAGE("desk model fixture not present; skipping");
      return;
    }
    const Model m = Model::load(kvprobe::testing::desk_model_path());
    const auto tok = Tokenizer::byte_level();
    const auto chat = ChatTemplate::compact();
    const auto pairs = make_contrastive_pairs(mini_templates(), "cats", 16, 1);
    const std::set<int> layers = middle_third_layers(m.config().n_layers);
    const auto diffs = collect_contrastive_activations(m, tok, chat, pairs, layers);

    auto last_hidden = [&](const std::string& prompt, const std::string& prefix, int layer) {
      const auto seq = render_turns(tok, chat, {{SpanLabel::User1, prompt}, {SpanLabel::AssistantPrefix, prefix, true}});
      CaptureSpec spec;
      spec.layers = {layer};
      spec.all_positions = true;
      auto cache = m.new_cache();
      auto r = m.forward_extend(cache, seq.tokens, nullptr, spec);
      return r.captures.back().hidden;
    };
    for (int l : layers) {
      REQUIRE(diffs.per_layer.at(l).size() == 16);
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto p = last_hidden(pairs[i].positive_prompt, pairs[i].assistant_prefix, l);
        const auto n = last_hidden(pairs[i].negative_prompt, pairs[i].assistant_prefix, l);
        for (std::size_t j = 0; j < p.size(); ++j) CHECK(std::abs((p[j] - n[j]) - diffs.per_layer.at(l)[i][j]) <= 1e-6);
      }
    }
  }
}
