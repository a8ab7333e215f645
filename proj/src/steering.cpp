#include "kvprobe/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "kvprobe/error.hpp"
#include "kvprobe/rng.hpp"

namespace kvprobe {
namespace {

std::string substitute(std::string text, const std::string& key, const std::string& value) {
  for (std::size_t pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size()))
    text.replace(pos, key.size(), value);
  return text;
}

void final_token_capture(const Model& model, const TokenSequence& seq, const std::set<int>& layers,
                         std::map<int, std::vector<float>>& out) {
  CaptureSpec spec;
  spec.layers.assign(layers.begin(), layers.end());
  spec.positions = {seq.tokens.size() - 1};
  spec.last_logits_only = true;
  auto cache = model.new_cache();
  auto result = model.forward_extend(cache, seq.tokens, nullptr, spec);
  for (auto& c : result.captures) out[c.layer_index] = std::move(c.hidden);
}

Eigen::VectorXd top_eigenvector_dense(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw DegenerateDirection("eigendecomposition failed");
  // Eigenvalues come back in increasing order.
  return solver.eigenvectors().col(m.rows() - 1);
}

Eigen::VectorXd top_eigenvector_power(const Eigen::MatrixXd& m, std::uint64_t seed, const PcaOptions& options) {
  SplitMix64 rng(seed);
  Eigen::VectorXd v(m.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform() - 0.5;
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < options.power_max_iterations; ++it) {
    Eigen::VectorXd w = m * v;
    const double next = v.dot(w);
    const double n = w.norm();
    if (n == 0.0) throw DegenerateDirection("power iteration collapsed to zero");
    v = w / n;
    if (it > 0 && std::abs(next - lambda) <= options.power_tolerance * std::abs(next)) break;
    lambda = next;
  }
  return v;
}

std::size_t count_occurrences(const std::vector<int>& haystack, const std::vector<std::vector<int>>& needles) {
  std::size_t n = 0;
  for (const auto& needle : needles) {
    if (needle.empty() || needle.size() > haystack.size()) continue;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i)
      if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<std::ptrdiff_t>(i))) ++n;
  }
  return n;
}

std::vector<int> greedy_generate(const Model& model, std::span<const int> prompt, const InjectionPlan* plan,
                                 int n_generate) {
  CaptureSpec spec;
  spec.last_logits_only = true;
  auto cache = model.new_cache();
  auto result = model.forward_extend(cache, prompt, plan, spec);
  std::vector<int> out;
  const auto limit = static_cast<std::size_t>(model.config().max_seq_len);
  for (int i = 0; i < n_generate && cache.length() < limit; ++i) {
    const auto& logits = result.logits.back();
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(next);
    if (i + 1 == n_generate || cache.length() + 1 >= limit) break;
    const int token[1] = {next};
    result = model.forward_extend(cache, token, plan, spec);
  }
  return out;
}

// A tail of at least 16 tokens drawn from two or fewer distinct ids.
bool is_degenerate(const std::vector<int>& tokens) {
  if (tokens.size() < 16) return false;
  std::set<int> tail(tokens.end() - 16, tokens.end());
  return tail.size() <= 2;
}

}  // namespace

std::vector<ContrastivePair> make_contrastive_pairs(const ContrastiveTemplates& templates, const std::string& concept_name,
                                                    int count, std::uint64_t seed) {
  if (templates.assistant_prefixes.empty()) throw InvalidArgument("no assistant prefixes to draw from");
  if (count < 0) throw InvalidArgument("negative pair count");
  SplitMix64 rng(seed);
  std::vector<std::string> pool;
  std::vector<ContrastivePair> pairs;
  const std::string positive = substitute(templates.positive_template, "[CONCEPT]", concept_name);
  while (static_cast<int>(pairs.size()) < count) {
    if (pool.empty()) {
      pool = templates.assistant_prefixes;
      rng.shuffle(pool);
    }
    pairs.push_back({positive, templates.negative_template, pool.back()});
    pool.pop_back();
  }
  return pairs;
}

ContrastiveDifferences collect_contrastive_activations(const Model& model, const Tokenizer& tokenizer,
                                                       const ChatTemplate& chat, std::span<const ContrastivePair> pairs,
                                                       const std::set<int>& layers) {
  if (pairs.size() < 2) throw InvalidArgument("contrastive training needs at least 2 pairs");
  if (layers.empty()) throw InvalidArgument("no layers requested");
  ContrastiveDifferences diffs;
  for (const ContrastivePair& pair : pairs) {
    if (tokenizer.encode(pair.positive_prompt + pair.assistant_prefix).empty() ||
        tokenizer.encode(pair.negative_prompt + pair.assistant_prefix).empty())
      throw InvalidArgument("contrastive prompt tokenizes to an empty sequence");
    auto render = [&](const std::string& prompt) {
      return render_turns(tokenizer, chat,
                          {{SpanLabel::User1, prompt}, {SpanLabel::AssistantPrefix, pair.assistant_prefix, true}});
    };
    std::map<int, std::vector<float>> pos, neg;
    final_token_capture(model, render(pair.positive_prompt), layers, pos);
    final_token_capture(model, render(pair.negative_prompt), layers, neg);
    for (int l : layers) {
      std::vector<float> d(pos.at(l).size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = pos.at(l)[i] - neg.at(l)[i];
      diffs.per_layer[l].push_back(std::move(d));
    }
  }
  return diffs;
}

std::vector<std::vector<float>> centered_pairs(const std::vector<std::vector<float>>& differences) {
  std::vector<std::vector<float>> out;
  out.reserve(2 * differences.size());
  for (const auto& d : differences) {
    std::vector<float> plus(d.size()), minus(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      plus[i] = 0.5f * d[i];
      minus[i] = -0.5f * d[i];
    }
    out.push_back(std::move(plus));
    out.push_back(std::move(minus));
  }
  return out;
}

SteeringVector train_steering_vector(const ContrastiveDifferences& differences, const std::string& concept_name,
                                     std::uint64_t seed, const PcaOptions& options) {
  if (differences.per_layer.empty()) throw InvalidArgument("no differences to train on");
  SteeringVector vec;
  vec.concept_name = concept_name;
  vec.train_seed = seed;
  vec.pair_count = static_cast<int>(differences.pair_count());

  for (const auto& [layer, diffs] : differences.per_layer) {
    if (diffs.empty()) throw InvalidArgument("layer " + std::to_string(layer) + " has no differences");
    const auto dim = static_cast<Eigen::Index>(diffs.front().size());
    const auto samples = centered_pairs(diffs);
    Eigen::MatrixXd second_moment = Eigen::MatrixXd::Zero(dim, dim);
    double max_abs = 0.0;
    for (const auto& s : samples) {
      if (static_cast<Eigen::Index>(s.size()) != dim) throw InvalidArgument("ragged difference vectors");
      const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXf>(s.data(), dim).cast<double>();
      max_abs = std::max(max_abs, x.cwiseAbs().maxCoeff());
      second_moment.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    if (max_abs == 0.0)
      throw DegenerateDirection("all differences are zero at layer " + std::to_string(layer) + " for '" +
                                concept_name + "'");
    second_moment = second_moment.selfadjointView<Eigen::Lower>();
    second_moment /= static_cast<double>(samples.size());

    Eigen::VectorXd direction = dim > options.power_iteration_above
                                    ? top_eigenvector_power(second_moment, seed, options)
                                    : top_eigenvector_dense(second_moment);
    direction.normalize();

    double mean_projection = 0.0;
    for (const auto& d : diffs)
      mean_projection += Eigen::Map<const Eigen::VectorXf>(d.data(), dim).cast<double>().dot(direction);
    if (mean_projection < 0.0) direction = -direction;

    std::vector<float> out(static_cast<std::size_t>(dim));
    for (Eigen::Index i = 0; i < dim; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(direction(i));
    vec.per_layer.emplace(layer, std::move(out));
  }
  return vec;
}

double SteeringReport::ratio() const {
  if (baseline_frequency == 0.0)
    return steered_frequency > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return steered_frequency / baseline_frequency;
}

SteeringReport verify_steering(const Model& model, const SteeringVector& vector, const std::set<int>& layers,
                               double coefficient, std::span<const int> prompt,
                               const std::vector<std::vector<int>>& concept_tokens, int n_generate) {
  const auto plan = InjectionPlan::build(vector, layers, {0, static_cast<std::size_t>(model.config().max_seq_len)},
                                         coefficient);
  SteeringReport report;
  report.baseline_tokens = greedy_generate(model, prompt, nullptr, n_generate);
  report.steered_tokens = greedy_generate(model, prompt, &plan, n_generate);
  auto frequency = [&](const std::vector<int>& toks) {
    return toks.empty() ? 0.0
                        : static_cast<double>(count_occurrences(toks, concept_tokens)) / static_cast<double>(toks.size());
  };
  report.baseline_frequency = frequency(report.baseline_tokens);
  report.steered_frequency = frequency(report.steered_tokens);
  report.degenerate_repetition = is_degenerate(report.steered_tokens);
  return report;
}

CalibrationResult calibrate_coefficient(const Model& model, const SteeringVector& vector, const std::set<int>& layers,
                                        std::span<const int> prompt, const std::vector<std::vector<int>>& concept_tokens,
                                        int n_generate, std::span<const double> sweep, double threshold) {
  std::vector<double> ordered(sweep.begin(), sweep.end());
  std::sort(ordered.begin(), ordered.end());
  CalibrationResult result;
  for (double alpha : ordered) {
    auto report = verify_steering(model, vector, layers, alpha, prompt, concept_tokens, n_generate);
    const bool ok = report.meets(threshold) && !report.degenerate_repetition;
    result.sweep.emplace_back(alpha, std::move(report));
    if (ok) {
      result.coefficient = alpha;
      break;
    }
  }
  return result;
}

void save_steering_vector(const std::filesystem::path& path, const SteeringVector& vector) {
  TensorArchive archive;
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& [layer, dir] : vector.per_layer) {
    archive.tensors["layers." + std::to_string(layer)] = Tensor{{static_cast<std::int64_t>(dir.size())}, dir};
    double n = 0.0;
    for (float x : dir) n += static_cast<double>(x) * x;
    norms[std::to_string(layer)] = std::sqrt(n);
  }
  archive.metadata["concept"] = vector.concept_name;
  write_archive(path, archive);

  bool norms_ok = true;
  for (const auto& [layer, n] : norms.items()) norms_ok = norms_ok && std::abs(n.get<double>() - 1.0) <= 1e-6;
  const nlohmann::json meta = {{"concept", vector.concept_name},
                               {"seed", vector.train_seed},
                               {"pair_count", vector.pair_count},
                               {"norms", norms},
                               {"norm_check", norms_ok ? "ok" : "failed"}};
  std::ofstream(path.string() + ".meta.json") << meta.dump(2) << '\n';
}

SteeringVector load_steering_vector(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  std::ifstream meta_in(path.string() + ".meta.json");
  if (!meta_in) throw LoadError("", "missing steering metadata " + path.string() + ".meta.json");
  nlohmann::json meta;
  meta_in >> meta;
  SteeringVector vec;
  vec.concept_name = meta.at("concept").get<std::string>();
  vec.train_seed = meta.at("seed").get<std::uint64_t>();
  vec.pair_count = meta.at("pair_count").get<int>();
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind("layers.", 0) != 0) continue;
    const int layer = std::stoi(name.substr(7));
    double n = 0.0;
    for (float x : t.data) n += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(n) - 1.0) > 1e-6) throw LoadError(name, "steering direction is not unit length");
    vec.per_layer.emplace(layer, t.data);
  }
  if (vec.per_layer.empty()) throw LoadError("", "steering vector archive has no layers");
  return vec;
}

}  // namespace kvprobe
