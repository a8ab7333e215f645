#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kvprobe/chat.hpp"
#include "kvprobe/intervention.hpp"
#include "kvprobe/model.hpp"
#include "kvprobe/tokenizer.hpp"

namespace kvprobe {

struct ContrastivePair {
  std::string positive_prompt;  // mentions the concept
  std::string negative_prompt;  // identical except the concept is replaced by "anything"
  std::string assistant_prefix;
};

struct ContrastiveTemplates {
  std::string positive_template;  // contains [CONCEPT]
  std::string negative_template;
  std::vector<std::string> assistant_prefixes;
};

// `count` pairs whose assistant prefixes are drawn from the pool in a seed-determined order.
std::vector<ContrastivePair> make_contrastive_pairs(const ContrastiveTemplates& templates, const std::string& concept_name,
                                                    int count, std::uint64_t seed);

// Final-token residual differences (positive minus negative), one per pair and layer.
struct ContrastiveDifferences {
  std::map<int, std::vector<std::vector<float>>> per_layer;

  std::size_t pair_count() const { return per_layer.empty() ? 0 : per_layer.begin()->second.size(); }
};

ContrastiveDifferences collect_contrastive_activations(const Model& model, const Tokenizer& tokenizer,
                                                       const ChatTemplate& chat, std::span<const ContrastivePair> pairs,
                                                       const std::set<int>& layers);

// Each pair centered on its own midpoint: {+d/2, -d/2} for every difference d. The result
// sums to zero, and its second moment is what the principal component is taken over.
std::vector<std::vector<float>> centered_pairs(const std::vector<std::vector<float>>& differences);

struct PcaOptions {
  int power_iteration_above = 1024;  // d_model above which power iteration replaces eigendecomposition
  double power_tolerance = 1e-8;     // relative eigenvalue change
  int power_max_iterations = 10000;
};

// Per layer: first principal component of the centered pairs, unit length, signed so that
// the mean projection of the raw differences is non-negative.
SteeringVector train_steering_vector(const ContrastiveDifferences& differences, const std::string& concept_name,
                                     std::uint64_t seed, const PcaOptions& options = {});

struct SteeringReport {
  std::vector<int> baseline_tokens;
  std::vector<int> steered_tokens;
  double baseline_frequency = 0.0;  // concept-token occurrences per generated token
  double steered_frequency = 0.0;
  bool degenerate_repetition = false;

  // steered / baseline; infinity when only the steered run produced concept tokens.
  double ratio() const;
  bool meets(double threshold) const { return steered_frequency > 0.0 && ratio() >= threshold; }
};

// Greedy generation of `n_generate` tokens after `prompt`, once plain and once with the
// vector added at `layers` over every position (prompt and generated).
SteeringReport verify_steering(const Model& model, const SteeringVector& vector, const std::set<int>& layers,
                               double coefficient, std::span<const int> prompt,
                               const std::vector<std::vector<int>>& concept_tokens, int n_generate);

struct CalibrationResult {
  std::optional<double> coefficient;  // smallest swept value meeting the threshold
  std::vector<std::pair<double, SteeringReport>> sweep;
};

CalibrationResult calibrate_coefficient(const Model& model, const SteeringVector& vector, const std::set<int>& layers,
                                        std::span<const int> prompt, const std::vector<std::vector<int>>& concept_tokens,
                                        int n_generate, std::span<const double> sweep, double threshold = 2.0);

// Tensors "layers.<i>" in the weight-archive format, metadata in "<path>.meta.json".
void save_steering_vector(const std::filesystem::path& path, const SteeringVector& vector);
SteeringVector load_steering_vector(const std::filesystem::path& path);

}  // namespace kvprobe
