#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvprobe/protocol.hpp"

namespace kvprobe {

double answer_probability(std::span<const double> dist, std::span<const int> token_set);

// (tpr + 1 - fpr) / 2; InvalidArgument outside [0, 1].
double balanced_accuracy(double tpr, double fpr);

struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> rows;  // injected -> predicted, each row sums to 1
  std::optional<int> layer;               // none: final output
  std::string condition;
};

// Per injected concept: mean canonical digit distribution at `layer` (final output when
// none), the "(no injection)" option dropped, rows renormalized.
ConfusionMatrix confusion_from_identification(std::span<const IdentificationRecord> records,
                                              const std::vector<std::string>& concepts, std::optional<int> layer);

struct MIResult {
  double bits = 0.0;
  double max_bits = 0.0;
  double efficiency = 0.0;
};

// Uniform prior over the injected label; I = H(pred) - H(pred | actual), in bits.
MIResult mutual_information(const ConfusionMatrix& m);
MIResult mutual_information(const std::vector<std::vector<double>>& rows);

struct LiftEntry {
  std::string label;
  double diagonal = 0.0;
  double background = 0.0;  // column mean under the uniform prior
  double lift = 0.0;
  bool infinite = false;    // zero background
};

double lift(double diagonal, double background);
std::vector<LiftEntry> diagonal_lift(const ConfusionMatrix& m);

struct PearsonResult {
  double r = 0.0;
  double p = 1.0;  // two-sided, t-distribution with n - 2 degrees of freedom
  std::size_t n = 0;
};

PearsonResult pearson_r(std::span<const double> xs, std::span<const double> ys);

double log_sum_exp(std::span<const float> logits, std::span<const int> token_set);
// LSE over the set of injected logits minus the same for baseline.
double logit_shift(std::span<const float> baseline, std::span<const float> injected, std::span<const int> token_set);

// Sample (n - 1) standard deviation; 0 for fewer than two values.
double sample_sd(std::span<const double> xs);

struct DetectionSummary {
  std::string condition;
  std::string kind;  // "introspection" or a control category
  std::size_t pairs = 0;
  double p_yes_baseline = 0.0;
  double p_yes_injected = 0.0;
  double shift = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double balanced_accuracy = 0.0;
  double dispersion = 0.0;  // SD of per-(seed, concept) shift
  double sd_baseline = 0.0;
  double sd_injected = 0.0;
  double logit_shift_yes = 0.0;
};

// Pairs baseline and injected records by (concept, seed, question) and averages probabilities.
// Records must share one condition and kind.
DetectionSummary summarize_detection(std::span<const TrialRecord> records, const std::string& label = "yes");

}  // namespace kvprobe
