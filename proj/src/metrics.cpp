#include "kvprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>

#include "kvprobe/error.hpp"

namespace kvprobe {
namespace {

double mean(std::span<const double> xs) {
  return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double plogp(double p) { return p > 0.0 ? p * std::log2(p) : 0.0; }

}  // namespace

double answer_probability(std::span<const double> dist, std::span<const int> token_set) {
  double p = 0.0;
  for (int id : token_set) {
    if (id < 0 || static_cast<std::size_t>(id) >= dist.size()) throw InvalidArgument("token id out of range");
    p += dist[static_cast<std::size_t>(id)];
  }
  return p;
}

double balanced_accuracy(double tpr, double fpr) {
  if (!(tpr >= 0.0 && tpr <= 1.0) || !(fpr >= 0.0 && fpr <= 1.0))
    throw InvalidArgument("tpr and fpr must lie in [0, 1]");
  return (tpr + (1.0 - fpr)) / 2.0;
}

ConfusionMatrix confusion_from_identification(std::span<const IdentificationRecord> records,
                                              const std::vector<std::string>& concepts, std::optional<int> layer) {
  const std::size_t n = concepts.size();
  std::vector<std::vector<double>> sums(n, std::vector<double>(n, 0.0));
  std::vector<std::size_t> counts(n, 0);
  std::string condition;
  for (const auto& r : records) {
    if (!r.spec.concept_name) continue;  // uninjected runs have no row
    const auto it = std::find(concepts.begin(), concepts.end(), *r.spec.concept_name);
    if (it == concepts.end()) continue;
    const auto row = static_cast<std::size_t>(it - concepts.begin());
    const std::array<double, 10>* p = &r.p_digit_final;
    if (layer) {
      const auto found = r.p_digit_by_layer.find(*layer);
      if (found == r.p_digit_by_layer.end())
        throw InvalidArgument("record lacks layer " + std::to_string(*layer));
      p = &found->second;
    }
    if (n + 1 != p->size()) throw InvalidArgument("confusion needs 9 concepts matching the 10 options");
    for (std::size_t j = 0; j < n; ++j) sums[row][j] += (*p)[j + 1];
    ++counts[row];
    condition = r.spec.condition.name();
  }
  for (std::size_t i = 0; i < n; ++i)
    if (counts[i] == 0) throw InvalidArgument("no identification records for concept '" + concepts[i] + "'");

  ConfusionMatrix m;
  m.labels = concepts;
  m.layer = layer;
  m.condition = condition;
  for (std::size_t i = 0; i < n; ++i) {
    // Averaging then renormalizing equals renormalizing the summed mass.
    const double total = std::accumulate(sums[i].begin(), sums[i].end(), 0.0);
    std::vector<double> row(n, 1.0 / static_cast<double>(n));
    if (total > 0.0)
      for (std::size_t j = 0; j < n; ++j) row[j] = sums[i][j] / total;
    m.rows.push_back(std::move(row));
  }
  return m;
}

MIResult mutual_information(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size();
  if (n == 0) throw InvalidArgument("empty confusion matrix");
  const double prior = 1.0 / static_cast<double>(n);
  std::vector<double> pred(rows.front().size(), 0.0);
  double h_cond = 0.0;
  for (const auto& row : rows) {
    if (row.size() != pred.size()) throw InvalidArgument("ragged confusion matrix");
    for (std::size_t j = 0; j < row.size(); ++j) {
      pred[j] += prior * row[j];
      h_cond -= prior * plogp(row[j]);
    }
  }
  double h_pred = 0.0;
  for (double p : pred) h_pred -= plogp(p);
  MIResult r;
  r.bits = std::max(0.0, h_pred - h_cond);
  r.max_bits = std::log2(static_cast<double>(n));
  r.efficiency = r.max_bits > 0.0 ? r.bits / r.max_bits : 0.0;
  return r;
}

MIResult mutual_information(const ConfusionMatrix& m) { return mutual_information(m.rows); }

double lift(double diagonal, double background) {
  if (background == 0.0) return diagonal > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return diagonal / background;
}

std::vector<LiftEntry> diagonal_lift(const ConfusionMatrix& m) {
  const std::size_t n = m.rows.size();
  std::vector<LiftEntry> out;
  for (std::size_t c = 0; c < n; ++c) {
    LiftEntry e;
    e.label = c < m.labels.size() ? m.labels[c] : std::to_string(c);
    e.diagonal = m.rows[c][c];
    for (std::size_t i = 0; i < n; ++i) e.background += m.rows[i][c];
    e.background /= static_cast<double>(n);
    e.lift = lift(e.diagonal, e.background);
    e.infinite = e.background == 0.0;
    out.push_back(e);
  }
  return out;
}

PearsonResult pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InvalidArgument("series lengths differ");
  if (xs.size() < 3) throw InvalidArgument("pearson_r needs at least 3 points");
  const double mx = mean(xs), my = mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InvalidArgument("pearson_r undefined for a constant series");
  PearsonResult res;
  res.n = xs.size();
  res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(res.n) - 2.0;
  if (std::abs(res.r) >= 1.0) {
    res.p = 0.0;
  } else {
    const double t = res.r * std::sqrt(df / (1.0 - res.r * res.r));
    boost::math::students_t dist(df);
    res.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return res;
}

double log_sum_exp(std::span<const float> logits, std::span<const int> token_set) {
  double m = -std::numeric_limits<double>::infinity();
  for (int id : token_set) m = std::max(m, static_cast<double>(logits[static_cast<std::size_t>(id)]));
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (int id : token_set) s += std::exp(static_cast<double>(logits[static_cast<std::size_t>(id)]) - m);
  return m + std::log(s);
}

double logit_shift(std::span<const float> baseline, std::span<const float> injected, std::span<const int> token_set) {
  if (baseline.size() != injected.size()) throw InvalidArgument("logit vectors differ in vocabulary size");
  return log_sum_exp(injected, token_set) - log_sum_exp(baseline, token_set);
}

double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

DetectionSummary summarize_detection(std::span<const TrialRecord> records, const std::string& label) {
  using Key = std::tuple<std::string, std::uint64_t, int>;
  std::map<Key, const TrialRecord*> base, inj;
  DetectionSummary s;
  for (const auto& r : records) {
    const bool injected = r.spec.concept_name.has_value();
    const std::string concept_name = injected ? *r.spec.concept_name : r.spec.pair_concept.value_or("");
    (injected ? inj : base)[{concept_name, r.spec.seed, r.spec.question_index}] = &r;
    if (s.condition.empty()) s.condition = r.spec.condition.name();
    if (s.condition != r.spec.condition.name()) throw InvalidArgument("records span several conditions");
  }
  std::vector<double> pb, pi, shifts, lshift;
  for (const auto& [key, b] : base) {
    const auto it = inj.find(key);
    if (it == inj.end()) continue;
    const double yb = b->p_answer_final.at(label), yi = it->second->p_answer_final.at(label);
    pb.push_back(yb);
    pi.push_back(yi);
    shifts.push_back(yi - yb);
    lshift.push_back(it->second->logit_lse_final.at(label) - b->logit_lse_final.at(label));
  }
  s.pairs = shifts.size();
  s.p_yes_baseline = mean(pb);
  s.p_yes_injected = mean(pi);
  s.shift = mean(shifts);
  s.tpr = s.p_yes_injected;
  s.fpr = s.p_yes_baseline;
  s.balanced_accuracy = s.pairs ? balanced_accuracy(std::clamp(s.tpr, 0.0, 1.0), std::clamp(s.fpr, 0.0, 1.0)) : 0.5;
  s.dispersion = sample_sd(shifts);
  s.sd_baseline = sample_sd(pb);
  s.sd_injected = sample_sd(pi);
  s.logit_shift_yes = mean(lshift);
  return s;
}

}  // namespace kvprobe
