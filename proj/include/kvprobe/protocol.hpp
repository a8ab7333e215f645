#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvprobe/chat.hpp"
#include "kvprobe/model.hpp"
#include "kvprobe/prompts.hpp"
#include "kvprobe/tokenizer.hpp"

namespace kvprobe {

inline constexpr int kRecordSchemaVersion = 1;

// Which first tokens count as each answer, plus text appended to the answer prefix so that
// the answer starts at a distinguishable token.
//
// With a byte-level tokenizer " yes" and " no" share their first byte, so the separating
// space moves into the prefix and the sets become {y, Y} and {n, N}. With a vocabulary the
// sets hold whichever of " yes", " Yes", "yes", "Yes" and the Chinese variant are single tokens.
struct AnswerFormat {
  std::string prefix_suffix;
  std::map<std::string, std::vector<int>> sets;  // label -> token ids

  static AnswerFormat yes_no(const Tokenizer& tokenizer);
};

// Token ids of the digits 0-9; throws TokenizerError unless each is a single token.
std::array<int, 10> digit_tokens(const Tokenizer& tokenizer);

enum class TrialKind { detection, identification, control };
std::string_view to_string(TrialKind k);
TrialKind trial_kind_from_string(std::string_view s);

struct TrialSpec {
  ConditionSpec condition;
  std::optional<std::string> concept_name;  // none: baseline, no plan is built
  std::uint64_t seed = 0;                   // steering-vector training seed
  double coefficient = 0.0;
  std::set<int> probe_layers;
  std::set<int> injection_layers;  // empty: middle third of the model
  std::map<std::string, std::vector<int>> answer_sets;
  std::string corpus = "full";
  TrialKind kind = TrialKind::detection;
  std::optional<std::string> pair_concept;  // concept of the paired run, for baseline records
  int question_index = -1;                  // control battery index
};

struct TrialRecord {
  TrialSpec spec;
  std::map<std::string, double> p_answer_final;
  std::map<int, std::map<std::string, double>> p_answer_by_layer;
  std::map<std::string, double> logit_lse_final;  // log-sum-exp of output logits over each set
  std::size_t interventions_turn1 = 0;
  std::size_t interventions_turn2 = 0;
  std::size_t sequence_length = 0;
};

struct IdentificationRecord {
  TrialSpec spec;
  std::vector<std::vector<int>> orderings;
  // Canonical option index (0 = no injection, 1..9 = concepts in order) -> probability,
  // renormalized over the ten digits and averaged over orderings with equal weight.
  std::array<double, 10> p_digit_final{};
  std::map<int, std::array<double, 10>> p_digit_by_layer;
  std::size_t interventions_turn1 = 0;
  std::size_t interventions_turn2 = 0;
};

// Everything a trial needs besides its spec.
struct TrialContext {
  const Model& model;
  const Tokenizer& tokenizer;
  const ChatTemplate& chat;
  const SteeringVector* vector = nullptr;  // required when the spec names a concept
};

// 1. plan over the injection layers spanning user_1 + assistant_1;
// 2. extend a fresh cache over system + user_1 + assistant_1 with the plan active;
// 3. extend over user_2 + answer prefix with no plan;
// 4. read output and lens distributions at the position after the prefix.
TrialRecord run_detection_trial(const TrialContext& ctx, const ConversationScript& script, const TrialSpec& spec);

// Same cache steps for each ordering; the injected turn 1 is computed once and copied.
IdentificationRecord run_identification_trial(const TrialContext& ctx, const PromptCorpus& corpus,
                                              const std::vector<std::string>& concepts, const TrialSpec& spec,
                                              const std::vector<std::vector<int>>& orderings);

// Baseline (no concept) and injected runs of the same script and seed.
std::pair<TrialRecord, TrialRecord> run_paired_trials(const TrialContext& ctx, const ConversationScript& script,
                                                      const TrialSpec& spec);

// Tokens of a script as the protocol feeds them; turn 1 ends after assistant_1.
struct RenderedScript {
  TokenSequence sequence;
  std::size_t turn1_end = 0;
  PositionRange injection_span;
};
RenderedScript render_script(const Tokenizer& tokenizer, const ChatTemplate& chat, const ConversationScript& script,
                             const std::string& prefix_suffix);

nlohmann::json to_json(const TrialSpec& spec);
TrialSpec trial_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrialRecord& r);
nlohmann::json to_json(const IdentificationRecord& r);
// Both throw SchemaError on a schema-version mismatch or missing fields.
TrialRecord trial_record_from_json(const nlohmann::json& j);
IdentificationRecord identification_record_from_json(const nlohmann::json& j);

}  // namespace kvprobe
