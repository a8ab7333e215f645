#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kvprobe/steering.hpp"

namespace kvprobe {

namespace detail {
// Embedded corpus files by name: full.json, mini.json, controls.json, MANIFEST.sha256.
const std::map<std::string, std::string_view, std::less<>>& corpus_resources();
}  // namespace detail

enum class Framing { Accurate_Mechanism, Wrong_Mechanism, Vague_Mechanism, Poetic_No_Mechanism };
enum class InfoDocument {
  No_Document,
  Pro_Introspection_Document,
  Matched_Lipsum_Filler,
  Poetic_Document,
  Matched_Ellipses_Filler,
};

inline constexpr std::array<Framing, 4> kAllFramings = {Framing::Accurate_Mechanism, Framing::Wrong_Mechanism,
                                                        Framing::Vague_Mechanism, Framing::Poetic_No_Mechanism};
inline constexpr std::array<InfoDocument, 5> kAllDocuments = {
    InfoDocument::No_Document, InfoDocument::Pro_Introspection_Document, InfoDocument::Matched_Lipsum_Filler,
    InfoDocument::Poetic_Document, InfoDocument::Matched_Ellipses_Filler};

std::string_view to_string(Framing f);
std::string_view to_string(InfoDocument d);
Framing framing_from_string(std::string_view s);
InfoDocument document_from_string(std::string_view s);

struct FramingText {
  std::string intro, suffix, question, followup;
};

struct ConditionSpec {
  Framing framing = Framing::Accurate_Mechanism;
  InfoDocument document = InfoDocument::No_Document;

  std::string name() const;  // "<framing>+<document>"
  static ConditionSpec parse(std::string_view name);
  auto operator<=>(const ConditionSpec&) const = default;
};

// The 4x4 core grid: every framing crossed with the four documents other than the ellipses filler.
std::vector<ConditionSpec> core_conditions();
// All 4x5 combinations.
std::vector<ConditionSpec> all_conditions();

struct ConversationScript {
  std::string system;
  std::string user_1;
  std::string assistant_1;
  std::string user_2;
  std::string answer_prefix;

  bool operator==(const ConversationScript&) const = default;
};

enum class ControlCategory { always_no, always_yes, varied, confusing };
enum class Expected { yes, no, none };

std::string_view to_string(ControlCategory c);
std::string_view to_string(Expected e);

struct ControlQuestion {
  std::string text;
  ControlCategory category;
  Expected expected;
};

// Immutable prompt corpus. "full" is the verbatim experiment text, "mini" a set of short
// paraphrases with the same structure for models with small context windows.
class PromptCorpus {
 public:
  static const PromptCorpus& full();
  static const PromptCorpus& mini();
  static const PromptCorpus& by_name(std::string_view name);
  static PromptCorpus from_json(std::string_view text);

  const std::string& name() const { return name_; }
  const FramingText& framing(Framing f) const;
  const std::string& document(InfoDocument d) const;
  const std::vector<std::string>& concepts() const { return concepts_; }
  const std::string& no_injection_label() const { return no_injection_label_; }
  ContrastiveTemplates contrastive() const { return contrastive_; }

  ConversationScript render_detection_prompt(const ConditionSpec& condition) const;
  // The condition's turn 1, then a user turn listing the options numbered 0-9. ordering[k]
  // is the canonical option index shown at number k; canonical index 0 is "(no injection)"
  // and 1..9 are `concepts` in order.
  ConversationScript render_identification_prompt(const ConditionSpec& condition, const std::vector<std::string>& concepts,
                                                  const std::vector<int>& ordering) const;
  // The condition's turn 1 followed by a control question in place of the introspection question.
  ConversationScript render_control_prompt(const ConditionSpec& condition, const ControlQuestion& question) const;

 private:
  std::string name_;
  std::map<Framing, FramingText> framings_;
  std::map<InfoDocument, std::string> documents_;
  std::string user_1_template_, user_1_template_no_document_, assistant_1_, user_2_template_,
      control_user_2_template_, identification_template_, answer_prefix_, no_injection_label_;
  std::vector<std::string> concepts_;
  ContrastiveTemplates contrastive_;

  std::string render_user_1(const ConditionSpec& condition) const;
};

const std::vector<ControlQuestion>& control_battery();

// `count` distinct permutations of 0..9 from SplitMix64(seed) driving Fisher-Yates.
std::vector<std::vector<int>> shuffle_orderings(std::uint64_t seed, int count = 5);

// Recomputes SHA-256 digests of every corpus string and compares them with the embedded
// manifest. Returns the mismatching "<file>:<pointer>" entries (empty when intact).
std::vector<std::string> verify_corpus_manifest();

// SHA-256 of each embedded corpus file, keyed by file name.
std::map<std::string, std::string> corpus_checksums();

}  // namespace kvprobe
