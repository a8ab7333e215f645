#include "kvprobe/prompts.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "kvprobe/error.hpp"
#include "kvprobe/rng.hpp"

namespace kvprobe {
namespace {

using nlohmann::json;

constexpr std::array<std::string_view, 4> kFramingNames = {"Accurate_Mechanism", "Wrong_Mechanism", "Vague_Mechanism",
                                                           "Poetic_No_Mechanism"};
constexpr std::array<std::string_view, 5> kDocumentNames = {"No_Document", "Pro_Introspection_Document",
                                                            "Matched_Lipsum_Filler", "Poetic_Document",
                                                            "Matched_Ellipses_Filler"};

std::string replace_all(std::string text, std::string_view key, std::string_view value) {
  for (std::size_t pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size()))
    text.replace(pos, key.size(), value);
  return text;
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string pointer_escape(const std::string& key) { return replace_all(replace_all(key, "~", "~0"), "/", "~1"); }

void string_leaves(const json& node, const std::string& pointer, std::map<std::string, std::string>& out) {
  if (node.is_object()) {
    // nlohmann's object_t is an ordered std::map, so keys come out sorted.
    for (const auto& [k, v] : node.items()) string_leaves(v, pointer + "/" + pointer_escape(k), out);
  } else if (node.is_array()) {
    for (std::size_t i = 0; i < node.size(); ++i) string_leaves(node[i], pointer + "/" + std::to_string(i), out);
  } else if (node.is_string()) {
    out[pointer] = node.get<std::string>();
  }
}

ControlCategory category_from_string(std::string_view s) {
  if (s == "always_no") return ControlCategory::always_no;
  if (s == "always_yes") return ControlCategory::always_yes;
  if (s == "varied") return ControlCategory::varied;
  if (s == "confusing") return ControlCategory::confusing;
  throw SchemaError("unknown control category '" + std::string(s) + "'");
}

Expected expected_from_string(std::string_view s) {
  if (s == "yes") return Expected::yes;
  if (s == "no") return Expected::no;
  if (s == "none") return Expected::none;
  throw SchemaError("unknown expected answer '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Framing f) { return kFramingNames.at(static_cast<std::size_t>(f)); }
std::string_view to_string(InfoDocument d) { return kDocumentNames.at(static_cast<std::size_t>(d)); }

Framing framing_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kFramingNames.size(); ++i)
    if (kFramingNames[i] == s) return static_cast<Framing>(i);
  throw InvalidArgument("unknown framing '" + std::string(s) + "'");
}

InfoDocument document_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kDocumentNames.size(); ++i)
    if (kDocumentNames[i] == s) return static_cast<InfoDocument>(i);
  throw InvalidArgument("unknown info document '" + std::string(s) + "'");
}

std::string_view to_string(ControlCategory c) {
  switch (c) {
    case ControlCategory::always_no: return "always_no";
    case ControlCategory::always_yes: return "always_yes";
    case ControlCategory::varied: return "varied";
    case ControlCategory::confusing: return "confusing";
  }
  return "?";
}

std::string_view to_string(Expected e) {
  switch (e) {
    case Expected::yes: return "yes";
    case Expected::no: return "no";
    case Expected::none: return "none";
  }
  return "?";
}

std::string ConditionSpec::name() const { return std::string(to_string(framing)) + "+" + std::string(to_string(document)); }

ConditionSpec ConditionSpec::parse(std::string_view name) {
  const auto plus = name.find('+');
  if (plus == std::string_view::npos) throw InvalidArgument("condition must be '<framing>+<document>': " + std::string(name));
  return {framing_from_string(name.substr(0, plus)), document_from_string(name.substr(plus + 1))};
}

std::vector<ConditionSpec> core_conditions() {
  std::vector<ConditionSpec> out;
  for (Framing f : kAllFramings)
    for (InfoDocument d : kAllDocuments)
      if (d != InfoDocument::Matched_Ellipses_Filler) out.push_back({f, d});
  return out;
}

std::vector<ConditionSpec> all_conditions() {
  std::vector<ConditionSpec> out;
  for (Framing f : kAllFramings)
    for (InfoDocument d : kAllDocuments) out.push_back({f, d});
  return out;
}

PromptCorpus PromptCorpus::from_json(std::string_view text) {
  const json j = json::parse(text);
  PromptCorpus c;
  try {
    c.name_ = j.at("corpus").get<std::string>();
    for (Framing f : kAllFramings) {
      const auto& fj = j.at("framings").at(std::string(to_string(f)));
      FramingText t{fj.at("intro"), fj.at("suffix"), fj.at("question"), fj.at("followup")};
      if (t.intro.empty() || t.suffix.empty() || t.question.empty() || t.followup.empty())
        throw SchemaError("framing " + std::string(to_string(f)) + " has an empty text slot");
      c.framings_[f] = std::move(t);
    }
    for (InfoDocument d : kAllDocuments) c.documents_[d] = j.at("documents").at(std::string(to_string(d)));
    if (!c.documents_.at(InfoDocument::No_Document).empty()) throw SchemaError("No_Document must have an empty body");
    c.user_1_template_ = j.at("user_1_template");
    c.user_1_template_no_document_ = j.at("user_1_template_no_document");
    c.assistant_1_ = j.at("assistant_1");
    c.user_2_template_ = j.at("user_2_template");
    c.control_user_2_template_ = j.at("control_user_2_template");
    c.identification_template_ = j.at("identification_template");
    c.answer_prefix_ = j.at("answer_prefix");
    c.no_injection_label_ = j.at("no_injection_label");
    c.concepts_ = j.at("concepts").get<std::vector<std::string>>();
    const auto& cj = j.at("contrastive");
    c.contrastive_ = {cj.at("positive_template"), cj.at("negative_template"), cj.at("assistant_prefixes")};
  } catch (const json::exception& e) {
    throw SchemaError(std::string("prompt corpus: ") + e.what());
  }
  return c;
}

const PromptCorpus& PromptCorpus::full() {
  static const PromptCorpus c = from_json(detail::corpus_resources().at("full.json"));
  return c;
}

const PromptCorpus& PromptCorpus::mini() {
  static const PromptCorpus c = from_json(detail::corpus_resources().at("mini.json"));
  return c;
}

const PromptCorpus& PromptCorpus::by_name(std::string_view name) {
  if (name == "full") return full();
  if (name == "mini") return mini();
  throw InvalidArgument("unknown corpus '" + std::string(name) + "' (expected full or mini)");
}

const FramingText& PromptCorpus::framing(Framing f) const { return framings_.at(f); }
const std::string& PromptCorpus::document(InfoDocument d) const { return documents_.at(d); }

std::string PromptCorpus::render_user_1(const ConditionSpec& condition) const {
  const FramingText& f = framing(condition.framing);
  const bool has_doc = condition.document != InfoDocument::No_Document;
  std::string s = has_doc ? user_1_template_ : user_1_template_no_document_;
  s = replace_all(std::move(s), "[FRAMING_INTRO]", f.intro);
  s = replace_all(std::move(s), "[FRAMING_SUFFIX]", f.suffix);
  if (has_doc) s = replace_all(std::move(s), "[INFO_DOCUMENT]", document(condition.document));
  return s;
}

ConversationScript PromptCorpus::render_detection_prompt(const ConditionSpec& condition) const {
  const FramingText& f = framing(condition.framing);
  std::string user_2 = replace_all(user_2_template_, "[FRAMING_QUESTION]", f.question);
  user_2 = replace_all(std::move(user_2), "[FRAMING_FOLLOWUP]", f.followup);
  return {"", render_user_1(condition), assistant_1_, std::move(user_2), answer_prefix_};
}

ConversationScript PromptCorpus::render_identification_prompt(const ConditionSpec& condition,
                                                              const std::vector<std::string>& concepts,
                                                              const std::vector<int>& ordering) const {
  if (concepts.size() != 9) throw InvalidArgument("identification needs exactly 9 concepts, got " +
                                                  std::to_string(concepts.size()));
  if (ordering.size() != 10) throw InvalidArgument("ordering must be a permutation of 10 options");
  std::vector<int> sorted = ordering;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 10; ++i)
    if (sorted[static_cast<std::size_t>(i)] != i) throw InvalidArgument("ordering is not a permutation of 0-9");
  std::ostringstream options;
  for (std::size_t k = 0; k < 10; ++k) {
    const int canonical = ordering[k];
    options << (k ? "\n" : "") << k << ". "
            << (canonical == 0 ? no_injection_label_ : concepts[static_cast<std::size_t>(canonical - 1)]);
  }
  return {"", render_user_1(condition), assistant_1_, replace_all(identification_template_, "[OPTIONS]", options.str()),
          ""};
}

ConversationScript PromptCorpus::render_control_prompt(const ConditionSpec& condition,
                                                       const ControlQuestion& question) const {
  return {"", render_user_1(condition), assistant_1_, replace_all(control_user_2_template_, "[QUESTION]", question.text),
          answer_prefix_};
}

const std::vector<ControlQuestion>& control_battery() {
  static const std::vector<ControlQuestion> battery = [] {
    const json j = json::parse(detail::corpus_resources().at("controls.json"));
    std::vector<ControlQuestion> out;
    for (const auto& q : j.at("questions"))
      out.push_back({q.at("text"), category_from_string(q.at("category").get<std::string>()),
                     expected_from_string(q.at("expected").get<std::string>())});
    return out;
  }();
  return battery;
}

std::vector<std::vector<int>> shuffle_orderings(std::uint64_t seed, int count) {
  if (count < 1) throw InvalidArgument("need at least one ordering");
  SplitMix64 rng(seed);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  while (static_cast<int>(out.size()) < count) {
    std::vector<int> p(10);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::string> verify_corpus_manifest() {
  const auto& files = detail::corpus_resources();
  std::map<std::string, std::string> expected;
  std::istringstream manifest{std::string(files.at("MANIFEST.sha256"))};
  for (std::string line; std::getline(manifest, line);) {
    if (line.empty()) continue;
    const auto sep = line.find("  ");
    if (sep == std::string::npos) throw SchemaError("malformed manifest line: " + line);
    expected[line.substr(sep + 2)] = line.substr(0, sep);
  }
  std::map<std::string, std::string> actual;
  for (const char* file : {"full.json", "mini.json", "controls.json"}) {
    std::map<std::string, std::string> leaves;
    string_leaves(json::parse(files.at(file)), "", leaves);
    for (const auto& [pointer, text] : leaves) actual[std::string(file) + ":" + pointer] = sha256_hex(text);
  }
  std::vector<std::string> bad;
  for (const auto& [key, digest] : expected) {
    const auto it = actual.find(key);
    if (it == actual.end() || it->second != digest) bad.push_back(key);
  }
  for (const auto& [key, digest] : actual)
    if (!expected.contains(key)) bad.push_back(key);
  return bad;
}

std::map<std::string, std::string> corpus_checksums() {
  std::map<std::string, std::string> out;
  for (const auto& [file, text] : detail::corpus_resources()) out[file] = sha256_hex(text);
  return out;
}

}  // namespace kvprobe
