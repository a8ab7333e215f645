#include "kvprobe/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kvprobe/error.hpp"

namespace kvprobe {
namespace {

using nlohmann::json;

double set_mass(const std::vector<double>& dist, const std::vector<int>& ids) {
  double p = 0.0;
  for (int id : ids) p += dist.at(static_cast<std::size_t>(id));
  return p;
}

double set_lse(std::span<const float> logits, const std::vector<int>& ids) {
  if (ids.empty()) return -std::numeric_limits<double>::infinity();
  double m = -std::numeric_limits<double>::infinity();
  for (int id : ids) m = std::max(m, static_cast<double>(logits[static_cast<std::size_t>(id)]));
  double s = 0.0;
  for (int id : ids) s += std::exp(static_cast<double>(logits[static_cast<std::size_t>(id)]) - m);
  return m + std::log(s);
}

std::map<std::string, double> aggregate(const std::vector<double>& dist,
                                        const std::map<std::string, std::vector<int>>& sets) {
  std::map<std::string, double> out;
  for (const auto& [label, ids] : sets) out[label] = set_mass(dist, ids);
  return out;
}

std::array<double, 10> digit_mass(const std::vector<double>& dist, const std::array<int, 10>& digits) {
  std::array<double, 10> p{};
  double total = 0.0;
  for (std::size_t k = 0; k < 10; ++k) total += p[k] = dist.at(static_cast<std::size_t>(digits[k]));
  if (total > 0.0)
    for (double& x : p) x /= total;
  else
    p.fill(0.1);
  return p;
}

std::set<int> injection_layers(const TrialSpec& spec, const Model& model) {
  return spec.injection_layers.empty() ? middle_third_layers(model.config().n_layers) : spec.injection_layers;
}

std::optional<InjectionPlan> build_plan(const TrialContext& ctx, const TrialSpec& spec, PositionRange span) {
  if (!spec.concept_name) return std::nullopt;
  if (!ctx.vector) throw InvalidArgument("no steering vector for concept '" + *spec.concept_name + "'");
  if (ctx.vector->concept_name != *spec.concept_name)
    throw InvalidArgument("steering vector is for '" + ctx.vector->concept_name + "', trial wants '" +
                          *spec.concept_name + "'");
  return InjectionPlan::build(*ctx.vector, injection_layers(spec, ctx.model), span, spec.coefficient);
}

CaptureSpec answer_capture(const TrialSpec& spec, std::size_t answer_position) {
  CaptureSpec c;
  c.layers.assign(spec.probe_layers.begin(), spec.probe_layers.end());
  c.positions = {answer_position};
  c.last_logits_only = true;
  return c;
}

std::vector<Turn> script_turns(const ConversationScript& script, const std::string& prefix_suffix) {
  std::vector<Turn> turns;
  if (!script.system.empty()) turns.push_back({SpanLabel::System, script.system});
  turns.push_back({SpanLabel::User1, script.user_1});
  turns.push_back({SpanLabel::Assistant1, script.assistant_1});
  turns.push_back({SpanLabel::User2, script.user_2});
  turns.push_back({SpanLabel::AssistantPrefix, script.answer_prefix + prefix_suffix, true});
  return turns;
}

json layer_map_json(const std::map<int, std::map<std::string, double>>& m) {
  json j = json::object();
  for (const auto& [layer, probs] : m) j[std::to_string(layer)] = probs;
  return j;
}

void check_schema(const json& j) {
  if (!j.contains("schema_version") || j.at("schema_version") != kRecordSchemaVersion)
    throw SchemaError("record schema_version " + (j.contains("schema_version") ? j.at("schema_version").dump() : "missing") +
                      ", expected " + std::to_string(kRecordSchemaVersion));
}

}  // namespace

AnswerFormat AnswerFormat::yes_no(const Tokenizer& tokenizer) {
  AnswerFormat f;
  if (tokenizer.is_byte_level()) {
    f.prefix_suffix = " ";
    f.sets["yes"] = {'y', 'Y'};
    f.sets["no"] = {'n', 'N'};
    return f;
  }
  auto collect = [&](std::initializer_list<std::string_view> pieces) {
    std::vector<int> ids;
    for (auto p : pieces)
      if (auto id = tokenizer.find(p)) ids.push_back(*id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  };
  f.sets["yes"] = collect({" yes", " Yes", "yes", "Yes", "\xe6\x98\xaf", " \xe6\x98\xaf"});
  f.sets["no"] = collect({" no", " No", "no", "No", "\xe4\xb8\x8d", " \xe4\xb8\x8d"});
  if (f.sets["yes"].empty() || f.sets["no"].empty())
    throw TokenizerError("vocabulary has no single-token yes/no answers");
  return f;
}

std::array<int, 10> digit_tokens(const Tokenizer& tokenizer) {
  std::array<int, 10> ids{};
  for (int d = 0; d < 10; ++d) {
    const auto id = tokenizer.find(std::string(1, static_cast<char>('0' + d)));
    if (!id) throw TokenizerError("digit '" + std::to_string(d) + "' is not a single token");
    ids[static_cast<std::size_t>(d)] = *id;
  }
  return ids;
}

std::string_view to_string(TrialKind k) {
  switch (k) {
    case TrialKind::detection: return "detection";
    case TrialKind::identification: return "identification";
    case TrialKind::control: return "control";
  }
  return "?";
}

TrialKind trial_kind_from_string(std::string_view s) {
  if (s == "detection") return TrialKind::detection;
  if (s == "identification") return TrialKind::identification;
  if (s == "control") return TrialKind::control;
  throw SchemaError("unknown trial kind '" + std::string(s) + "'");
}

RenderedScript render_script(const Tokenizer& tokenizer, const ChatTemplate& chat, const ConversationScript& script,
                             const std::string& prefix_suffix) {
  RenderedScript r;
  r.sequence = render_turns(tokenizer, chat, script_turns(script, prefix_suffix));
  const RoleSpan u1 = *r.sequence.span(SpanLabel::User1);
  const RoleSpan a1 = *r.sequence.span(SpanLabel::Assistant1);
  r.turn1_end = a1.end;
  r.injection_span = {u1.begin, a1.end};
  return r;
}

TrialRecord run_detection_trial(const TrialContext& ctx, const ConversationScript& script, const TrialSpec& spec) {
  AnswerFormat format = AnswerFormat::yes_no(ctx.tokenizer);
  const auto& sets = spec.answer_sets.empty() ? format.sets : spec.answer_sets;
  const RenderedScript rendered = render_script(ctx.tokenizer, ctx.chat, script, format.prefix_suffix);
  const auto& tokens = rendered.sequence.tokens;
  if (tokens.size() > static_cast<std::size_t>(ctx.model.config().max_seq_len))
    throw SequenceOverflow("script is " + std::to_string(tokens.size()) + " tokens, model context is " +
                           std::to_string(ctx.model.config().max_seq_len));

  const auto plan = build_plan(ctx, spec, rendered.injection_span);
  auto cache = ctx.model.new_cache();
  CaptureSpec quiet;
  quiet.last_logits_only = true;
  const std::span<const int> all(tokens);
  const auto step2 = ctx.model.forward_extend(cache, all.first(rendered.turn1_end), plan ? &*plan : nullptr, quiet);
  const auto step3 = ctx.model.forward_extend(cache, all.subspan(rendered.turn1_end), nullptr,
                                              answer_capture(spec, tokens.size() - 1));
  if (step3.interventions != 0) throw Error("intervention recorded during the second turn");

  TrialRecord rec;
  rec.spec = spec;
  if (rec.spec.answer_sets.empty()) rec.spec.answer_sets = sets;
  rec.interventions_turn1 = step2.interventions;
  rec.interventions_turn2 = step3.interventions;
  rec.sequence_length = tokens.size();
  const auto& logits = step3.logits.back();
  rec.p_answer_final = aggregate(next_token_distribution(logits), sets);
  for (const auto& [label, ids] : sets) rec.logit_lse_final[label] = set_lse(logits, ids);
  for (const LayerCapture& c : step3.captures)
    rec.p_answer_by_layer[c.layer_index] = aggregate(ctx.model.logit_lens(c), sets);
  return rec;
}

std::pair<TrialRecord, TrialRecord> run_paired_trials(const TrialContext& ctx, const ConversationScript& script,
                                                      const TrialSpec& spec) {
  if (!spec.concept_name) throw InvalidArgument("paired trials need a concept");
  TrialSpec base = spec;
  base.concept_name.reset();
  base.pair_concept = spec.concept_name;
  TrialSpec injected = spec;
  injected.pair_concept = spec.concept_name;
  return {run_detection_trial(ctx, script, base), run_detection_trial(ctx, script, injected)};
}

IdentificationRecord run_identification_trial(const TrialContext& ctx, const PromptCorpus& corpus,
                                              const std::vector<std::string>& concepts, const TrialSpec& spec,
                                              const std::vector<std::vector<int>>& orderings) {
  if (orderings.empty()) throw InvalidArgument("identification needs at least one ordering");
  const auto digits = digit_tokens(ctx.tokenizer);

  IdentificationRecord rec;
  rec.spec = spec;
  rec.spec.kind = TrialKind::identification;
  rec.orderings = orderings;

  std::optional<LayeredCache> turn1;
  const double weight = 1.0 / static_cast<double>(orderings.size());
  for (const auto& ordering : orderings) {
    const ConversationScript script = corpus.render_identification_prompt(spec.condition, concepts, ordering);
    const RenderedScript rendered = render_script(ctx.tokenizer, ctx.chat, script, "");
    const auto& tokens = rendered.sequence.tokens;
    if (tokens.size() > static_cast<std::size_t>(ctx.model.config().max_seq_len))
      throw SequenceOverflow("identification script is " + std::to_string(tokens.size()) + " tokens");
    const std::span<const int> all(tokens);
    if (!turn1) {
      // Turn 1 is the same text for every ordering.
      const auto plan = build_plan(ctx, spec, rendered.injection_span);
      turn1 = ctx.model.new_cache();
      CaptureSpec quiet;
      quiet.last_logits_only = true;
      rec.interventions_turn1 =
          ctx.model.forward_extend(*turn1, all.first(rendered.turn1_end), plan ? &*plan : nullptr, quiet).interventions;
    }
    LayeredCache cache = *turn1;
    const auto step3 = ctx.model.forward_extend(cache, all.subspan(rendered.turn1_end), nullptr,
                                                answer_capture(spec, tokens.size() - 1));
    rec.interventions_turn2 += step3.interventions;
    if (step3.interventions != 0) throw Error("intervention recorded during the second turn");

    auto accumulate = [&](std::array<double, 10>& into, const std::vector<double>& dist) {
      const auto shown = digit_mass(dist, digits);
      for (std::size_t k = 0; k < 10; ++k) into[static_cast<std::size_t>(ordering[k])] += weight * shown[k];
    };
    accumulate(rec.p_digit_final, next_token_distribution(step3.logits.back()));
    for (const LayerCapture& c : step3.captures) accumulate(rec.p_digit_by_layer[c.layer_index], ctx.model.logit_lens(c));
  }
  return rec;
}

json to_json(const TrialSpec& s) {
  json j;
  j["kind"] = to_string(s.kind);
  j["condition"] = s.condition.name();
  j["concept"] = s.concept_name ? json(*s.concept_name) : json(nullptr);
  j["pair_concept"] = s.pair_concept ? json(*s.pair_concept) : json(nullptr);
  j["seed"] = s.seed;
  j["coefficient"] = s.coefficient;
  j["probe_layers"] = s.probe_layers;
  j["injection_layers"] = s.injection_layers;
  j["answer_sets"] = s.answer_sets;
  j["corpus"] = s.corpus;
  if (s.question_index >= 0) j["question_index"] = s.question_index;
  return j;
}

TrialSpec trial_spec_from_json(const json& j) {
  try {
    TrialSpec s;
    s.kind = trial_kind_from_string(j.at("kind").get<std::string>());
    s.condition = ConditionSpec::parse(j.at("condition").get<std::string>());
    if (!j.at("concept").is_null()) s.concept_name = j.at("concept").get<std::string>();
    if (j.contains("pair_concept") && !j.at("pair_concept").is_null()) s.pair_concept = j.at("pair_concept").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.coefficient = j.at("coefficient").get<double>();
    s.probe_layers = j.at("probe_layers").get<std::set<int>>();
    s.injection_layers = j.at("injection_layers").get<std::set<int>>();
    s.answer_sets = j.at("answer_sets").get<std::map<std::string, std::vector<int>>>();
    s.corpus = j.at("corpus").get<std::string>();
    s.question_index = j.value("question_index", -1);
    return s;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("trial spec: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw SchemaError(std::string("trial spec: ") + e.what());
  }
}

json to_json(const TrialRecord& r) {
  json j;
  j["schema_version"] = kRecordSchemaVersion;
  j["record"] = "trial";
  j["spec"] = to_json(r.spec);
  j["p_answer_final"] = r.p_answer_final;
  j["p_answer_by_layer"] = layer_map_json(r.p_answer_by_layer);
  j["logit_lse_final"] = r.logit_lse_final;
  j["interventions_turn1"] = r.interventions_turn1;
  j["interventions_turn2"] = r.interventions_turn2;
  j["sequence_length"] = r.sequence_length;
  return j;
}

json to_json(const IdentificationRecord& r) {
  json j;
  j["schema_version"] = kRecordSchemaVersion;
  j["record"] = "identification";
  j["spec"] = to_json(r.spec);
  j["orderings"] = r.orderings;
  j["p_digit_final"] = r.p_digit_final;
  json layers = json::object();
  for (const auto& [layer, p] : r.p_digit_by_layer) layers[std::to_string(layer)] = p;
  j["p_digit_by_layer"] = layers;
  j["interventions_turn1"] = r.interventions_turn1;
  j["interventions_turn2"] = r.interventions_turn2;
  return j;
}

TrialRecord trial_record_from_json(const json& j) {
  check_schema(j);
  try {
    TrialRecord r;
    r.spec = trial_spec_from_json(j.at("spec"));
    r.p_answer_final = j.at("p_answer_final").get<std::map<std::string, double>>();
    for (const auto& [layer, probs] : j.at("p_answer_by_layer").items())
      r.p_answer_by_layer[std::stoi(layer)] = probs.get<std::map<std::string, double>>();
    r.logit_lse_final = j.at("logit_lse_final").get<std::map<std::string, double>>();
    r.interventions_turn1 = j.at("interventions_turn1").get<std::size_t>();
    r.interventions_turn2 = j.at("interventions_turn2").get<std::size_t>();
    r.sequence_length = j.at("sequence_length").get<std::size_t>();
    return r;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("trial record: ") + e.what());
  }
}

IdentificationRecord identification_record_from_json(const json& j) {
  check_schema(j);
  try {
    IdentificationRecord r;
    r.spec = trial_spec_from_json(j.at("spec"));
    r.orderings = j.at("orderings").get<std::vector<std::vector<int>>>();
    r.p_digit_final = j.at("p_digit_final").get<std::array<double, 10>>();
    for (const auto& [layer, p] : j.at("p_digit_by_layer").items())
      r.p_digit_by_layer[std::stoi(layer)] = p.get<std::array<double, 10>>();
    r.interventions_turn1 = j.at("interventions_turn1").get<std::size_t>();
    r.interventions_turn2 = j.at("interventions_turn2").get<std::size_t>();
    return r;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("identification record: ") + e.what());
  }
}

}  // namespace kvprobe
