#include "kvprobe/chat.hpp"

#include "kvprobe/error.hpp"

namespace kvprobe {

std::string_view to_string(SpanLabel label) {
  switch (label) {
    case SpanLabel::System: return "system";
    case SpanLabel::User1: return "user-1";
    case SpanLabel::Assistant1: return "assistant-1";
    case SpanLabel::User2: return "user-2";
    case SpanLabel::AssistantPrefix: return "assistant-prefix";
  }
  return "?";
}

std::optional<RoleSpan> TokenSequence::span(SpanLabel label) const {
  for (const RoleSpan& s : role_spans)
    if (s.label == label) return s;
  return std::nullopt;
}

ChatTemplate ChatTemplate::chatml() {
  return {"chatml", "<|im_start|>system\n", "<|im_start|>user\n", "<|im_start|>assistant\n", "<|im_end|>\n"};
}

ChatTemplate ChatTemplate::compact() { return {"compact", "S: ", "U: ", "A: ", "\n"}; }

ChatTemplate ChatTemplate::by_name(std::string_view name) {
  if (name == "chatml") return chatml();
  if (name == "compact") return compact();
  throw InvalidArgument("unknown chat template '" + std::string(name) + "'");
}

TokenSequence render_turns(const Tokenizer& tokenizer, const ChatTemplate& chat, const std::vector<Turn>& turns) {
  TokenSequence seq;
  for (const Turn& turn : turns) {
    const std::string& open = turn.label == SpanLabel::System ? chat.system_open
                              : (turn.label == SpanLabel::User1 || turn.label == SpanLabel::User2) ? chat.user_open
                                                                                                    : chat.assistant_open;
    std::string text = open + turn.text;
    if (!turn.open) text += chat.turn_close;
    const auto ids = tokenizer.encode(text);
    RoleSpan span{turn.label, seq.tokens.size(), seq.tokens.size() + ids.size()};
    seq.tokens.insert(seq.tokens.end(), ids.begin(), ids.end());
    seq.role_spans.push_back(span);
  }
  return seq;
}

}  // namespace kvprobe
