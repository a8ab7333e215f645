#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kvprobe/tokenizer.hpp"

namespace kvprobe {

enum class SpanLabel { System, User1, Assistant1, User2, AssistantPrefix };

std::string_view to_string(SpanLabel label);

struct RoleSpan {
  SpanLabel label;
  std::size_t begin = 0;  // token index, inclusive
  std::size_t end = 0;    // exclusive
};

struct TokenSequence {
  std::vector<int> tokens;
  std::vector<RoleSpan> role_spans;

  std::optional<RoleSpan> span(SpanLabel label) const;
};

// Role markers wrapped around each turn. An open turn (the assistant prefix) gets its
// opening marker but no closing marker, so the model continues it.
struct ChatTemplate {
  std::string name;
  std::string system_open;
  std::string user_open;
  std::string assistant_open;
  std::string turn_close;

  static ChatTemplate chatml();
  // "U: ...\n" / "A: ...\n"; what the byte-level desk model is trained on.
  static ChatTemplate compact();
  static ChatTemplate by_name(std::string_view name);
};

struct Turn {
  SpanLabel label;
  std::string text;
  bool open = false;
};

// Tokenizes each turn separately and concatenates, so span boundaries are exact.
TokenSequence render_turns(const Tokenizer& tokenizer, const ChatTemplate& chat, const std::vector<Turn>& turns);

}  // namespace kvprobe
