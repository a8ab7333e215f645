#include "kvprobe/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "kvprobe/error.hpp"

namespace kvprobe {
namespace {

std::optional<unsigned char> parse_byte_token(const std::string& key) {
  if (key.size() != 6 || key.compare(0, 3, "<0x") != 0 || key[5] != '>') return std::nullopt;
  unsigned value = 0;
  for (char c : key.substr(3, 2)) {
    value <<= 4;
    if (c >= '0' && c <= '9') value |= static_cast<unsigned>(c - '0');
    else if (c >= 'A' && c <= 'F') value |= static_cast<unsigned>(c - 'A' + 10);
    else if (c >= 'a' && c <= 'f') value |= static_cast<unsigned>(c - 'a' + 10);
    else return std::nullopt;
  }
  return static_cast<unsigned char>(value);
}

bool is_valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t n = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xe ? 3 : (c >> 3) == 0x1e ? 4 : 0;
    if (n == 0 || i + n > s.size()) return false;
    for (std::size_t k = 1; k < n; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += n;
  }
  return true;
}

}  // namespace

Tokenizer Tokenizer::byte_level() {
  Tokenizer t;
  t.byte_level_ = true;
  t.pieces_.resize(256);
  t.defined_.assign(256, true);
  for (int b = 0; b < 256; ++b) {
    t.pieces_[b] = std::string(1, static_cast<char>(b));
    t.lookup_.emplace(t.pieces_[b], b);
  }
  t.max_piece_len_ = 1;
  return t;
}

Tokenizer Tokenizer::from_vocab(const std::map<std::string, int>& vocab) {
  Tokenizer t;
  t.byte_level_ = false;
  int max_id = -1;
  for (const auto& [piece, id] : vocab) {
    if (piece.empty()) throw TokenizerError("vocabulary contains an empty token");
    if (id < 0) throw TokenizerError("negative token id for '" + piece + "'");
    max_id = std::max(max_id, id);
  }
  t.pieces_.resize(static_cast<std::size_t>(max_id + 1));
  t.defined_.assign(t.pieces_.size(), false);
  for (const auto& [piece, id] : vocab) {
    if (t.defined_[id]) throw TokenizerError("duplicate token id " + std::to_string(id));
    t.pieces_[id] = piece;
    t.defined_[id] = true;
    t.lookup_.emplace(piece, id);
    t.max_piece_len_ = std::max(t.max_piece_len_, piece.size());
  }
  return t;
}

Tokenizer Tokenizer::from_vocab_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TokenizerError("cannot open vocabulary file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw TokenizerError(std::string("malformed vocabulary file: ") + e.what());
  }
  std::map<std::string, int> vocab;
  for (const auto& [key, id] : j.items()) {
    const auto byte = parse_byte_token(key);
    vocab.emplace(byte ? std::string(1, static_cast<char>(*byte)) : key, id.get<int>());
  }
  return from_vocab(vocab);
}

void Tokenizer::save_vocab_file(const std::filesystem::path& path) const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t id = 0; id < pieces_.size(); ++id) {
    if (!defined_[id]) continue;
    const std::string& p = pieces_[id];
    if (p.size() == 1 && static_cast<unsigned char>(p[0]) >= 0x80) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned char>(p[0]));
      j[buf] = id;
    } else if (!is_valid_utf8(p)) {
      throw TokenizerError("token " + std::to_string(id) + " is not representable in a vocabulary file");
    } else {
      j[p] = id;
    }
  }
  std::ofstream out(path);
  out << j.dump(1) << '\n';
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  if (byte_level_) {
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<unsigned char>(c));
    return ids;
  }
  std::size_t pos = 0;
  std::string probe;
  while (pos < text.size()) {
    bool matched = false;
    for (std::size_t len = std::min(max_piece_len_, text.size() - pos); len > 0; --len) {
      probe.assign(text.substr(pos, len));
      if (auto it = lookup_.find(probe); it != lookup_.end()) {
        ids.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "0x%02X", static_cast<unsigned char>(text[pos]));
      throw TokenizerError(std::string("no vocabulary entry covers byte ") + buf + " at offset " + std::to_string(pos));
    }
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> tokens) const {
  std::string out;
  for (int id : tokens) out += piece(id);
  return out;
}

std::optional<int> Tokenizer::find(std::string_view piece) const {
  if (auto it = lookup_.find(std::string(piece)); it != lookup_.end()) return it->second;
  return std::nullopt;
}

const std::string& Tokenizer::piece(int id) const {
  if (id < 0 || id >= vocab_size() || !defined_[static_cast<std::size_t>(id)])
    throw TokenizerError("unknown token id " + std::to_string(id));
  return pieces_[static_cast<std::size_t>(id)];
}

}  // namespace kvprobe
