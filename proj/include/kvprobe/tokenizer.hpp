#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kvprobe {

// Byte-level by default (ids 0..255 are the raw bytes). An external vocabulary maps
// token strings to ids and encodes by greedy longest match.
class Tokenizer {
 public:
  static Tokenizer byte_level();
  // Keys are raw byte strings.
  static Tokenizer from_vocab(const std::map<std::string, int>& vocab);
  // JSON object {"token": id}; a key of the form "<0xHH>" denotes the single raw byte HH.
  static Tokenizer from_vocab_file(const std::filesystem::path& path);
  void save_vocab_file(const std::filesystem::path& path) const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> tokens) const;

  int vocab_size() const { return static_cast<int>(pieces_.size()); }
  bool is_byte_level() const { return byte_level_; }
  // Id of a string that is exactly one token, if any.
  std::optional<int> find(std::string_view piece) const;
  const std::string& piece(int id) const;

 private:
  Tokenizer() = default;

  bool byte_level_ = true;
  std::vector<std::string> pieces_;
  std::vector<bool> defined_;
  std::unordered_map<std::string, int> lookup_;
  std::size_t max_piece_len_ = 1;
};

}  // namespace kvprobe
