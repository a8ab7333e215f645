#pragma once

#include <nlohmann/json.hpp>

namespace kvprobe {

enum class PositionalScheme { Rotary, LearnedAbsolute };

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int head_dim = 0;
  int ffn_dim = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  float norm_epsilon = 1e-5f;
  PositionalScheme positional_scheme = PositionalScheme::Rotary;
  float rope_theta = 10000.0f;

  // Throws InvalidArgument when a structural invariant does not hold.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace kvprobe
