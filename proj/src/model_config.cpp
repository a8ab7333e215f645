#include "kvprobe/model_config.hpp"

#include <string>

#include "kvprobe/error.hpp"

namespace kvprobe {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("invalid model config: " + what);
  };
  require(n_layers >= 3, "n_layers must be at least 3");
  require(d_model > 0 && n_heads > 0 && head_dim > 0, "dimensions must be positive");
  require(n_heads * head_dim == d_model, "n_heads * head_dim must equal d_model");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(vocab_size >= 16, "vocab_size must be at least 16");
  require(max_seq_len > 0, "max_seq_len must be positive");
  require(norm_epsilon > 0.0f, "norm_epsilon must be positive");
  require(positional_scheme != PositionalScheme::Rotary || head_dim % 2 == 0, "rotary embeddings need an even head_dim");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"d_model", c.d_model},         {"n_heads", c.n_heads},
       {"head_dim", c.head_dim},       {"ffn_dim", c.ffn_dim},         {"vocab_size", c.vocab_size},
       {"max_seq_len", c.max_seq_len}, {"norm_epsilon", c.norm_epsilon}, {"rope_theta", c.rope_theta},
       {"positional_scheme", c.positional_scheme == PositionalScheme::Rotary ? "rotary" : "learned-absolute"}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  c.norm_epsilon = j.value("norm_epsilon", 1e-5f);
  c.rope_theta = j.value("rope_theta", 10000.0f);
  const std::string scheme = j.value("positional_scheme", "rotary");
  if (scheme == "rotary") {
    c.positional_scheme = PositionalScheme::Rotary;
  } else if (scheme == "learned-absolute") {
    c.positional_scheme = PositionalScheme::LearnedAbsolute;
  } else {
    throw InvalidArgument("unknown positional_scheme '" + scheme + "'");
  }
}

}  // namespace kvprobe
