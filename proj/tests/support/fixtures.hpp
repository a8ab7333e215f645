#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "kvprobe/model.hpp"

namespace kvprobe::testing {

inline std::filesystem::path data_dir() { return KVPROBE_TEST_DATA_DIR; }
inline std::filesystem::path desk_model_path() { return data_dir() / "desk_model.kvt"; }

inline ModelConfig small_config(int n_layers = 4, PositionalScheme scheme = PositionalScheme::Rotary) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = 64;
  c.n_heads = 4;
  c.head_dim = 16;
  c.ffn_dim = 128;
  c.vocab_size = 256;
  c.max_seq_len = 512;
  c.positional_scheme = scheme;
  return c;
}

// Gaussian weights with unit norms, enough to give non-trivial attention patterns.
inline TensorArchive random_weights(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  TensorArchive a;
  auto add = [&](const std::string& name, std::vector<std::int64_t> shape, float scale, float offset = 0.0f) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(t.numel());
    for (float& v : t.data) v = offset + scale * normal(rng);
    a.tensors[name] = std::move(t);
  };
  const float sd = 1.0f / std::sqrt(static_cast<float>(c.d_model));
  add("tok_embeddings", {c.vocab_size, c.d_model}, 1.0f);
  if (c.positional_scheme == PositionalScheme::LearnedAbsolute) add("pos_embeddings", {c.max_seq_len, c.d_model}, 0.3f);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_norm", {c.d_model}, 0.1f, 1.0f);
    add(p + "mlp_norm", {c.d_model}, 0.1f, 1.0f);
    for (const char* n : {"wq", "wk", "wv", "wo"}) add(p + n, {c.d_model, c.d_model}, sd);
    add(p + "w_gate", {c.d_model, c.ffn_dim}, sd);
    add(p + "w_up", {c.d_model, c.ffn_dim}, sd);
    add(p + "w_down", {c.ffn_dim, c.d_model}, 1.0f / std::sqrt(static_cast<float>(c.ffn_dim)));
  }
  add("final_norm", {c.d_model}, 0.1f, 1.0f);
  add("unembed", {c.d_model, c.vocab_size}, sd);
  a.metadata["config"] = c;
  return a;
}

inline Model random_model(int n_layers = 4, std::uint64_t seed = 7,
                          PositionalScheme scheme = PositionalScheme::Rotary) {
  const ModelConfig c = small_config(n_layers, scheme);
  return Model::from_weights(c, random_weights(c, seed));
}

}  // namespace kvprobe::testing
