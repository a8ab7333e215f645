#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kvprobe/intervention.hpp"
#include "kvprobe/model_config.hpp"
#include "kvprobe/tensor_archive.hpp"

namespace kvprobe {

// Per-layer keys and values for a token prefix, laid out [position][n_heads * head_dim].
// Extending only appends; existing entries are never rewritten.
class LayeredCache {
 public:
  LayeredCache() = default;
  LayeredCache(int n_layers, int d_model);

  std::size_t length() const { return length_; }
  int n_layers() const { return static_cast<int>(keys_.size()); }
  int d_model() const { return d_model_; }
  std::span<const float> keys(int layer) const { return keys_.at(static_cast<std::size_t>(layer)); }
  std::span<const float> values(int layer) const { return values_.at(static_cast<std::size_t>(layer)); }

 private:
  friend class Model;

  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::size_t length_ = 0;
  int d_model_ = 0;
};

// Residual stream after block `layer_index` at absolute position `position`.
struct LayerCapture {
  int layer_index = 0;
  std::size_t position = 0;
  std::vector<float> hidden;
  std::vector<float> pre_hook;  // same state before the injection hook ran; filled on request
};

struct CaptureSpec {
  std::vector<int> layers;
  std::vector<std::size_t> positions;  // absolute; positions outside the new chunk are ignored
  bool all_positions = false;
  bool last_logits_only = false;
  bool include_pre_hook = false;
};

struct ForwardResult {
  std::vector<std::vector<float>> logits;  // one row per new position (or just the last)
  std::vector<LayerCapture> captures;
  std::size_t interventions = 0;  // (layer, position) additions performed by the hook
};

// Decoder-only transformer: pre-norm RMSNorm, multi-head causal attention with rotary or
// learned absolute positions, SwiGLU MLP, final RMSNorm and an untied unembedding.
//
// Weight names, stored as [in x out] row-major:
//   tok_embeddings [V, d]          pos_embeddings [max_seq_len, d] (learned-absolute only)
//   layers.{i}.attn_norm [d]       layers.{i}.wq / wk / wv / wo [d, d]
//   layers.{i}.mlp_norm [d]        layers.{i}.w_gate / w_up [d, ffn]   layers.{i}.w_down [ffn, d]
//   final_norm [d]                 unembed [d, V]
//
// A Model is an immutable handle; copies share weights and it is safe to use from many
// threads as long as each thread owns its cache.
class Model {
 public:
  // Reads the config from the archive metadata ("config").
  static Model load(const std::filesystem::path& weights_path);
  static Model load(const std::filesystem::path& weights_path, const ModelConfig& config);
  static Model from_weights(const ModelConfig& config, TensorArchive weights);

  const ModelConfig& config() const;
  const Tensor& weight(const std::string& name) const;
  std::size_t parameter_count() const;

  LayeredCache new_cache() const;

  // Runs `tokens` on top of `cache` and appends their keys/values to it.
  ForwardResult forward_extend(LayeredCache& cache, std::span<const int> tokens,
                               const InjectionPlan* plan = nullptr, const CaptureSpec& capture = {}) const;

  // Final norm + unembedding + softmax in double precision.
  std::vector<double> logit_lens(std::span<const float> hidden) const;
  std::vector<double> logit_lens(const LayerCapture& capture) const { return logit_lens(capture.hidden); }
  std::vector<double> lens_logits(std::span<const float> hidden) const;

 private:
  struct Impl;
  explicit Model(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<const Impl> impl_;
};

// Numerically stable softmax (max subtracted), computed in double.
std::vector<double> next_token_distribution(std::span<const float> logits);
std::vector<double> softmax(std::span<const double> logits);

}  // namespace kvprobe
