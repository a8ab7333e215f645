#include "kvprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

#include "kvprobe/error.hpp"

namespace kvprobe {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

// Row-wise RMSNorm: x * rsqrt(mean(x^2) + eps) * w.
RowMatrix rms_norm(const RowMatrix& x, const Tensor& weight, float eps) {
  RowMatrix out(x.rows(), x.cols());
  const Eigen::Map<const Eigen::RowVectorXf> w(weight.data.data(), static_cast<Eigen::Index>(weight.data.size()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float ms = x.row(r).squaredNorm() / static_cast<float>(x.cols());
    const float inv = 1.0f / std::sqrt(ms + eps);
    out.row(r) = (x.row(r) * inv).cwiseProduct(w);
  }
  return out;
}

// a * w one row at a time, so a row's result does not depend on how many rows share the call.
template <class Rhs>
RowMatrix rowwise_product(const RowMatrix& a, const Rhs& w) {
  RowMatrix out(a.rows(), w.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) out.row(r).noalias() = a.row(r) * w;
  return out;
}

// NeoX-style rotation: pairs (i, i + head_dim/2) within each head.
void apply_rotary(RowMatrix& m, std::size_t start_pos, int n_heads, int head_dim, float theta) {
  const int half = head_dim / 2;
  std::vector<float> inv_freq(static_cast<std::size_t>(half));
  for (int i = 0; i < half; ++i)
    inv_freq[static_cast<std::size_t>(i)] = std::pow(theta, -2.0f * static_cast<float>(i) / static_cast<float>(head_dim));
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    const float pos = static_cast<float>(start_pos + static_cast<std::size_t>(t));
    for (int i = 0; i < half; ++i) {
      const float angle = pos * inv_freq[static_cast<std::size_t>(i)];
      const float c = std::cos(angle);
      const float s = std::sin(angle);
      for (int h = 0; h < n_heads; ++h) {
        float* base = m.row(t).data() + h * head_dim;
        const float x1 = base[i];
        const float x2 = base[i + half];
        base[i] = x1 * c - x2 * s;
        base[i + half] = x2 * c + x1 * s;
      }
    }
  }
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

struct Model::Impl {
  ModelConfig config;
  TensorArchive weights;

  const Tensor& at(const std::string& name) const {
    auto it = weights.tensors.find(name);
    if (it == weights.tensors.end()) throw LoadError(name, "missing tensor");
    return it->second;
  }

  ConstMap matrix(const std::string& name) const {
    const Tensor& t = at(name);
    return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  }
};

LayeredCache::LayeredCache(int n_layers, int d_model)
    : keys_(static_cast<std::size_t>(n_layers)), values_(static_cast<std::size_t>(n_layers)), d_model_(d_model) {}

Model Model::load(const std::filesystem::path& weights_path) {
  TensorArchive archive = read_archive(weights_path);
  if (!archive.metadata.contains("config"))
    throw LoadError("", "archive has no embedded config; pass a ModelConfig explicitly");
  const auto config = archive.metadata.at("config").get<ModelConfig>();
  return from_weights(config, std::move(archive));
}

Model Model::load(const std::filesystem::path& weights_path, const ModelConfig& config) {
  return from_weights(config, read_archive(weights_path));
}

Model Model::from_weights(const ModelConfig& config, TensorArchive weights) {
  config.validate();
  const std::int64_t d = config.d_model;
  const std::int64_t ff = config.ffn_dim;
  const std::int64_t v = config.vocab_size;

  std::vector<std::pair<std::string, std::vector<std::int64_t>>> required = {
      {"tok_embeddings", {v, d}}, {"final_norm", {d}}, {"unembed", {d, v}}};
  if (config.positional_scheme == PositionalScheme::LearnedAbsolute)
    required.push_back({"pos_embeddings", {config.max_seq_len, d}});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    required.push_back({p + "attn_norm", {d}});
    required.push_back({p + "mlp_norm", {d}});
    for (const char* n : {"wq", "wk", "wv", "wo"}) required.push_back({p + n, {d, d}});
    required.push_back({p + "w_gate", {d, ff}});
    required.push_back({p + "w_up", {d, ff}});
    required.push_back({p + "w_down", {ff, d}});
  }
  for (const auto& [name, shape] : required) {
    auto it = weights.tensors.find(name);
    if (it == weights.tensors.end()) throw LoadError(name, "missing tensor");
    if (it->second.shape != shape)
      throw LoadError(name, "shape " + shape_string(it->second.shape) + " does not match expected " + shape_string(shape));
    const auto& data = it->second.data;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!std::isfinite(data[i])) throw LoadError(name, "non-finite value at index " + std::to_string(i));
  }

  auto impl = std::make_shared<Impl>();
  impl->config = config;
  impl->weights = std::move(weights);
  return Model(std::move(impl));
}

const ModelConfig& Model::config() const { return impl_->config; }

const Tensor& Model::weight(const std::string& name) const { return impl_->at(name); }

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : impl_->weights.tensors) n += t.data.size();
  return n;
}

LayeredCache Model::new_cache() const { return LayeredCache(impl_->config.n_layers, impl_->config.d_model); }

ForwardResult Model::forward_extend(LayeredCache& cache, std::span<const int> tokens, const InjectionPlan* plan,
                                    const CaptureSpec& capture) const {
  const ModelConfig& cfg = impl_->config;
  const int d = cfg.d_model;
  const int hd = cfg.head_dim;
  if (cache.n_layers() != cfg.n_layers || cache.d_model() != d)
    throw InvalidArgument("cache does not belong to a model with this config");
  const std::size_t start = cache.length();
  const auto n_new = static_cast<Eigen::Index>(tokens.size());
  if (start + tokens.size() > static_cast<std::size_t>(cfg.max_seq_len))
    throw SequenceOverflow("sequence of " + std::to_string(start + tokens.size()) + " tokens exceeds max_seq_len " +
                           std::to_string(cfg.max_seq_len));
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size) throw InvalidArgument("token id " + std::to_string(id) + " out of range");
  if (plan != nullptr) {
    for (const auto& [layer, dir] : plan->directions) {
      if (layer < 0 || layer >= cfg.n_layers)
        throw InvalidArgument("injection plan references layer " + std::to_string(layer) + " outside [0, " +
                              std::to_string(cfg.n_layers) + ")");
      if (static_cast<int>(dir.size()) != d) throw InvalidArgument("injection direction has wrong dimension");
    }
  }
  for (int layer : capture.layers)
    if (layer < 0 || layer >= cfg.n_layers) throw InvalidArgument("capture layer out of range");

  ForwardResult result;
  if (n_new == 0) return result;

  const Tensor& emb = impl_->at("tok_embeddings");
  RowMatrix x(n_new, d);
  for (Eigen::Index t = 0; t < n_new; ++t) {
    const float* row = emb.data.data() + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d;
    std::copy(row, row + d, x.row(t).data());
  }
  if (cfg.positional_scheme == PositionalScheme::LearnedAbsolute) {
    const Tensor& pos = impl_->at("pos_embeddings");
    for (Eigen::Index t = 0; t < n_new; ++t)
      x.row(t) += Eigen::Map<const Eigen::RowVectorXf>(pos.data.data() + (start + static_cast<std::size_t>(t)) * d, d);
  }

  const std::size_t total = start + static_cast<std::size_t>(n_new);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const float eps = cfg.norm_epsilon;

  auto wants_capture = [&](std::size_t pos) {
    if (capture.all_positions) return true;
    return std::find(capture.positions.begin(), capture.positions.end(), pos) != capture.positions.end();
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto li = static_cast<std::size_t>(l);

    RowMatrix h = rms_norm(x, impl_->at(p + "attn_norm"), eps);
    RowMatrix q = rowwise_product(h, impl_->matrix(p + "wq"));
    RowMatrix k = rowwise_product(h, impl_->matrix(p + "wk"));
    RowMatrix v = rowwise_product(h, impl_->matrix(p + "wv"));
    if (cfg.positional_scheme == PositionalScheme::Rotary) {
      apply_rotary(q, start, cfg.n_heads, hd, cfg.rope_theta);
      apply_rotary(k, start, cfg.n_heads, hd, cfg.rope_theta);
    }
    auto& kc = cache.keys_[li];
    auto& vc = cache.values_[li];
    kc.resize(total * static_cast<std::size_t>(d));
    vc.resize(total * static_cast<std::size_t>(d));
    std::copy(k.data(), k.data() + k.size(), kc.data() + start * static_cast<std::size_t>(d));
    std::copy(v.data(), v.data() + v.size(), vc.data() + start * static_cast<std::size_t>(d));

    RowMatrix attn(n_new, d);
    for (int head = 0; head < cfg.n_heads; ++head) {
      StridedMap kh(kc.data() + head * hd, static_cast<Eigen::Index>(total), hd, Eigen::OuterStride<>(d));
      StridedMap vh(vc.data() + head * hd, static_cast<Eigen::Index>(total), hd, Eigen::OuterStride<>(d));
      for (Eigen::Index t = 0; t < n_new; ++t) {
        const Eigen::Index visible = static_cast<Eigen::Index>(start) + t + 1;
        Eigen::RowVectorXf row = (q.row(t).segment(head * hd, hd) * kh.topRows(visible).transpose()) * scale;
        const float mx = row.maxCoeff();
        float sum = 0.0f;
        for (Eigen::Index j = 0; j < visible; ++j) {
          row(j) = std::exp(row(j) - mx);
          sum += row(j);
        }
        row /= sum;
        attn.row(t).segment(head * hd, hd).noalias() = row * vh.topRows(visible);
      }
    }
    x += rowwise_product(attn, impl_->matrix(p + "wo"));

    RowMatrix h2 = rms_norm(x, impl_->at(p + "mlp_norm"), eps);
    RowMatrix gate = rowwise_product(h2, impl_->matrix(p + "w_gate"));
    const RowMatrix up = rowwise_product(h2, impl_->matrix(p + "w_up"));
    gate = gate.unaryExpr(&silu).cwiseProduct(up);
    x += rowwise_product(gate, impl_->matrix(p + "w_down"));

    const bool capture_layer = std::find(capture.layers.begin(), capture.layers.end(), l) != capture.layers.end();
    RowMatrix pre_hook;
    if (capture_layer && capture.include_pre_hook) pre_hook = x;

    if (plan != nullptr) {
      if (auto it = plan->directions.find(l); it != plan->directions.end()) {
        const auto coef = static_cast<float>(plan->coefficient);
        const Eigen::Map<const Eigen::RowVectorXf> dir(it->second.data(), d);
        for (Eigen::Index t = 0; t < n_new; ++t) {
          if (!plan->span.contains(start + static_cast<std::size_t>(t))) continue;
          x.row(t) += coef * dir;
          ++result.interventions;
        }
      }
    }

    if (capture_layer) {
      for (Eigen::Index t = 0; t < n_new; ++t) {
        const std::size_t pos = start + static_cast<std::size_t>(t);
        if (!wants_capture(pos)) continue;
        LayerCapture c{l, pos, std::vector<float>(x.row(t).data(), x.row(t).data() + d), {}};
        if (capture.include_pre_hook) c.pre_hook.assign(pre_hook.row(t).data(), pre_hook.row(t).data() + d);
        result.captures.push_back(std::move(c));
      }
    }
  }
  cache.length_ = total;

  const Eigen::Index first = capture.last_logits_only ? n_new - 1 : 0;
  const RowMatrix normed = rms_norm(x.bottomRows(n_new - first), impl_->at("final_norm"), eps);
  const RowMatrix logits = rowwise_product(normed, impl_->matrix("unembed"));
  result.logits.reserve(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    result.logits.emplace_back(logits.row(r).data(), logits.row(r).data() + logits.cols());
  return result;
}

std::vector<double> Model::lens_logits(std::span<const float> hidden) const {
  const ModelConfig& cfg = impl_->config;
  if (static_cast<int>(hidden.size()) != cfg.d_model)
    throw InvalidArgument("logit lens: hidden vector has dimension " + std::to_string(hidden.size()) + ", expected " +
                          std::to_string(cfg.d_model));
  const Tensor& norm = impl_->at("final_norm");
  const Tensor& unembed = impl_->at("unembed");
  double ms = 0.0;
  for (float h : hidden) ms += static_cast<double>(h) * h;
  ms /= static_cast<double>(hidden.size());
  const double inv = 1.0 / std::sqrt(ms + static_cast<double>(cfg.norm_epsilon));
  std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size), 0.0);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const double hn = static_cast<double>(hidden[i]) * inv * static_cast<double>(norm.data[i]);
    const float* urow = unembed.data.data() + i * static_cast<std::size_t>(cfg.vocab_size);
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += hn * static_cast<double>(urow[j]);
  }
  return logits;
}

std::vector<double> Model::logit_lens(std::span<const float> hidden) const { return softmax(lens_logits(hidden)); }

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

std::vector<double> next_token_distribution(std::span<const float> logits) {
  std::vector<double> wide(logits.begin(), logits.end());
  return softmax(wide);
}

}  // namespace kvprobe
