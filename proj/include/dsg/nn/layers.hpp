#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsg/error.hpp"
#include "dsg/nn/autograd.hpp"
#include "dsg/nn/tensor.hpp"

namespace dsg::nn {

struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;

  Tensor& value() { return var.mutable_value(); }
  const Tensor& value() const { return var.value(); }
  Tensor& grad() { return var.grad(); }
  void zero_grad() { var.grad().fill(0.0); }
};

/// Owns every trainable tensor of a model, in creation order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// Glorot-uniform weight of shape fan_in x fan_out.
  Var weight(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    Tensor t(fan_in, fan_out);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    for (auto& v : t.data()) v = u(rng_);
    return add(name, std::move(t));
  }

  Var filled(const std::string& name, std::size_t rows, std::size_t cols, double value) {
    return add(name, Tensor(rows, cols, value));
  }

  Var add(const std::string& name, Tensor t) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    params_.push_back(Parameter{name, Var::leaf(std::move(t)), true});
    return params_.back().var;
  }

  std::vector<Parameter>& all() noexcept { return params_; }
  const std::vector<Parameter>& all() const noexcept { return params_; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().size();
    return n;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<Parameter> params_;
};

/// Per-forward settings shared by every layer.
struct ForwardContext {
  bool train = false;
  std::mt19937_64* rng = nullptr;
  /// When set, each attention call appends its per-head weight matrices here.
  std::vector<Tensor>* attention_trace = nullptr;
};

inline Var apply_dropout(const Var& x, double rate, const ForwardContext& ctx) {
  if (!ctx.train || rate <= 0.0) return x;
  if (ctx.rng == nullptr) throw ConfigError("training forward needs a random generator");
  return dropout(x, rate, *ctx.rng, true);
}

/// y = x W (+ b), with W stored fan_in x fan_out.
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         bool bias = true)
      : weight_(store.weight(name + ".weight", in, out)) {
    if (bias) bias_ = store.filled(name + ".bias", 1, out, 0.0);
  }

  Var operator()(const Var& x) const {
    Var y = matmul(x, weight_);
    return bias_ ? add_row(y, *bias_) : y;
  }

  const Var& weight() const { return weight_; }
  const std::optional<Var>& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.rows(); }
  std::size_t out_features() const { return weight_.cols(); }

 private:
  Var weight_;
  std::optional<Var> bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t width)
      : gamma_(store.filled(name + ".gamma", 1, width, 1.0)),
        beta_(store.filled(name + ".beta", 1, width, 0.0)) {}

  Var operator()(const Var& x) const { return layer_norm(x, gamma_, beta_); }
  const Var& gamma() const { return gamma_; }
  const Var& beta() const { return beta_; }

 private:
  Var gamma_, beta_;
};

struct EncoderConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t d_ffn = 0;
  std::size_t n_layers = 1;
  double dropout = 0.1;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("encoder d_model must be a positive multiple of n_heads");
    }
    if (d_ffn == 0 || n_layers == 0) throw ConfigError("encoder d_ffn and n_layers must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  }
};

/// Multi-head scaled dot-product self-attention. Rows only attend to rows carrying the same
/// segment id, which lets many independent sequences share one call.
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParamStore& store, const std::string& name, const EncoderConfig& cfg)
      : q_(store, name + ".q", cfg.d_model, cfg.d_model),
        k_(store, name + ".k", cfg.d_model, cfg.d_model),
        v_(store, name + ".v", cfg.d_model, cfg.d_model),
        out_(store, name + ".out", cfg.d_model, cfg.d_model),
        n_heads_(cfg.n_heads),
        dropout_(cfg.dropout) {}

  Var operator()(const Var& x, std::span<const int> segments, const ForwardContext& ctx) const {
    const std::size_t d = x.cols();
    const std::size_t dh = d / n_heads_;
    const Var q = q_(x), k = k_(x), v = v_(x);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads_);
    for (std::size_t h = 0; h < n_heads_; ++h) {
      const Var qh = slice_cols(q, h * dh, dh);
      const Var kh = slice_cols(k, h * dh, dh);
      const Var vh = slice_cols(v, h * dh, dh);
      Var weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), segments);
      if (ctx.attention_trace) ctx.attention_trace->push_back(weights.value());
      weights = apply_dropout(weights, dropout_, ctx);
      heads.push_back(matmul(weights, vh));
    }
    return out_(heads.size() == 1 ? heads.front() : concat_cols(heads));
  }

  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& out() const { return out_; }
  std::size_t n_heads() const { return n_heads_; }

 private:
  Linear q_, k_, v_, out_;
  std::size_t n_heads_ = 1;
  double dropout_ = 0.0;
};

/// Post-norm encoder layer: x1 = LN(x + Drop(MHA(x))); y = LN(x1 + Drop(FFN(x1))).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParamStore& store, const std::string& name, const EncoderConfig& cfg)
      : attn_(store, name + ".attn", cfg),
        norm1_(store, name + ".norm1", cfg.d_model),
        ff1_(store, name + ".ff1", cfg.d_model, cfg.d_ffn),
        ff2_(store, name + ".ff2", cfg.d_ffn, cfg.d_model),
        norm2_(store, name + ".norm2", cfg.d_model),
        dropout_(cfg.dropout) {}

  Var operator()(const Var& x, std::span<const int> segments, const ForwardContext& ctx) const {
    const Var a = apply_dropout(attn_(x, segments, ctx), dropout_, ctx);
    const Var x1 = norm1_(add(x, a));
    Var f = apply_dropout(relu(ff1_(x1)), dropout_, ctx);
    f = apply_dropout(ff2_(f), dropout_, ctx);
    return norm2_(add(x1, f));
  }

  const MultiHeadSelfAttention& attention() const { return attn_; }
  const LayerNorm& norm1() const { return norm1_; }
  const LayerNorm& norm2() const { return norm2_; }
  const Linear& ff1() const { return ff1_; }
  const Linear& ff2() const { return ff2_; }

 private:
  MultiHeadSelfAttention attn_;
  LayerNorm norm1_;
  Linear ff1_, ff2_;
  LayerNorm norm2_;
  double dropout_ = 0.0;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore& store, const std::string& name, const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      layers_.emplace_back(store, name + ".layer" + std::to_string(l), cfg);
    }
  }

  Var operator()(const Var& x, std::span<const int> segments, const ForwardContext& ctx) const {
    if (x.cols() != cfg_.d_model) throw ShapeError("encoder input width differs from d_model");
    Var h = x;
    for (const auto& layer : layers_) h = layer(h, segments, ctx);
    return h;
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<EncoderLayer>& layers() const { return layers_; }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderLayer> layers_;
};

/// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(pos / 10000^(2i/d)).
inline Tensor sinusoidal_pe(std::size_t length, std::size_t d_model) {
  if (d_model < 2) throw ConfigError("positional encoding needs d_model >= 2");
  Tensor pe(length, d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t dim = 0; dim < d_model; ++dim) {
      const std::size_t pair = dim / 2;
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * pair) / static_cast<double>(d_model));
      pe(pos, dim) = dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

/// Encoding rows for arbitrary (possibly repeated) positions.
inline Tensor positional_rows(std::span<const int> positions, std::size_t d_model) {
  int max_pos = 0;
  for (int p : positions) {
    if (p < 0) throw ShapeError("positions must be non-negative");
    max_pos = std::max(max_pos, p);
  }
  const Tensor table = sinusoidal_pe(static_cast<std::size_t>(max_pos) + 1, d_model);
  Tensor out(positions.size(), d_model);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const auto src = table.row(static_cast<std::size_t>(positions[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace dsg::nn
