// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Self-supervised-style audio encoder:
//
//   conv 0:      Conv1D -> GroupNorm -> GELU
//   conv 1..L-1: Conv1D -> GELU
//   projection:  LayerNorm(C_last) -> Linear(C_last -> D)
//   layers:      x = LN(x + MHA(x));  x = LN(x + W2 GELU(W1 x + b1) + b2)
//
// Linear layers compute y = W x + b with W stored [out, in]. Head i of
// W^Q/W^K/W^V owns rows [i*d_k, (i+1)*d_k); head i of W^O owns the same
// column block. No positional embedding and no masking.

#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rebasin/error.hpp"
#include "rebasin/parallel.hpp"
#include "rebasin/rng.hpp"
#include "rebasin/tensor_store.hpp"

namespace rebasin {

struct ConvLayerSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;

  bool operator==(const ConvLayerSpec&) const = default;
};

struct EncoderConfig {
  std::vector<ConvLayerSpec> conv_layers;
  std::size_t groupnorm_groups = 0;
  std::size_t model_dim = 0;
  std::size_t ffn_dim = 0;
  std::size_t heads = 0;
  std::size_t num_layers = 0;
  double eps_ln = 1e-5;

  bool operator==(const EncoderConfig&) const = default;

  std::size_t head_dim() const { return model_dim / heads; }
  std::size_t num_conv() const { return conv_layers.size(); }
  std::size_t conv_channels(std::size_t l) const {
    return conv_layers.at(l).out_channels;
  }
  std::size_t last_conv_channels() const {
    return conv_layers.back().out_channels;
  }
  std::size_t conv_in_channels(std::size_t l) const {
    return l == 0 ? 1 : conv_layers[l - 1].out_channels;
  }

  void validate() const {
    if (conv_layers.empty()) {
      throw ValidationError("encoder config needs at least one conv layer");
    }
    for (std::size_t l = 0; l < conv_layers.size(); ++l) {
      const auto& c = conv_layers[l];
      if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
        throw ValidationError("conv layer " + std::to_string(l) +
                              " has a zero dimension");
      }
    }
    if (groupnorm_groups == 0 ||
        conv_layers[0].out_channels % groupnorm_groups != 0) {
      throw ValidationError(
          "groupnorm_groups must divide conv layer 0 out_channels");
    }
    if (model_dim == 0 || ffn_dim == 0 || heads == 0 || num_layers == 0) {
      throw ValidationError("model_dim, ffn_dim, heads and num_layers must be >= 1");
    }
    if (model_dim % heads != 0) {
      throw ValidationError("model_dim must be divisible by heads");
    }
    if (ffn_dim < model_dim) {
      throw ValidationError("ffn_dim must be >= model_dim");
    }
    if (!(eps_ln > 0.0)) throw ValidationError("eps_ln must be positive");
  }

  // Output length of the conv stack for an input of `samples`, 0 if the
  // input is too short to produce a frame.
  std::size_t frames(std::size_t samples) const {
    std::size_t t = samples;
    for (const auto& c : conv_layers) {
      if (t < c.kernel) return 0;
      t = (t - c.kernel) / c.stride + 1;
    }
    return t;
  }

  // Time length after conv layer l.
  std::size_t conv_frames(std::size_t l, std::size_t samples) const {
    std::size_t t = samples;
    for (std::size_t i = 0; i <= l; ++i) {
      const auto& c = conv_layers[i];
      if (t < c.kernel) return 0;
      t = (t - c.kernel) / c.stride + 1;
    }
    return t;
  }

  // Smallest input that yields one output frame.
  std::size_t receptive_field() const {
    std::size_t need = 1;
    for (auto it = conv_layers.rbegin(); it != conv_layers.rend(); ++it) {
      need = (need - 1) * it->stride + it->kernel;
    }
    return need;
  }

  // Three conv layers (total stride 320, 20 ms frames at 16 kHz), D=64,
  // four heads, D_ff=128, two transformer layers.
  static EncoderConfig toy() {
    EncoderConfig c;
    c.conv_layers = {{32, 10, 5}, {48, 8, 8}, {64, 8, 8}};
    c.groupnorm_groups = 32;
    c.model_dim = 64;
    c.ffn_dim = 128;
    c.heads = 4;
    c.num_layers = 2;
    c.eps_ln = 1e-5;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ConvLayerSpec& c) {
  j = nlohmann::json{{"out_channels", c.out_channels},
                     {"kernel", c.kernel},
                     {"stride", c.stride}};
}

inline void from_json(const nlohmann::json& j, ConvLayerSpec& c) {
  j.at("out_channels").get_to(c.out_channels);
  j.at("kernel").get_to(c.kernel);
  j.at("stride").get_to(c.stride);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"conv_layers", c.conv_layers},
                     {"groupnorm_groups", c.groupnorm_groups},
                     {"model_dim", c.model_dim},
                     {"ffn_dim", c.ffn_dim},
                     {"heads", c.heads},
                     {"num_layers", c.num_layers},
                     {"eps_ln", c.eps_ln}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("conv_layers").get_to(c.conv_layers);
  j.at("groupnorm_groups").get_to(c.groupnorm_groups);
  j.at("model_dim").get_to(c.model_dim);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("heads").get_to(c.heads);
  j.at("num_layers").get_to(c.num_layers);
  c.eps_ln = j.value("eps_ln", 1e-5);
}

inline EncoderConfig parse_encoder_config(const std::string& text) {
  try {
    EncoderConfig c = nlohmann::json::parse(text).get<EncoderConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad encoder config JSON: ") + e.what());
  }
}

// Canonical tensor names.
namespace names {

inline std::string conv_weight(std::size_t l) {
  return "conv." + std::to_string(l) + ".weight";
}
inline std::string conv_bias(std::size_t l) {
  return "conv." + std::to_string(l) + ".bias";
}
inline const std::string gn_gamma = "conv.0.gn.gamma";
inline const std::string gn_beta = "conv.0.gn.beta";
inline const std::string proj_ln_gamma = "proj.ln.gamma";
inline const std::string proj_ln_beta = "proj.ln.beta";
inline const std::string proj_weight = "proj.weight";
inline const std::string proj_bias = "proj.bias";

inline std::string layer(std::size_t i, const std::string& rest) {
  return "layer." + std::to_string(i) + "." + rest;
}
// m is one of 'q', 'k', 'v', 'o'.
inline std::string attn_weight(std::size_t i, char m) {
  return layer(i, std::string("attn.") + m + ".weight");
}
inline std::string attn_bias(std::size_t i, char m) {
  return layer(i, std::string("attn.") + m + ".bias");
}
inline std::string attn_ln_gamma(std::size_t i) { return layer(i, "attn.ln.gamma"); }
inline std::string attn_ln_beta(std::size_t i) { return layer(i, "attn.ln.beta"); }
inline std::string ffn_w1(std::size_t i) { return layer(i, "ffn.w1.weight"); }
inline std::string ffn_b1(std::size_t i) { return layer(i, "ffn.w1.bias"); }
inline std::string ffn_w2(std::size_t i) { return layer(i, "ffn.w2.weight"); }
inline std::string ffn_b2(std::size_t i) { return layer(i, "ffn.w2.bias"); }
inline std::string final_ln_gamma(std::size_t i) { return layer(i, "final_ln.gamma"); }
inline std::string final_ln_beta(std::size_t i) { return layer(i, "final_ln.beta"); }

}  // namespace names

inline const std::string kEncoderConfigKey = "encoder_config";

// Every tensor an encoder of `config` must carry, with its shape.
inline std::map<std::string, std::vector<std::size_t>> expected_shapes(
    const EncoderConfig& config) {
  std::map<std::string, std::vector<std::size_t>> s;
  for (std::size_t l = 0; l < config.num_conv(); ++l) {
    const auto& c = config.conv_layers[l];
    s[names::conv_weight(l)] = {c.out_channels, config.conv_in_channels(l),
                                c.kernel};
    s[names::conv_bias(l)] = {c.out_channels};
  }
  const std::size_t c0 = config.conv_channels(0);
  const std::size_t cl = config.last_conv_channels();
  const std::size_t d = config.model_dim;
  const std::size_t f = config.ffn_dim;
  s[names::gn_gamma] = {c0};
  s[names::gn_beta] = {c0};
  s[names::proj_ln_gamma] = {cl};
  s[names::proj_ln_beta] = {cl};
  s[names::proj_weight] = {d, cl};
  s[names::proj_bias] = {d};
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    for (char m : {'q', 'k', 'v', 'o'}) {
      s[names::attn_weight(i, m)] = {d, d};
      s[names::attn_bias(i, m)] = {d};
    }
    s[names::attn_ln_gamma(i)] = {d};
    s[names::attn_ln_beta(i)] = {d};
    s[names::ffn_w1(i)] = {f, d};
    s[names::ffn_b1(i)] = {f};
    s[names::ffn_w2(i)] = {d, f};
    s[names::ffn_b2(i)] = {d};
    s[names::final_ln_gamma(i)] = {d};
    s[names::final_ln_beta(i)] = {d};
  }
  return s;
}

inline bool is_norm_gamma(const std::string& name) {
  return name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
}

// One encoder: its config plus the canonical tensor archive.
struct EncoderWeights {
  EncoderConfig config;
  TensorArchive tensors;

  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  Tensor& at(const std::string& name) { return tensors.at(name); }

  // Throws unless every expected tensor is present with the right shape and
  // no extra tensors exist.
  void validate() const {
    config.validate();
    const auto expected = expected_shapes(config);
    for (const auto& [name, shape] : expected) {
      auto it = tensors.entries.find(name);
      if (it == tensors.entries.end()) {
        throw ShapeError("encoder is missing tensor '" + name + "'");
      }
      if (it->second.shape != shape) {
        throw ShapeError("tensor '" + name + "' has shape " +
                         shape_string(it->second.shape) + ", expected " +
                         shape_string(shape));
      }
      if (it->second.data.size() != Tensor::element_count(shape)) {
        throw ShapeError("tensor '" + name + "' data size mismatch");
      }
    }
    for (const auto& [name, t] : tensors.entries) {
      if (!expected.count(name)) {
        throw ShapeError("unexpected tensor '" + name + "' for this config");
      }
    }
  }

  TensorArchive to_archive() const {
    TensorArchive a = tensors;
    a.metadata[kEncoderConfigKey] = nlohmann::json(config).dump();
    return a;
  }

  static EncoderWeights from_archive(TensorArchive archive) {
    EncoderWeights w;
    w.config = parse_encoder_config(archive.meta(kEncoderConfigKey));
    w.tensors = std::move(archive);
    w.validate();
    return w;
  }

  // All-zero weights with unit norm gains.
  static EncoderWeights zeros(const EncoderConfig& config) {
    config.validate();
    EncoderWeights w;
    w.config = config;
    for (const auto& [name, shape] : expected_shapes(config)) {
      Tensor t = Tensor::zeros(shape);
      if (is_norm_gamma(name)) std::fill(t.data.begin(), t.data.end(), 1.0f);
      w.tensors.entries.emplace(name, std::move(t));
    }
    w.tensors.metadata[kEncoderConfigKey] = nlohmann::json(config).dump();
    return w;
  }
};

// Deterministic fan-in-scaled uniform initialization: weights
// U(-sqrt(3/fan_in), sqrt(3/fan_in)), biases 0, gamma 1, beta 0.
inline EncoderWeights init_toy(const EncoderConfig& config,
                               std::uint64_t seed) {
  EncoderWeights w = EncoderWeights::zeros(config);
  for (auto& [name, t] : w.tensors.entries) {
    if (name.ends_with(".weight")) {
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
      const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
      Rng rng(seed, fnv1a64(name));
      for (float& v : t.data) {
        v = static_cast<float>(rng.uniform(-bound, bound));
      }
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Activation taps

enum class TapKind {
  ConvOut,           // Conv1D output before norm/activation, [B, C_l, T_l]
  ConvGroupNormOut,  // layer 0 after GroupNorm + affine, [B, C_0, T_0]
  HeadOut,           // one head's attention output before W^O, [B, T, d_k]
  FfnHidden,         // GELU(W1 x + b1), [B, T, D_ff]
  QOut,              // [B, T, D]
  KOut,
  VOut,
};

struct TapPoint {
  TapKind kind = TapKind::ConvOut;
  std::size_t layer = 0;
  std::size_t head = 0;  // HeadOut only

  auto operator<=>(const TapPoint&) const = default;

  static TapPoint conv_out(std::size_t l) { return {TapKind::ConvOut, l, 0}; }
  static TapPoint conv_gn_out() { return {TapKind::ConvGroupNormOut, 0, 0}; }
  static TapPoint head_out(std::size_t l, std::size_t h) {
    return {TapKind::HeadOut, l, h};
  }
  static TapPoint ffn_hidden(std::size_t l) { return {TapKind::FfnHidden, l, 0}; }
  static TapPoint q_out(std::size_t l) { return {TapKind::QOut, l, 0}; }
  static TapPoint k_out(std::size_t l) { return {TapKind::KOut, l, 0}; }
  static TapPoint v_out(std::size_t l) { return {TapKind::VOut, l, 0}; }

  // Conv taps are laid out [B, C, T]; transformer taps [B, T, C].
  bool channels_first() const {
    return kind == TapKind::ConvOut || kind == TapKind::ConvGroupNormOut;
  }

  std::size_t channels(const EncoderConfig& c) const {
    switch (kind) {
      case TapKind::ConvOut: return c.conv_channels(layer);
      case TapKind::ConvGroupNormOut: return c.conv_channels(0);
      case TapKind::HeadOut: return c.head_dim();
      case TapKind::FfnHidden: return c.ffn_dim;
      default: return c.model_dim;
    }
  }

  std::string to_string() const {
    const std::string l = std::to_string(layer);
    switch (kind) {
      case TapKind::ConvOut: return "conv_out(" + l + ")";
      case TapKind::ConvGroupNormOut: return "conv_gn_out(" + l + ")";
      case TapKind::HeadOut:
        return "head_out(" + l + "," + std::to_string(head) + ")";
      case TapKind::FfnHidden: return "ffn_hidden(" + l + ")";
      case TapKind::QOut: return "q_out(" + l + ")";
      case TapKind::KOut: return "k_out(" + l + ")";
      case TapKind::VOut: return "v_out(" + l + ")";
    }
    return "?";
  }

  void validate(const EncoderConfig& c) const {
    bool ok = true;
    switch (kind) {
      case TapKind::ConvOut: ok = layer < c.num_conv(); break;
      case TapKind::ConvGroupNormOut: ok = layer == 0; break;
      case TapKind::HeadOut: ok = layer < c.num_layers && head < c.heads; break;
      default: ok = layer < c.num_layers; break;
    }
    if (!ok) throw ValidationError("tap " + to_string() + " is invalid for this config");
  }
};

using TapSet = std::set<TapPoint>;
using TapMap = std::map<TapPoint, Tensor>;

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline float gelu(float x) {
  return static_cast<float>(0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)));
}

// in: [c_in][t_in], out: [c_out][t_out]
inline std::vector<float> conv1d(std::span<const float> in, std::size_t c_in,
                                 std::size_t t_in, const Tensor& weight,
                                 const Tensor& bias, std::size_t stride) {
  const std::size_t c_out = weight.dim(0);
  const std::size_t kernel = weight.dim(2);
  const std::size_t t_out = (t_in - kernel) / stride + 1;
  std::vector<float> out(c_out * t_out);
  for (std::size_t o = 0; o < c_out; ++o) {
    float* row = out.data() + o * t_out;
    std::fill(row, row + t_out, bias.data[o]);
    for (std::size_t i = 0; i < c_in; ++i) {
      const float* src = in.data() + i * t_in;
      for (std::size_t k = 0; k < kernel; ++k) {
        const float w = weight.data[(o * c_in + i) * kernel + k];
        const float* s = src + k;
        for (std::size_t t = 0; t < t_out; ++t) row[t] += w * s[t * stride];
      }
    }
  }
  return out;
}

// Normalizes each group of channels over (channels in group x time), then
// applies per-channel affine. x: [c][t], in place.
inline void group_norm(std::vector<float>& x, std::size_t channels,
                       std::size_t t, std::size_t groups, const Tensor& gamma,
                       const Tensor& beta, double eps) {
  const std::size_t per_group = channels / groups;
  for (std::size_t g = 0; g < groups; ++g) {
    float* base = x.data() + g * per_group * t;
    const std::size_t n = per_group * t;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += base[i];
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = base[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < per_group; ++c) {
      const std::size_t ch = g * per_group + c;
      const double gm = gamma.data[ch];
      const double bt = beta.data[ch];
      float* row = base + c * t;
      for (std::size_t i = 0; i < t; ++i) {
        row[i] = static_cast<float>((row[i] - mean) * inv * gm + bt);
      }
    }
  }
}

// x: [rows][dim], normalizes each row in place.
inline void layer_norm(std::vector<float>& x, std::size_t rows,
                       std::size_t dim, const Tensor& gamma,
                       const Tensor& beta, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* row = x.data() + r * dim;
    double sum = 0.0;
    for (std::size_t i = 0; i < dim; ++i) sum += row[i];
    const double mean = sum / static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(dim);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < dim; ++i) {
      row[i] = static_cast<float>((row[i] - mean) * inv * gamma.data[i] +
                                  beta.data[i]);
    }
  }
}

// x: [rows][in], weight: [out][in] -> [rows][out]
inline std::vector<float> linear(std::span<const float> x, std::size_t rows,
                                 const Tensor& weight, const Tensor& bias) {
  const std::size_t out = weight.dim(0);
  const std::size_t in = weight.dim(1);
  std::vector<float> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * in;
    float* yr = y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const float* wr = weight.data.data() + o * in;
      float acc = 0.0f;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      yr[o] = acc + bias.data[o];
    }
  }
  return y;
}

// Per-clip tap storage: each requested tap gets a flat buffer in the tap's
// per-sample layout ([C][T] for conv, [T][C] for transformer taps).
using ClipTaps = std::map<TapPoint, std::vector<float>>;

inline std::vector<float> forward_clip(const EncoderWeights& w,
                                       std::span<const float> samples,
                                       const TapSet& taps, ClipTaps* out_taps,
                                       std::size_t* out_frames) {
  const EncoderConfig& cfg = w.config;
  auto want = [&](const TapPoint& p) { return out_taps && taps.count(p); };

  std::vector<float> x(samples.begin(), samples.end());
  std::size_t c_in = 1;
  std::size_t t = samples.size();
  for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
    const auto& spec = cfg.conv_layers[l];
    x = conv1d(x, c_in, t, w.at(names::conv_weight(l)),
               w.at(names::conv_bias(l)), spec.stride);
    t = (t - spec.kernel) / spec.stride + 1;
    c_in = spec.out_channels;
    if (want(TapPoint::conv_out(l))) (*out_taps)[TapPoint::conv_out(l)] = x;
    if (l == 0) {
      group_norm(x, c_in, t, cfg.groupnorm_groups, w.at(names::gn_gamma),
                 w.at(names::gn_beta), cfg.eps_ln);
      if (want(TapPoint::conv_gn_out())) (*out_taps)[TapPoint::conv_gn_out()] = x;
    }
    for (float& v : x) v = gelu(v);
  }

  // [C][T] -> [T][C]
  const std::size_t frames = t;
  const std::size_t c_last = c_in;
  std::vector<float> ft(frames * c_last);
  for (std::size_t c = 0; c < c_last; ++c) {
    for (std::size_t i = 0; i < frames; ++i) ft[i * c_last + c] = x[c * frames + i];
  }
  layer_norm(ft, frames, c_last, w.at(names::proj_ln_gamma),
             w.at(names::proj_ln_beta), cfg.eps_ln);
  std::vector<float> h =
      linear(ft, frames, w.at(names::proj_weight), w.at(names::proj_bias));

  const std::size_t d = cfg.model_dim;
  const std::size_t dk = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<float> scores(frames);
  for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
    const auto q = linear(h, frames, w.at(names::attn_weight(layer, 'q')),
                          w.at(names::attn_bias(layer, 'q')));
    const auto k = linear(h, frames, w.at(names::attn_weight(layer, 'k')),
                          w.at(names::attn_bias(layer, 'k')));
    const auto v = linear(h, frames, w.at(names::attn_weight(layer, 'v')),
                          w.at(names::attn_bias(layer, 'v')));
    if (want(TapPoint::q_out(layer))) (*out_taps)[TapPoint::q_out(layer)] = q;
    if (want(TapPoint::k_out(layer))) (*out_taps)[TapPoint::k_out(layer)] = k;
    if (want(TapPoint::v_out(layer))) (*out_taps)[TapPoint::v_out(layer)] = v;

    std::vector<float> concat(frames * d, 0.0f);
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t off = head * dk;
      for (std::size_t i = 0; i < frames; ++i) {
        const float* qi = q.data() + i * d + off;
        float mx = -INFINITY;
        for (std::size_t j = 0; j < frames; ++j) {
          const float* kj = k.data() + j * d + off;
          float dot = 0.0f;
          for (std::size_t c = 0; c < dk; ++c) dot += qi[c] * kj[c];
          scores[j] = static_cast<float>(dot * scale);
          mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < frames; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        const float inv = static_cast<float>(1.0 / denom);
        float* dst = concat.data() + i * d + off;
        for (std::size_t j = 0; j < frames; ++j) {
          const float p = scores[j] * inv;
          const float* vj = v.data() + j * d + off;
          for (std::size_t c = 0; c < dk; ++c) dst[c] += p * vj[c];
        }
      }
      const TapPoint tp = TapPoint::head_out(layer, head);
      if (want(tp)) {
        std::vector<float> buf(frames * dk);
        for (std::size_t i = 0; i < frames; ++i) {
          std::copy_n(concat.data() + i * d + off, dk, buf.data() + i * dk);
        }
        (*out_taps)[tp] = std::move(buf);
      }
    }
    auto attn = linear(concat, frames, w.at(names::attn_weight(layer, 'o')),
                       w.at(names::attn_bias(layer, 'o')));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += attn[i];
    layer_norm(h, frames, d, w.at(names::attn_ln_gamma(layer)),
               w.at(names::attn_ln_beta(layer)), cfg.eps_ln);

    auto hidden = linear(h, frames, w.at(names::ffn_w1(layer)),
                         w.at(names::ffn_b1(layer)));
    for (float& e : hidden) e = gelu(e);
    if (want(TapPoint::ffn_hidden(layer))) {
      (*out_taps)[TapPoint::ffn_hidden(layer)] = hidden;
    }
    auto ffn = linear(hidden, frames, w.at(names::ffn_w2(layer)),
                      w.at(names::ffn_b2(layer)));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += ffn[i];
    layer_norm(h, frames, d, w.at(names::final_ln_gamma(layer)),
               w.at(names::final_ln_beta(layer)), cfg.eps_ln);
  }
  if (out_frames) *out_frames = frames;
  return h;
}

inline void check_batch(const EncoderWeights& w, const Tensor& batch) {
  if (batch.rank() != 2) {
    throw ShapeError("input batch must be [B, samples], got " +
                     shape_string(batch.shape));
  }
  if (batch.data.size() != batch.dim(0) * batch.dim(1)) {
    throw ShapeError("input batch data does not match its shape");
  }
  if (batch.dim(1) < w.config.receptive_field()) {
    throw ShapeError("input of " + std::to_string(batch.dim(1)) +
                     " samples is shorter than the receptive field of " +
                     std::to_string(w.config.receptive_field()));
  }
}

}  // namespace detail

struct ForwardResult {
  Tensor features;  // [B, T, D]
  TapMap taps;
};

// Runs the encoder on `batch` ([B, samples]) and captures the requested
// activations. Clips are processed in parallel; the result does not depend
// on the worker count.
inline ForwardResult forward_with_taps(const EncoderWeights& w,
                                       const Tensor& batch,
                                       const TapSet& taps) {
  detail::check_batch(w, batch);
  for (const auto& tp : taps) tp.validate(w.config);
  const std::size_t b = batch.dim(0);
  const std::size_t n = batch.dim(1);
  const auto& cfg = w.config;

  std::vector<std::vector<float>> outs(b);
  std::vector<detail::ClipTaps> clip_taps(b);
  std::vector<std::size_t> frames(b);
  parallel_for(b, [&](std::size_t i) {
    outs[i] = detail::forward_clip(
        w, std::span<const float>(batch.data).subspan(i * n, n), taps,
        &clip_taps[i], &frames[i]);
  });
  const std::size_t t = frames.empty() ? cfg.frames(n) : frames[0];
  const std::size_t d = cfg.model_dim;

  ForwardResult r;
  r.features = Tensor::zeros({b, t, d});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(outs[i].begin(), outs[i].end(), r.features.data.begin() + i * t * d);
  }
  for (const auto& tp : taps) {
    const std::size_t c = tp.channels(cfg);
    const std::size_t tl =
        tp.channels_first() ? cfg.conv_frames(tp.layer, n) : t;
    Tensor out = tp.channels_first() ? Tensor::zeros({b, c, tl})
                                     : Tensor::zeros({b, tl, c});
    for (std::size_t i = 0; i < b; ++i) {
      const auto& buf = clip_taps[i].at(tp);
      std::copy(buf.begin(), buf.end(), out.data.begin() + i * c * tl);
    }
    r.taps.emplace(tp, std::move(out));
  }
  return r;
}

inline Tensor forward(const EncoderWeights& w, const Tensor& batch) {
  return forward_with_taps(w, batch, {}).features;
}

}  // namespace rebasin
