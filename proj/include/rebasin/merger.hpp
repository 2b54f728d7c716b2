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

// Applies a PermutationPlan to model B as weight-space symmetries and
// interpolates the result with model A.

#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "rebasin/encoder.hpp"
#include "rebasin/error.hpp"
#include "rebasin/parallel.hpp"
#include "rebasin/plan.hpp"
#include "rebasin/rng.hpp"

namespace rebasin {

namespace detail {

// Moves slice j along `axis` to slice p[j]. The tensor is viewed as
// [outer, dim(axis), inner].
inline void permute_axis(Tensor& t, std::size_t axis, const Perm& p) {
  if (axis >= t.rank() || t.dim(axis) != p.size()) {
    throw ShapeError("permutation of size " + std::to_string(p.size()) +
                     " does not fit axis " + std::to_string(axis) + " of " +
                     shape_string(t.shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  const std::size_t n = p.size();
  std::vector<float> out(t.data.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const float* src = t.data.data() + (o * n + j) * inner;
      std::copy(src, src + inner, out.data() + (o * n + p[j]) * inner);
    }
  }
  t.data = std::move(out);
}

}  // namespace detail

// Reorders B's weights per `plan`:
//  - conv layer l: out-axis of weight and bias (and group-norm affine at
//    l = 0); in-axis of conv l+1, or of the projection (plus the
//    projection layer norm) after the last conv layer
//  - attention: rows of W^Q, W^K, W^V and their biases, columns of W^O,
//    by the flattened head/within-head permutation
//  - FFN: rows of W1 and b1, columns of W2
//  - qkv overrides (cnn_all): rows of the named matrix and its bias only,
//    applied last
inline EncoderWeights apply_plan(const EncoderWeights& b, const PermutationPlan& plan) {
  const auto& cfg = b.config;
  plan.validate(cfg);
  EncoderWeights out = b;
  const std::size_t last = cfg.num_conv() - 1;
  for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
    const Perm& p = plan.conv[l];
    if (is_identity(p)) continue;
    detail::permute_axis(out.at(names::conv_weight(l)), 0, p);
    detail::permute_axis(out.at(names::conv_bias(l)), 0, p);
    if (l == 0) {
      detail::permute_axis(out.at(names::gn_gamma), 0, p);
      detail::permute_axis(out.at(names::gn_beta), 0, p);
    }
    if (l < last) {
      detail::permute_axis(out.at(names::conv_weight(l + 1)), 1, p);
    } else {
      detail::permute_axis(out.at(names::proj_ln_gamma), 0, p);
      detail::permute_axis(out.at(names::proj_ln_beta), 0, p);
      detail::permute_axis(out.at(names::proj_weight), 1, p);
    }
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto& lp = plan.layers[i];
    const Perm attn = lp.attention.flatten();
    if (!is_identity(attn)) {
      for (char m : {'q', 'k', 'v'}) {
        detail::permute_axis(out.at(names::attn_weight(i, m)), 0, attn);
        detail::permute_axis(out.at(names::attn_bias(i, m)), 0, attn);
      }
      detail::permute_axis(out.at(names::attn_weight(i, 'o')), 1, attn);
    }
    if (!is_identity(lp.ffn)) {
      detail::permute_axis(out.at(names::ffn_w1(i)), 0, lp.ffn);
      detail::permute_axis(out.at(names::ffn_b1(i)), 0, lp.ffn);
      detail::permute_axis(out.at(names::ffn_w2(i)), 1, lp.ffn);
    }
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const auto& qkv = plan.layers[i].qkv;
    if (!qkv) continue;
    const char tag[3] = {'q', 'k', 'v'};
    for (std::size_t m = 0; m < 3; ++m) {
      detail::permute_axis(out.at(names::attn_weight(i, tag[m])), 0, (*qkv)[m]);
      detail::permute_axis(out.at(names::attn_bias(i, tag[m])), 0, (*qkv)[m]);
    }
  }
  return out;
}

inline std::string weights_digest(const EncoderWeights& w) {
  return archive_digest(w.to_archive());
}

inline std::string format_lambda(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", lambda);
  return buf;
}

// Element-wise lambda * A + (1 - lambda) * B, computed in f64 and rounded
// to f32 once.
inline EncoderWeights interpolate(const EncoderWeights& a, const EncoderWeights& b,
                                  double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ValidationError("lambda must lie in [0, 1], got " + format_lambda(lambda));
  }
  if (!(a.config == b.config)) throw ShapeError("cannot interpolate different encoder configs");
  if (a.tensors.entries.size() != b.tensors.entries.size()) {
    throw ShapeError("models have different tensor sets");
  }
  EncoderWeights m;
  m.config = a.config;
  std::vector<std::pair<const std::string*, const Tensor*>> pairs;
  for (const auto& [name, ta] : a.tensors.entries) {
    auto it = b.tensors.entries.find(name);
    if (it == b.tensors.entries.end()) {
      throw ShapeError("model B has no tensor '" + name + "'");
    }
    if (it->second.shape != ta.shape) {
      throw ShapeError("tensor '" + name + "' shape " + shape_string(ta.shape) + " vs " +
                       shape_string(it->second.shape));
    }
    m.tensors.entries.emplace(name, Tensor(ta.shape, std::vector<float>(ta.size())));
    pairs.emplace_back(&name, &ta);
  }
  parallel_for(pairs.size(), [&](std::size_t k) {
    const std::string& name = *pairs[k].first;
    const Tensor& ta = *pairs[k].second;
    const Tensor& tb = b.tensors.entries.at(name);
    Tensor& tm = m.tensors.entries.at(name);
    for (std::size_t i = 0; i < ta.size(); ++i) {
      tm.data[i] = static_cast<float>(lambda * static_cast<double>(ta.data[i]) +
                                      (1.0 - lambda) * static_cast<double>(tb.data[i]));
    }
  });
  m.tensors.metadata[kEncoderConfigKey] = nlohmann::json(m.config).dump();
  m.tensors.metadata["lambda"] = format_lambda(lambda);
  m.tensors.metadata["parent_a_digest"] = weights_digest(a);
  m.tensors.metadata["parent_b_digest"] = weights_digest(b);
  return m;
}

// interpolate(A, apply_plan(B, plan), lambda). parent_b_digest names the
// original B.
inline EncoderWeights merge(const EncoderWeights& a, const EncoderWeights& b,
                            const PermutationPlan& plan, double lambda) {
  EncoderWeights m = interpolate(a, apply_plan(b, plan), lambda);
  m.tensors.metadata["parent_b_digest"] = weights_digest(b);
  m.tensors.metadata["plan_digest"] = plan_digest(plan);
  return m;
}

// Uniformly random symmetry of every permutable slot: conv channels (whole
// group-norm groups at layer 0), head order, within-head channels and FFN
// hidden units. The qkv slot stays empty.
inline SymmetryPermutation random_symmetry(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed, 0x53594d4dULL);
  SymmetryPermutation s = PermutationPlan::identity(cfg, MergeKind::CnnFfnAttn);
  s.calibration_digest = "random_symmetry";
  for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
    const std::size_t c = cfg.conv_channels(l);
    if (l == 0 && cfg.groupnorm_groups != c) {
      const std::size_t g = cfg.groupnorm_groups;
      BlockPerm bp{rng.permutation(g), {}};
      for (std::size_t k = 0; k < g; ++k) bp.within.push_back(rng.permutation(c / g));
      s.conv[0] = bp.flatten();
    } else {
      s.conv[l] = rng.permutation(c);
    }
  }
  for (auto& layer : s.layers) {
    layer.attention.heads = rng.permutation(cfg.heads);
    for (auto& w : layer.attention.within) w = rng.permutation(cfg.head_dim());
    layer.ffn = rng.permutation(cfg.ffn_dim);
  }
  return s;
}

}  // namespace rebasin
