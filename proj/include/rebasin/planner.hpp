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

// Builds a PermutationPlan by correlating the activations of two encoders
// on shared calibration batches and solving one assignment per tap.
//
// Statistics come from a single unmodified forward pass per model. Solving
// layer by layer while un-permuting activations before the next layer
// yields the same statistics, because each tap's correlation only depends
// on the original activations of both models at that tap.

#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rebasin/calibration.hpp"
#include "rebasin/corr_stats.hpp"
#include "rebasin/encoder.hpp"
#include "rebasin/error.hpp"
#include "rebasin/lap.hpp"
#include "rebasin/parallel.hpp"
#include "rebasin/plan.hpp"

namespace rebasin {

// Head index that stands for "all heads of the layer, concatenated".
inline constexpr std::size_t kAllHeads = std::numeric_limits<std::size_t>::max();

// Statistic sites. Attention uses head_out(layer, kAllHeads).
inline TapPoint attention_site(std::size_t layer) {
  return {TapKind::HeadOut, layer, kAllHeads};
}

inline std::string site_name(const TapPoint& p) {
  if (p.kind == TapKind::HeadOut && p.head == kAllHeads) {
    return "head_out(" + std::to_string(p.layer) + ",*)";
  }
  return p.to_string();
}

inline std::vector<TapPoint> cnn_sites(const EncoderConfig& cfg) {
  std::vector<TapPoint> s{TapPoint::conv_gn_out()};
  for (std::size_t l = 1; l < cfg.num_conv(); ++l) s.push_back(TapPoint::conv_out(l));
  return s;
}

inline std::vector<TapPoint> plan_sites(const EncoderConfig& cfg, MergeKind kind) {
  std::vector<TapPoint> s;
  if (uses_cnn(kind)) s = cnn_sites(cfg);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    if (uses_attention(kind)) s.push_back(attention_site(i));
    if (uses_ffn(kind)) s.push_back(TapPoint::ffn_hidden(i));
    if (uses_qkv_all(kind)) {
      s.push_back(TapPoint::q_out(i));
      s.push_back(TapPoint::k_out(i));
      s.push_back(TapPoint::v_out(i));
    }
  }
  return s;
}

inline std::size_t site_channels(const TapPoint& p, const EncoderConfig& cfg) {
  if (p.kind == TapKind::HeadOut && p.head == kAllHeads) return cfg.model_dim;
  return p.channels(cfg);
}

struct PlannerOptions {
  // Each site needs at least this many positions per channel.
  std::size_t min_positions_per_channel = 10;
};

using SiteStats = std::map<TapPoint, CorrAccumulator>;

namespace detail {

// [C, B*T] view of one site from a forward result.
inline Tensor site_rows(const TapPoint& site, const ForwardResult& r,
                        const EncoderConfig& cfg) {
  if (site.kind == TapKind::HeadOut && site.head == kAllHeads) {
    std::vector<Tensor> parts;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      parts.push_back(reshape_channels_major(r.taps.at(TapPoint::head_out(site.layer, h)), false));
    }
    const std::size_t n = parts[0].dim(1);
    Tensor out = Tensor::zeros({cfg.model_dim, n});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      std::copy(parts[h].data.begin(), parts[h].data.end(),
                out.data.begin() + h * cfg.head_dim() * n);
    }
    return out;
  }
  return reshape_channels_major(r.taps.at(site), site.channels_first());
}

inline TapSet taps_for_sites(const std::vector<TapPoint>& sites, const EncoderConfig& cfg) {
  TapSet taps;
  for (const auto& s : sites) {
    if (s.kind == TapKind::HeadOut && s.head == kAllHeads) {
      for (std::size_t h = 0; h < cfg.heads; ++h) taps.insert(TapPoint::head_out(s.layer, h));
    } else {
      taps.insert(s);
    }
  }
  return taps;
}

}  // namespace detail

inline void check_same_config(const EncoderWeights& a, const EncoderWeights& b) {
  if (!(a.config == b.config)) {
    throw ValidationError("model A and model B have different encoder configs");
  }
}

// Runs both encoders on every batch and accumulates A-vs-B statistics at
// each site. Rows of each matrix are A channels, columns are B channels.
inline SiteStats gather_statistics(const EncoderWeights& a, const EncoderWeights& b,
                                   std::span<const Tensor> batches,
                                   const std::vector<TapPoint>& sites,
                                   const PlannerOptions& options = {}) {
  check_same_config(a, b);
  const auto& cfg = a.config;
  const TapSet taps = detail::taps_for_sites(sites, cfg);
  SiteStats stats;
  for (const auto& s : sites) {
    const std::size_t c = site_channels(s, cfg);
    stats.emplace(s, CorrAccumulator(c, c));
  }
  for (const auto& batch : batches) {
    const ForwardResult ra = forward_with_taps(a, batch, taps);
    const ForwardResult rb = forward_with_taps(b, batch, taps);
    parallel_for(sites.size(), [&](std::size_t i) {
      const auto& s = sites[i];
      stats.at(s).update(detail::site_rows(s, ra, cfg), detail::site_rows(s, rb, cfg));
    });
  }
  for (const auto& s : sites) {
    const auto& acc = stats.at(s);
    const std::size_t c = site_channels(s, cfg);
    const std::size_t need = options.min_positions_per_channel * c;
    if (acc.n() < need) {
      throw ValidationError("calibration too small at tap " + site_name(s) + ": " +
                            std::to_string(acc.n()) + " positions, need >= " +
                            std::to_string(need));
    }
    const auto [live_a, live_b] = acc.live_channels();
    if (live_a == 0 || live_b == 0) {
      throw ValidationError("degenerate calibration at tap " + site_name(s) +
                            ": every channel is constant");
    }
  }
  return stats;
}

// Two-level assignment over a block-structured correlation matrix (rows A,
// columns B). quality(k, j) is the best within-block total when B block j
// is matched to A block k; the outer assignment picks the block matching
// and each matched pair keeps its inner assignment.
struct BlockAssignment {
  BlockPerm perm;
  Matrix quality;
  double total = 0.0;
};

inline Matrix sub_block(const Matrix& m, std::size_t row0, std::size_t col0, std::size_t size) {
  Matrix s(size, size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) s(r, c) = m(row0 + r, col0 + c);
  }
  return s;
}

inline BlockAssignment solve_blocks(const Matrix& corr, std::size_t blocks) {
  if (!corr.square() || blocks == 0 || corr.rows % blocks != 0) {
    throw ShapeError("block assignment needs a square matrix divisible into blocks");
  }
  const std::size_t s = corr.rows / blocks;
  BlockAssignment out;
  out.quality = Matrix(blocks, blocks);
  std::vector<std::vector<Perm>> inner(blocks, std::vector<Perm>(blocks));
  for (std::size_t k = 0; k < blocks; ++k) {
    for (std::size_t j = 0; j < blocks; ++j) {
      Assignment a = solve_max(sub_block(corr, k * s, j * s, s));
      out.quality(k, j) = a.total;
      inner[k][j] = std::move(a.perm);
    }
  }
  const Assignment outer = solve_max(out.quality);
  out.perm.heads = outer.perm;
  out.perm.within.assign(blocks, Perm());
  for (std::size_t j = 0; j < blocks; ++j) {
    const std::size_t k = outer.perm[j];
    out.perm.within[k] = inner[k][j];
  }
  out.total = outer.total;
  return out;
}

inline double trace(const Matrix& m) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(m.rows, m.cols); ++i) t += m(i, i);
  return t;
}

namespace detail {

inline void record(PermutationPlan& plan, const TapPoint& site, double total,
                   const Matrix& corr) {
  plan.objective[site_name(site)] = {total, trace(corr)};
}

inline void solve_cnn(const SiteStats& stats, const EncoderConfig& cfg,
                      PermutationPlan& plan) {
  for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
    const TapPoint site = l == 0 ? TapPoint::conv_gn_out() : TapPoint::conv_out(l);
    const Matrix corr = stats.at(site).correlation_matrix();
    if (l == 0 && cfg.groupnorm_groups != cfg.conv_channels(0)) {
      // Channels may only move between whole group-norm groups.
      const auto blocks = solve_blocks(corr, cfg.groupnorm_groups);
      plan.conv[0] = blocks.perm.flatten();
      record(plan, site, blocks.total, corr);
    } else {
      const Assignment a = solve_max(corr);
      plan.conv[l] = a.perm;
      record(plan, site, a.total, corr);
    }
  }
}

inline void solve_attention(const SiteStats& stats, const EncoderConfig& cfg,
                            PermutationPlan& plan) {
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const TapPoint site = attention_site(i);
    const Matrix corr = stats.at(site).correlation_matrix();
    auto blocks = solve_blocks(corr, cfg.heads);
    plan.layers[i].attention = std::move(blocks.perm);
    record(plan, site, blocks.total, corr);
  }
}

inline void solve_ffn(const SiteStats& stats, const EncoderConfig& cfg,
                      PermutationPlan& plan) {
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const TapPoint site = TapPoint::ffn_hidden(i);
    const Matrix corr = stats.at(site).correlation_matrix();
    const Assignment a = solve_max(corr);
    plan.layers[i].ffn = a.perm;
    record(plan, site, a.total, corr);
  }
}

inline void solve_qkv_all(const SiteStats& stats, const EncoderConfig& cfg,
                          PermutationPlan& plan) {
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    std::array<Perm, 3> perms;
    const TapPoint sites[3] = {TapPoint::q_out(i), TapPoint::k_out(i), TapPoint::v_out(i)};
    for (std::size_t m = 0; m < 3; ++m) {
      const Matrix corr = stats.at(sites[m]).correlation_matrix();
      const Assignment a = solve_max(corr);
      perms[m] = a.perm;
      record(plan, sites[m], a.total, corr);
    }
    plan.layers[i].qkv = std::move(perms);
  }
}

}  // namespace detail

inline PermutationPlan build_plan(const EncoderWeights& a, const EncoderWeights& b,
                                  MergeKind kind, std::span<const Tensor> batches,
                                  const std::string& calibration_digest,
                                  const PlannerOptions& options = {}) {
  check_same_config(a, b);
  const auto& cfg = a.config;
  const auto sites = plan_sites(cfg, kind);
  const SiteStats stats = gather_statistics(a, b, batches, sites, options);
  PermutationPlan plan = PermutationPlan::identity(cfg, kind);
  plan.calibration_digest = calibration_digest;
  if (uses_cnn(kind)) detail::solve_cnn(stats, cfg, plan);
  if (uses_attention(kind)) detail::solve_attention(stats, cfg, plan);
  if (uses_ffn(kind)) detail::solve_ffn(stats, cfg, plan);
  if (uses_qkv_all(kind)) detail::solve_qkv_all(stats, cfg, plan);
  return plan;
}

inline PermutationPlan build_plan(const EncoderWeights& a, const EncoderWeights& b,
                                  MergeKind kind, const CalibrationSpec& calib,
                                  const PlannerOptions& options = {}) {
  const auto data = batches(calib, a.config.receptive_field());
  return build_plan(a, b, kind, data, calibration_digest(calib), options);
}

// Single-section planners. Each runs its own calibration pass.

inline std::vector<Perm> plan_cnn(const EncoderWeights& a, const EncoderWeights& b,
                                  std::span<const Tensor> batches,
                                  const PlannerOptions& options = {}) {
  const auto stats = gather_statistics(a, b, batches, cnn_sites(a.config), options);
  PermutationPlan plan = PermutationPlan::identity(a.config, MergeKind::Cnn);
  detail::solve_cnn(stats, a.config, plan);
  return plan.conv;
}

inline std::vector<BlockPerm> plan_attention(const EncoderWeights& a, const EncoderWeights& b,
                                             std::span<const Tensor> batches,
                                             const PlannerOptions& options = {}) {
  std::vector<TapPoint> sites;
  for (std::size_t i = 0; i < a.config.num_layers; ++i) sites.push_back(attention_site(i));
  const auto stats = gather_statistics(a, b, batches, sites, options);
  PermutationPlan plan = PermutationPlan::identity(a.config);
  detail::solve_attention(stats, a.config, plan);
  std::vector<BlockPerm> out;
  for (auto& l : plan.layers) out.push_back(std::move(l.attention));
  return out;
}

inline std::vector<Perm> plan_ffn(const EncoderWeights& a, const EncoderWeights& b,
                                  std::span<const Tensor> batches,
                                  const PlannerOptions& options = {}) {
  std::vector<TapPoint> sites;
  for (std::size_t i = 0; i < a.config.num_layers; ++i) sites.push_back(TapPoint::ffn_hidden(i));
  const auto stats = gather_statistics(a, b, batches, sites, options);
  PermutationPlan plan = PermutationPlan::identity(a.config);
  detail::solve_ffn(stats, a.config, plan);
  std::vector<Perm> out;
  for (auto& l : plan.layers) out.push_back(std::move(l.ffn));
  return out;
}

inline std::vector<std::array<Perm, 3>> plan_qkv_all(const EncoderWeights& a,
                                                     const EncoderWeights& b,
                                                     std::span<const Tensor> batches,
                                                     const PlannerOptions& options = {}) {
  std::vector<TapPoint> sites;
  for (std::size_t i = 0; i < a.config.num_layers; ++i) {
    sites.push_back(TapPoint::q_out(i));
    sites.push_back(TapPoint::k_out(i));
    sites.push_back(TapPoint::v_out(i));
  }
  const auto stats = gather_statistics(a, b, batches, sites, options);
  PermutationPlan plan = PermutationPlan::identity(a.config, MergeKind::CnnAll);
  detail::solve_qkv_all(stats, a.config, plan);
  std::vector<std::array<Perm, 3>> out;
  for (auto& l : plan.layers) out.push_back(*l.qkv);
  return out;
}

}  // namespace rebasin
