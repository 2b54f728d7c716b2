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

// Per-tap permutations of model B, persisted as an MRG1 archive.
//
// Every permutation p follows one convention: p[j] is the destination slot
// of B's channel j (equivalently, the A channel that B channel j is matched
// with). Within-head permutations are indexed by destination head.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rebasin/encoder.hpp"
#include "rebasin/error.hpp"
#include "rebasin/tensor_store.hpp"

namespace rebasin {

using Perm = std::vector<std::size_t>;

inline Perm identity_perm(std::size_t n) {
  Perm p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

inline bool is_bijection(const Perm& p) {
  std::vector<char> seen(p.size(), 0);
  for (std::size_t v : p) {
    if (v >= p.size() || seen[v]) return false;
    seen[v] = 1;
  }
  return true;
}

inline bool is_identity(const Perm& p) {
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] != j) return false;
  }
  return true;
}

inline Perm inverse(const Perm& p) {
  Perm inv(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) inv[p[j]] = j;
  return inv;
}

// Applying `first` and then `second`: channel j ends at second[first[j]].
inline Perm then(const Perm& first, const Perm& second) {
  if (first.size() != second.size()) {
    throw ShapeError("cannot compose permutations of different sizes");
  }
  Perm r(first.size());
  for (std::size_t j = 0; j < first.size(); ++j) r[j] = second[first[j]];
  return r;
}

inline double fraction_moved(const Perm& p) {
  if (p.empty()) return 0.0;
  std::size_t moved = 0;
  for (std::size_t j = 0; j < p.size(); ++j) moved += (p[j] != j);
  return static_cast<double>(moved) / static_cast<double>(p.size());
}

// Block-structured permutation: block j moves to block heads[j], and inside
// destination block k channel c moves to within[k][c].
struct BlockPerm {
  Perm heads;
  std::vector<Perm> within;

  static BlockPerm identity(std::size_t blocks, std::size_t block_size) {
    return {identity_perm(blocks),
            std::vector<Perm>(blocks, identity_perm(block_size))};
  }

  std::size_t block_size() const { return within.empty() ? 0 : within[0].size(); }

  Perm flatten() const {
    const std::size_t s = block_size();
    Perm full(heads.size() * s);
    for (std::size_t j = 0; j < heads.size(); ++j) {
      const std::size_t k = heads[j];
      for (std::size_t c = 0; c < s; ++c) full[j * s + c] = k * s + within[k][c];
    }
    return full;
  }

  static BlockPerm from_flat(const Perm& full, std::size_t blocks) {
    if (blocks == 0 || full.size() % blocks != 0) {
      throw ShapeError("flat permutation does not split into blocks");
    }
    const std::size_t s = full.size() / blocks;
    BlockPerm bp{Perm(blocks), std::vector<Perm>(blocks, Perm(s))};
    for (std::size_t j = 0; j < blocks; ++j) {
      const std::size_t k = full[j * s] / s;
      bp.heads[j] = k;
      for (std::size_t c = 0; c < s; ++c) {
        const std::size_t dst = full[j * s + c];
        if (dst / s != k) {
          throw ValidationError("permutation splits block " + std::to_string(j) +
                                " across destination blocks");
        }
        bp.within[k][c] = dst % s;
      }
    }
    return bp;
  }
};

enum class MergeKind { Cnn, CnnFfOnly, CnnFfnAttn, CnnAll, FfnAttn };

inline std::string to_string(MergeKind k) {
  switch (k) {
    case MergeKind::Cnn: return "cnn";
    case MergeKind::CnnFfOnly: return "cnn_ff_only";
    case MergeKind::CnnFfnAttn: return "cnn_ffn_attn";
    case MergeKind::CnnAll: return "cnn_all";
    case MergeKind::FfnAttn: return "ffn_attn";
  }
  return "?";
}

inline MergeKind parse_merge_kind(const std::string& s) {
  if (s == "cnn") return MergeKind::Cnn;
  if (s == "cnn_ff_only") return MergeKind::CnnFfOnly;
  if (s == "cnn_ffn_attn") return MergeKind::CnnFfnAttn;
  if (s == "cnn_all") return MergeKind::CnnAll;
  if (s == "ffn_attn") return MergeKind::FfnAttn;
  throw ValidationError("unknown merge kind '" + s +
                        "' (cnn|cnn_ff_only|cnn_ffn_attn|cnn_all|ffn_attn)");
}

// Numeric ID of each configuration, as used in reports.
inline int table_id(MergeKind k) {
  switch (k) {
    case MergeKind::Cnn: return 6;
    case MergeKind::CnnFfOnly: return 7;
    case MergeKind::CnnFfnAttn: return 5;
    case MergeKind::CnnAll: return 8;
    case MergeKind::FfnAttn: return 9;
  }
  return 0;
}

inline bool uses_cnn(MergeKind k) { return k != MergeKind::FfnAttn; }
inline bool uses_ffn(MergeKind k) { return k != MergeKind::Cnn; }
inline bool uses_attention(MergeKind k) {
  return k == MergeKind::CnnFfnAttn || k == MergeKind::CnnAll || k == MergeKind::FfnAttn;
}
inline bool uses_qkv_all(MergeKind k) { return k == MergeKind::CnnAll; }

struct LayerPlan {
  BlockPerm attention;  // head order + within-head channels
  Perm ffn;             // hidden units
  // Row permutations of W^Q, W^K, W^V applied after everything else.
  // Only set for cnn_all; not a symmetry of the network.
  std::optional<std::array<Perm, 3>> qkv;
};

struct TapObjective {
  double plan = 0.0;      // correlation total under the chosen permutation
  double identity = 0.0;  // correlation trace with no permutation
};

struct PermutationPlan {
  MergeKind kind = MergeKind::CnnFfnAttn;
  std::vector<Perm> conv;
  std::vector<LayerPlan> layers;
  std::string calibration_digest;
  std::map<std::string, TapObjective> objective;

  bool non_symmetry() const {
    return std::any_of(layers.begin(), layers.end(),
                       [](const LayerPlan& l) { return l.qkv.has_value(); });
  }

  static PermutationPlan identity(const EncoderConfig& cfg,
                                  MergeKind kind = MergeKind::CnnFfnAttn) {
    PermutationPlan p;
    p.kind = kind;
    for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
      p.conv.push_back(identity_perm(cfg.conv_channels(l)));
    }
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      p.layers.push_back(
          {BlockPerm::identity(cfg.heads, cfg.head_dim()), identity_perm(cfg.ffn_dim), {}});
    }
    return p;
  }

  bool all_identity() const {
    for (const auto& c : conv) {
      if (!is_identity(c)) return false;
    }
    for (const auto& l : layers) {
      if (!is_identity(l.attention.flatten()) || !is_identity(l.ffn)) return false;
      if (l.qkv) {
        for (const auto& q : *l.qkv) {
          if (!is_identity(q)) return false;
        }
      }
    }
    return true;
  }

  // Shapes and bijectivity against `cfg`. Layer-0 conv permutations must
  // keep group-norm groups intact, or the plan stops being a symmetry.
  void validate(const EncoderConfig& cfg) const {
    auto check = [](const Perm& p, std::size_t n, const std::string& what) {
      if (p.size() != n) {
        throw ShapeError(what + " has " + std::to_string(p.size()) +
                         " entries, expected " + std::to_string(n));
      }
      if (!is_bijection(p)) throw ValidationError(what + " is not a permutation");
    };
    if (conv.size() != cfg.num_conv()) {
      throw ShapeError("plan has " + std::to_string(conv.size()) +
                       " conv layers, config has " + std::to_string(cfg.num_conv()));
    }
    for (std::size_t l = 0; l < conv.size(); ++l) {
      check(conv[l], cfg.conv_channels(l), "conv perm " + std::to_string(l));
    }
    const std::size_t groups = cfg.groupnorm_groups;
    if (groups != cfg.conv_channels(0)) {
      BlockPerm::from_flat(conv[0], groups);  // throws if groups are split
    }
    if (layers.size() != cfg.num_layers) {
      throw ShapeError("plan has " + std::to_string(layers.size()) +
                       " transformer layers, config has " +
                       std::to_string(cfg.num_layers));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string at = "layer " + std::to_string(i);
      check(l.attention.heads, cfg.heads, at + " head perm");
      if (l.attention.within.size() != cfg.heads) {
        throw ShapeError(at + " needs one within-head perm per head");
      }
      for (std::size_t k = 0; k < cfg.heads; ++k) {
        check(l.attention.within[k], cfg.head_dim(),
              at + " within-head perm " + std::to_string(k));
      }
      check(l.ffn, cfg.ffn_dim, at + " ffn perm");
      if (l.qkv) {
        for (std::size_t m = 0; m < 3; ++m) {
          check((*l.qkv)[m], cfg.model_dim, at + " qkv perm " + std::to_string(m));
        }
      }
    }
  }

  // Slot-wise inverse of the symmetry slots. qkv overrides do not invert.
  PermutationPlan inverse() const {
    if (non_symmetry()) throw ValidationError("cannot invert a plan with qkv overrides");
    PermutationPlan r = *this;
    for (auto& c : r.conv) c = rebasin::inverse(c);
    for (auto& l : r.layers) {
      l.attention = BlockPerm::from_flat(rebasin::inverse(l.attention.flatten()),
                                         l.attention.heads.size());
      l.ffn = rebasin::inverse(l.ffn);
    }
    r.objective.clear();
    return r;
  }

  // The plan equivalent to applying *this and then `next`.
  PermutationPlan then(const PermutationPlan& next) const {
    if (non_symmetry() || next.non_symmetry()) {
      throw ValidationError("cannot compose plans with qkv overrides");
    }
    if (conv.size() != next.conv.size() || layers.size() != next.layers.size()) {
      throw ShapeError("cannot compose plans for different encoders");
    }
    PermutationPlan r = *this;
    for (std::size_t l = 0; l < conv.size(); ++l) {
      r.conv[l] = rebasin::then(conv[l], next.conv[l]);
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      r.layers[i].attention = BlockPerm::from_flat(
          rebasin::then(layers[i].attention.flatten(), next.layers[i].attention.flatten()),
          layers[i].attention.heads.size());
      r.layers[i].ffn = rebasin::then(layers[i].ffn, next.layers[i].ffn);
    }
    r.objective.clear();
    return r;
  }

  bool same_permutations(const PermutationPlan& o) const {
    if (conv != o.conv || layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      const auto& b = o.layers[i];
      if (a.attention.heads != b.attention.heads || a.attention.within != b.attention.within ||
          a.ffn != b.ffn || a.qkv != b.qkv) {
        return false;
      }
    }
    return true;
  }
};

// A weight-space symmetry of the encoder. Shares the plan layout; the qkv
// slot is never populated.
using SymmetryPermutation = PermutationPlan;

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline Tensor perm_tensor(const Perm& p) {
  Tensor t({p.size()}, std::vector<float>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) t.data[i] = static_cast<float>(p[i]);
  return t;
}

inline Perm tensor_perm(const TensorArchive& a, const std::string& name) {
  const Tensor& t = a.at(name);
  if (t.rank() != 1) throw FormatError("'" + name + "' must be a 1-D index vector");
  Perm p(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t.data[i];
    if (!(v >= 0.0f) || v != std::floor(v) || v >= static_cast<float>(t.size())) {
      throw FormatError("'" + name + "' holds a non-index value");
    }
    p[i] = static_cast<std::size_t>(v);
  }
  if (!is_bijection(p)) throw FormatError("'" + name + "' is not a permutation");
  return p;
}

inline std::string plan_layer(std::size_t i, const std::string& rest) {
  return "plan.layer." + std::to_string(i) + "." + rest;
}

}  // namespace detail

inline TensorArchive plan_to_archive(const PermutationPlan& plan) {
  TensorArchive a;
  for (std::size_t l = 0; l < plan.conv.size(); ++l) {
    a.entries["plan.conv." + std::to_string(l)] = detail::perm_tensor(plan.conv[l]);
  }
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const auto& l = plan.layers[i];
    a.entries[detail::plan_layer(i, "heads")] = detail::perm_tensor(l.attention.heads);
    for (std::size_t k = 0; k < l.attention.within.size(); ++k) {
      a.entries[detail::plan_layer(i, "within." + std::to_string(k))] =
          detail::perm_tensor(l.attention.within[k]);
    }
    a.entries[detail::plan_layer(i, "ffn")] = detail::perm_tensor(l.ffn);
    if (l.qkv) {
      const char* tag[3] = {"q", "k", "v"};
      for (std::size_t m = 0; m < 3; ++m) {
        a.entries[detail::plan_layer(i, std::string("qkv.") + tag[m])] =
            detail::perm_tensor((*l.qkv)[m]);
      }
    }
  }
  nlohmann::json obj = nlohmann::json::object();
  for (const auto& [tap, o] : plan.objective) {
    obj[tap] = {{"plan", o.plan}, {"identity", o.identity}};
  }
  a.metadata["kind"] = to_string(plan.kind);
  a.metadata["table_id"] = std::to_string(table_id(plan.kind));
  a.metadata["calibration_digest"] = plan.calibration_digest;
  a.metadata["objective"] = obj.dump();
  a.metadata["within_head_index"] = "destination";
  a.metadata["non_symmetry"] = plan.non_symmetry() ? "true" : "false";
  a.metadata["conv_layers"] = std::to_string(plan.conv.size());
  a.metadata["transformer_layers"] = std::to_string(plan.layers.size());
  return a;
}

inline PermutationPlan plan_from_archive(const TensorArchive& a) {
  PermutationPlan p;
  p.kind = parse_merge_kind(a.meta("kind"));
  if (a.meta("within_head_index") != "destination") {
    throw FormatError("unsupported within_head_index convention");
  }
  p.calibration_digest = a.meta("calibration_digest");
  std::size_t n_conv = 0, n_layers = 0;
  try {
    n_conv = std::stoul(a.meta("conv_layers"));
    n_layers = std::stoul(a.meta("transformer_layers"));
  } catch (const std::logic_error&) {
    throw FormatError("plan layer counts are not integers");
  }
  for (std::size_t l = 0; l < n_conv; ++l) {
    p.conv.push_back(detail::tensor_perm(a, "plan.conv." + std::to_string(l)));
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    LayerPlan l;
    l.attention.heads = detail::tensor_perm(a, detail::plan_layer(i, "heads"));
    for (std::size_t k = 0; k < l.attention.heads.size(); ++k) {
      l.attention.within.push_back(
          detail::tensor_perm(a, detail::plan_layer(i, "within." + std::to_string(k))));
    }
    l.ffn = detail::tensor_perm(a, detail::plan_layer(i, "ffn"));
    if (a.contains(detail::plan_layer(i, "qkv.q"))) {
      l.qkv = std::array<Perm, 3>{detail::tensor_perm(a, detail::plan_layer(i, "qkv.q")),
                                  detail::tensor_perm(a, detail::plan_layer(i, "qkv.k")),
                                  detail::tensor_perm(a, detail::plan_layer(i, "qkv.v"))};
    }
    p.layers.push_back(std::move(l));
  }
  try {
    const auto obj = nlohmann::json::parse(a.meta("objective"));
    for (const auto& [tap, o] : obj.items()) {
      p.objective[tap] = {o.at("plan").get<double>(), o.at("identity").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad plan objective metadata: ") + e.what());
  }
  return p;
}

inline std::string plan_digest(const PermutationPlan& plan) {
  return archive_digest(plan_to_archive(plan));
}

// ---------------------------------------------------------------------------
// Report: fraction of channels that moved, per network section.

struct PlanReport {
  MergeKind kind = MergeKind::Cnn;
  double cnn_layer0 = 0.0;
  double cnn_rest = 0.0;     // mean over conv layers 1..L-1
  double attention = 0.0;    // mean over layers of the flattened head perm
  double head_order = 0.0;   // mean over layers of the head-order perm
  double ffn = 0.0;
  std::optional<double> qkv;  // cnn_all only
  std::vector<double> per_conv;
  std::vector<double> per_layer_attention;
  std::vector<double> per_layer_ffn;

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)},
                     {"table_id", table_id(kind)},
                     {"cnn_layer0", cnn_layer0},
                     {"cnn_rest", cnn_rest},
                     {"attention", attention},
                     {"head_order", head_order},
                     {"ffn", ffn},
                     {"per_conv", per_conv},
                     {"per_layer_attention", per_layer_attention},
                     {"per_layer_ffn", per_layer_ffn}};
    if (qkv) j["qkv"] = *qkv;
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    auto row = [&](const std::string& name, double v) {
      os << std::left << std::setw(22) << name << std::right << std::setw(8)
         << 100.0 * v << " %\n";
    };
    os << "section               permuted\n";
    row("cnn layer 0", cnn_layer0);
    row("cnn layers 1..L-1", cnn_rest);
    row("attention (heads+ch)", attention);
    row("attention head order", head_order);
    row("ffn", ffn);
    if (qkv) row("qkv overrides", *qkv);
    return os.str();
  }
};

inline PlanReport plan_report(const PermutationPlan& plan) {
  PlanReport r;
  r.kind = plan.kind;
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  for (const auto& c : plan.conv) r.per_conv.push_back(fraction_moved(c));
  if (!r.per_conv.empty()) {
    r.cnn_layer0 = r.per_conv[0];
    r.cnn_rest = mean({r.per_conv.begin() + 1, r.per_conv.end()});
  }
  std::vector<double> heads, qkv;
  for (const auto& l : plan.layers) {
    r.per_layer_attention.push_back(fraction_moved(l.attention.flatten()));
    heads.push_back(fraction_moved(l.attention.heads));
    r.per_layer_ffn.push_back(fraction_moved(l.ffn));
    if (l.qkv) {
      for (const auto& q : *l.qkv) qkv.push_back(fraction_moved(q));
    }
  }
  r.attention = mean(r.per_layer_attention);
  r.head_order = mean(heads);
  r.ffn = mean(r.per_layer_ffn);
  if (!qkv.empty()) r.qkv = mean(qkv);
  return r;
}

}  // namespace rebasin
