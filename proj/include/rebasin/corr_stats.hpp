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

// Streaming Pearson cross-correlation between the channels of two
// activation streams observed at the same positions.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rebasin/error.hpp"
#include "rebasin/matrix.hpp"
#include "rebasin/tensor_store.hpp"

namespace rebasin {

// Flattens an activation tensor to [C, B*T]. Row c lists sample 0's time
// series for channel c, then sample 1's, and so on.
//   channels_first: input [B, C, T]
//   otherwise:      input [B, T, C]
inline Tensor reshape_channels_major(const Tensor& act, bool channels_first) {
  if (act.rank() != 3) {
    throw ShapeError("activation must be rank 3, got " + shape_string(act.shape));
  }
  const std::size_t b = act.dim(0);
  const std::size_t c = channels_first ? act.dim(1) : act.dim(2);
  const std::size_t t = channels_first ? act.dim(2) : act.dim(1);
  Tensor out = Tensor::zeros({c, b * t});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* dst = out.data.data() + ch * b * t + s * t;
      if (channels_first) {
        const float* src = act.data.data() + (s * c + ch) * t;
        std::copy(src, src + t, dst);
      } else {
        for (std::size_t i = 0; i < t; ++i) dst[i] = act.data[(s * t + i) * c + ch];
      }
    }
  }
  return out;
}

// Population statistics with a 1e-8 floor on the standard deviation;
// channels below the floor are treated as constant.
inline constexpr double kStdFloor = 1e-8;

class CorrAccumulator {
 public:
  CorrAccumulator() = default;
  CorrAccumulator(std::size_t c_a, std::size_t c_b)
      : c_a_(c_a), c_b_(c_b), sum_a_(c_a), sum_b_(c_b), sumsq_a_(c_a),
        sumsq_b_(c_b), cross_(c_a * c_b) {}

  std::size_t c_a() const { return c_a_; }
  std::size_t c_b() const { return c_b_; }
  std::uint64_t n() const { return n_; }
  const std::vector<double>& sum_a() const { return sum_a_; }
  const std::vector<double>& sum_b() const { return sum_b_; }
  const std::vector<double>& sumsq_a() const { return sumsq_a_; }
  const std::vector<double>& sumsq_b() const { return sumsq_b_; }
  const std::vector<double>& cross() const { return cross_; }

  // a: [c_a, N], b: [c_b, N], both channel-major over the same positions.
  void update(std::span<const float> a, std::span<const float> b, std::size_t positions) {
    if (a.size() != c_a_ * positions || b.size() != c_b_ * positions) {
      throw ShapeError("update expects [" + std::to_string(c_a_) + ", N] and [" +
                       std::to_string(c_b_) + ", N] with N = " +
                       std::to_string(positions));
    }
    if (positions == 0) return;
    std::vector<double> bd(b.begin(), b.end());
    std::vector<double> row(positions);
    for (std::size_t j = 0; j < c_b_; ++j) {
      const double* bj = bd.data() + j * positions;
      double s = 0.0, sq = 0.0;
      for (std::size_t t = 0; t < positions; ++t) {
        s += bj[t];
        sq += bj[t] * bj[t];
      }
      sum_b_[j] += s;
      sumsq_b_[j] += sq;
    }
    for (std::size_t i = 0; i < c_a_; ++i) {
      const float* ai = a.data() + i * positions;
      double s = 0.0, sq = 0.0;
      for (std::size_t t = 0; t < positions; ++t) {
        row[t] = ai[t];
        s += row[t];
        sq += row[t] * row[t];
      }
      sum_a_[i] += s;
      sumsq_a_[i] += sq;
      double* out = cross_.data() + i * c_b_;
      for (std::size_t j = 0; j < c_b_; ++j) {
        const double* bj = bd.data() + j * positions;
        double acc = 0.0;
        for (std::size_t t = 0; t < positions; ++t) acc += row[t] * bj[t];
        out[j] += acc;
      }
    }
    n_ += positions;
  }

  void update(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
      throw ShapeError("update expects channel-major [C, N] tensors");
    }
    if (a.dim(1) != b.dim(1)) {
      throw ShapeError("position count mismatch: " + std::to_string(a.dim(1)) +
                       " vs " + std::to_string(b.dim(1)));
    }
    if (a.dim(0) != c_a_ || b.dim(0) != c_b_) {
      throw ShapeError("channel count mismatch with accumulator");
    }
    update(a.data, b.data, a.dim(1));
  }

  // Sum of both streams' statistics.
  static CorrAccumulator combine(const CorrAccumulator& x, const CorrAccumulator& y) {
    if (x.c_a_ != y.c_a_ || x.c_b_ != y.c_b_) {
      throw ShapeError("cannot combine accumulators of different shapes");
    }
    CorrAccumulator r(x.c_a_, x.c_b_);
    r.n_ = x.n_ + y.n_;
    auto add = [](std::vector<double>& dst, const std::vector<double>& p,
                  const std::vector<double>& q) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = p[i] + q[i];
    };
    add(r.sum_a_, x.sum_a_, y.sum_a_);
    add(r.sum_b_, x.sum_b_, y.sum_b_);
    add(r.sumsq_a_, x.sumsq_a_, y.sumsq_a_);
    add(r.sumsq_b_, x.sumsq_b_, y.sumsq_b_);
    add(r.cross_, x.cross_, y.cross_);
    return r;
  }

  // Pearson matrix [c_a, c_b], clamped to [-1, 1]. Rows/columns of
  // constant channels are exactly 0.
  Matrix correlation_matrix() const {
    if (n_ < 2) {
      throw ValidationError("correlation needs at least 2 positions, have " +
                            std::to_string(n_));
    }
    const double n = static_cast<double>(n_);
    std::vector<double> mean_a(c_a_), std_a(c_a_), mean_b(c_b_), std_b(c_b_);
    auto moments = [n](const std::vector<double>& s, const std::vector<double>& sq,
                       std::vector<double>& mean, std::vector<double>& sd) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        mean[i] = s[i] / n;
        sd[i] = std::sqrt(std::max(0.0, sq[i] / n - mean[i] * mean[i]));
      }
    };
    moments(sum_a_, sumsq_a_, mean_a, std_a);
    moments(sum_b_, sumsq_b_, mean_b, std_b);
    Matrix r(c_a_, c_b_);
    for (std::size_t i = 0; i < c_a_; ++i) {
      if (std_a[i] < kStdFloor) continue;
      for (std::size_t j = 0; j < c_b_; ++j) {
        if (std_b[j] < kStdFloor) continue;
        const double cov = cross_[i * c_b_ + j] / n - mean_a[i] * mean_b[j];
        r(i, j) = std::clamp(cov / (std_a[i] * std_b[j]), -1.0, 1.0);
      }
    }
    return r;
  }

  // Number of channels on each side whose std is above the floor.
  std::pair<std::size_t, std::size_t> live_channels() const {
    if (n_ == 0) return {0, 0};
    const double n = static_cast<double>(n_);
    auto count = [n](const std::vector<double>& s, const std::vector<double>& sq) {
      std::size_t live = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double m = s[i] / n;
        if (std::sqrt(std::max(0.0, sq[i] / n - m * m)) >= kStdFloor) ++live;
      }
      return live;
    };
    return {count(sum_a_, sumsq_a_), count(sum_b_, sumsq_b_)};
  }

  // f64 values are stored as f32 triples (hi, mid, lo) whose f64 sum
  // reproduces the original exactly for magnitudes within f32 range.
  TensorArchive to_archive() const {
    TensorArchive a;
    auto put = [&](const std::string& name, const std::vector<double>& v,
                   std::vector<std::size_t> shape) {
      shape.push_back(3);
      Tensor t(std::move(shape), std::vector<float>(v.size() * 3));
      for (std::size_t i = 0; i < v.size(); ++i) {
        const float hi = static_cast<float>(v[i]);
        const double r1 = v[i] - static_cast<double>(hi);
        const float mid = static_cast<float>(r1);
        const float lo = static_cast<float>(r1 - static_cast<double>(mid));
        t.data[3 * i] = hi;
        t.data[3 * i + 1] = mid;
        t.data[3 * i + 2] = lo;
      }
      a.entries.emplace(name, std::move(t));
    };
    put("acc.sum_a", sum_a_, {c_a_});
    put("acc.sum_b", sum_b_, {c_b_});
    put("acc.sumsq_a", sumsq_a_, {c_a_});
    put("acc.sumsq_b", sumsq_b_, {c_b_});
    put("acc.cross", cross_, {c_a_, c_b_});
    a.metadata["n"] = std::to_string(n_);
    return a;
  }

  static CorrAccumulator from_archive(const TensorArchive& a) {
    const Tensor& cross = a.at("acc.cross");
    if (cross.rank() != 3 || cross.dim(2) != 3) {
      throw ShapeError("acc.cross must be [c_a, c_b, 3]");
    }
    CorrAccumulator acc(cross.dim(0), cross.dim(1));
    auto get = [&](const std::string& name, std::vector<double>& dst) {
      const Tensor& t = a.at(name);
      if (t.data.size() != dst.size() * 3) {
        throw ShapeError("'" + name + "' does not match the accumulator shape");
      }
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = (static_cast<double>(t.data[3 * i]) + t.data[3 * i + 1]) +
                 t.data[3 * i + 2];
      }
    };
    get("acc.sum_a", acc.sum_a_);
    get("acc.sum_b", acc.sum_b_);
    get("acc.sumsq_a", acc.sumsq_a_);
    get("acc.sumsq_b", acc.sumsq_b_);
    get("acc.cross", acc.cross_);
    try {
      acc.n_ = std::stoull(a.meta("n"));
    } catch (const std::logic_error&) {
      throw FormatError("accumulator metadata 'n' is not an integer");
    }
    return acc;
  }

 private:
  std::size_t c_a_ = 0;
  std::size_t c_b_ = 0;
  std::uint64_t n_ = 0;
  std::vector<double> sum_a_, sum_b_, sumsq_a_, sumsq_b_, cross_;
};

}  // namespace rebasin
