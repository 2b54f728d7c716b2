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

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rebasin/encoder.hpp"
#include "rebasin/error.hpp"
#include "rebasin/merger.hpp"
#include "rebasin/plan.hpp"

namespace rebasin {

struct Distance {
  double mse = 0.0;
  double max_abs = 0.0;
};

namespace detail {

inline std::vector<Tensor> battery_outputs(const EncoderWeights& w,
                                           std::span<const Tensor> battery) {
  std::vector<Tensor> out;
  out.reserve(battery.size());
  for (const auto& b : battery) out.push_back(forward(w, b));
  return out;
}

inline Distance output_distance(std::span<const Tensor> x, std::span<const Tensor> y) {
  Distance d;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].shape != y[i].shape) throw ShapeError("output shapes differ");
    for (std::size_t k = 0; k < x[i].size(); ++k) {
      const double e = static_cast<double>(x[i].data[k]) - y[i].data[k];
      d.mse += e * e;
      d.max_abs = std::max(d.max_abs, std::abs(e));
    }
    count += x[i].size();
  }
  if (count) d.mse /= static_cast<double>(count);
  return d;
}

}  // namespace detail

// Mean-squared and max-abs difference of the two encoders' output features
// over every clip and frame of the battery.
inline Distance functional_distance(const EncoderWeights& w1, const EncoderWeights& w2,
                                    std::span<const Tensor> battery) {
  if (!(w1.config == w2.config)) throw ValidationError("encoders have different configs");
  if (battery.empty()) throw ValidationError("battery is empty");
  const auto o1 = detail::battery_outputs(w1, battery);
  const auto o2 = detail::battery_outputs(w2, battery);
  return detail::output_distance(o1, o2);
}

// Output-space stand-in for a loss barrier along the interpolation path.
struct BarrierCurve {
  std::vector<double> lambdas;
  std::vector<double> dist_to_a;
  std::vector<double> dist_to_b;
  double peak_excess = 0.0;  // max over lambda of min(dist_to_a, dist_to_b)

  nlohmann::json to_json() const {
    return {{"lambdas", lambdas},
            {"dist_to_a", dist_to_a},
            {"dist_to_b", dist_to_b},
            {"peak_excess", peak_excess}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "lambda,dist_to_a,dist_to_b\n";
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      os << lambdas[i] << "," << dist_to_a[i] << "," << dist_to_b[i] << "\n";
    }
    return os.str();
  }
};

inline std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

// Merges at each lambda (with `plan`, or the identity plan) and measures
// output MSE against both ends of the path. The B end is apply_plan(B), the
// model the path actually starts from at lambda = 0.
inline BarrierCurve barrier_curve(const EncoderWeights& a, const EncoderWeights& b,
                                  const std::optional<PermutationPlan>& plan,
                                  std::span<const double> lambdas,
                                  std::span<const Tensor> battery) {
  if (battery.empty()) throw ValidationError("battery is empty");
  if (lambdas.empty()) throw ValidationError("lambda grid is empty");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("lambda grid must lie in [0, 1]");
  }
  const EncoderWeights b_aligned =
      apply_plan(b, plan ? *plan : PermutationPlan::identity(b.config));
  const auto out_a = detail::battery_outputs(a, battery);
  const auto out_b = detail::battery_outputs(b_aligned, battery);
  BarrierCurve c;
  for (double l : lambdas) {
    const auto out_m = detail::battery_outputs(interpolate(a, b_aligned, l), battery);
    c.lambdas.push_back(l);
    c.dist_to_a.push_back(detail::output_distance(out_m, out_a).mse);
    c.dist_to_b.push_back(detail::output_distance(out_m, out_b).mse);
    c.peak_excess = std::max(c.peak_excess, std::min(c.dist_to_a.back(), c.dist_to_b.back()));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Normalized benchmark score: 1000/|T| * sum_t (u - fbank) / (best - fbank).
// Lower-is-better metrics need no flag: numerator and denominator change
// sign together.

struct ScoreInput {
  std::string task;
  double u = 0.0;
  double fbank = 0.0;
  double best = 0.0;
};

inline double superb_score(std::span<const ScoreInput> tasks) {
  if (tasks.empty()) throw ValidationError("score needs at least one task");
  double sum = 0.0;
  for (const auto& t : tasks) {
    const double denom = t.best - t.fbank;
    if (denom == 0.0) {
      throw ValidationError("task '" + t.task + "' has best == fbank");
    }
    sum += (t.u - t.fbank) / denom;
  }
  return 1000.0 / static_cast<double>(tasks.size()) * sum;
}

inline std::vector<ScoreInput> parse_score_inputs(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw ValidationError("score input must be a JSON array");
    std::vector<ScoreInput> out;
    for (const auto& e : j) {
      out.push_back({e.value("task", std::string()), e.at("u").get<double>(),
                     e.at("fbank").get<double>(), e.at("best").get<double>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad score input JSON: ") + e.what());
  }
}

}  // namespace rebasin
