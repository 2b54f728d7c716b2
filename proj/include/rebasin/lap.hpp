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

// Exact maximum-weight linear assignment.
//
// solve_max runs the shortest-augmenting-path method (the Jonker-Volgenant
// family, O(n^3)) on costs max(score) - score, then canonicalizes the
// answer: among all optimal assignments it returns the lexicographically
// smallest perm. Any optimal assignment uses only edges whose reduced cost
// is zero under the final dual potentials, so the canonical answer is the
// lexicographically smallest perfect matching of that tight-edge graph.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "rebasin/error.hpp"
#include "rebasin/matrix.hpp"

namespace rebasin {

// perm[j] is the row (model A channel) assigned to column j (model B
// channel): B channel j moves to slot perm[j].
struct Assignment {
  std::vector<std::size_t> perm;
  double total = 0.0;
};

inline double assignment_total(const Matrix& score,
                               const std::vector<std::size_t>& perm) {
  double total = 0.0;
  for (std::size_t j = 0; j < perm.size(); ++j) total += score(perm[j], j);
  return total;
}

namespace detail {

inline void check_lap_input(const Matrix& score) {
  if (!score.square()) {
    throw ShapeError("assignment needs a square matrix, got " + score.shape());
  }
  for (double v : score.data) {
    if (!std::isfinite(v)) throw ValidationError("assignment matrix has a non-finite entry");
  }
}

// Tolerance below which two objective contributions count as equal.
inline double tie_tolerance(const Matrix& score) {
  double m = 1.0;
  for (double v : score.data) m = std::max(m, std::abs(v));
  return 1e-12 * m;
}

}  // namespace detail

inline Assignment solve_max(const Matrix& score) {
  detail::check_lap_input(score);
  const std::size_t n = score.rows;
  Assignment out;
  if (n == 0) return out;

  const double top = *std::max_element(score.data.begin(), score.data.end());
  auto cost = [&](std::size_t i, std::size_t j) { return top - score(i, j); };

  // 1-based arrays; row 0 / column 0 are sentinels.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> row_of_col(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = row_of_col[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> match(n), col_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) {
    match[j - 1] = row_of_col[j] - 1;
    col_of_row[row_of_col[j] - 1] = j - 1;
  }

  const double tol = detail::tie_tolerance(score);
  auto tight = [&](std::size_t i, std::size_t j) {
    return cost(i, j) - u[i + 1] - v[j + 1] <= tol;
  };

  // Canonicalize. Columns < j are locked. To move column j onto a smaller
  // tight row i (currently held by column j2 > j), column j2 must reach
  // j's old row through an alternating path over unlocked columns.
  std::vector<std::size_t> prev_col(n);
  std::vector<char> seen_row(n);
  std::vector<std::size_t> queue;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < match[j]; ++i) {
      const std::size_t j2 = col_of_row[i];
      if (j2 < j || !tight(i, j)) continue;
      const std::size_t target = match[j];
      // BFS over columns; prev_col[r] is the column that reached row r.
      std::fill(seen_row.begin(), seen_row.end(), 0);
      seen_row[i] = 1;
      queue.assign(1, j2);
      bool found = false;
      for (std::size_t qi = 0; qi < queue.size() && !found; ++qi) {
        const std::size_t c = queue[qi];
        for (std::size_t r = 0; r < n; ++r) {
          if (seen_row[r] || !tight(r, c)) continue;
          seen_row[r] = 1;
          prev_col[r] = c;
          if (r == target) {
            found = true;
            break;
          }
          const std::size_t next = col_of_row[r];
          if (next > j) queue.push_back(next);
        }
      }
      if (!found) continue;
      // Flip the path ending at target back to j2.
      std::size_t r = target;
      while (true) {
        const std::size_t c = prev_col[r];
        const std::size_t old_row = match[c];
        match[c] = r;
        col_of_row[r] = c;
        if (c == j2) break;
        r = old_row;
      }
      match[j] = i;
      col_of_row[i] = j;
      break;
    }
  }

  out.perm = std::move(match);
  out.total = assignment_total(score, out.perm);
  return out;
}

// Exhaustive search, n <= 8, same tie rule as solve_max: the
// lexicographically first permutation whose total is within tolerance of
// the maximum.
inline Assignment brute_force(const Matrix& score) {
  detail::check_lap_input(score);
  const std::size_t n = score.rows;
  if (n > 8) throw ValidationError("brute_force supports n <= 8");
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  double best = -std::numeric_limits<double>::infinity();
  do {
    best = std::max(best, assignment_total(score, p));
  } while (std::next_permutation(p.begin(), p.end()));
  const double slack = static_cast<double>(n) * detail::tie_tolerance(score);
  std::iota(p.begin(), p.end(), std::size_t{0});
  do {
    const double t = assignment_total(score, p);
    if (t >= best - slack) return {p, t};
  } while (std::next_permutation(p.begin(), p.end()));
  return {p, best};
}

}  // namespace rebasin
