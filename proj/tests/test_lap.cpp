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

#include <gtest/gtest.h>

#include "rebasin/lap.hpp"
#include "rebasin/plan.hpp"
#include "test_util.hpp"

namespace rebasin {
namespace {

using testing::random_matrix;

TEST(Lap, IdentityDominant) {
  for (std::size_t n : {1u, 3u, 7u, 40u}) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    const Assignment a = solve_max(m);
    EXPECT_EQ(a.perm, identity_perm(n));
    EXPECT_EQ(a.total, static_cast<double>(n));
  }
}

TEST(Lap, EmptyAndSingleton) {
  EXPECT_TRUE(solve_max(Matrix(0, 0)).perm.empty());
  Matrix one(1, 1, -3.5);
  EXPECT_EQ(brute_force(one).perm, Perm{0});
  EXPECT_EQ(solve_max(one).perm, Perm{0});
}

TEST(Lap, AllEqualGivesIdentity) {
  for (std::size_t n = 1; n <= 8; ++n) {
    Matrix m(n, n, 0.25);
    EXPECT_EQ(brute_force(m).perm, identity_perm(n));
    EXPECT_EQ(solve_max(m).perm, identity_perm(n));
  }
}

TEST(Lap, Errors) {
  EXPECT_THROW(solve_max(Matrix(2, 3)), ShapeError);
  Matrix bad(2, 2);
  bad(1, 0) = NAN;
  EXPECT_THROW(solve_max(bad), ValidationError);
  bad(1, 0) = INFINITY;
  EXPECT_THROW(solve_max(bad), ValidationError);
  EXPECT_THROW(brute_force(Matrix(9, 9)), ValidationError);
}

TEST(Lap, MatchesBruteForceOnContinuousMatrices) {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix m = random_matrix(rng, 6);
    const Assignment fast = solve_max(m);
    const Assignment slow = brute_force(m);
    ASSERT_EQ(fast.perm, slow.perm) << "trial " << trial;
    ASSERT_EQ(fast.total, slow.total);
  }
}

TEST(Lap, TieBreakingMatchesBruteForceOnIntegerMatrices) {
  Rng rng(8);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    Matrix m(n, n);
    for (double& v : m.data) v = static_cast<double>(rng.below(3));
    ASSERT_EQ(solve_max(m).perm, brute_force(m).perm) << "trial " << trial;
  }
}

TEST(Lap, AffineTransformKeepsPermutation) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = random_matrix(rng, 12);
    Matrix t = m;
    for (double& v : t.data) v = 3.5 * v - 2.0;
    EXPECT_EQ(solve_max(m).perm, solve_max(t).perm);
  }
}

TEST(Lap, ConstantRowShiftKeepsPermutation) {
  Rng rng(12);
  const Matrix m = random_matrix(rng, 20);
  Matrix t = m;
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 20; ++j) t(i, j) += 0.5 * static_cast<double>(i);
  }
  EXPECT_EQ(solve_max(m).perm, solve_max(t).perm);
}

TEST(Lap, ShuffledRowsComposeWithSolution) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 30;
    const Matrix m = random_matrix(rng, n);
    const Perm q = rng.permutation(n);
    // row i of m becomes row q[i] of the shuffled matrix
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) s(q[i], j) = m(i, j);
    }
    const Perm p = solve_max(m).perm;
    EXPECT_EQ(solve_max(s).perm, then(p, q));
  }
}

TEST(Lap, BeatsRandomPermutationsAtScale) {
  Rng rng(14);
  for (std::size_t n : {64u, 512u}) {
    const Matrix m = random_matrix(rng, n);
    const Assignment a = solve_max(m);
    ASSERT_TRUE(is_bijection(a.perm));
    for (int k = 0; k < 100; ++k) {
      EXPECT_GE(a.total, assignment_total(m, rng.permutation(n)));
    }
  }
}

TEST(Lap, NegativeEntriesAreHandled) {
  Matrix m(2, 2);
  m(0, 0) = -5; m(0, 1) = -1;
  m(1, 0) = -1; m(1, 1) = -5;
  const Assignment a = solve_max(m);
  EXPECT_EQ(a.perm, (Perm{1, 0}));
  EXPECT_EQ(a.total, -2.0);
}

}  // namespace
}  // namespace rebasin
