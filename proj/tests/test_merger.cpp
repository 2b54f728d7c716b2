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

#include <cmath>

#include "rebasin/rebasin.hpp"
#include "test_util.hpp"

namespace rebasin {
namespace {

using testing::max_abs_diff;
using testing::noise_batch;
using testing::small_config;

std::vector<Tensor> battery() { return testing::noise_batches(2, 4, 300, 77); }

bool same_tensors(const EncoderWeights& x, const EncoderWeights& y) {
  TensorArchive a = x.tensors, b = y.tensors;
  a.metadata.clear();
  b.metadata.clear();
  return a.same_bits(b);
}

double max_forward_diff(const EncoderWeights& x, const EncoderWeights& y) {
  double m = 0.0;
  for (const auto& b : battery()) m = std::max(m, max_abs_diff(forward(x, b), forward(y, b)));
  return m;
}

TEST(PermuteAxis, MovesSliceToDestination) {
  Tensor t({3, 2}, {0, 1, 10, 11, 20, 21});
  detail::permute_axis(t, 0, {2, 0, 1});
  EXPECT_EQ(t.data, (std::vector<float>{10, 11, 20, 21, 0, 1}));
  Tensor u({2, 3}, {0, 1, 2, 3, 4, 5});
  detail::permute_axis(u, 1, {1, 2, 0});
  EXPECT_EQ(u.data, (std::vector<float>{2, 0, 1, 5, 3, 4}));
  EXPECT_THROW(detail::permute_axis(u, 0, {0, 1, 2}), ShapeError);
}

TEST(ApplyPlan, IdentityIsBitIdentical) {
  const auto b = init_toy(small_config(), 1);
  EXPECT_TRUE(apply_plan(b, PermutationPlan::identity(b.config)).tensors.same_bits(b.tensors));
}

TEST(ApplyPlan, SymmetryPreservesFunction) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto cfg = small_config();
    if (seed % 2) cfg.groupnorm_groups = 2;
    auto b = init_toy(cfg, seed);
    testing::perturb_affine(b, seed);
    const auto s = random_symmetry(cfg, seed + 40);
    const auto bp = apply_plan(b, s);
    EXPECT_FALSE(bp.tensors.same_bits(b.tensors));
    EXPECT_LE(max_forward_diff(b, bp), 1e-4) << "seed " << seed;
  }
}

// Each slot on its own, so a wrong compensating reorder is caught by name.
TEST(ApplyPlan, EverySlotAloneIsASymmetry) {
  const auto cfg = small_config();
  auto b = init_toy(cfg, 3);
  testing::perturb_affine(b, 3);
  const auto s = random_symmetry(cfg, 3);
  for (std::size_t l = 0; l < cfg.num_conv(); ++l) {
    auto p = PermutationPlan::identity(cfg);
    p.conv[l] = s.conv[l];
    EXPECT_LE(max_forward_diff(b, apply_plan(b, p)), 1e-4) << "conv " << l;
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    auto heads = PermutationPlan::identity(cfg);
    heads.layers[i].attention.heads = s.layers[i].attention.heads;
    EXPECT_LE(max_forward_diff(b, apply_plan(b, heads)), 1e-4) << "heads " << i;
    auto within = PermutationPlan::identity(cfg);
    within.layers[i].attention.within = s.layers[i].attention.within;
    EXPECT_LE(max_forward_diff(b, apply_plan(b, within)), 1e-4) << "within " << i;
    auto ffn = PermutationPlan::identity(cfg);
    ffn.layers[i].ffn = s.layers[i].ffn;
    EXPECT_LE(max_forward_diff(b, apply_plan(b, ffn)), 1e-4) << "ffn " << i;
  }
}

TEST(ApplyPlan, QkvOverrideChangesFunctionAndOnlyItsMatrix) {
  const auto cfg = small_config();
  auto b = init_toy(cfg, 4);
  testing::perturb_affine(b, 4);
  auto p = PermutationPlan::identity(cfg, MergeKind::CnnAll);
  Rng rng(4);
  for (auto& l : p.layers) {
    l.qkv = std::array<Perm, 3>{rng.permutation(cfg.model_dim), identity_perm(cfg.model_dim),
                                identity_perm(cfg.model_dim)};
  }
  const auto bp = apply_plan(b, p);
  EXPECT_GT(max_forward_diff(b, bp), 1e-3);
  for (const auto& [name, t] : b.tensors.entries) {
    const bool q = name.find("attn.q.") != std::string::npos;
    EXPECT_EQ(bp.at(name).same_bits(t), !q) << name;
  }
}

TEST(ApplyPlan, RejectsMismatchedPlans) {
  const auto cfg = small_config();
  const auto b = init_toy(cfg, 5);
  auto p = PermutationPlan::identity(cfg);
  p.conv[1].pop_back();
  EXPECT_THROW(apply_plan(b, p), ShapeError);
  p = PermutationPlan::identity(cfg);
  p.layers[0].ffn[0] = 1;
  EXPECT_THROW(apply_plan(b, p), ValidationError);
  auto grouped = cfg;
  grouped.groupnorm_groups = 2;
  auto split = PermutationPlan::identity(grouped);
  std::swap(split.conv[0][0], split.conv[0][7]);  // crosses a group boundary
  EXPECT_THROW(apply_plan(init_toy(grouped, 5), split), ValidationError);
}

TEST(ApplyPlan, PlantedRoundTripIsBitExact) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 6);
  const auto s = random_symmetry(cfg, 6);
  EXPECT_TRUE(apply_plan(apply_plan(a, s), s.inverse()).tensors.same_bits(a.tensors));
}

TEST(ApplyPlan, CompositionMatchesSequentialApplication) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = random_symmetry(cfg, seed), q = random_symmetry(cfg, seed + 100);
    EXPECT_TRUE(apply_plan(apply_plan(a, p), q).tensors.same_bits(apply_plan(a, p.then(q)).tensors));
    EXPECT_TRUE(p.then(p.inverse()).all_identity());
  }
}

TEST(PermHelpers, InverseThenAndBlocks) {
  const Perm p{2, 0, 3, 1};
  EXPECT_EQ(inverse(p), (Perm{1, 3, 0, 2}));
  EXPECT_TRUE(is_identity(then(p, inverse(p))));
  EXPECT_EQ(then(p, Perm{1, 2, 3, 0}), (Perm{3, 1, 0, 2}));
  EXPECT_FALSE(is_bijection({0, 0, 1}));
  EXPECT_EQ(fraction_moved({0, 2, 1, 3}), 0.5);
  const BlockPerm bp{{1, 0}, {{1, 0}, {0, 1}}};
  // block 0 -> block 1 with within[1] = identity, block 1 -> block 0 swapped
  EXPECT_EQ(bp.flatten(), (Perm{2, 3, 1, 0}));
  const auto back = BlockPerm::from_flat(bp.flatten(), 2);
  EXPECT_EQ(back.heads, bp.heads);
  EXPECT_EQ(back.within, bp.within);
}

TEST(Interpolate, EndpointsAndLinearity) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 8), b = init_toy(cfg, 9);
  EXPECT_TRUE(same_tensors(interpolate(a, b, 1.0), a));
  EXPECT_TRUE(same_tensors(interpolate(a, b, 0.0), b));
  for (double lam : {0.1, 0.5, 0.9, 0.3333}) {
    const auto m = interpolate(a, b, lam);
    for (const auto& [name, t] : m.tensors.entries) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double expect = lam * static_cast<double>(a.at(name).data[i]) +
                              (1.0 - lam) * static_cast<double>(b.at(name).data[i]);
        ASSERT_EQ(t.data[i], static_cast<float>(expect)) << name;
      }
    }
    EXPECT_EQ(std::stod(m.tensors.metadata.at("lambda")), lam);
    EXPECT_EQ(m.tensors.metadata.at("parent_a_digest"), weights_digest(a));
    EXPECT_EQ(m.tensors.metadata.at("parent_b_digest"), weights_digest(b));
  }
}

TEST(Interpolate, Errors) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 8);
  EXPECT_THROW(interpolate(a, a, 1.5), ValidationError);
  EXPECT_THROW(interpolate(a, a, -0.1), ValidationError);
  EXPECT_THROW(interpolate(a, a, std::nan("")), ValidationError);
  auto other = cfg;
  other.ffn_dim = 24;
  EXPECT_THROW(interpolate(a, init_toy(other, 8), 0.5), ShapeError);
}

TEST(Merge, SelfMergeAndPlainAveraging) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 10), b = init_toy(cfg, 11);
  const auto id = PermutationPlan::identity(cfg);
  EXPECT_TRUE(same_tensors(merge(a, a, id, 0.37), a));
  const auto m = merge(a, b, id, 0.5);
  EXPECT_TRUE(same_tensors(m, interpolate(a, b, 0.5)));
  EXPECT_EQ(m.tensors.metadata.at("plan_digest"), plan_digest(id));
  // Archive round trip keeps provenance.
  const auto back = EncoderWeights::from_archive(read_archive_bytes(serialize_archive(m.to_archive())));
  EXPECT_EQ(back.tensors.metadata.at("lambda"), "0.5");
}

TEST(Merge, RecoveredPlanMergeEqualsA) {
  const auto cfg = small_config();
  const auto a = init_toy(cfg, 12);
  const auto s = random_symmetry(cfg, 12);
  const auto b = apply_plan(a, s);
  for (double lam : {0.0, 0.5, 0.9}) {
    EXPECT_LE(max_forward_diff(a, merge(a, b, s.inverse(), lam)), 1e-4);
  }
}

TEST(RandomSymmetry, DeterministicAndNeverQkv) {
  const auto cfg = small_config();
  EXPECT_TRUE(random_symmetry(cfg, 3).same_permutations(random_symmetry(cfg, 3)));
  EXPECT_FALSE(random_symmetry(cfg, 3).same_permutations(random_symmetry(cfg, 4)));
  EXPECT_FALSE(random_symmetry(cfg, 3).non_symmetry());
  EXPECT_NO_THROW(random_symmetry(cfg, 3).validate(cfg));
}

// A uniform permutation of n items has on average one fixed point, so the
// fixed fraction is 1/n with per-seed variance 1/n^2.
TEST(RandomSymmetry, FixedPointFractionIsAboutOneOverN) {
  const auto cfg = small_config();
  const int seeds = 1000;
  auto fixed = [](const Perm& p) {
    double f = 0;
    for (std::size_t j = 0; j < p.size(); ++j) f += p[j] == j;
    return f / static_cast<double>(p.size());
  };
  double conv1 = 0, ffn = 0, heads = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto sym = random_symmetry(cfg, s);
    conv1 += fixed(sym.conv[1]);
    ffn += fixed(sym.layers[0].ffn);
    heads += fixed(sym.layers[0].attention.heads);
  }
  auto check = [&](double total, double n, const char* what) {
    const double mean = total / seeds;
    const double sigma = (1.0 / n) / std::sqrt(static_cast<double>(seeds));
    EXPECT_NEAR(mean, 1.0 / n, 3 * sigma) << what;
  };
  check(conv1, 12, "conv 1");
  check(ffn, 32, "ffn");
  check(heads, 4, "heads");
}

TEST(Merge, AlignmentBeatsNaiveOnNoisyPermutedModel) {
  const auto cfg = small_config();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = init_toy(cfg, 300 + seed);
    auto b = apply_plan(a, random_symmetry(cfg, seed));
    Rng rng(seed, 5);
    for (auto& [name, t] : b.tensors.entries) {
      for (float& v : t.data) v += static_cast<float>(0.01 * std::abs(v) * rng.normal());
    }
    const auto data = testing::noise_batches(6, 4, 400, seed + 9);
    const auto plan = build_plan(a, b, MergeKind::CnnFfnAttn, data, "noisy");
    const auto bat = battery();
    const double with = functional_distance(merge(a, b, plan, 0.5), a, bat).mse;
    const double without =
        functional_distance(merge(a, b, PermutationPlan::identity(cfg), 0.5), a, bat).mse;
    wins += with < without;
  }
  EXPECT_EQ(wins, 5);
}

}  // namespace
}  // namespace rebasin
