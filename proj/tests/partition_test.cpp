// Copyright 2026 The meshformer Authors
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

#include <random>
#include <string>

#include <gtest/gtest.h>

#include "meshformer/partition.hpp"
#include "oracle.hpp"

namespace meshformer {
namespace {

TransformerConfig cfg(std::size_t f, std::size_t h, std::size_t d,
                      std::size_t layers = 1) {
  TransformerConfig c;
  c.layers = layers;
  c.features = f;
  c.heads = h;
  c.tokens = 4;
  c.mlp_hidden = 2 * f;
  c.devices = d;
  return c;
}

TEST(Partition, BlockAssignment) {
  const Partition p = build_partition(cfg(128, 8, 4));
  EXPECT_EQ(p.cols_per_device, 32u);
  EXPECT_EQ(p.head_map[1], (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(p.col_range(1), (std::pair<std::size_t, std::size_t>{32, 64}));
}

TEST(Partition, HeadsCoverEveryHeadOnce) {
  for (std::size_t d : {1, 2, 4, 8}) {
    const Partition p = build_partition(cfg(64, 8, d));
    std::vector<int> seen(8, 0);
    for (const auto& hs : p.head_map) {
      EXPECT_EQ(hs.size(), 8 / d);
      for (std::size_t h : hs) ++seen[h];
    }
    for (int n : seen) EXPECT_EQ(n, 1);
    // Q/K/V columns of a device's heads are exactly its column range.
    for (std::size_t dev = 0; dev < d; ++dev) {
      const auto [c0, c1] = p.col_range(dev);
      EXPECT_EQ(p.head_map[dev].front() * p.head_dim, c0);
      EXPECT_EQ((p.head_map[dev].back() + 1) * p.head_dim, c1);
    }
  }
}

TEST(Partition, SingleDeviceHoldsEverything) {
  const Partition p = build_partition(cfg(16, 4, 1));
  EXPECT_EQ(p.cols_per_device, 16u);
  EXPECT_EQ(p.head_map[0].size(), 4u);
}

TEST(Partition, MoreDevicesThanHeadsRejected) {
  try {
    build_partition(cfg(128, 8, 16));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("H/D >= 1"), std::string::npos);
  }
}

TEST(Partition, DivisibilityViolationsNamed) {
  auto message = [](TransformerConfig c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  TransformerConfig c = cfg(12, 6, 4);  // 4 does not divide 6 heads
  EXPECT_NE(message(c).find("H"), std::string::npos);
  c = cfg(16, 4, 4);
  c.mlp_hidden = 18;
  EXPECT_NE(message(c).find("F_mlp"), std::string::npos);
  c = cfg(10, 3, 1);
  EXPECT_FALSE(message(c).empty());
}

TEST(Shard, SingleDeviceShardIsWholeModel) {
  const ModelBundle b = random_bundle(cfg(8, 2, 1), 1);
  const auto shards = shard_weights(b, build_partition(b.config));
  ASSERT_EQ(shards.size(), 1u);
  EXPECT_EQ(shards[0].layers[0].wq, b.layers[0].wq);
  EXPECT_EQ(shards[0].layers[0].mlp[1], b.layers[0].mlp[1]);
}

TEST(Shard, WoSliceIsOwnColumns) {
  const ModelBundle b = random_bundle(cfg(4, 2, 2), 2);
  const auto shards = shard_weights(b, build_partition(b.config));
  const Matrix& s = shards[1].layers[0].wo;
  ASSERT_EQ(s.cols(), 2u);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(s(r, 0), b.layers[0].wo(r, 2));
    EXPECT_EQ(s(r, 1), b.layers[0].wo(r, 3));
  }
}

TEST(Shard, ReassembleIsBitExact) {
  for (std::size_t d : {1, 2, 4}) {
    TransformerConfig c = cfg(16, 4, d, 3);
    c.mlp_layers = 2;
    c.mlp_hidden = 24;
    const ModelBundle b = random_bundle(c, 10 + d);
    const auto shards = shard_weights(b, build_partition(c));
    EXPECT_EQ(reassemble(shards, c), b.layers) << "D=" << d;
  }
}

TEST(Shard, CarriesOwnMaskRows) {
  const TransformerConfig c = cfg(8, 2, 2);
  ModelBundle b = random_bundle(c, 3);
  b.prune = oracle::random_prune(c, 0.5, 4);
  const auto shards = shard_weights(b, build_partition(c));
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t s = 0; s < sites_per_layer(c); ++s)
      EXPECT_EQ(shards[d].prune_rows[0][s], b.prune->mask(0, s, d));
}

TEST(Shard, MismatchedPartitionRejected) {
  const ModelBundle b = random_bundle(cfg(8, 2, 2), 3);
  EXPECT_THROW(shard_weights(b, build_partition(cfg(8, 2, 1))), ShapeError);
}

TEST(ExpandMask, NoPruningIsAllOnes) {
  const std::vector<PruneSpec::Mask> m = {{1, 1}, {1, 1}};
  EXPECT_EQ(expand_mask(m, 2), Matrix(4, 4, 1.0f));
}

TEST(ExpandMask, HandEvaluatedBlocks) {
  const std::vector<PruneSpec::Mask> m = {{1, 0}, {0, 1}};
  const Matrix expect = {
      {1, 1, 1, 1}, {1, 1, 0, 0}, {0, 0, 1, 1}, {1, 1, 1, 1}};
  EXPECT_EQ(expand_mask(m, 2), expect);
}

TEST(ExpandMask, SingleDeviceIsAllOnes) {
  const std::vector<PruneSpec::Mask> m = {{0, 0, 0}};
  EXPECT_EQ(expand_mask(m, 3), Matrix(3, 3, 1.0f));
}

TEST(ExpandMask, MatchesBlockFormulaOnRandomSpecs) {
  TransformerConfig c = cfg(16, 4, 4, 2);
  c.mlp_hidden = 24;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PruneSpec pr = oracle::random_prune(c, 0.4, seed);
    for (std::size_t site = 0; site < sites_per_layer(c); ++site) {
      const Matrix p = expand_mask(pr, c, 1, site);
      std::vector<PruneSpec::Mask> rows;
      for (std::size_t d = 0; d < 4; ++d) rows.push_back(pr.mask(1, site, d));
      const auto expect = oracle::block_mask(
          rows, site_output_width(c, site) / c.devices);
      ASSERT_EQ(p.rows(), expect.size());
      for (std::size_t j = 0; j < p.rows(); ++j)
        for (std::size_t k = 0; k < p.cols(); ++k)
          ASSERT_EQ(p(j, k), expect[j][k]);
    }
  }
}

TEST(RankColumns, ZeroWeightsKeepIndexOrder) {
  const auto r = rank_columns(Matrix(6, 6), 2);
  EXPECT_EQ(r[0], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(r[1], (std::vector<std::size_t>{0, 1, 2}));
}

TEST(RankColumns, ScoreUsesOffDeviceWeightsOnly) {
  const std::vector<Matrix> w = {Matrix{{1, -3}, {2, 0.5f}}};
  const auto s = column_scores(w, 2);
  EXPECT_DOUBLE_EQ(s[0][0], 3.0);
  EXPECT_DOUBLE_EQ(s[1][0], 2.0);
}

TEST(RankColumns, AscendingByScore) {
  // Device 0 rows 0..2, off-device columns 2..3.
  const Matrix w = {{9, 9, 5, 0}, {0, 0, 1, 1}, {0, 0, 0, 0},
                    {0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}};
  const auto r = rank_columns(Matrix(w), 2);
  EXPECT_EQ(r[0], (std::vector<std::size_t>{2, 1, 0}));
}

TEST(RankColumns, InvariantUnderPositiveScaling) {
  std::mt19937 rng(6);
  std::normal_distribution<float> g;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix w(8, 12);
    for (float& v : w.data()) v = g(rng);
    Matrix w2 = w;
    for (float& v : w2.data()) v *= 2.0f;
    EXPECT_EQ(rank_columns(w, 4), rank_columns(w2, 4));
  }
}

TEST(Schedule, ThreeStagesToNinety) {
  const auto s = stepwise_schedule(0.9, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(s[0], 0.3, 1e-12);
  EXPECT_NEAR(s[1], 0.6, 1e-12);
  EXPECT_EQ(s[2], 0.9);
}

TEST(Schedule, EvenSpacingAndZero) {
  EXPECT_EQ(stepwise_schedule(0.5, 2), (std::vector<double>{0.25, 0.5}));
  EXPECT_EQ(stepwise_schedule(0.0, 4), (std::vector<double>(4, 0.0)));
}

TEST(Schedule, RejectsBadRatioOrStages) {
  EXPECT_THROW(stepwise_schedule(1.0, 3), PruningError);
  EXPECT_THROW(stepwise_schedule(-0.1, 3), PruningError);
  EXPECT_THROW(stepwise_schedule(0.5, 0), PruningError);
}

class ApplyPruning : public ::testing::Test {
 protected:
  TransformerConfig c = [] {
    TransformerConfig x = cfg(16, 4, 4, 2);
    x.mlp_hidden = 16;
    return x;
  }();
  ModelBundle b = random_bundle(c, 99);
  Rankings r = rank_sites(b);
};

TEST_F(ApplyPruning, ZeroRatioUnchanged) {
  EXPECT_EQ(apply_pruning(PruneSpec::all_ones(c), 0.0, r),
            PruneSpec::all_ones(c));
}

TEST_F(ApplyPruning, FloorCountPerDeviceAndSite) {
  const PruneSpec p = apply_pruning(PruneSpec::all_ones(c), 0.5, r);
  for (std::size_t i = 0; i < p.layers(); ++i)
    for (std::size_t s = 0; s < p.sites(); ++s)
      for (std::size_t d = 0; d < p.devices(); ++d)
        EXPECT_EQ(p.zeros(i, s, d), 2u);  // S = 4
}

TEST_F(ApplyPruning, PrunesLowestScoresFirst) {
  const PruneSpec p = apply_pruning(PruneSpec::all_ones(c), 0.25, r);
  const std::vector<Matrix> qkv = {b.layers[0].wq, b.layers[0].wk,
                                   b.layers[0].wv};
  const auto score = column_scores(qkv, 4);
  for (std::size_t d = 0; d < 4; ++d) {
    const auto& m = p.mask(0, kSiteX, d);
    std::size_t pruned = 0;
    for (std::size_t j = 0; j < 4; ++j)
      if (!m[j]) pruned = j;
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_LE(score[d][pruned], score[d][j]);
  }
}

TEST_F(ApplyPruning, NestedStagesEqualDirect) {
  const PruneSpec staged =
      apply_pruning(apply_pruning(PruneSpec::all_ones(c), 0.3, r), 0.6, r);
  EXPECT_EQ(staged, apply_pruning(PruneSpec::all_ones(c), 0.6, r));
}

TEST_F(ApplyPruning, NonNestedRequestRejected) {
  const PruneSpec p = apply_pruning(PruneSpec::all_ones(c), 0.5, r);
  EXPECT_THROW(apply_pruning(p, 0.25, r), PruningError);
}

TEST_F(ApplyPruning, ZeroFractionTracksRatio) {
  TransformerConfig big = cfg(64, 8, 4, 2);
  const ModelBundle bb = random_bundle(big, 5);
  for (double ratio : {0.1, 0.3, 0.6, 0.9}) {
    const ModelBundle pb = prune_bundle(bb, ratio);
    for (std::size_t site = 0; site < sites_per_layer(big); ++site) {
      const Matrix p = expand_mask(*pb.prune, big, 0, site);
      const std::size_t s_in = p.rows() / 4, s_out = p.cols() / 4;
      double zeros = 0, total = 0;
      for (std::size_t j = 0; j < p.rows(); ++j)
        for (std::size_t k = 0; k < p.cols(); ++k)
          if (j / s_in != k / s_out) total += 1, zeros += p(j, k) == 0.0f;
      EXPECT_LE(std::abs(zeros / total - ratio), 1.0 / s_in)
          << "ratio " << ratio << " site " << site;
    }
  }
}

}  // namespace
}  // namespace meshformer
