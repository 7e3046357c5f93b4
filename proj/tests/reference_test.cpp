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

#include <gtest/gtest.h>

#include "meshformer/reference.hpp"
#include "oracle.hpp"

namespace meshformer {
namespace {

TransformerConfig small(std::size_t d = 1) {
  TransformerConfig c;
  c.layers = 1;
  c.features = 4;
  c.heads = 2;
  c.tokens = 2;
  c.mlp_hidden = 8;
  c.devices = d;
  return c;
}

TEST(ForwardStandard, EmptyModelIsIdentity) {
  TransformerConfig c = small();
  c.layers = 0;
  const ModelBundle b = random_bundle(c, 1);
  const Matrix x = oracle::random_input(c, 2);
  EXPECT_EQ(forward_standard(b, x), x);
  EXPECT_EQ(forward_virtual_devices(b, build_partition(c), x), x);
}

TEST(ForwardStandard, ZeroWeightsAreIdentity) {
  for (std::size_t d : {1, 2}) {
    TransformerConfig c = small(d);
    c.layers = 3;
    const ModelBundle b = zero_bundle(c);
    const Matrix x = oracle::random_input(c, 3);
    EXPECT_EQ(forward_standard(b, x), x);
    const PruneSpec pr = oracle::random_prune(c, 0.5, 4);
    EXPECT_EQ(forward_virtual_devices(b, build_partition(c), pr, x), x);
  }
}

TEST(ForwardStandard, MatchesHandRolledDoubleEvaluation) {
  for (Activation a : {Activation::kGelu, Activation::kRelu}) {
    TransformerConfig c = small();
    c.activation = a;
    const ModelBundle b = random_bundle(c, 7);
    const Matrix x = oracle::random_input(c, 8);
    EXPECT_LT(oracle::max_abs_diff(oracle::forward_dense(b, x),
                                   forward_standard(b, x)),
              1e-5);
  }
}

TEST(ForwardStandard, DeeperModelMatchesOracle) {
  TransformerConfig c;
  c.layers = 3;
  c.features = 16;
  c.heads = 4;
  c.tokens = 5;
  c.mlp_hidden = 24;
  c.mlp_layers = 2;
  const ModelBundle b = random_bundle(c, 11);
  const Matrix x = oracle::random_input(c, 12);
  EXPECT_LT(oracle::max_abs_diff(oracle::forward_dense(b, x),
                                 forward_standard(b, x)),
            1e-4);
}

TEST(ForwardStandard, RejectsWrongInputShape) {
  const ModelBundle b = random_bundle(small(), 1);
  EXPECT_THROW(forward_standard(b, Matrix(3, 4)), ShapeError);
  EXPECT_THROW(forward_standard(b, Matrix(2, 5)), ShapeError);
}

TEST(ForwardVirtual, AllOnesMasksAreBitIdenticalToStandard) {
  for (std::size_t d : {1, 2, 4}) {
    TransformerConfig c;
    c.layers = 2;
    c.features = 16;
    c.heads = 4;
    c.tokens = 3;
    c.mlp_hidden = 32;
    c.devices = d;
    const ModelBundle b = random_bundle(c, 20 + d);
    const Matrix x = oracle::random_input(c, 30 + d);
    EXPECT_EQ(forward_virtual_devices(b, build_partition(c), x),
              forward_standard(b, x))
        << "D=" << d;
  }
}

TEST(ForwardVirtual, SingleDeviceIgnoresMasks) {
  TransformerConfig c = small();
  c.layers = 2;
  const ModelBundle b = random_bundle(c, 5);
  const Matrix x = oracle::random_input(c, 6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PruneSpec pr = oracle::random_prune(c, 0.7, seed);
    EXPECT_EQ(forward_virtual_devices(b, build_partition(c), pr, x),
              forward_standard(b, x));
  }
}

TEST(ForwardVirtual, OnePrunedColumnMatchesExplicitMaskProduct) {
  const TransformerConfig c = small(2);
  const ModelBundle b = random_bundle(c, 41);
  const Matrix x = oracle::random_input(c, 42);
  PruneSpec pr = PruneSpec::all_ones(c);
  pr.mask(0, kSiteX, 1)[0] = 0;  // device 1 withholds X column 2
  const Matrix got = forward_virtual_devices(b, build_partition(c), pr, x);
  EXPECT_LT(oracle::max_abs_diff(oracle::forward_masked(b, pr, x), got), 1e-5);
  // The pruned column must actually change device 0's result.
  EXPECT_NE(got, forward_standard(b, x));
}

TEST(ForwardVirtual, RandomMasksMatchExplicitMaskProduct) {
  for (std::size_t d : {2, 4}) {
    TransformerConfig c;
    c.layers = 2;
    c.features = 16;
    c.heads = 4;
    c.tokens = 4;
    c.mlp_hidden = 24;
    c.mlp_layers = 2;
    c.devices = d;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const ModelBundle b = random_bundle(c, 100 + seed);
      const Matrix x = oracle::random_input(c, 200 + seed);
      const PruneSpec pr = oracle::random_prune(c, 0.5, 300 + seed);
      EXPECT_LT(oracle::max_abs_diff(
                    oracle::forward_masked(b, pr, x),
                    forward_virtual_devices(b, build_partition(c), pr, x)),
                1e-4);
    }
  }
}

TEST(ForwardVirtual, InvariantUnderHeadPermutation) {
  TransformerConfig c;
  c.features = 16;
  c.heads = 4;
  c.tokens = 3;
  c.mlp_hidden = 32;
  c.devices = 2;
  const std::size_t dh = c.head_dim();
  const ModelBundle b = random_bundle(c, 9);
  const Matrix x = oracle::random_input(c, 10);
  PruneSpec pr = oracle::random_prune(c, 0.5, 11);
  // A head's inputs depend on which X columns its device holds, so the
  // attention-side masks stay dense; the MLP sites remain pruned.
  for (std::size_t site : {kSiteX, kSiteH})
    for (std::size_t d = 0; d < 2; ++d)
      for (auto& bit : pr.mask(0, site, d)) bit = 1;

  // Move head 0 to device 1 and head 2 to device 0.
  ModelBundle swapped = b;
  LayerWeights& w = swapped.layers[0];
  auto swap_cols = [&](Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t e = 0; e < dh; ++e) std::swap(m(r, e), m(r, 2 * dh + e));
  };
  swap_cols(w.wq);
  swap_cols(w.wk);
  swap_cols(w.wv);
  for (std::size_t e = 0; e < dh; ++e)
    for (std::size_t col = 0; col < c.features; ++col)
      std::swap(w.wo(e, col), w.wo(2 * dh + e, col));

  const Partition p = build_partition(c);
  const Matrix a = forward_virtual_devices(b, p, pr, x);
  const Matrix s = forward_virtual_devices(swapped, p, pr, x);
  EXPECT_LT(max_abs_diff(a, s), 1e-5f);
}

}  // namespace
}  // namespace meshformer
