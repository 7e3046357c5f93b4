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

#pragma once

// Centralized reference transformer. forward_standard is the textbook
// pre-norm layer; forward_virtual_devices replays the partitioned schedule in
// one process (device-local layernorm, masked products) and is the oracle for
// the distributed executor.

#include <cmath>
#include <cstddef>

#include "meshformer/bundle.hpp"
#include "meshformer/config.hpp"
#include "meshformer/partition.hpp"
#include "meshformer/prune_spec.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

inline float attention_scale(const TransformerConfig& c) {
  return 1.0f / std::sqrt(static_cast<float>(c.head_dim()));
}

inline void check_input(const TransformerConfig& c, const Matrix& x) {
  if (x.rows() != c.tokens || x.cols() != c.features) {
    throw ShapeError("input must be N x F (" + std::to_string(c.tokens) + "x" +
                     std::to_string(c.features) + "), got " +
                     std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }
}

inline Matrix forward_standard(const ModelBundle& b, const Matrix& x1) {
  const auto& c = b.config;
  check_input(c, x1);
  const ColumnSet all = ColumnSet::all(c.features);
  const std::size_t dh = c.head_dim();
  const float scale = attention_scale(c);
  Matrix x = x1;
  for (const LayerWeights& w : b.layers) {
    const Matrix xbar = layernorm_rows(x, all, w.ln1_gamma, w.ln1_beta);
    const Matrix q = matmul(xbar, w.wq);
    const Matrix k = matmul(xbar, w.wk);
    const Matrix v = matmul(xbar, w.wv);
    Matrix heads(c.tokens, c.features);
    for (std::size_t h = 0; h < c.heads; ++h) {
      write_columns(heads, h * dh,
                    attention_head(slice_columns(q, h * dh, dh),
                                   slice_columns(k, h * dh, dh),
                                   slice_columns(v, h * dh, dh), scale));
    }
    Matrix y = matmul(heads, w.wo);
    add_in_place(y, x);

    Matrix z = layernorm_rows(y, all, w.ln2_gamma, w.ln2_beta);
    for (std::size_t l = 0; l < w.mlp.size(); ++l) {
      z = matmul(z, w.mlp[l]);
      if (l + 1 < w.mlp.size()) z = activation(z, c.activation);
    }
    add_in_place(z, y);
    x = std::move(z);
  }
  return x;
}

/// Columns device `d` holds after a lossless gather at (layer, site): its own
/// block plus every column another device broadcasts.
inline ColumnSet lossless_held(const PruneSpec& prune, const Partition& p,
                               std::size_t layer, std::size_t site,
                               std::size_t d, std::size_t width) {
  ColumnSet held = p.own_columns(d, width);
  for (std::size_t e = 0; e < p.devices; ++e) {
    if (e != d) held = held.unite(prune.transmitted(layer, site, e));
  }
  return held;
}

inline Matrix forward_virtual_devices(const ModelBundle& b, const Partition& p,
                                      const PruneSpec& prune,
                                      const Matrix& x1) {
  const auto& c = b.config;
  check_input(c, x1);
  prune.validate(c);
  if (p.devices != c.devices) throw ShapeError("partition D != config D");
  const std::size_t dh = c.head_dim();
  const std::size_t f = c.features;
  const float scale = attention_scale(c);
  auto held = [&](std::size_t layer, std::size_t site, std::size_t d) {
    return lossless_held(prune, p, layer, site, d, site_input_width(c, site));
  };

  Matrix x = x1;
  for (std::size_t i = 0; i < c.layers; ++i) {
    const LayerWeights& w = b.layers[i];

    // Attention: each device normalizes what it holds and runs its heads.
    Matrix heads(c.tokens, f);
    for (std::size_t d = 0; d < p.devices; ++d) {
      const ColumnSet h0 = held(i, kSiteX, d);
      const Matrix xbar = layernorm_rows(x, h0, w.ln1_gamma, w.ln1_beta);
      const Matrix q = masked_matmul(xbar, w.wq, h0);
      const Matrix k = masked_matmul(xbar, w.wk, h0);
      const Matrix v = masked_matmul(xbar, w.wv, h0);
      for (std::size_t h : p.head_map[d]) {
        write_columns(heads, h * dh,
                      attention_head(slice_columns(q, h * dh, dh),
                                     slice_columns(k, h * dh, dh),
                                     slice_columns(v, h * dh, dh), scale));
      }
    }

    Matrix y(c.tokens, f);
    for (std::size_t d = 0; d < p.devices; ++d) {
      const Matrix o = masked_matmul(heads, w.wo, held(i, kSiteH, d));
      const ColumnSet own = p.own_columns(d, f);
      for (std::size_t r = 0; r < c.tokens; ++r)
        for (std::size_t col : own) y(r, col) = o(r, col) + x(r, col);
    }

    // Residual MLP. The first gather is of Y; later ones of hidden units.
    Matrix z = y;
    for (std::size_t l = 0; l < w.mlp.size(); ++l) {
      const std::size_t site = kSiteMlpFirst + l;
      const std::size_t out_width = w.mlp[l].cols();
      const bool last = l + 1 == w.mlp.size();
      Matrix next(c.tokens, out_width);
      for (std::size_t d = 0; d < p.devices; ++d) {
        const ColumnSet hs = held(i, site, d);
        Matrix in = l == 0 ? layernorm_rows(z, hs, w.ln2_gamma, w.ln2_beta) : z;
        Matrix prod = masked_matmul(in, w.mlp[l], hs);
        if (!last) prod = activation(prod, c.activation);
        copy_columns(next, prod, p.own_columns(d, out_width));
      }
      z = std::move(next);
    }
    add_in_place(z, y);
    x = std::move(z);
  }
  return x;
}

inline Matrix forward_virtual_devices(const ModelBundle& b, const Partition& p,
                                      const Matrix& x1) {
  return forward_virtual_devices(b, p, b.prune_or_dense(), x1);
}

}  // namespace meshformer
