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

// Head/column partitioning, weight sharding, and pruning masks.
//
// Device d owns heads [d*H/D, (d+1)*H/D) and feature columns
// [d*S, (d+1)*S) with S = F/D. Because heads are contiguous, the Q/K/V
// columns consumed by d's heads are exactly its own column range, which is
// also the W_O slice it computes, so the residual add never leaves the device.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "meshformer/bundle.hpp"
#include "meshformer/config.hpp"
#include "meshformer/error.hpp"
#include "meshformer/prune_spec.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

struct Partition {
  std::size_t devices = 1;
  std::size_t cols_per_device = 0;    // S
  std::size_t hidden_per_device = 0;  // S_mlp
  std::size_t heads_per_device = 0;
  std::size_t head_dim = 0;
  std::vector<std::vector<std::size_t>> head_map;

  std::pair<std::size_t, std::size_t> col_range(std::size_t d) const {
    return {d * cols_per_device, (d + 1) * cols_per_device};
  }
  std::pair<std::size_t, std::size_t> hidden_range(std::size_t d) const {
    return {d * hidden_per_device, (d + 1) * hidden_per_device};
  }
  /// Device d's block of a width-`width` activation.
  ColumnSet own_columns(std::size_t d, std::size_t width) const {
    const std::size_t w = width / devices;
    return ColumnSet::range(d * w, (d + 1) * w);
  }
  std::size_t owner(std::size_t col, std::size_t width) const {
    return col / (width / devices);
  }
};

inline Partition build_partition(const TransformerConfig& c) {
  c.validate();
  Partition p;
  p.devices = c.devices;
  p.cols_per_device = c.cols_per_device();
  p.hidden_per_device = c.hidden_per_device();
  p.heads_per_device = c.heads / c.devices;
  p.head_dim = c.head_dim();
  p.head_map.resize(c.devices);
  for (std::size_t d = 0; d < c.devices; ++d)
    for (std::size_t h = 0; h < p.heads_per_device; ++h)
      p.head_map[d].push_back(d * p.heads_per_device + h);
  return p;
}

/// One device's slice of every layer.
struct DeviceShard {
  struct Layer {
    Matrix wq, wk, wv;        // F x S, columns of this device's heads
    Matrix wo;                // F x S, columns col_range(d)
    std::vector<Matrix> mlp;  // in x S_out for each MLP weight matrix
    std::vector<float> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // full F
  };

  std::size_t device = 0;
  std::vector<std::size_t> heads;
  std::vector<Layer> layers;
  // [layer][site] -> this device's own mask p_d
  std::vector<std::vector<PruneSpec::Mask>> prune_rows;
};

inline std::vector<DeviceShard> shard_weights(const ModelBundle& b,
                                              const Partition& p) {
  b.validate();
  const auto& c = b.config;
  if (p.devices != c.devices || p.cols_per_device != c.cols_per_device()) {
    throw ShapeError("partition does not match bundle config");
  }
  const PruneSpec prune = b.prune_or_dense();
  std::vector<DeviceShard> shards(p.devices);
  for (std::size_t d = 0; d < p.devices; ++d) {
    DeviceShard& s = shards[d];
    s.device = d;
    s.heads = p.head_map[d];
    const auto [c0, c1] = p.col_range(d);
    for (std::size_t i = 0; i < c.layers; ++i) {
      const LayerWeights& w = b.layers[i];
      DeviceShard::Layer l;
      l.wq = slice_columns(w.wq, c0, c1 - c0);
      l.wk = slice_columns(w.wk, c0, c1 - c0);
      l.wv = slice_columns(w.wv, c0, c1 - c0);
      l.wo = slice_columns(w.wo, c0, c1 - c0);
      for (const Matrix& m : w.mlp) {
        const std::size_t out = m.cols() / p.devices;
        l.mlp.push_back(slice_columns(m, d * out, out));
      }
      l.ln1_gamma = w.ln1_gamma;
      l.ln1_beta = w.ln1_beta;
      l.ln2_gamma = w.ln2_gamma;
      l.ln2_beta = w.ln2_beta;
      s.layers.push_back(std::move(l));
      std::vector<PruneSpec::Mask> rows;
      for (std::size_t site = 0; site < prune.sites(); ++site)
        rows.push_back(prune.mask(i, site, d));
      s.prune_rows.push_back(std::move(rows));
    }
  }
  return shards;
}

/// Inverse of shard_weights: concatenates shard slices column-wise.
inline std::vector<LayerWeights> reassemble(std::span<const DeviceShard> shards,
                                            const TransformerConfig& c) {
  if (shards.size() != c.devices) throw ShapeError("shard count != D");
  std::vector<LayerWeights> out(c.layers);
  for (std::size_t i = 0; i < c.layers; ++i) {
    LayerWeights& w = out[i];
    w.wq = w.wk = w.wv = w.wo = Matrix(c.features, c.features);
    for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l) {
      auto [in, o] = mlp_shape(c, l);
      w.mlp.emplace_back(in, o);
    }
    for (const DeviceShard& s : shards) {
      const DeviceShard::Layer& l = s.layers.at(i);
      const std::size_t c0 = s.device * l.wq.cols();
      write_columns(w.wq, c0, l.wq);
      write_columns(w.wk, c0, l.wk);
      write_columns(w.wv, c0, l.wv);
      write_columns(w.wo, c0, l.wo);
      for (std::size_t m = 0; m < l.mlp.size(); ++m)
        write_columns(w.mlp[m], s.device * l.mlp[m].cols(), l.mlp[m]);
    }
    const DeviceShard::Layer& first = shards.front().layers.at(i);
    w.ln1_gamma = first.ln1_gamma;
    w.ln1_beta = first.ln1_beta;
    w.ln2_gamma = first.ln2_gamma;
    w.ln2_beta = first.ln2_beta;
  }
  return out;
}

/// Mask matrix P for one gather site: (D*S_in) x (D*S_out). Diagonal blocks
/// are all ones; the off-diagonal blocks of block-row d repeat p_d across
/// every column.
inline Matrix expand_mask(std::span<const PruneSpec::Mask> per_device,
                          std::size_t out_per_device) {
  const std::size_t devices = per_device.size();
  const std::size_t in = devices == 0 ? 0 : per_device.front().size();
  Matrix p(devices * in, devices * out_per_device);
  for (std::size_t d = 0; d < devices; ++d) {
    if (per_device[d].size() != in) throw ShapeError("ragged masks");
    for (std::size_t j = 0; j < in; ++j) {
      auto row = p.row(d * in + j);
      for (std::size_t e = 0; e < devices; ++e) {
        const float v = e == d ? 1.0f : static_cast<float>(per_device[d][j]);
        std::fill_n(row.begin() + e * out_per_device, out_per_device, v);
      }
    }
  }
  return p;
}

inline Matrix expand_mask(const PruneSpec& prune, const TransformerConfig& c,
                          std::size_t layer, std::size_t site) {
  std::vector<PruneSpec::Mask> rows;
  for (std::size_t d = 0; d < prune.devices(); ++d)
    rows.push_back(prune.mask(layer, site, d));
  return expand_mask(rows, site_output_width(c, site) / c.devices);
}

/// [device] -> local column indices, lowest score first.
using SiteRanking = std::vector<std::vector<std::size_t>>;
/// [layer][site] -> SiteRanking
using Rankings = std::vector<std::vector<SiteRanking>>;

/// [device][local column] -> summed |weight| of the column's off-device
/// outgoing connections. Diagonal-block entries are never pruned and are
/// excluded. Sums over all `weights`, which must share the row dimension.
inline std::vector<std::vector<double>> column_scores(
    std::span<const Matrix> weights, std::size_t devices) {
  if (weights.empty()) throw ShapeError("rank_columns: no weights");
  const std::size_t rows = weights.front().rows();
  if (rows % devices != 0) throw ShapeError("rank_columns: rows % D != 0");
  const std::size_t s_in = rows / devices;
  std::vector<std::vector<double>> score(devices,
                                         std::vector<double>(s_in, 0.0));
  for (const Matrix& w : weights) {
    if (w.rows() != rows || w.cols() % devices != 0) {
      throw ShapeError("rank_columns: inconsistent weight shapes");
    }
    const std::size_t s_out = w.cols() / devices;
    for (std::size_t d = 0; d < devices; ++d) {
      for (std::size_t j = 0; j < s_in; ++j) {
        auto r = w.row(d * s_in + j);
        for (std::size_t k = 0; k < r.size(); ++k) {
          if (k / s_out != d) score[d][j] += std::abs(static_cast<double>(r[k]));
        }
      }
    }
  }
  return score;
}

/// Local columns of each device, lowest score first; ties go to the lower
/// column index.
inline SiteRanking rank_columns(std::span<const Matrix> weights,
                                std::size_t devices) {
  const auto score = column_scores(weights, devices);
  SiteRanking out(devices);
  for (std::size_t d = 0; d < devices; ++d) {
    std::vector<std::size_t> order(score[d].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return score[d][a] < score[d][b];
                     });
    out[d] = std::move(order);
  }
  return out;
}

inline SiteRanking rank_columns(const Matrix& weights, std::size_t devices) {
  return rank_columns(std::span<const Matrix>(&weights, 1), devices);
}

/// Rankings for every site of every layer. Q, K and V share the X-gather
/// mask, so site 0 is ranked on their combined outgoing weights.
inline Rankings rank_sites(const ModelBundle& b) {
  const auto& c = b.config;
  Rankings r(c.layers);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const LayerWeights& w = b.layers[i];
    const std::vector<Matrix> qkv = {w.wq, w.wk, w.wv};
    r[i].push_back(rank_columns(qkv, c.devices));
    r[i].push_back(rank_columns(w.wo, c.devices));
    for (const Matrix& m : w.mlp) r[i].push_back(rank_columns(m, c.devices));
  }
  return r;
}

/// Evenly spaced cumulative pruning ratios ending exactly at `target`.
inline std::vector<double> stepwise_schedule(double target,
                                             std::size_t stages) {
  if (!(target >= 0.0) || target >= 1.0) {
    throw PruningError("pruning ratio must lie in [0, 1)");
  }
  if (stages == 0) throw PruningError("stages must be >= 1");
  std::vector<double> out;
  for (std::size_t k = 1; k <= stages; ++k) {
    out.push_back(k == stages ? target
                              : target * static_cast<double>(k) /
                                    static_cast<double>(stages));
  }
  return out;
}

/// floor(ratio * width), tolerant of ratios like 0.29 that are not exact in
/// binary.
inline std::size_t pruned_count(double ratio, std::size_t width) {
  return static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(width) + 1e-9));
}

/// Zeroes the lowest-ranked floor(ratio * S) columns of every mask. Columns
/// already pruned stay pruned; asking for fewer zeros than a mask already has
/// is rejected.
inline PruneSpec apply_pruning(const PruneSpec& prune, double ratio,
                               const Rankings& rankings) {
  if (!(ratio >= 0.0) || ratio >= 1.0) {
    throw PruningError("pruning ratio must lie in [0, 1)");
  }
  if (rankings.size() != prune.layers()) {
    throw PruningError("rankings do not match prune spec layers");
  }
  PruneSpec out = prune;
  for (std::size_t i = 0; i < out.layers(); ++i) {
    for (std::size_t s = 0; s < out.sites(); ++s) {
      for (std::size_t d = 0; d < out.devices(); ++d) {
        PruneSpec::Mask& m = out.mask(i, s, d);
        const std::size_t target = pruned_count(ratio, m.size());
        std::size_t zeros = out.zeros(i, s, d);
        if (zeros > target) {
          throw PruningError("non-nested pruning: mask already has " +
                             std::to_string(zeros) + " zeros, ratio asks " +
                             std::to_string(target));
        }
        const auto& order = rankings.at(i).at(s).at(d);
        if (order.size() != m.size()) {
          throw PruningError("ranking length does not match mask length");
        }
        for (std::size_t j : order) {
          if (zeros == target) break;
          if (m[j] != 0) {
            m[j] = 0;
            ++zeros;
          }
        }
      }
    }
  }
  return out;
}

/// Magnitude-prunes `b` in one shot to `ratio`, starting from its current
/// masks (all ones when it has none).
inline ModelBundle prune_bundle(ModelBundle b, double ratio) {
  b.prune = apply_pruning(b.prune_or_dense(), ratio, rank_sites(b));
  return b;
}

}  // namespace meshformer
