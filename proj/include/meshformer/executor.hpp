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

// Round-synchronized distributed execution over the simulated mesh.
//
// Every layer runs 2 + (mlp_layers + 1) gather rounds:
//   gather X -> local layernorm -> Q/K/V + heads (no communication)
//   gather H -> W_O slice -> residual add on own columns
//   gather Y -> local layernorm -> MLP slice, then one gather per further
//   MLP matrix -> residual add on own columns
// Each device only ever touches its own shard. All cross-device data moves
// through somegather_round, so the result is independent of device order.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "meshformer/bundle.hpp"
#include "meshformer/config.hpp"
#include "meshformer/mesh.hpp"
#include "meshformer/partition.hpp"
#include "meshformer/prune_spec.hpp"
#include "meshformer/reference.hpp"
#include "meshformer/resources.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

struct ExecOptions {
  LossModel loss;
  /// When set, replaces sampling: called with (round, D) for every round.
  std::function<LossEvents(std::uint64_t, std::size_t)> loss_override;
};

struct DeviceState {
  const DeviceShard* shard = nullptr;
  ColumnSet own;                 // own feature columns
  std::vector<ColumnSet> held;   // per site of the current layer
  Matrix x;                      // N x F, own columns valid
  std::uint64_t rounds = 0;
  std::size_t peak_activation_bytes = 0;
};

struct ExecReport {
  std::vector<GatherTrace> traces;
  std::vector<std::size_t> peak_activation_bytes;  // per device
  std::vector<std::vector<ColumnSet>> held;        // [round][device]
  Matrix output;

  std::size_t total_bytes() const {
    std::size_t t = 0;
    for (const auto& tr : traces) t += comm_bytes(tr);
    return t;
  }
};

/// Held columns after a round: own columns plus whatever expected column
/// actually arrived. A missing column is simply absent from the set, which
/// drops it from layernorm statistics and from masked products.
inline ColumnSet handle_missing(const ColumnSet& own, const ColumnSet& received,
                                const ColumnSet& expected) {
  return own.unite(received.intersect(expected));
}

struct ColumnBlock {
  std::size_t first = 0;
  Matrix data;
};

/// Concatenates blocks by starting column. Blocks may arrive in any order
/// but must tile [0, width) exactly.
inline Matrix assemble_output(std::vector<ColumnBlock> blocks,
                              std::size_t width) {
  std::sort(blocks.begin(), blocks.end(),
            [](const ColumnBlock& a, const ColumnBlock& b) {
              return a.first < b.first;
            });
  const std::size_t rows = blocks.empty() ? 0 : blocks.front().data.rows();
  Matrix out(rows, width);
  std::size_t next = 0;
  for (const ColumnBlock& b : blocks) {
    if (b.first != next) {
      throw AssemblyError(b.first > next ? "gap in output columns at " +
                                               std::to_string(next)
                                         : "overlapping output columns at " +
                                               std::to_string(b.first));
    }
    if (b.data.rows() != rows) throw AssemblyError("block row count differs");
    write_columns(out, b.first, b.data);
    next += b.data.cols();
  }
  if (next != width) {
    throw AssemblyError("output columns end at " + std::to_string(next) +
                        ", expected " + std::to_string(width));
  }
  return out;
}

namespace detail {

inline void check_shards(const TransformerConfig& c,
                         std::span<const DeviceShard> shards,
                         const PruneSpec& prune) {
  c.validate();
  prune.validate(c);
  if (shards.size() != c.devices) throw ShapeError("need one shard per device");
  for (std::size_t d = 0; d < shards.size(); ++d) {
    const DeviceShard& s = shards[d];
    if (s.device != d || s.layers.size() != c.layers ||
        s.prune_rows.size() != c.layers) {
      throw ShapeError("shard " + std::to_string(d) + " inconsistent");
    }
    for (std::size_t i = 0; i < c.layers; ++i)
      for (std::size_t site = 0; site < sites_per_layer(c); ++site)
        if (s.prune_rows[i].at(site) != prune.mask(i, site, d)) {
          throw ShapeError("shard " + std::to_string(d) +
                           " masks disagree with prune spec");
        }
  }
}

class Runner {
 public:
  Runner(const TransformerConfig& c, std::span<const DeviceShard> shards,
         const PruneSpec& prune, const ExecOptions& opt)
      : c_(c), prune_(prune), opt_(opt), part_(build_partition(c)) {
    for (const DeviceShard& s : shards) {
      DeviceState st;
      st.shard = &s;
      st.own = part_.own_columns(s.device, c.features);
      states_.push_back(std::move(st));
    }
  }

  ExecReport run(const Matrix& x1) {
    check_input(c_, x1);
    for (auto& st : states_) {
      st.x = Matrix(c_.tokens, c_.features);
      copy_columns(st.x, x1, st.own);
    }
    for (std::size_t i = 0; i < c_.layers; ++i) layer(i);

    ExecReport rep;
    rep.traces = std::move(traces_);
    rep.held = std::move(held_);
    std::vector<ColumnBlock> blocks;
    for (const auto& st : states_) {
      rep.peak_activation_bytes.push_back(st.peak_activation_bytes);
      blocks.push_back({st.own.indices().front(),
                        slice_columns(st.x, st.own.indices().front(),
                                      st.own.size())});
    }
    rep.output = assemble_output(std::move(blocks), c_.features);
    return rep;
  }

 private:
  // One gather round at `site`; returns each device's full-width view.
  std::vector<Matrix> gather(std::size_t layer, std::size_t site,
                             const std::vector<Matrix>& local) {
    const std::size_t width = site_input_width(c_, site);
    const std::size_t d_count = states_.size();
    std::vector<Contribution> contrib;
    for (std::size_t d = 0; d < d_count; ++d) {
      contrib.push_back({part_.own_columns(d, width),
                         d_count > 1 ? prune_.transmitted(layer, site, d)
                                     : ColumnSet{},
                         local[d]});
    }
    const LossEvents ev = opt_.loss_override
                              ? opt_.loss_override(round_, d_count)
                              : sample_losses(opt_.loss, d_count, round_);
    RoundResult res = somegather_round(contrib, ev, round_, c_.bytes_per_element);
    res.trace.layer = layer;
    res.trace.site = site;
    traces_.push_back(std::move(res.trace));
    ++round_;
    held_.emplace_back();

    const std::size_t nb = c_.tokens * c_.bytes_per_element;
    for (std::size_t d = 0; d < d_count; ++d) {
      DeviceState& st = states_[d];
      const ColumnSet& own = contrib[d].own;
      const ColumnSet expected =
          lossless_held(prune_, part_, layer, site, d, width);
      st.held.resize(sites_per_layer(c_));
      st.held[site] = handle_missing(own, res.held[d].minus(own), expected);
      held_.back().push_back(st.held[site]);
      ++st.rounds;
      st.peak_activation_bytes =
          std::max(st.peak_activation_bytes,
                   nb * st.held[site].size() + site_buffer_bytes(c_, site));
    }
    return std::move(res.views);
  }

  void layer(std::size_t i) {
    const std::size_t d_count = states_.size();
    const std::size_t dh = c_.head_dim();
    const std::size_t s = c_.cols_per_device();
    const float scale = attention_scale(c_);

    // Attention block.
    std::vector<Matrix> local;
    for (const auto& st : states_) local.push_back(st.x);
    std::vector<Matrix> view = gather(i, kSiteX, local);
    std::vector<Matrix> heads(d_count);
    for (std::size_t d = 0; d < d_count; ++d) {
      DeviceState& st = states_[d];
      const DeviceShard::Layer& w = st.shard->layers[i];
      const ColumnSet& held = st.held[kSiteX];
      const Matrix xbar = layernorm_rows(view[d], held, w.ln1_gamma, w.ln1_beta);
      heads[d] = Matrix(c_.tokens, c_.features);
      // Heads one at a time, so only one head's Q/K/V is live.
      for (std::size_t t = 0; t < st.shard->heads.size(); ++t) {
        const Matrix q = masked_matmul(xbar, slice_columns(w.wq, t * dh, dh), held);
        const Matrix k = masked_matmul(xbar, slice_columns(w.wk, t * dh, dh), held);
        const Matrix v = masked_matmul(xbar, slice_columns(w.wv, t * dh, dh), held);
        write_columns(heads[d], st.shard->heads[t] * dh,
                      attention_head(q, k, v, scale));
      }
    }
    view = gather(i, kSiteH, heads);
    std::vector<Matrix> y(d_count);
    for (std::size_t d = 0; d < d_count; ++d) {
      DeviceState& st = states_[d];
      const Matrix o =
          masked_matmul(view[d], st.shard->layers[i].wo, st.held[kSiteH]);
      y[d] = Matrix(c_.tokens, c_.features);
      const std::size_t c0 = d * s;
      for (std::size_t r = 0; r < c_.tokens; ++r)
        for (std::size_t j = 0; j < s; ++j)
          y[d](r, c0 + j) = o(r, j) + st.x(r, c0 + j);
    }

    // Residual block.
    std::vector<Matrix> z = y;
    const std::size_t weights = c_.mlp_weight_layers();
    for (std::size_t l = 0; l < weights; ++l) {
      const std::size_t site = kSiteMlpFirst + l;
      const bool last = l + 1 == weights;
      const std::size_t out_width = site_output_width(c_, site);
      const std::size_t out_own = out_width / d_count;
      view = gather(i, site, z);
      for (std::size_t d = 0; d < d_count; ++d) {
        DeviceState& st = states_[d];
        const DeviceShard::Layer& w = st.shard->layers[i];
        const ColumnSet& held = st.held[site];
        const Matrix in =
            l == 0 ? layernorm_rows(view[d], held, w.ln2_gamma, w.ln2_beta)
                   : std::move(view[d]);
        Matrix prod = masked_matmul(in, w.mlp[l], held);
        if (!last) prod = activation(prod, c_.activation);
        z[d] = Matrix(c_.tokens, out_width);
        write_columns(z[d], d * out_own, prod);
      }
    }
    for (std::size_t d = 0; d < d_count; ++d) {
      DeviceState& st = states_[d];
      const std::size_t c0 = d * s;
      for (std::size_t r = 0; r < c_.tokens; ++r)
        for (std::size_t j = 0; j < s; ++j)
          st.x(r, c0 + j) = z[d](r, c0 + j) + y[d](r, c0 + j);
    }
  }

  const TransformerConfig& c_;
  const PruneSpec& prune_;
  const ExecOptions& opt_;
  Partition part_;
  std::vector<DeviceState> states_;
  std::vector<GatherTrace> traces_;
  std::vector<std::vector<ColumnSet>> held_;
  std::uint64_t round_ = 0;
};

}  // namespace detail

/// Runs all layers on the shards. `x1` is the full input; each device picks up
/// its own columns. Shape problems in the inputs throw; mid-run shape errors
/// are bugs.
inline ExecReport run_inference(const TransformerConfig& c,
                                std::span<const DeviceShard> shards,
                                const PruneSpec& prune, const Matrix& x1,
                                const ExecOptions& opt = {}) {
  detail::check_shards(c, shards, prune);
  opt.loss.validate();
  return detail::Runner(c, shards, prune, opt).run(x1);
}

inline ExecReport run_inference(const ModelBundle& b, const Matrix& x1,
                                const ExecOptions& opt = {}) {
  const Partition p = build_partition(b.config);
  const std::vector<DeviceShard> shards = shard_weights(b, p);
  return run_inference(b.config, shards, b.prune_or_dense(), x1, opt);
}

inline nlohmann::json to_json(const ExecReport& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& t : r.traces) {
    rounds.push_back({{"round", t.round},
                      {"layer", t.layer},
                      {"site", t.site},
                      {"bytes", t.total_bytes},
                      {"lossless", t.events.empty()}});
  }
  return {{"rounds", rounds},
          {"round_count", r.traces.size()},
          {"total_bytes", r.total_bytes()},
          {"peak_activation_bytes", r.peak_activation_bytes},
          {"output_shape", {r.output.rows(), r.output.cols()}}};
}

}  // namespace meshformer
