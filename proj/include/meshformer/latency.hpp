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

// Slot/byte latency model for one transformer layer.
//
// Compute time is the per-device MAC count of the executor's schedule over a
// fixed MAC rate (matrix products only; norms and softmax are ignored).
// Each gather round costs ceil(bytes / bytes_per_slot) + overhead slots.
// Defaults sketch a 64 MHz Cortex-M4 with a BLE-PHY flooding protocol; they
// are illustrative, not calibrated.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meshformer/config.hpp"
#include "meshformer/error.hpp"
#include "meshformer/partition.hpp"

namespace meshformer {

struct LatencyParams {
  double macs_per_second = 32e6;
  std::size_t bytes_per_slot = 100;
  double slot_seconds = 1e-3;
  std::size_t slots_overhead_per_round = 4;

  void validate() const {
    if (!(macs_per_second > 0) || bytes_per_slot == 0 ||
        !(slot_seconds > 0) || slots_overhead_per_round == 0) {
      throw ConfigError("latency parameters must all be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const LatencyParams& p) {
  j = {{"macs_per_second", p.macs_per_second},
       {"bytes_per_slot", p.bytes_per_slot},
       {"slot_seconds", p.slot_seconds},
       {"slots_overhead_per_round", p.slots_overhead_per_round}};
}

inline void from_json(const nlohmann::json& j, LatencyParams& p) {
  LatencyParams d;
  p.macs_per_second = j.value("macs_per_second", d.macs_per_second);
  p.bytes_per_slot = j.value("bytes_per_slot", d.bytes_per_slot);
  p.slot_seconds = j.value("slot_seconds", d.slot_seconds);
  p.slots_overhead_per_round =
      j.value("slots_overhead_per_round", d.slots_overhead_per_round);
}

enum class Block { kAttention, kResidual, kLayer };

inline std::string to_string(Block b) {
  switch (b) {
    case Block::kAttention: return "attention";
    case Block::kResidual: return "residual";
    case Block::kLayer: return "layer";
  }
  return "?";
}

/// Gather sites that belong to `block`.
inline std::vector<std::size_t> block_sites(const TransformerConfig& c,
                                            Block b) {
  std::vector<std::size_t> s;
  if (b != Block::kResidual) s = {kSiteX, kSiteH};
  if (b != Block::kAttention)
    for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l)
      s.push_back(kSiteMlpFirst + l);
  return s;
}

namespace detail {

// Input rows a device multiplies at `site` on a lossless run.
inline double kept_rows(const TransformerConfig& c, std::size_t site,
                        double ratio) {
  const std::size_t own = site_input_width(c, site) / c.devices;
  const std::size_t sent = own - pruned_count(ratio, own);
  return static_cast<double>(own + (c.devices - 1) * sent);
}

inline TransformerConfig on_devices(TransformerConfig c, std::size_t d) {
  c.devices = d;
  c.validate();
  return c;
}

}  // namespace detail

/// Per-device multiply-accumulates for one `block` of one layer.
inline double block_macs(const TransformerConfig& config, std::size_t devices,
                         double ratio, Block b) {
  const TransformerConfig c = detail::on_devices(config, devices);
  const double n = static_cast<double>(c.tokens);
  const double s = static_cast<double>(c.cols_per_device());
  double macs = 0;
  if (b != Block::kResidual) {
    const double heads = static_cast<double>(c.heads / c.devices);
    const double dh = static_cast<double>(c.head_dim());
    macs += n * detail::kept_rows(c, kSiteX, ratio) * 3.0 * s;
    macs += heads * 2.0 * n * n * dh;  // q k^T and softmax(.) v
    macs += n * detail::kept_rows(c, kSiteH, ratio) * s;
  }
  if (b != Block::kAttention) {
    for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l) {
      const std::size_t site = kSiteMlpFirst + l;
      const double out =
          static_cast<double>(site_output_width(c, site) / c.devices);
      macs += n * detail::kept_rows(c, site, ratio) * out;
    }
  }
  return macs;
}

inline double compute_latency(const TransformerConfig& c, std::size_t devices,
                              double ratio, Block b, const LatencyParams& p) {
  p.validate();
  return block_macs(c, devices, ratio, b) / p.macs_per_second;
}

/// Duration of one gather round moving `bytes`.
inline double round_latency(std::size_t bytes, const LatencyParams& p) {
  const std::size_t slots =
      (bytes + p.bytes_per_slot - 1) / p.bytes_per_slot +
      p.slots_overhead_per_round;
  return static_cast<double>(slots) * p.slot_seconds;
}

/// Sum of the block's gather rounds. A single device runs no rounds.
inline double comm_latency(const TransformerConfig& config, std::size_t devices,
                           double ratio, Block b, const LatencyParams& p) {
  p.validate();
  const TransformerConfig c = detail::on_devices(config, devices);
  if (c.devices == 1) return 0.0;
  double total = 0;
  for (std::size_t site : block_sites(c, b)) {
    const std::size_t own = site_input_width(c, site) / c.devices;
    const std::size_t bytes = c.devices * (own - pruned_count(ratio, own)) *
                              c.tokens * c.bytes_per_element;
    total += round_latency(bytes, p);
  }
  return total;
}

inline double block_latency(const TransformerConfig& c, std::size_t devices,
                            double ratio, Block b, const LatencyParams& p) {
  return compute_latency(c, devices, ratio, b, p) +
         comm_latency(c, devices, ratio, b, p);
}

/// Central single-device latency over distributed latency.
inline double speedup(const TransformerConfig& c, std::size_t devices,
                      double ratio, Block b, const LatencyParams& p) {
  return block_latency(c, 1, 0.0, b, p) / block_latency(c, devices, ratio, b, p);
}

}  // namespace meshformer
