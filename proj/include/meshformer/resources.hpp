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

// Analytical per-device flash / RAM / communication accounting.
//
// Two flavours of every quantity:
//   * ratio-based (double): a uniform pruning ratio rho, received columns
//     counted as (F_in - S_in) * (1 - rho). Used for sweeps and boundaries.
//   * mask-based (integer): exact counts from a PruneSpec. This is what the
//     executor observes on a lossless run.
// Communication is always counted from mask sizes, floor(rho * S) zeros per
// mask, so comm_per_inference(c, rho) equals the bytes in an executor trace.
//
// RAM model at a gather site, per device:
//   activations  N * b * (S_in + received columns)
//   buffers      N * b * S_out            (output accumulator)
//              + 3 * N * b * F/H          (per-head Q/K/V scratch, X site only)
// RAM is the peak over all sites of all layers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meshformer/config.hpp"
#include "meshformer/partition.hpp"
#include "meshformer/prune_spec.hpp"

namespace meshformer {

struct DeviceBudget {
  std::size_t flash_bytes = 1024 * 1024;  // nRF52840
  std::size_t ram_bytes = 256 * 1024;
  std::size_t reserve_flash = 64 * 1024;
  std::size_t reserve_ram = 32 * 1024;

  void validate() const {
    if (reserve_flash >= flash_bytes || reserve_ram >= ram_bytes) {
      throw ConfigError("budget reserves must be smaller than the budgets");
    }
  }
  std::size_t usable_flash() const { return flash_bytes - reserve_flash; }
  std::size_t usable_ram() const { return ram_bytes - reserve_ram; }
};

inline void to_json(nlohmann::json& j, const DeviceBudget& b) {
  j = {{"flash_bytes", b.flash_bytes},
       {"ram_bytes", b.ram_bytes},
       {"reserve_flash", b.reserve_flash},
       {"reserve_ram", b.reserve_ram}};
}

inline void from_json(const nlohmann::json& j, DeviceBudget& b) {
  DeviceBudget d;
  b.flash_bytes = j.value("flash_bytes", d.flash_bytes);
  b.ram_bytes = j.value("ram_bytes", d.ram_bytes);
  b.reserve_flash = j.value("reserve_flash", d.reserve_flash);
  b.reserve_ram = j.value("reserve_ram", d.reserve_ram);
}

/// Working-buffer bytes while processing `site`.
inline std::size_t site_buffer_bytes(const TransformerConfig& c,
                                     std::size_t site) {
  const std::size_t nb = c.tokens * c.bytes_per_element;
  std::size_t bytes = nb * (site_output_width(c, site) / c.devices);
  if (site == kSiteX) bytes += 3 * nb * c.head_dim();
  return bytes;
}

// ---------------------------------------------------------------- ratio based

/// Input columns a device holds at `site` (own plus received), ratio model.
inline double held_columns(const TransformerConfig& c, std::size_t site,
                           double ratio) {
  const double width = static_cast<double>(site_input_width(c, site));
  const double own = width / static_cast<double>(c.devices);
  return own + (width - own) * (1.0 - ratio);
}

inline double activation_bytes(const TransformerConfig& c, std::size_t site,
                               double ratio) {
  return static_cast<double>(c.tokens * c.bytes_per_element) *
         held_columns(c, site, ratio);
}

struct RamEstimate {
  double activations = 0;  // at the peak site
  double buffers = 0;
  double total = 0;
  std::size_t peak_site = 0;
};

inline RamEstimate ram_estimate(const TransformerConfig& c, double ratio) {
  RamEstimate best;
  for (std::size_t s = 0; s < sites_per_layer(c); ++s) {
    const double act = activation_bytes(c, s, ratio);
    const double buf = static_cast<double>(site_buffer_bytes(c, s));
    if (act + buf > best.total) best = {act, buf, act + buf, s};
  }
  return best;
}

inline double ram_per_device(const TransformerConfig& c, double ratio) {
  return ram_estimate(c, ratio).total;
}

namespace detail {

// (site, in-width, out-width, count) of every weight matrix in one layer.
struct WeightGroup {
  std::size_t site, in, out, count;
};

inline std::vector<WeightGroup> weight_groups(const TransformerConfig& c) {
  std::vector<WeightGroup> g = {{kSiteX, c.features, c.features, 3},
                                {kSiteH, c.features, c.features, 1}};
  for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l) {
    auto [in, out] = mlp_shape(c, l);
    g.push_back({kSiteMlpFirst + l, in, out, 1});
  }
  return g;
}

inline double layernorm_flash(const TransformerConfig& c) {
  return static_cast<double>(c.layers * 4 * c.features * c.bytes_per_element);
}

}  // namespace detail

/// Weight rows a device stores for its output slice are its own input rows
/// plus the unpruned rows of other devices.
inline double flash_per_device(const TransformerConfig& c, double ratio) {
  double per_layer = 0;
  const double d = static_cast<double>(c.devices);
  for (const auto& g : detail::weight_groups(c)) {
    const double own = static_cast<double>(g.in) / d;
    const double rows = own + (static_cast<double>(g.in) - own) * (1.0 - ratio);
    per_layer += static_cast<double>(g.count) * rows *
                 (static_cast<double>(g.out) / d);
  }
  return static_cast<double>(c.layers) * per_layer *
             static_cast<double>(c.bytes_per_element) +
         detail::layernorm_flash(c);
}

/// Bytes broadcast by all devices during one inference, counted from
/// floor(ratio * S) pruned columns per mask. Zero for D = 1.
inline std::size_t comm_per_inference(const TransformerConfig& c,
                                      double ratio) {
  if (c.devices == 1) return 0;
  std::size_t per_layer = 0;
  for (std::size_t s = 0; s < sites_per_layer(c); ++s) {
    const std::size_t own = site_input_width(c, s) / c.devices;
    per_layer += c.devices * (own - pruned_count(ratio, own));
  }
  return c.layers * per_layer * c.tokens * c.bytes_per_element;
}

// ----------------------------------------------------------------- mask based

inline std::size_t received_columns(const PruneSpec& prune, std::size_t layer,
                                    std::size_t site, std::size_t device) {
  std::size_t n = 0;
  for (std::size_t e = 0; e < prune.devices(); ++e)
    if (e != device) n += prune.ones(layer, site, e);
  return n;
}

inline std::size_t ram_per_device(const TransformerConfig& c,
                                  const PruneSpec& prune, std::size_t device) {
  std::size_t peak = 0;
  const std::size_t nb = c.tokens * c.bytes_per_element;
  for (std::size_t i = 0; i < c.layers; ++i) {
    for (std::size_t s = 0; s < sites_per_layer(c); ++s) {
      const std::size_t own = site_input_width(c, s) / c.devices;
      const std::size_t held = own + received_columns(prune, i, s, device);
      peak = std::max(peak, nb * held + site_buffer_bytes(c, s));
    }
  }
  return peak;
}

inline std::size_t flash_per_device(const TransformerConfig& c,
                                    const PruneSpec& prune,
                                    std::size_t device) {
  std::size_t weights = 0;
  for (std::size_t i = 0; i < c.layers; ++i) {
    for (const auto& g : detail::weight_groups(c)) {
      const std::size_t rows =
          g.in / c.devices + received_columns(prune, i, g.site, device);
      weights += g.count * rows * (g.out / c.devices);
    }
  }
  return weights * c.bytes_per_element +
         static_cast<std::size_t>(detail::layernorm_flash(c));
}

/// Bytes `device` broadcasts during one inference.
inline std::size_t comm_per_device(const TransformerConfig& c,
                                   const PruneSpec& prune,
                                   std::size_t device) {
  if (c.devices == 1) return 0;
  std::size_t cols = 0;
  for (std::size_t i = 0; i < c.layers; ++i)
    for (std::size_t s = 0; s < sites_per_layer(c); ++s)
      cols += prune.ones(i, s, device);
  return cols * c.tokens * c.bytes_per_element;
}

inline std::size_t comm_per_inference(const TransformerConfig& c,
                                      const PruneSpec& prune) {
  std::size_t total = 0;
  for (std::size_t d = 0; d < c.devices; ++d)
    total += comm_per_device(c, prune, d);
  return total;
}

struct ResourceReport {
  struct Device {
    std::size_t flash = 0;
    std::size_t ram = 0;
    std::size_t comm = 0;  // bytes broadcast per inference
  };
  std::vector<Device> devices;
  std::size_t max_flash = 0;
  std::size_t max_ram = 0;
  std::size_t total_comm = 0;
};

inline ResourceReport resource_report(const TransformerConfig& c,
                                      const PruneSpec& prune) {
  ResourceReport r;
  for (std::size_t d = 0; d < c.devices; ++d) {
    ResourceReport::Device dev{flash_per_device(c, prune, d),
                               ram_per_device(c, prune, d),
                               comm_per_device(c, prune, d)};
    r.max_flash = std::max(r.max_flash, dev.flash);
    r.max_ram = std::max(r.max_ram, dev.ram);
    r.total_comm += dev.comm;
    r.devices.push_back(dev);
  }
  return r;
}

inline nlohmann::json to_json(const ResourceReport& r) {
  nlohmann::json devs = nlohmann::json::array();
  for (std::size_t d = 0; d < r.devices.size(); ++d) {
    devs.push_back({{"device", d},
                    {"flash_bytes", r.devices[d].flash},
                    {"ram_bytes", r.devices[d].ram},
                    {"comm_bytes", r.devices[d].comm}});
  }
  return {{"devices", devs},
          {"max_flash_bytes", r.max_flash},
          {"max_ram_bytes", r.max_ram},
          {"total_comm_bytes", r.total_comm}};
}

// ----------------------------------------------------------------- archetypes

enum class Primitive { kAllGather, kAllReduce, kReduceScatter, kReplicated };

inline std::string to_string(Primitive p) {
  switch (p) {
    case Primitive::kAllGather: return "allgather";
    case Primitive::kAllReduce: return "allreduce";
    case Primitive::kReduceScatter: return "reducescatter";
    case Primitive::kReplicated: return "replicated";
  }
  return "?";
}

struct ArchetypeCosts {
  double ram = 0;
  double flash = 0;
  double comm = 0;
};

/// Closed-form per-device RAM / flash and per-inference communication of a
/// partitioning built on `p`, when every collective runs over all-to-all
/// broadcast rounds. These are primitive-level caricatures of the partitioning
/// families, not reimplementations of specific systems.
///
///   allgather      column split, full activations gathered at every site
///   allreduce      head split with row-split W_O / last MLP matrix; the two
///                  partial sums per layer are exchanged by each device
///                  broadcasting its full N x F partial
///   reducescatter  as allreduce, but each device only keeps its slice of the
///                  reduced sum
///   replicated     token split, every device stores the whole model and
///                  exchanges K/V rows
inline ArchetypeCosts archetype_costs(Primitive p, const TransformerConfig& c) {
  const double n = static_cast<double>(c.tokens);
  const double f = static_cast<double>(c.features);
  const double fm = static_cast<double>(c.mlp_hidden);
  const double d = static_cast<double>(c.devices);
  const double b = static_cast<double>(c.bytes_per_element);
  const double t = static_cast<double>(c.layers);
  double weights = 0;
  for (const auto& g : detail::weight_groups(c))
    weights += static_cast<double>(g.count * g.in * g.out);
  const double full_flash = t * weights * b + detail::layernorm_flash(c);
  const double split_flash = t * weights * b / d + detail::layernorm_flash(c);
  const bool single = c.devices == 1;

  ArchetypeCosts out;
  switch (p) {
    case Primitive::kAllGather: {
      double peak = 0, per_layer = 0;
      for (std::size_t s = 0; s < sites_per_layer(c); ++s) {
        const double width = static_cast<double>(site_input_width(c, s));
        peak = std::max(peak, n * b * width +
                                  static_cast<double>(site_buffer_bytes(c, s)));
        per_layer += n * b * width;
      }
      out = {peak, split_flash, single ? 0.0 : t * per_layer};
      break;
    }
    case Primitive::kAllReduce:
      out = {n * b * (d * f + fm / d), split_flash,
             t * 2.0 * (d - 1.0) * n * f * b};
      break;
    case Primitive::kReduceScatter:
      out = {n * b * (f + (d - 1.0) * f / d + fm / d), split_flash,
             t * 2.0 * (d - 1.0) * n * f * b};
      break;
    case Primitive::kReplicated:
      out = {b * (2.0 * n * f + std::ceil(n / d) * std::max(f, fm)),
             full_flash, single ? 0.0 : t * 2.0 * n * f * b};
      break;
  }
  return out;
}

// --------------------------------------------------------------- feasibility

enum class Binding { kFlash, kRam, kBoth, kNone };

inline std::string to_string(Binding b) {
  switch (b) {
    case Binding::kFlash: return "flash";
    case Binding::kRam: return "ram";
    case Binding::kBoth: return "both";
    case Binding::kNone: return "none";
  }
  return "?";
}

struct BoundaryPoint {
  std::size_t tokens = 0;
  std::size_t max_features = 0;  // 0 when no width fits
  Binding binding = Binding::kNone;
};

/// `base` with feature width `f`; F_mlp keeps base's F_mlp / F ratio.
inline TransformerConfig with_width(const TransformerConfig& base,
                                    std::size_t f) {
  TransformerConfig c = base;
  c.mlp_hidden = base.mlp_hidden * f / base.features;
  c.features = f;
  return c;
}

/// For every N, the largest F (a multiple of lcm(D, H)) whose flash and RAM
/// fit the budget, and the constraint that stops the next step. The search
/// stops at `max_features`; hitting that cap reports Binding::kNone.
inline std::vector<BoundaryPoint> feasibility_boundary(
    const DeviceBudget& budget, const TransformerConfig& base, double ratio,
    const std::vector<std::size_t>& tokens,
    std::size_t max_features = 1 << 14) {
  budget.validate();
  const std::size_t step = std::lcm(base.devices, base.heads);
  const double flash_cap = static_cast<double>(budget.usable_flash());
  const double ram_cap = static_cast<double>(budget.usable_ram());
  std::vector<BoundaryPoint> out;
  for (std::size_t n : tokens) {
    TransformerConfig probe = base;
    probe.tokens = n;
    BoundaryPoint pt{n, 0, Binding::kNone};
    for (std::size_t f = step; f <= max_features; f += step) {
      const TransformerConfig c = with_width(probe, f);
      const bool flash_ok = flash_per_device(c, ratio) <= flash_cap;
      const bool ram_ok = ram_per_device(c, ratio) <= ram_cap;
      if (flash_ok && ram_ok) {
        pt.max_features = f;
        continue;
      }
      pt.binding = !flash_ok && !ram_ok ? Binding::kBoth
                   : !flash_ok          ? Binding::kFlash
                                        : Binding::kRam;
      break;
    }
    out.push_back(pt);
  }
  return out;
}

inline Binding binding_from_string(const std::string& s) {
  for (Binding b : {Binding::kFlash, Binding::kRam, Binding::kBoth, Binding::kNone})
    if (to_string(b) == s) return b;
  throw ConfigError("unknown binding constraint '" + s + "'");
}

/// CSV with header N,F_max,binding_constraint.
inline void write_boundary_csv(std::ostream& os,
                               const std::vector<BoundaryPoint>& pts) {
  os << "N,F_max,binding_constraint\n";
  for (const auto& p : pts)
    os << p.tokens << ',' << p.max_features << ',' << to_string(p.binding)
       << '\n';
}

inline std::vector<BoundaryPoint> read_boundary_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "N,F_max,binding_constraint") {
    throw ConfigError("boundary CSV: bad header");
  }
  std::vector<BoundaryPoint> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string n, f, b;
    if (!std::getline(row, n, ',') || !std::getline(row, f, ',') ||
        !std::getline(row, b)) {
      throw ConfigError("boundary CSV: malformed row '" + line + "'");
    }
    out.push_back({std::stoul(n), std::stoul(f), binding_from_string(b)});
  }
  return out;
}

}  // namespace meshformer
