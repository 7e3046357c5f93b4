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

// All-to-all gather rounds over a lossy mesh.
//
// The simulator models only the round contract: every device broadcasts a
// payload of activation columns, and every other device either receives it
// whole or not at all. Three loss modes are sampled per round:
//   tx blackout   no device receives sender s
//   rx blackout   receiver r receives nothing
//   pair loss     r does not receive s
// A device never loses its own columns.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meshformer/error.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

struct LossModel {
  double p_pair = 0.0;
  double p_rx_blackout = 0.0;
  double p_tx_blackout = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    for (double p : {p_pair, p_rx_blackout, p_tx_blackout}) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError("loss probabilities must lie in [0, 1]");
      }
    }
  }
  bool lossless() const {
    return p_pair == 0.0 && p_rx_blackout == 0.0 && p_tx_blackout == 0.0;
  }
};

/// Stateless counter-based generator: every draw is a hash of
/// (seed, round, stream, a, b), so results do not depend on iteration order.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t bits(std::uint64_t round, std::uint64_t stream,
                     std::uint64_t a, std::uint64_t b) const {
    std::uint64_t h = mix(seed_);
    for (std::uint64_t v : {round, stream, a, b}) h = mix(h ^ v);
    return h;
  }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t round, std::uint64_t stream, std::uint64_t a,
                 std::uint64_t b) const {
    return static_cast<double>(bits(round, stream, a, b) >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t seed_;
};

/// Loss events of one round. Sampled independently per mode; a payload
/// s -> r is delivered iff none of tx[s], rx[r], pair[s][r] fired.
struct LossEvents {
  std::size_t devices = 0;
  std::vector<std::uint8_t> tx_blackout;  // [sender]
  std::vector<std::uint8_t> rx_blackout;  // [receiver]
  std::vector<std::uint8_t> pair_lost;    // [sender * D + receiver]

  static LossEvents none(std::size_t d) {
    return {d, std::vector<std::uint8_t>(d, 0), std::vector<std::uint8_t>(d, 0),
            std::vector<std::uint8_t>(d * d, 0)};
  }

  bool delivered(std::size_t s, std::size_t r) const {
    if (s == r) return true;
    return !tx_blackout[s] && !rx_blackout[r] && !pair_lost[s * devices + r];
  }
  bool empty() const {
    auto any = [](const std::vector<std::uint8_t>& v) {
      for (auto b : v)
        if (b) return true;
      return false;
    };
    return !any(tx_blackout) && !any(rx_blackout) && !any(pair_lost);
  }

  friend bool operator==(const LossEvents&, const LossEvents&) = default;
};

namespace detail {
inline constexpr std::uint64_t kStreamTx = 1;
inline constexpr std::uint64_t kStreamRx = 2;
inline constexpr std::uint64_t kStreamPair = 3;
}  // namespace detail

inline LossEvents sample_losses(const LossModel& loss, std::size_t devices,
                                std::uint64_t round) {
  loss.validate();
  LossEvents ev = LossEvents::none(devices);
  const CounterRng rng(loss.seed);
  for (std::size_t s = 0; s < devices; ++s) {
    ev.tx_blackout[s] =
        rng.uniform(round, detail::kStreamTx, s, 0) < loss.p_tx_blackout;
  }
  for (std::size_t r = 0; r < devices; ++r) {
    ev.rx_blackout[r] =
        rng.uniform(round, detail::kStreamRx, r, 0) < loss.p_rx_blackout;
  }
  for (std::size_t s = 0; s < devices; ++s) {
    for (std::size_t r = 0; r < devices; ++r) {
      if (s == r) continue;
      ev.pair_lost[s * devices + r] =
          rng.uniform(round, detail::kStreamPair, s, r) < loss.p_pair;
    }
  }
  return ev;
}

/// One device's input to a round. `local` is full activation width; only the
/// `own` columns are meaningful. `transmit` must be a subset of `own`.
struct Contribution {
  ColumnSet own;
  ColumnSet transmit;
  Matrix local;
};

struct GatherTrace {
  struct Sender {
    std::size_t device = 0;
    ColumnSet columns;
    std::size_t bytes = 0;
  };

  std::uint64_t round = 0;
  std::size_t layer = 0;
  std::size_t site = 0;
  std::vector<Sender> senders;
  std::vector<std::vector<std::uint8_t>> delivered;  // [sender][receiver]
  LossEvents events;
  std::size_t total_bytes = 0;
};

struct RoundResult {
  std::vector<ColumnSet> held;  // per receiver: own + delivered columns
  std::vector<Matrix> views;    // per receiver: full width, held filled in
  GatherTrace trace;
};

inline std::size_t comm_bytes(const GatherTrace& t) {
  std::size_t total = 0;
  for (const auto& s : t.senders) total += s.bytes;
  return total;
}

inline RoundResult somegather_round(std::span<const Contribution> devices,
                                    const LossEvents& events,
                                    std::uint64_t round,
                                    std::size_t bytes_per_element) {
  const std::size_t d_count = devices.size();
  if (events.devices != d_count) {
    throw ProtocolError("loss events sized for a different device count");
  }
  if (d_count == 0) return {};
  const std::size_t rows = devices.front().local.rows();
  const std::size_t width = devices.front().local.cols();
  ColumnSet claimed;
  for (const Contribution& c : devices) {
    if (c.local.rows() != rows || c.local.cols() != width) {
      throw ProtocolError("contributions disagree on activation shape");
    }
    c.own.check_within(width);
    if (!c.own.intersect(claimed).empty()) {
      throw ProtocolError("two devices claim the same column");
    }
    if (c.transmit.minus(c.own).size() != 0) {
      throw ProtocolError("device transmits a column it does not own");
    }
    claimed = claimed.unite(c.own);
  }

  RoundResult out;
  out.trace.round = round;
  out.trace.events = events;
  out.trace.delivered.assign(d_count, std::vector<std::uint8_t>(d_count, 0));
  for (std::size_t s = 0; s < d_count; ++s) {
    const std::size_t bytes =
        devices[s].transmit.size() * rows * bytes_per_element;
    out.trace.senders.push_back({s, devices[s].transmit, bytes});
    out.trace.total_bytes += bytes;
    for (std::size_t r = 0; r < d_count; ++r)
      out.trace.delivered[s][r] = events.delivered(s, r) ? 1 : 0;
  }
  for (std::size_t r = 0; r < d_count; ++r) {
    Matrix view(rows, width);
    copy_columns(view, devices[r].local, devices[r].own);
    ColumnSet held = devices[r].own;
    for (std::size_t s = 0; s < d_count; ++s) {
      if (s == r || !events.delivered(s, r)) continue;
      copy_columns(view, devices[s].local, devices[s].transmit);
      held = held.unite(devices[s].transmit);
    }
    out.held.push_back(std::move(held));
    out.views.push_back(std::move(view));
  }
  return out;
}

inline RoundResult somegather_round(std::span<const Contribution> devices,
                                    const LossModel& loss, std::uint64_t round,
                                    std::size_t bytes_per_element) {
  return somegather_round(devices, sample_losses(loss, devices.size(), round),
                          round, bytes_per_element);
}

inline nlohmann::json to_json(const GatherTrace& t) {
  nlohmann::json senders = nlohmann::json::array();
  for (const auto& s : t.senders) {
    senders.push_back({{"device", s.device},
                       {"columns", std::vector<std::size_t>(s.columns.begin(),
                                                            s.columns.end())},
                       {"bytes", s.bytes}});
  }
  nlohmann::json pairs = nlohmann::json::array();
  const std::size_t d = t.events.devices;
  for (std::size_t s = 0; s < d; ++s)
    for (std::size_t r = 0; r < d; ++r)
      if (t.events.pair_lost[s * d + r]) pairs.push_back({s, r});
  std::vector<std::size_t> tx, rx;
  for (std::size_t i = 0; i < d; ++i) {
    if (t.events.tx_blackout[i]) tx.push_back(i);
    if (t.events.rx_blackout[i]) rx.push_back(i);
  }
  return {{"round", t.round},
          {"layer", t.layer},
          {"site", t.site},
          {"senders", std::move(senders)},
          {"delivered", t.delivered},
          {"losses", {{"tx_blackout", tx}, {"rx_blackout", rx}, {"pair", pairs}}},
          {"total_bytes", t.total_bytes}};
}

}  // namespace meshformer
