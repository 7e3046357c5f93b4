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

#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "meshformer/error.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

/// Architecture plus deployment hyperparameters.
///
/// `mlp_layers` counts hidden layers of the residual MLP; the MLP therefore
/// has `mlp_layers + 1` weight matrices (F -> F_mlp -> ... -> F_mlp -> F).
struct TransformerConfig {
  std::size_t layers = 1;       // T
  std::size_t features = 8;     // F
  std::size_t heads = 2;        // H
  std::size_t tokens = 4;       // N
  std::size_t mlp_hidden = 16;  // F_mlp
  std::size_t mlp_layers = 1;
  Activation activation = Activation::kGelu;
  std::size_t devices = 1;  // D
  std::size_t bytes_per_element = 1;

  std::size_t head_dim() const { return features / heads; }
  std::size_t cols_per_device() const { return features / devices; }
  std::size_t hidden_per_device() const { return mlp_hidden / devices; }
  std::size_t mlp_weight_layers() const { return mlp_layers + 1; }

  /// Checks the model-shape constraints only (no device count).
  void validate_model() const {
    if (features == 0 || heads == 0 || tokens == 0 || mlp_hidden == 0 ||
        mlp_layers == 0 || bytes_per_element == 0) {
      throw ConfigError("F, H, N, F_mlp, mlp_layers and bytes_per_element "
                        "must all be >= 1");
    }
    if (features % heads != 0) {
      throw ConfigError("H must divide F (F=" + std::to_string(features) +
                        ", H=" + std::to_string(heads) + ")");
    }
  }

  /// Model constraints plus equal partitioning over `devices`.
  void validate() const {
    validate_model();
    if (devices == 0) throw ConfigError("D must be >= 1");
    if (devices > heads) {
      throw ConfigError("D > H violates H/D >= 1: every device needs at least "
                        "one attention head (D=" + std::to_string(devices) +
                        ", H=" + std::to_string(heads) + ")");
    }
    if (heads % devices != 0) {
      throw ConfigError("D must divide H (D=" + std::to_string(devices) +
                        ", H=" + std::to_string(heads) + ")");
    }
    if (features % devices != 0) {
      throw ConfigError("D must divide F (D=" + std::to_string(devices) +
                        ", F=" + std::to_string(features) + ")");
    }
    if (mlp_hidden % devices != 0) {
      throw ConfigError("D must divide F_mlp (D=" + std::to_string(devices) +
                        ", F_mlp=" + std::to_string(mlp_hidden) + ")");
    }
  }

  friend bool operator==(const TransformerConfig&,
                         const TransformerConfig&) = default;
};

// Gather sites of one layer, in execution order:
//   0                 X_i gather feeding layernorm + Q/K/V
//   1                 H_i gather feeding W_O
//   2 + l, l <= L     gather feeding MLP weight matrix l (l = 0 gathers Y_i)
inline constexpr std::size_t kSiteX = 0;
inline constexpr std::size_t kSiteH = 1;
inline constexpr std::size_t kSiteMlpFirst = 2;

inline std::size_t sites_per_layer(const TransformerConfig& c) {
  return kSiteMlpFirst + c.mlp_weight_layers();
}

/// Width of the activation gathered at `site`.
inline std::size_t site_input_width(const TransformerConfig& c,
                                    std::size_t site) {
  return site <= kSiteMlpFirst ? c.features : c.mlp_hidden;
}

/// Width of the product computed right after the gather at `site`.
inline std::size_t site_output_width(const TransformerConfig& c,
                                     std::size_t site) {
  if (site < kSiteMlpFirst) return c.features;
  const std::size_t l = site - kSiteMlpFirst;
  return l + 1 == c.mlp_weight_layers() ? c.features : c.mlp_hidden;
}

inline std::string to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + s + "' (expected relu|gelu)");
}

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"features", c.features},
                     {"heads", c.heads},
                     {"tokens", c.tokens},
                     {"mlp_hidden", c.mlp_hidden},
                     {"mlp_layers", c.mlp_layers},
                     {"activation", to_string(c.activation)},
                     {"devices", c.devices},
                     {"bytes_per_element", c.bytes_per_element}};
}

/// Missing keys keep their defaults, except `mlp_hidden`, which defaults to
/// 2 * features.
inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
  TransformerConfig d;
  c.layers = j.value("layers", d.layers);
  c.features = j.value("features", d.features);
  c.heads = j.value("heads", d.heads);
  c.tokens = j.value("tokens", d.tokens);
  c.mlp_hidden = j.value("mlp_hidden", 2 * c.features);
  c.mlp_layers = j.value("mlp_layers", d.mlp_layers);
  c.activation =
      activation_from_string(j.value("activation", to_string(d.activation)));
  c.devices = j.value("devices", d.devices);
  c.bytes_per_element = j.value("bytes_per_element", d.bytes_per_element);
}

}  // namespace meshformer
