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

// Model weights, the ModelBundle container and its binary format.
// The byte layout is documented in docs/bundle_format.md.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "meshformer/config.hpp"
#include "meshformer/error.hpp"
#include "meshformer/io.hpp"
#include "meshformer/prune_spec.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer {

struct LayerWeights {
  Matrix wq, wk, wv, wo;       // F x F
  std::vector<Matrix> mlp;     // F x F_mlp, (F_mlp x F_mlp)*, F_mlp x F
  std::vector<float> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // length F

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Shape of MLP weight matrix `l` under `c`.
inline std::pair<std::size_t, std::size_t> mlp_shape(const TransformerConfig& c,
                                                     std::size_t l) {
  const std::size_t in = l == 0 ? c.features : c.mlp_hidden;
  const std::size_t out = l + 1 == c.mlp_weight_layers() ? c.features
                                                         : c.mlp_hidden;
  return {in, out};
}

inline void check_layer_shapes(const TransformerConfig& c,
                               const LayerWeights& w) {
  const std::size_t f = c.features;
  auto is = [](const Matrix& m, std::size_t r, std::size_t k) {
    return m.rows() == r && m.cols() == k;
  };
  bool ok = is(w.wq, f, f) && is(w.wk, f, f) && is(w.wv, f, f) &&
            is(w.wo, f, f) && w.mlp.size() == c.mlp_weight_layers() &&
            w.ln1_gamma.size() == f && w.ln1_beta.size() == f &&
            w.ln2_gamma.size() == f && w.ln2_beta.size() == f;
  for (std::size_t l = 0; ok && l < w.mlp.size(); ++l) {
    auto [in, out] = mlp_shape(c, l);
    ok = is(w.mlp[l], in, out);
  }
  if (!ok) throw ShapeError("layer weights do not match config");
}

struct ModelBundle {
  TransformerConfig config;
  std::vector<LayerWeights> layers;
  std::optional<PruneSpec> prune;
  std::map<std::string, std::string> metadata;

  /// Masks carried by the bundle, or all-ones when it has none.
  PruneSpec prune_or_dense() const {
    return prune ? *prune : PruneSpec::all_ones(config);
  }

  void validate() const {
    config.validate();
    if (layers.size() != config.layers) {
      throw ShapeError("bundle has " + std::to_string(layers.size()) +
                       " layers, config says " +
                       std::to_string(config.layers));
    }
    for (const auto& l : layers) check_layer_shapes(config, l);
    if (prune) prune->validate(config);
  }

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Weights uniform in +-1/sqrt(fan_in), gammas in [0.8, 1.2], betas in
/// [-0.1, 0.1]. Deterministic in (config, seed).
inline ModelBundle random_bundle(const TransformerConfig& c,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&](std::size_t rows, std::size_t cols) {
    const float a = 1.0f / std::sqrt(static_cast<float>(rows));
    std::uniform_real_distribution<float> u(-a, a);
    Matrix m(rows, cols);
    for (float& v : m.data()) v = u(rng);
    return m;
  };
  auto vec = [&](float lo, float hi) {
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(c.features);
    for (float& x : v) x = u(rng);
    return v;
  };
  ModelBundle b;
  b.config = c;
  for (std::size_t i = 0; i < c.layers; ++i) {
    LayerWeights w;
    w.wq = fill(c.features, c.features);
    w.wk = fill(c.features, c.features);
    w.wv = fill(c.features, c.features);
    w.wo = fill(c.features, c.features);
    for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l) {
      auto [in, out] = mlp_shape(c, l);
      w.mlp.push_back(fill(in, out));
    }
    w.ln1_gamma = vec(0.8f, 1.2f);
    w.ln1_beta = vec(-0.1f, 0.1f);
    w.ln2_gamma = vec(0.8f, 1.2f);
    w.ln2_beta = vec(-0.1f, 0.1f);
    b.layers.push_back(std::move(w));
  }
  return b;
}

/// All weights zero, gamma = 1, beta = 0: both residual branches vanish.
inline ModelBundle zero_bundle(const TransformerConfig& c) {
  ModelBundle b;
  b.config = c;
  for (std::size_t i = 0; i < c.layers; ++i) {
    LayerWeights w;
    w.wq = w.wk = w.wv = w.wo = Matrix(c.features, c.features);
    for (std::size_t l = 0; l < c.mlp_weight_layers(); ++l) {
      auto [in, out] = mlp_shape(c, l);
      w.mlp.emplace_back(in, out);
    }
    w.ln1_gamma = w.ln2_gamma = std::vector<float>(c.features, 1.0f);
    w.ln1_beta = w.ln2_beta = std::vector<float>(c.features, 0.0f);
    b.layers.push_back(std::move(w));
  }
  return b;
}

inline constexpr std::array<char, 4> kBundleMagic = {'C', 'A', 'T', 'S'};
inline constexpr std::uint32_t kBundleVersion = 1;

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}
  void u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const char* p, std::size_t n) {
    os_.write(p, static_cast<std::streamsize>(n));
  }
  void matrix(const Matrix& m) {
    for (float v : m.data()) f32(v);
  }
  void floats(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }

 private:
  std::ostream& os_;
};

class ByteReader {
 public:
  explicit ByteReader(std::istream& is) : is_(is) {}
  std::uint8_t u8() {
    char c;
    if (!is_.get(c)) throw TruncatedError("bundle stream ended early");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    std::string s;
    char buf[4096];
    while (s.size() < n) {
      const std::size_t chunk = std::min(n - s.size(), sizeof buf);
      if (!is_.read(buf, static_cast<std::streamsize>(chunk))) {
        throw TruncatedError("bundle stream ended inside a string");
      }
      s.append(buf, chunk);
    }
    return s;
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (float& v : m.data()) v = f32();
    return m;
  }
  std::vector<float> floats(std::size_t n) {
    std::vector<float> v(n);
    for (float& x : v) x = f32();
    return v;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
};

}  // namespace detail

inline void write_bundle(const ModelBundle& b, std::ostream& os) {
  b.validate();
  detail::ByteWriter w(os);
  w.bytes(kBundleMagic.data(), kBundleMagic.size());
  w.u32(kBundleVersion);
  const auto& c = b.config;
  for (std::size_t v : {c.layers, c.features, c.heads, c.tokens, c.mlp_hidden,
                        c.mlp_layers}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(c.activation == Activation::kRelu ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(c.devices));
  w.u32(static_cast<std::uint32_t>(c.bytes_per_element));
  for (const auto& l : b.layers) {
    w.matrix(l.wq);
    w.matrix(l.wk);
    w.matrix(l.wv);
    w.matrix(l.wo);
    for (const auto& m : l.mlp) w.matrix(m);
    w.floats(l.ln1_gamma);
    w.floats(l.ln1_beta);
    w.floats(l.ln2_gamma);
    w.floats(l.ln2_beta);
  }
  w.u8(b.prune ? 1 : 0);
  if (b.prune) {
    for (std::size_t i = 0; i < b.prune->layers(); ++i)
      for (std::size_t s = 0; s < b.prune->sites(); ++s)
        for (std::size_t d = 0; d < b.prune->devices(); ++d)
          for (auto bit : b.prune->mask(i, s, d)) w.u8(bit);
  }
  w.u32(static_cast<std::uint32_t>(b.metadata.size()));
  for (const auto& [k, v] : b.metadata) {
    w.u32(static_cast<std::uint32_t>(k.size()));
    w.bytes(k.data(), k.size());
    w.u32(static_cast<std::uint32_t>(v.size()));
    w.bytes(v.data(), v.size());
  }
  if (!os) throw BundleError("bundle write failed");
}

inline ModelBundle read_bundle(std::istream& is) {
  detail::ByteReader r(is);
  std::array<char, 4> magic{};
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (magic != kBundleMagic) throw BadMagicError("not a model bundle (magic)");
  const std::uint32_t version = r.u32();
  if (version != kBundleVersion) {
    throw VersionMismatchError("bundle version " + std::to_string(version) +
                               ", reader supports " +
                               std::to_string(kBundleVersion));
  }
  ModelBundle b;
  auto& c = b.config;
  c.layers = r.u32();
  c.features = r.u32();
  c.heads = r.u32();
  c.tokens = r.u32();
  c.mlp_hidden = r.u32();
  c.mlp_layers = r.u32();
  const std::uint32_t act = r.u32();
  if (act > 1) throw DimensionMismatchError("unknown activation code");
  c.activation = act == 0 ? Activation::kRelu : Activation::kGelu;
  c.devices = r.u32();
  c.bytes_per_element = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DimensionMismatchError(std::string("bundle header: ") + e.what());
  }
  const std::size_t f = c.features;
  for (std::size_t i = 0; i < c.layers; ++i) {
    LayerWeights l;
    l.wq = r.matrix(f, f);
    l.wk = r.matrix(f, f);
    l.wv = r.matrix(f, f);
    l.wo = r.matrix(f, f);
    for (std::size_t m = 0; m < c.mlp_weight_layers(); ++m) {
      auto [in, out] = mlp_shape(c, m);
      l.mlp.push_back(r.matrix(in, out));
    }
    l.ln1_gamma = r.floats(f);
    l.ln1_beta = r.floats(f);
    l.ln2_gamma = r.floats(f);
    l.ln2_beta = r.floats(f);
    b.layers.push_back(std::move(l));
  }
  const std::uint8_t has_mask = r.u8();
  if (has_mask > 1) throw DimensionMismatchError("bad mask-present flag");
  if (has_mask) {
    PruneSpec p = PruneSpec::all_ones(c);
    for (std::size_t i = 0; i < p.layers(); ++i)
      for (std::size_t s = 0; s < p.sites(); ++s)
        for (std::size_t d = 0; d < p.devices(); ++d)
          for (auto& bit : p.mask(i, s, d)) bit = r.u8();
    p.validate(c);
    b.prune = std::move(p);
  }
  const std::uint32_t entries = r.u32();
  for (std::uint32_t e = 0; e < entries; ++e) {
    std::string key = r.str(r.u32());
    std::string value = r.str(r.u32());
    b.metadata.emplace(std::move(key), std::move(value));
  }
  if (!r.at_end()) throw BundleError("trailing bytes after bundle metadata");
  return b;
}

inline void save_bundle(const ModelBundle& b,
                        const std::filesystem::path& path) {
  write_file_atomic(path, [&](std::ostream& os) { write_bundle(b, os); });
}

inline ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BundleError("cannot open " + path.string());
  return read_bundle(is);
}

}  // namespace meshformer
