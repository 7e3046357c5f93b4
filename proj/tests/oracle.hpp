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

// Test-only second implementation of the layer, in double precision, written
// straight from the algebra: every weight product is (W ⊙ P) with P built
// from the block formula here, and the layernorm feeding output column k
// uses exactly the input columns j with P[j][k] = 1. Shares no code with the
// library kernels.

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "meshformer/bundle.hpp"
#include "meshformer/prune_spec.hpp"
#include "meshformer/tensor.hpp"

namespace meshformer::oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Matrix& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline Mat ones(std::size_t r, std::size_t c) {
  return Mat(r, std::vector<double>(c, 1.0));
}

/// P for one site, straight from the block definition.
inline Mat block_mask(const std::vector<PruneSpec::Mask>& per_device,
                      std::size_t out_per_device) {
  const std::size_t d = per_device.size();
  const std::size_t s = per_device.front().size();
  Mat p(d * s, std::vector<double>(d * out_per_device));
  for (std::size_t j = 0; j < d * s; ++j)
    for (std::size_t k = 0; k < d * out_per_device; ++k)
      p[j][k] = (j / s == k / out_per_device) ? 1.0 : per_device[j / s][j % s];
  return p;
}

inline double gelu(double x) {
  return 0.5 * x *
         (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

inline double act(double x, Activation a) {
  return a == Activation::kRelu ? std::max(x, 0.0) : gelu(x);
}

// out[r][k] = sum_j in_k[r][j] * W[j][k] * P[j][k], where in_k is `in`
// optionally layer-normalized over the columns {j : P[j][k] = 1}.
inline Mat product(const Mat& in, const Matrix& w, const Mat& p,
                   const std::vector<float>* gamma,
                   const std::vector<float>* beta) {
  const std::size_t n = in.size(), fi = w.rows(), fo = w.cols();
  Mat out(n, std::vector<double>(fo, 0.0));
  for (std::size_t k = 0; k < fo; ++k) {
    for (std::size_t r = 0; r < n; ++r) {
      double mean = 0, var = 0, cnt = 0;
      if (gamma) {
        for (std::size_t j = 0; j < fi; ++j)
          if (p[j][k] != 0) mean += in[r][j], cnt += 1;
        mean /= cnt;
        for (std::size_t j = 0; j < fi; ++j)
          if (p[j][k] != 0) var += (in[r][j] - mean) * (in[r][j] - mean);
        var /= cnt;
      }
      double acc = 0;
      for (std::size_t j = 0; j < fi; ++j) {
        if (p[j][k] == 0) continue;
        double v = in[r][j];
        if (gamma) v = (v - mean) / std::sqrt(var + 1e-5) * (*gamma)[j] + (*beta)[j];
        acc += v * w(j, k);
      }
      out[r][k] = acc;
    }
  }
  return out;
}

/// mask(layer, site) -> P for that site; return an all-ones matrix for the
/// unpruned model.
using MaskFn = std::function<Mat(std::size_t layer, std::size_t site)>;

inline Mat forward(const ModelBundle& b, const Matrix& x1, const MaskFn& mask) {
  const auto& c = b.config;
  const std::size_t n = c.tokens, f = c.features, dh = c.head_dim();
  Mat x = to_mat(x1);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const LayerWeights& w = b.layers[i];
    const Mat p0 = mask(i, 0);
    const Mat q = product(x, w.wq, p0, &w.ln1_gamma, &w.ln1_beta);
    const Mat k = product(x, w.wk, p0, &w.ln1_gamma, &w.ln1_beta);
    const Mat v = product(x, w.wv, p0, &w.ln1_gamma, &w.ln1_beta);
    Mat heads(n, std::vector<double>(f, 0.0));
    for (std::size_t h = 0; h < c.heads; ++h) {
      for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t t = 0; t < n; ++t) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e)
            dot += q[r][h * dh + e] * k[t][h * dh + e];
          s[t] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[t]);
        }
        double z = 0;
        for (double& v2 : s) z += (v2 = std::exp(v2 - mx));
        for (std::size_t e = 0; e < dh; ++e) {
          double acc = 0;
          for (std::size_t t = 0; t < n; ++t) acc += s[t] / z * v[t][h * dh + e];
          heads[r][h * dh + e] = acc;
        }
      }
    }
    Mat y = product(heads, w.wo, mask(i, 1), nullptr, nullptr);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t col = 0; col < f; ++col) y[r][col] += x[r][col];

    Mat z = y;
    for (std::size_t l = 0; l < w.mlp.size(); ++l) {
      const bool first = l == 0, last = l + 1 == w.mlp.size();
      z = product(z, w.mlp[l], mask(i, 2 + l), first ? &w.ln2_gamma : nullptr,
                  first ? &w.ln2_beta : nullptr);
      if (!last)
        for (auto& row : z)
          for (double& v2 : row) v2 = act(v2, c.activation);
    }
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t col = 0; col < f; ++col) z[r][col] += y[r][col];
    x = std::move(z);
  }
  return x;
}

inline Mat forward_dense(const ModelBundle& b, const Matrix& x1) {
  return forward(b, x1, [&](std::size_t, std::size_t site) {
    const auto& c = b.config;
    const std::size_t in = site <= 2 ? c.features : c.mlp_hidden;
    const std::size_t out =
        site < 2 ? c.features
                 : (site - 2 + 1 == c.mlp_layers + 1 ? c.features : c.mlp_hidden);
    return ones(in, out);
  });
}

inline Mat forward_masked(const ModelBundle& b, const PruneSpec& prune,
                          const Matrix& x1) {
  return forward(b, x1, [&](std::size_t layer, std::size_t site) {
    const auto& c = b.config;
    std::vector<PruneSpec::Mask> rows;
    for (std::size_t d = 0; d < c.devices; ++d)
      rows.push_back(prune.mask(layer, site, d));
    const std::size_t out =
        site < 2 ? c.features
                 : (site - 2 + 1 == c.mlp_layers + 1 ? c.features : c.mlp_hidden);
    return block_mask(rows, out / c.devices);
  });
}

inline double max_abs_diff(const Mat& a, const Matrix& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      m = std::max(m, std::abs(a[i][j] - static_cast<double>(b(i, j))));
  return m;
}

/// Random masks: each entry 0 with probability `p_zero`.
inline PruneSpec random_prune(const TransformerConfig& c, double p_zero,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution zero(p_zero);
  PruneSpec p = PruneSpec::all_ones(c);
  for (std::size_t i = 0; i < p.layers(); ++i)
    for (std::size_t s = 0; s < p.sites(); ++s)
      for (std::size_t d = 0; d < p.devices(); ++d)
        for (auto& bit : p.mask(i, s, d)) bit = zero(rng) ? 0 : 1;
  return p;
}

inline Matrix random_input(const TransformerConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  Matrix x(c.tokens, c.features);
  for (float& v : x.data()) v = g(rng);
  return x;
}

}  // namespace meshformer::oracle
