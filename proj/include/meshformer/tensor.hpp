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

// Dense float kernels shared by the centralized reference model and the
// per-device executor. Every product accumulates in float with a fixed
// row / k / column loop order, so two callers that feed the same operands and
// the same held-column set get bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "meshformer/error.hpp"

namespace meshformer {

/// Row-major N x M float matrix. Rows are tokens, columns are features.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<float>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  float operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<float> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Sorted, duplicate-free set of column indices.
class ColumnSet {
 public:
  ColumnSet() = default;
  explicit ColumnSet(std::vector<std::size_t> indices)
      : indices_(std::move(indices)) {
    for (std::size_t i = 1; i < indices_.size(); ++i) {
      if (indices_[i] <= indices_[i - 1]) {
        throw ShapeError("column set must be strictly increasing");
      }
    }
  }

  /// Columns [begin, end).
  static ColumnSet range(std::size_t begin, std::size_t end) {
    ColumnSet s;
    for (std::size_t c = begin; c < end; ++c) s.indices_.push_back(c);
    return s;
  }
  static ColumnSet all(std::size_t n) { return range(0, n); }

  std::size_t size() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }
  std::span<const std::size_t> indices() const noexcept { return indices_; }
  auto begin() const noexcept { return indices_.begin(); }
  auto end() const noexcept { return indices_.end(); }

  bool contains(std::size_t c) const noexcept {
    return std::binary_search(indices_.begin(), indices_.end(), c);
  }

  /// Throws ShapeError unless every index is < cols.
  void check_within(std::size_t cols) const {
    if (!indices_.empty() && indices_.back() >= cols) {
      throw ShapeError("column index " + std::to_string(indices_.back()) +
                       " out of range for width " + std::to_string(cols));
    }
  }

  ColumnSet unite(const ColumnSet& other) const {
    ColumnSet out;
    std::set_union(indices_.begin(), indices_.end(), other.indices_.begin(),
                   other.indices_.end(), std::back_inserter(out.indices_));
    return out;
  }
  ColumnSet intersect(const ColumnSet& other) const {
    ColumnSet out;
    std::set_intersection(indices_.begin(), indices_.end(),
                          other.indices_.begin(), other.indices_.end(),
                          std::back_inserter(out.indices_));
    return out;
  }
  ColumnSet minus(const ColumnSet& other) const {
    ColumnSet out;
    std::set_difference(indices_.begin(), indices_.end(),
                        other.indices_.begin(), other.indices_.end(),
                        std::back_inserter(out.indices_));
    return out;
  }

  friend bool operator==(const ColumnSet&, const ColumnSet&) = default;

 private:
  std::vector<std::size_t> indices_;
};

enum class Activation { kRelu, kGelu };

namespace detail {

inline void multiply_rows(const Matrix& a, const Matrix& b,
                          std::span<const std::size_t> ks, Matrix& out) {
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k : ks) {
      const float aik = a(i, k);
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
    }
  }
}

}  // namespace detail

/// Restricts the product to the held columns of `a` and matching rows of `b`.
/// Equivalent to a (b ⊙ P) when P zeroes the rows of b outside `held`.
inline Matrix masked_matmul(const Matrix& a, const Matrix& b,
                            const ColumnSet& held) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " * " +
                     std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
  held.check_within(a.cols());
  Matrix out(a.rows(), b.cols());
  detail::multiply_rows(a, b, held.indices(), out);
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  return masked_matmul(a, b, ColumnSet::all(a.cols()));
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const float mx = *std::max_element(in.begin(), in.end());
    float sum = 0.0f;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (float& v : o) v /= sum;
  }
  return out;
}

/// Layernorm whose per-row statistics come from `stat_cols` only. Entries
/// outside `stat_cols` are copied through unchanged. Population variance,
/// eps inside the square root.
inline Matrix layernorm_rows(const Matrix& a, const ColumnSet& stat_cols,
                             std::span<const float> gamma,
                             std::span<const float> beta, float eps = 1e-5f) {
  if (stat_cols.empty()) {
    throw DegenerateInputError("layernorm over an empty column set");
  }
  stat_cols.check_within(a.cols());
  if (gamma.size() != a.cols() || beta.size() != a.cols()) {
    throw ShapeError("layernorm: gamma/beta length must equal column count");
  }
  Matrix out = a;
  const auto count = static_cast<float>(stat_cols.size());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    float sum = 0.0f;
    for (std::size_t c : stat_cols) sum += in[c];
    const float mean = sum / count;
    float var = 0.0f;
    for (std::size_t c : stat_cols) {
      const float d = in[c] - mean;
      var += d * d;
    }
    var /= count;
    const float inv_std = 1.0f / std::sqrt(var + eps);
    for (std::size_t c : stat_cols) {
      o[c] = (in[c] - mean) * inv_std * gamma[c] + beta[c];
    }
  }
  return out;
}

inline float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

inline Matrix activation(const Matrix& a, Activation kind) {
  Matrix out = a;
  for (float& v : out.data()) {
    v = kind == Activation::kRelu ? std::max(v, 0.0f) : gelu(v);
  }
  return out;
}

/// Columns [first, first + count) of `a`.
inline Matrix slice_columns(const Matrix& a, std::size_t first,
                            std::size_t count) {
  if (first + count > a.cols()) throw ShapeError("column slice out of range");
  Matrix out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy_n(a.row(i).begin() + first, count, out.row(i).begin());
  return out;
}

/// Writes `src` into columns [first, first + src.cols()) of `dst`.
inline void write_columns(Matrix& dst, std::size_t first, const Matrix& src) {
  if (dst.rows() != src.rows() || first + src.cols() > dst.cols()) {
    throw ShapeError("column write out of range");
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    std::copy(src.row(i).begin(), src.row(i).end(),
              dst.row(i).begin() + first);
}

/// Copies the listed columns of `src` into the same positions of `dst`.
inline void copy_columns(Matrix& dst, const Matrix& src,
                         const ColumnSet& cols) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw ShapeError("copy_columns: shape mismatch");
  }
  cols.check_within(src.cols());
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t c : cols) dst(i, c) = src(i, c);
}

inline void add_in_place(Matrix& dst, const Matrix& src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw ShapeError("add: shape mismatch");
  }
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

/// One scaled-dot-product head: softmax(q k^T * scale) v.
inline Matrix attention_head(const Matrix& q, const Matrix& k, const Matrix& v,
                             float scale) {
  Matrix scores = matmul(q, transpose(k));
  for (float& s : scores.data()) s *= scale;
  return matmul(softmax_rows(scores), v);
}

inline float max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: shape mismatch");
  }
  float m = 0.0f;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace meshformer
