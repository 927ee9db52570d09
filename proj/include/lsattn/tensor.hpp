#pragma once

// Dense row-major float64 tensors and the handful of kernels the attention
// math is built from. All kernels are pure and accumulate left to right.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsattn/instrument.hpp"

namespace lsattn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
 public:
  using Storage = std::vector<double, CountingAllocator<double>>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape_));
    }
  }
  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t k = m ? rows.begin()->size() : 0;
    Tensor out = matrix(m, k);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != k) throw ShapeError("from_rows: ragged rows");
      std::copy(row.begin(), row.end(), out.data_.begin() + static_cast<std::ptrdiff_t>(i * k));
      ++i;
    }
    return out;
  }

  static Tensor identity(std::size_t n) {
    Tensor out = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Leading dimension, and product of the remaining ones. A rank-1 tensor is
  // treated as a single row.
  std::size_t rows() const { return rank() <= 1 ? 1 : shape_.front(); }
  std::size_t cols() const {
    if (rank() == 0) return 1;
    if (rank() == 1) return shape_[0];
    return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1}, std::multiplies<>{});
  }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return {data_.data(), data_.size()}; }
  std::span<const double> values() const { return {data_.data(), data_.size()}; }
  std::span<double> row(std::size_t i) { return values().subspan(i * cols(), cols()); }
  std::span<const double> row(std::size_t i) const { return values().subspan(i * cols(), cols()); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  Storage data_;
};

/// Boolean attendability mask; true = may be attended.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool fill = true) : rows_(rows), cols_(cols), data_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { data_[i * cols_ + j] = v ? 1 : 0; }

  std::size_t count_row(std::size_t i) const {
    return static_cast<std::size_t>(std::count(data_.begin() + static_cast<std::ptrdiff_t>(i * cols_),
                                               data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols_), 1));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Seeded generator. Draws are derived from raw mt19937_64 output so the
/// sequence does not depend on the standard library's distribution classes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw ContractError("Rng::below: bound must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % bound;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

enum class InitScheme { ScaledUniform, ScaledNormal };

// Zero-mean entries with variance 1/rows (fan-in scaling).
inline Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, InitScheme scheme = InitScheme::ScaledUniform,
                          double gain = 1.0) {
  Tensor out = Tensor::matrix(rows, cols);
  if (rows == 0) return out;
  const double fan_in = static_cast<double>(rows);
  if (scheme == InitScheme::ScaledUniform) {
    const double bound = gain * std::sqrt(3.0 / fan_in);
    for (auto& v : out.values()) v = rng.uniform(-bound, bound);
  } else {
    const double stddev = gain / std::sqrt(fan_in);
    for (auto& v : out.values()) v = stddev * rng.normal();
  }
  return out;
}

inline Tensor random_normal(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor out(std::move(shape));
  for (auto& v : out.values()) v = stddev * rng.normal();
  return out;
}

namespace kernel {

// c[m×p] (+)= a[m×k] · b[k×p], i-k-j order: every c(i,j) still accumulates
// its k terms in increasing k.
inline void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                 std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * p;
    const double* arow = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b.data() + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  Tensor c = Tensor::matrix(m, p);
  gemm(a.values(), b.values(), c.values(), m, k, p);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor t = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace kernel

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c = kernel::matmul(a, b);
  detail::report_matmul(static_cast<std::uint64_t>(a.shape()[0]) * a.shape()[1] * b.shape()[1]);
  return c;
}

inline Tensor transpose(const Tensor& a) { return kernel::transpose(a); }

inline void check_mask(const Tensor& logits, const Mask& mask) {
  if (logits.rows() != mask.rows() || logits.cols() != mask.cols()) {
    throw ShapeError("masked_softmax: mask shape does not match logits " + to_string(logits.shape()));
  }
}

/// Row-wise softmax over the last dimension. Masked entries come out exactly 0.
inline Tensor masked_softmax(const Tensor& logits, const Mask& mask) {
  check_mask(logits, mask);
  Tensor out(logits.shape());
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j)) {
        peak = std::max(peak, logits(i, j));
        any = true;
      }
    }
    if (!any) throw ContractError("masked_softmax: row " + std::to_string(i) + " has no attendable entry");
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask(i, j)) {
        out(i, j) = std::exp(logits(i, j) - peak);
        total += out(i, j);
      }
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= total;
  }
  return out;
}

inline Tensor softmax(const Tensor& logits) { return masked_softmax(logits, Mask(logits.rows(), logits.cols())); }

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row layer normalization, biased variance, eps inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  if (d == 0 || gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: parameter width does not match input " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < d; ++j) dst[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
  }
  // Affine layer norm costs five operations per element.
  detail::report_layer_norm(5ULL * x.size());
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rows() == 0 && (a.rank() < 2 || a.cols() == b.cols() || a.cols() == 0)) return b;
  if (b.rows() == 0 && (b.rank() < 2 || b.cols() == a.cols() || b.cols() == 0)) return a;
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: trailing dims differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out = Tensor::matrix(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

/// Stacks all parts in one pass; empty parts are skipped.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  std::size_t rows = 0, cols = 0;
  bool seen = false;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    if (seen && p.cols() != cols) throw ShapeError("concat_rows: trailing dims differ " + to_string(p.shape()));
    cols = p.cols();
    rows += p.rows();
    seen = true;
  }
  if (!seen) return parts.front();
  Tensor out = Tensor::matrix(rows, cols);
  auto dst = out.values().begin();
  for (const auto& p : parts) dst = std::copy(p.values().begin(), p.values().end(), dst);
  return out;
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    width += p.cols();
  }
  Tensor out = Tensor::matrix(m, width);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i) std::copy(p.row(i).begin(), p.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.cols();
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  Tensor out = Tensor::matrix(end - begin, a.cols());
  std::copy(a.values().begin() + static_cast<std::ptrdiff_t>(begin * a.cols()),
            a.values().begin() + static_cast<std::ptrdiff_t>(end * a.cols()), out.values().begin());
  return out;
}

inline constexpr std::ptrdiff_t kPadIndex = -1;

/// Row gather; kPadIndex yields a zero row.
inline Tensor gather_rows(const Tensor& a, std::span<const std::ptrdiff_t> index) {
  Tensor out = Tensor::matrix(index.size(), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kPadIndex) continue;
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= a.rows()) throw ShapeError("gather_rows: index out of range");
    const auto src = a.row(static_cast<std::size_t>(index[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shapes differ");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("hadamard: shapes differ");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

// Adds a length-cols bias to every row.
inline Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (bias.size() != a.cols()) throw ShapeError("add_row: bias width mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return out;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }
inline double gelu_grad(double x) {
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}
}  // namespace detail

inline Tensor gelu(const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.values()) v = detail::gelu(v);
  return out;
}

inline double sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return total;
}

// Σ a ⊙ weights, as a scalar.
inline double weighted_sum(const Tensor& a, const Tensor& weights) {
  if (a.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a[i] * weights[i];
  return total;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shapes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Plain tensors are their own value; the tape overloads this for Var.
inline const Tensor& value_of(const Tensor& t) { return t; }

}  // namespace lsattn
