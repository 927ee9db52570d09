#pragma once

// Scalar reference implementations used by the tests. They work on nested
// std::vector matrices and share no code with the library kernels: spans,
// projections and normalizations are re-derived from their definitions one
// query at a time.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lsattn/params.hpp"
#include "lsattn/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat from(const lsattn::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

inline Vec vec(const lsattn::Tensor& t) { return Vec(t.values().begin(), t.values().end()); }

inline lsattn::Tensor to_tensor(const Mat& m) {
  const std::size_t cols = m.empty() ? 0 : m[0].size();
  lsattn::Tensor t = lsattn::Tensor::matrix(m.size(), cols);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) t(i, j) = m[i][j];
  return t;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), p = b.empty() ? 0 : b[0].size();
  Mat c(n, Vec(p, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i][t] * b[t][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  if (a.empty()) return {};
  Mat t(a[0].size(), Vec(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec softmax(const Vec& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec e(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (e[i] = std::exp(logits[i] - m));
  for (auto& v : e) v /= z;
  return e;
}

inline Vec layer_norm(const Vec& x, const Vec& gain, const Vec& bias, double eps = 1e-5) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * gain[i] + bias[i];
  return out;
}

/// softmax(q·k / sqrt(d_k)) weighted sum of values.
inline Vec attend(const Vec& q, const Mat& keys, const Mat& values) {
  Vec logits;
  for (const auto& k : keys) logits.push_back(dot(q, k) / std::sqrt(static_cast<double>(q.size())));
  const Vec a = softmax(logits);
  Vec out(values[0].size(), 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += a[j] * values[j][c];
  return out;
}

struct Head {
  Mat wq, wk, wv, wp;
  Vec local_gain, local_bias, global_gain, global_bias;

  explicit Head(const lsattn::HeadParams<lsattn::Tensor>& p)
      : wq(from(p.wq)),
        wk(from(p.wk)),
        wv(from(p.wv)),
        wp(from(p.wp)),
        local_gain(vec(p.ln_local_gain)),
        local_bias(vec(p.ln_local_bias)),
        global_gain(vec(p.ln_global_gain)),
        global_bias(vec(p.ln_global_bias)) {}
};

struct Projection {
  Mat p;  // tokens × r
  Mat kbar, vbar;
};

/// Columns of P are softmaxes over tokens of X·Wp.
inline Projection project(const Mat& x, const Head& h) {
  const Mat logits = matmul(x, h.wp);
  const std::size_t n = x.size(), r = h.wp[0].size();
  Projection out;
  out.p.assign(n, Vec(r));
  for (std::size_t c = 0; c < r; ++c) {
    Vec col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = logits[i][c];
    const Vec s = softmax(col);
    for (std::size_t i = 0; i < n; ++i) out.p[i][c] = s[i];
  }
  const Mat k = matmul(x, h.wk), v = matmul(x, h.wv);
  out.kbar.assign(r, Vec(k[0].size(), 0.0));
  out.vbar.assign(r, Vec(v[0].size(), 0.0));
  for (std::size_t c = 0; c < r; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k[0].size(); ++j) {
        out.kbar[c][j] += out.p[i][c] * k[i][j];
        out.vbar[c][j] += out.p[i][c] * v[i][j];
      }
  return out;
}

inline Mat full_head(const Mat& x, const Head& h, bool causal = false) {
  const Mat q = matmul(x, h.wq), k = matmul(x, h.wk), v = matmul(x, h.wv);
  Mat out;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const std::size_t visible = causal ? t + 1 : x.size();
    out.push_back(attend(q[t], Mat(k.begin(), k.begin() + visible), Mat(v.begin(), v.begin() + visible)));
  }
  return out;
}

/// Bidirectional long-short head: per query, the real positions of its
/// window ([s - w/2, s + 3w/2) with s the home segment start) followed by the
/// r projected rows, all under one softmax.
inline Mat long_short_head(const Mat& x, const Head& h, std::size_t w, std::size_t r, bool dual_ln) {
  const long n = static_cast<long>(x.size());
  const Mat q = matmul(x, h.wq);
  Mat k = matmul(x, h.wk), v = matmul(x, h.wv);
  Mat kbar, vbar;
  if (r > 0) {
    auto pr = project(x, h);
    kbar = pr.kbar;
    vbar = pr.vbar;
  }
  if (dual_ln) {
    for (auto& row : k) row = layer_norm(row, h.local_gain, h.local_bias);
    for (auto& row : v) row = layer_norm(row, h.local_gain, h.local_bias);
    for (auto& row : kbar) row = layer_norm(row, h.global_gain, h.global_bias);
    for (auto& row : vbar) row = layer_norm(row, h.global_gain, h.global_bias);
  }
  Mat out;
  for (long t = 0; t < n; ++t) {
    Mat keys, values;
    if (w > 0) {
      const long s = t / static_cast<long>(w) * static_cast<long>(w);
      const long half = static_cast<long>(w) / 2;
      for (long j = s - half; j < s + static_cast<long>(w) + half; ++j) {
        if (j < 0 || j >= n) continue;
        keys.push_back(k[static_cast<std::size_t>(j)]);
        values.push_back(v[static_cast<std::size_t>(j)]);
      }
    }
    keys.insert(keys.end(), kbar.begin(), kbar.end());
    values.insert(values.end(), vbar.begin(), vbar.end());
    out.push_back(attend(q[static_cast<std::size_t>(t)], keys, values));
  }
  return out;
}

/// Causal long-short head: window keys [s - w, t], plus the r projected rows
/// of every complete segment of length l that ends at or before t's segment
/// start, each segment projected from its own tokens only.
inline Mat causal_head(const Mat& x, const Head& h, std::size_t w, std::size_t l, std::size_t r, bool dual_ln) {
  const std::size_t n = x.size();
  const Mat q = matmul(x, h.wq);
  Mat k = matmul(x, h.wk), v = matmul(x, h.wv);
  std::vector<Projection> segments;
  if (r > 0) {
    for (std::size_t s = 0; (s + 1) * l <= n; ++s) {
      segments.push_back(project(Mat(x.begin() + static_cast<long>(s * l), x.begin() + static_cast<long>((s + 1) * l)), h));
      if (dual_ln) {
        for (auto& row : segments.back().kbar) row = layer_norm(row, h.global_gain, h.global_bias);
        for (auto& row : segments.back().vbar) row = layer_norm(row, h.global_gain, h.global_bias);
      }
    }
  }
  if (dual_ln) {
    for (auto& row : k) row = layer_norm(row, h.local_gain, h.local_bias);
    for (auto& row : v) row = layer_norm(row, h.local_gain, h.local_bias);
  }
  Mat out;
  for (std::size_t t = 0; t < n; ++t) {
    Mat keys, values;
    const std::size_t home = t / w * w;
    for (std::size_t j = home >= w ? home - w : 0; j <= t; ++j) {
      keys.push_back(k[j]);
      values.push_back(v[j]);
    }
    for (std::size_t s = 0; s < t / l && s < segments.size(); ++s) {
      keys.insert(keys.end(), segments[s].kbar.begin(), segments[s].kbar.end());
      values.insert(values.end(), segments[s].vbar.begin(), segments[s].vbar.end());
    }
    out.push_back(attend(q[t], keys, values));
  }
  return out;
}

/// Concatenate head outputs along width and apply Wo.
inline Mat combine_heads(const std::vector<Mat>& heads, const Mat& wo) {
  Mat cat(heads[0].size());
  for (std::size_t i = 0; i < cat.size(); ++i)
    for (const auto& h : heads) cat[i].insert(cat[i].end(), h[i].begin(), h[i].end());
  return matmul(cat, wo);
}

inline double max_abs_diff(const Mat& a, const lsattn::Tensor& b) {
  double worst = 0.0;
  if (a.size() != b.rows()) return INFINITY;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b.cols()) return INFINITY;
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b(i, j)));
  }
  return worst;
}

}  // namespace oracle
