#pragma once

// Autoregressive long-short attention.
//
// Window: query t attends the non-future part of its home segment (length w)
// plus the w tokens left of it. Global: the sequence is cut into segments of
// l tokens, each compressed independently to r rows; query t sees segments
// 0 .. floor(t/l)-1, so its own segment is never visible through the
// projection and the window covers the gap.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lsattn/attention.hpp"

namespace lsattn {

struct CausalSpan {
  std::size_t query = 0;
  std::vector<std::ptrdiff_t> keys;  // home start - w .. t
  std::vector<bool> attendable;
  std::size_t projected_segments = 0;  // floor(t / l)

  std::size_t real_window_count() const {
    std::size_t c = 0;
    for (bool a : attendable) c += a ? 1 : 0;
    return c;
  }
};

template <class V>
struct SegmentProjection {
  std::vector<ProjectedKV<V>> segments;  // P is l × r per segment
  std::size_t segment_length = 0;
  std::size_t rank = 0;

  /// Number of segments visible to query t.
  std::size_t visible(std::size_t t) const { return std::min(t / segment_length, segments.size()); }
};

inline CausalSpan causal_window_span(std::size_t t, const LSConfig& cfg) {
  if (cfg.mode != Mode::Causal) throw ConfigError("causal_window_span: causal mode required");
  if (cfg.w == 0) throw ConfigError("causal_window_span: w must be positive");
  if (t >= cfg.n) throw ContractError("causal_window_span: query index out of range");
  const auto start = static_cast<std::ptrdiff_t>(home_segment_start(t, cfg.w));
  CausalSpan span;
  span.query = t;
  for (std::ptrdiff_t j = start - static_cast<std::ptrdiff_t>(cfg.w); j <= static_cast<std::ptrdiff_t>(t); ++j) {
    span.keys.push_back(j);
    span.attendable.push_back(j >= 0);
  }
  span.projected_segments = t / cfg.l;
  return span;
}

namespace detail {

template <class V>
SegmentProjection<V> project_segments(const V& x, const V& keys, const V& values, const V& wp, std::size_t l,
                                      std::size_t r) {
  const std::size_t n = value_of(x).rows();
  SegmentProjection<V> out;
  out.segment_length = l;
  out.rank = r;
  for (std::size_t start = 0; start + l <= n; start += l) {
    out.segments.push_back(project(slice_rows(x, start, start + l), slice_rows(keys, start, start + l),
                                   slice_rows(values, start, start + l), wp));
  }
  return out;
}

}  // namespace detail

/// Projects every complete length-l segment independently.
template <class V>
SegmentProjection<V> causal_segment_projection(const V& x, const HeadParams<V>& p, const LSConfig& cfg) {
  cfg.validate();
  if (cfg.mode != Mode::Causal) throw ConfigError("causal_segment_projection: causal mode required");
  if (cfg.r == 0) throw ConfigError("causal_segment_projection: r must be at least 1");
  return detail::project_segments(x, matmul(x, p.wk), matmul(x, p.wv), p.wp, cfg.l, cfg.r);
}

/// Causal long-short attention for one head; DualLN per cfg.dual_ln.
template <class V>
V causal_aggregate_head(const V& x, const HeadParams<V>& p, const LSConfig& cfg, AttentionTrace* trace = nullptr) {
  cfg.validate();
  if (cfg.mode != Mode::Causal) throw ConfigError("causal_aggregate_head: causal mode required");
  const std::size_t n = value_of(x).rows();
  const std::size_t w = cfg.w, r = cfg.r, l = cfg.l;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  V q = matmul(x, p.wq);
  V k = matmul(x, p.wk);
  V v = matmul(x, p.wv);

  // Projected keys of all complete segments, stacked r rows per segment.
  std::vector<V> kbars, vbars;
  if (r > 0) {
    auto seg = detail::project_segments(x, k, v, p.wp, l, r);
    for (auto& s : seg.segments) {
      if (cfg.dual_ln) {
        s.kbar = layer_norm(s.kbar, p.ln_global_gain, p.ln_global_bias);
        s.vbar = layer_norm(s.vbar, p.ln_global_gain, p.ln_global_bias);
      }
      kbars.push_back(s.kbar);
      vbars.push_back(s.vbar);
    }
  }

  V k_local = cfg.dual_ln ? layer_norm(k, p.ln_local_gain, p.ln_local_bias) : k;
  V v_local = cfg.dual_ln ? layer_norm(v, p.ln_local_gain, p.ln_local_bias) : v;

  std::vector<V> blocks;
  std::vector<std::ptrdiff_t> index(2 * w);
  for (std::size_t start = 0; start < n; start += w) {
    const std::size_t end = std::min(start + w, n);
    const std::size_t segs = std::min(kbars.size(), (end - 1) / l);
    const std::size_t slots = 2 * w + segs * r;
    for (std::size_t j = 0; j < 2 * w; ++j) {
      const auto pos = static_cast<std::ptrdiff_t>(start) - static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(j);
      index[j] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(n)) ? pos : kPadIndex;
    }
    Mask mask(end - start, slots, false);
    for (std::size_t i = 0; i < end - start; ++i) {
      const std::size_t t = start + i;
      for (std::size_t j = 0; j < 2 * w; ++j) {
        mask.set(i, j, index[j] != kPadIndex && static_cast<std::size_t>(index[j]) <= t);
      }
      const std::size_t visible = std::min(segs, t / l);
      for (std::size_t j = 0; j < visible * r; ++j) mask.set(i, 2 * w + j, true);
    }

    V keys = gather_rows(k_local, index);
    V values = gather_rows(v_local, index);
    if (segs > 0) {
      std::vector<V> kparts{keys}, vparts{values};
      kparts.insert(kparts.end(), kbars.begin(), kbars.begin() + static_cast<std::ptrdiff_t>(segs));
      vparts.insert(vparts.end(), vbars.begin(), vbars.begin() + static_cast<std::ptrdiff_t>(segs));
      keys = detail::concat_all_rows<V>(kparts);
      values = detail::concat_all_rows<V>(vparts);
    }
    blocks.push_back(detail::attend(slice_rows(q, start, end), keys, values, mask, inv_scale, trace));
  }
  return detail::concat_all_rows<V>(blocks);
}

/// Full attention with future positions masked; the causal reference.
template <class V>
V causal_full_attention_oracle(const V& x, const HeadParams<V>& p, AttentionTrace* trace = nullptr) {
  const std::size_t n = value_of(x).rows();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(value_of(p.wq).cols()));
  Mask mask(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
  return detail::attend(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv), mask, inv_scale, trace);
}

}  // namespace lsattn
