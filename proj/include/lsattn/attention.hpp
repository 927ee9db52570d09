#pragma once

// Bidirectional long-short attention. Every head function is a template over
// the value type (Tensor or Var) so the same code is evaluated directly and
// differentiated on a tape.
//
// Local branch: the sequence is cut into disjoint segments of w tokens; every
// query attends its home segment plus w/2 tokens on either side (2w slots,
// zero-padded at the ends). Global branch: P = softmax over tokens of X·Wp
// compresses keys and values to r rows shared by all queries. The aggregate
// runs one softmax over the union of both key sets.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "lsattn/config.hpp"
#include "lsattn/params.hpp"
#include "lsattn/tensor.hpp"

namespace lsattn {

/// Key slots of one query in the local window. Positions may fall outside
/// [0, n); those slots are padding and are not attendable.
struct AttentionSpan {
  std::size_t query = 0;
  std::vector<std::ptrdiff_t> keys;
  std::vector<bool> attendable;

  std::size_t real_count() const {
    std::size_t c = 0;
    for (bool a : attendable) c += a ? 1 : 0;
    return c;
  }
};

template <class V>
struct ProjectedKV {
  V p;     // n × r, each column a distribution over tokens
  V kbar;  // r × d_k
  V vbar;  // r × d_k
};

/// Attention weights seen while evaluating a head, one block at a time.
struct AttentionTrace {
  std::vector<Tensor> weights;
  std::vector<Mask> masks;
};

struct BranchOptions {
  bool window = true;
  bool global = true;
  bool dual_ln = false;
};

inline std::size_t home_segment_start(std::size_t t, std::size_t w) { return (t / w) * w; }

inline AttentionSpan window_span(std::size_t t, const LSConfig& cfg) {
  if (cfg.mode != Mode::Bidirectional) throw ConfigError("window_span: bidirectional mode required");
  if (cfg.w == 0) throw ConfigError("window_span: w must be positive");
  if (t >= cfg.n) throw ContractError("window_span: query index out of range");
  const auto start = static_cast<std::ptrdiff_t>(home_segment_start(t, cfg.w));
  const auto half = static_cast<std::ptrdiff_t>(cfg.w / 2);
  AttentionSpan span;
  span.query = t;
  for (std::ptrdiff_t j = start - half; j < start + static_cast<std::ptrdiff_t>(cfg.w) + half; ++j) {
    span.keys.push_back(j);
    span.attendable.push_back(j >= 0 && j < static_cast<std::ptrdiff_t>(cfg.n));
  }
  return span;
}

namespace detail {

template <class V>
V concat_all_rows(std::span<const V> parts) {
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

template <class V>
V attend(const V& q, const V& keys, const V& values, const Mask& mask, double inv_scale, AttentionTrace* trace) {
  V weights = masked_softmax(scale(matmul(q, transpose(keys)), inv_scale), mask);
  if (trace) {
    trace->weights.push_back(value_of(weights));
    trace->masks.push_back(mask);
  }
  return matmul(weights, values);
}

/// Dynamic projection of precomputed keys/values. Returns P (n × r) and the
/// compressed r × d_k keys and values.
template <class V>
ProjectedKV<V> project(const V& x, const V& keys, const V& values, const V& wp) {
  V pt = softmax(transpose(matmul(x, wp)));  // r × n, rows are distributions over tokens
  ProjectedKV<V> out;
  out.kbar = matmul(pt, keys);
  out.vbar = matmul(pt, values);
  out.p = transpose(pt);
  return out;
}

}  // namespace detail

/// Plain scaled dot-product attention over the whole sequence.
template <class V>
V full_attention_head(const V& x, const HeadParams<V>& p, AttentionTrace* trace = nullptr) {
  const std::size_t n = value_of(x).rows();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(value_of(p.wq).cols()));
  V q = matmul(x, p.wq);
  V k = matmul(x, p.wk);
  V v = matmul(x, p.wv);
  return detail::attend(q, k, v, Mask(n, n), inv_scale, trace);
}

/// r = 0 yields an empty ProjectedKV: the global branch is skipped.
template <class V>
ProjectedKV<V> dynamic_projection(const V& x, const HeadParams<V>& p, const LSConfig& cfg) {
  if (cfg.r == 0) return {};
  return detail::project(x, matmul(x, p.wk), matmul(x, p.wv), p.wp);
}

template <class V>
V long_range_attention_head(const V& x, const ProjectedKV<V>& pkv, const HeadParams<V>& p, const LSConfig& cfg,
                            AttentionTrace* trace = nullptr) {
  if (cfg.r == 0) throw ConfigError("long_range_attention_head: r must be at least 1");
  const std::size_t n = value_of(x).rows();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  return detail::attend(matmul(x, p.wq), pkv.kbar, pkv.vbar, Mask(n, value_of(pkv.kbar).rows()), inv_scale, trace);
}

/// Long-short attention for one head. `opts` selects the local window, the
/// global projection, or both, and whether the two key/value sets pass
/// through their own layer norms before being joined.
template <class V>
V long_short_head(const V& x, const HeadParams<V>& p, const LSConfig& cfg, BranchOptions opts,
                  AttentionTrace* trace = nullptr) {
  cfg.validate();
  const std::size_t n = value_of(x).rows();
  const bool use_window = opts.window && cfg.w > 0;
  const bool use_global = opts.global && cfg.r > 0;
  if (!use_window && !use_global) throw ConfigError("long_short_head: no attention branch selected");
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  V q = matmul(x, p.wq);
  V k = matmul(x, p.wk);
  V v = matmul(x, p.wv);

  std::optional<ProjectedKV<V>> global;
  if (use_global) {
    global = detail::project(x, k, v, p.wp);
    if (opts.dual_ln) {
      global->kbar = layer_norm(global->kbar, p.ln_global_gain, p.ln_global_bias);
      global->vbar = layer_norm(global->vbar, p.ln_global_gain, p.ln_global_bias);
    }
  }
  if (!use_window) {
    return detail::attend(q, global->kbar, global->vbar, Mask(n, cfg.r), inv_scale, trace);
  }

  V k_local = opts.dual_ln ? layer_norm(k, p.ln_local_gain, p.ln_local_bias) : k;
  V v_local = opts.dual_ln ? layer_norm(v, p.ln_local_gain, p.ln_local_bias) : v;

  const std::size_t w = cfg.w;
  const auto half = static_cast<std::ptrdiff_t>(w / 2);
  const std::size_t slots = 2 * w + (use_global ? cfg.r : 0);
  std::vector<V> blocks;
  std::vector<std::ptrdiff_t> index(2 * w);
  for (std::size_t start = 0; start < n; start += w) {
    const std::size_t end = std::min(start + w, n);
    for (std::size_t j = 0; j < 2 * w; ++j) {
      const auto pos = static_cast<std::ptrdiff_t>(start) - half + static_cast<std::ptrdiff_t>(j);
      index[j] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(n)) ? pos : kPadIndex;
    }
    Mask mask(end - start, slots);
    for (std::size_t i = 0; i < end - start; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) mask.set(i, j, index[j] != kPadIndex);

    V keys = gather_rows(k_local, index);
    V values = gather_rows(v_local, index);
    if (use_global) {
      keys = concat_rows(keys, global->kbar);
      values = concat_rows(values, global->vbar);
    }
    blocks.push_back(detail::attend(slice_rows(q, start, end), keys, values, mask, inv_scale, trace));
  }
  return detail::concat_all_rows<V>(blocks);
}

template <class V>
V sliding_window_attention_head(const V& x, const HeadParams<V>& p, const LSConfig& cfg, AttentionTrace* trace = nullptr) {
  if (cfg.w < 2) throw ConfigError("sliding_window_attention_head: w must be at least 2");
  return long_short_head(x, p, cfg, BranchOptions{true, false, false}, trace);
}

/// Joint softmax over window keys and projected keys, no normalization.
template <class V>
V aggregate_plain_head(const V& x, const HeadParams<V>& p, const LSConfig& cfg, AttentionTrace* trace = nullptr) {
  return long_short_head(x, p, cfg, BranchOptions{true, true, false}, trace);
}

/// As aggregate_plain_head, with separate layer norms on the local and the
/// global keys/values.
template <class V>
V aggregate_dualln_head(const V& x, const HeadParams<V>& p, const LSConfig& cfg, AttentionTrace* trace = nullptr) {
  return long_short_head(x, p, cfg, BranchOptions{true, true, true}, trace);
}

/// Runs `head_fn(x, head_params)` for every head, concatenates along width
/// and applies the output projection.
template <class V, class HeadFn>
V multi_head(const V& x, const MultiHeadParams<V>& mp, HeadFn&& head_fn) {
  std::vector<V> outs;
  outs.reserve(mp.heads.size());
  for (const auto& head : mp.heads) outs.push_back(head_fn(x, head));
  return matmul(concat_cols(std::span<const V>(outs)), mp.wo);
}

/// Evaluation order and thread count for plain multi-head evaluation.
struct HeadSchedule {
  std::vector<std::size_t> order;  // empty: 0..h-1
  std::size_t threads = 1;
};

template <class HeadFn>
Tensor multi_head(const Tensor& x, const MultiHeadParams<Tensor>& mp, HeadFn&& head_fn, const HeadSchedule& schedule) {
  const std::size_t h = mp.heads.size();
  std::vector<std::size_t> order = schedule.order;
  if (order.empty())
    for (std::size_t i = 0; i < h; ++i) order.push_back(i);
  if (order.size() != h) throw ContractError("multi_head: schedule must list every head once");
  std::vector<Tensor> outs(h);
  if (schedule.threads <= 1) {
    for (const auto i : order) outs[i] = head_fn(x, mp.heads[i]);
  } else {
    std::vector<std::thread> pool;
    const std::size_t workers = std::min(schedule.threads, h);
    for (std::size_t wkr = 0; wkr < workers; ++wkr) {
      pool.emplace_back([&, wkr] {
        for (std::size_t j = wkr; j < h; j += workers) outs[order[j]] = head_fn(x, mp.heads[order[j]]);
      });
    }
    for (auto& t : pool) t.join();
  }
  return matmul(concat_cols(std::span<const Tensor>(outs)), mp.wo);
}

}  // namespace lsattn
