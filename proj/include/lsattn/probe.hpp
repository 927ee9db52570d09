#pragma once

// Norm-ratio probe: at initialization, compare the average row norm of the
// local window keys/values with that of the projected (global) ones. Inputs
// are standardized random embeddings pushed through a stack of pre-LN
// residual attention layers, so each layer sees zero-mean unit-variance rows.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lsattn/attention.hpp"

namespace lsattn {

struct NormProbeOptions {
  std::size_t layers = 1;
  // Replace X·Wp with large one-hot logits so P's column c selects token c mod n.
  bool force_one_hot = false;
  InitScheme scheme = InitScheme::ScaledUniform;
};

struct NormProbeRow {
  std::size_t layer = 0;
  std::uint64_t seed = 0;
  double key_ratio = 0.0;
  double value_ratio = 0.0;
  bool dual_ln = false;
};

struct NormProbeResult {
  std::vector<NormProbeRow> rows;

  double mean_key_ratio() const { return mean(&NormProbeRow::key_ratio); }
  double mean_value_ratio() const { return mean(&NormProbeRow::value_ratio); }

  double mean_key_ratio(std::size_t layer) const { return mean(&NormProbeRow::key_ratio, layer); }
  double mean_value_ratio(std::size_t layer) const { return mean(&NormProbeRow::value_ratio, layer); }

 private:
  double mean(double NormProbeRow::*field, std::size_t layer = static_cast<std::size_t>(-1)) const {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& row : rows) {
      if (layer != static_cast<std::size_t>(-1) && row.layer != layer) continue;
      total += row.*field;
      ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
  }
};

inline double mean_row_norm(const Tensor& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (double v : m.row(i)) sq += v * v;
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(m.rows());
}

/// Standardizes every row to zero mean and unit variance.
inline Tensor standardize_rows(const Tensor& x) {
  return layer_norm(x, Tensor({x.cols()}, 1.0), Tensor({x.cols()}, 0.0));
}

inline NormProbeResult norm_ratio_probe(const LSConfig& cfg, std::span<const std::uint64_t> seeds,
                                        const NormProbeOptions& opts = {}) {
  cfg.validate();
  if (seeds.size() < 10) throw ContractError("norm_ratio_probe: at least 10 seeds required");
  if (cfg.r == 0 || cfg.w == 0) throw ConfigError("norm_ratio_probe: both branches (w > 0, r > 0) required");

  NormProbeResult result;
  for (const auto seed : seeds) {
    Rng rng(seed);
    Tensor x = random_normal(rng, {cfg.n, cfg.d});
    for (std::size_t layer = 0; layer < opts.layers; ++layer) {
      const auto mp = init_multi_head_params(rng, cfg, opts.scheme);
      const Tensor u = standardize_rows(x);

      double key_ratio = 0.0, value_ratio = 0.0;
      for (const auto& head : mp.heads) {
        Tensor k = matmul(u, head.wk);
        Tensor v = matmul(u, head.wv);
        Tensor logits = matmul(u, head.wp);
        if (opts.force_one_hot) {
          logits = Tensor::matrix(cfg.n, cfg.r);
          for (std::size_t c = 0; c < cfg.r; ++c) logits(c % cfg.n, c) = 1e4;
        }
        const Tensor pt = softmax(transpose(logits));
        Tensor kbar = matmul(pt, k);
        Tensor vbar = matmul(pt, v);
        if (cfg.dual_ln) {
          k = layer_norm(k, head.ln_local_gain, head.ln_local_bias);
          v = layer_norm(v, head.ln_local_gain, head.ln_local_bias);
          kbar = layer_norm(kbar, head.ln_global_gain, head.ln_global_bias);
          vbar = layer_norm(vbar, head.ln_global_gain, head.ln_global_bias);
        }
        key_ratio += mean_row_norm(k) / mean_row_norm(kbar);
        value_ratio += mean_row_norm(v) / mean_row_norm(vbar);
      }
      const double heads = static_cast<double>(cfg.h);
      result.rows.push_back({layer, seed, key_ratio / heads, value_ratio / heads, cfg.dual_ln});

      const BranchOptions branches{true, true, cfg.dual_ln};
      x = add(x, multi_head(u, mp, [&](const Tensor& in, const HeadParams<Tensor>& hp) {
                return long_short_head(in, hp, cfg, branches);
              }));
    }
  }
  return result;
}

}  // namespace lsattn
