#pragma once

#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "lsattn/autodiff.hpp"
#include "lsattn/config.hpp"
#include "lsattn/tensor.hpp"

namespace lsattn {

/// Learned matrices of one attention head. V is Tensor for plain evaluation
/// or Var when recording on a tape.
template <class V>
struct HeadParams {
  V wq, wk, wv;  // d × d_k
  V wp;          // d × r, dynamic projection
  V ln_local_gain, ln_local_bias;
  V ln_global_gain, ln_global_bias;

  template <class F>
  void for_each(F&& f) {
    f(wq), f(wk), f(wv), f(wp);
    f(ln_local_gain), f(ln_local_bias), f(ln_global_gain), f(ln_global_bias);
  }
  template <class F>
  void for_each(F&& f) const {
    f(wq), f(wk), f(wv), f(wp);
    f(ln_local_gain), f(ln_local_bias), f(ln_global_gain), f(ln_global_bias);
  }
};

template <class V>
struct MultiHeadParams {
  std::vector<HeadParams<V>> heads;
  V wo;  // d × d

  template <class F>
  void for_each(F&& f) {
    for (auto& h : heads) h.for_each(f);
    f(wo);
  }
  template <class F>
  void for_each(F&& f) const {
    for (const auto& h : heads) h.for_each(f);
    f(wo);
  }
};

inline HeadParams<Tensor> init_head_params(Rng& rng, const LSConfig& cfg, InitScheme scheme = InitScheme::ScaledUniform) {
  cfg.validate();
  const std::size_t dk = cfg.head_dim();
  HeadParams<Tensor> p;
  p.wq = init_matrix(rng, cfg.d, dk, scheme);
  p.wk = init_matrix(rng, cfg.d, dk, scheme);
  p.wv = init_matrix(rng, cfg.d, dk, scheme);
  p.wp = init_matrix(rng, cfg.d, cfg.r, scheme);
  p.ln_local_gain = Tensor({dk}, 1.0);
  p.ln_local_bias = Tensor({dk}, 0.0);
  p.ln_global_gain = Tensor({dk}, 1.0);
  p.ln_global_bias = Tensor({dk}, 0.0);
  return p;
}

inline MultiHeadParams<Tensor> init_multi_head_params(Rng& rng, const LSConfig& cfg,
                                                      InitScheme scheme = InitScheme::ScaledUniform) {
  MultiHeadParams<Tensor> mp;
  for (std::size_t i = 0; i < cfg.h; ++i) mp.heads.push_back(init_head_params(rng, cfg, scheme));
  mp.wo = init_matrix(rng, cfg.d, cfg.d, scheme);
  return mp;
}

/// Copies parameters onto `tape` as gradient-receiving leaves.
inline HeadParams<Var> on_tape(Tape& tape, const HeadParams<Tensor>& p) {
  HeadParams<Var> out;
  out.wq = tape.variable(p.wq);
  out.wk = tape.variable(p.wk);
  out.wv = tape.variable(p.wv);
  out.wp = tape.variable(p.wp);
  out.ln_local_gain = tape.variable(p.ln_local_gain);
  out.ln_local_bias = tape.variable(p.ln_local_bias);
  out.ln_global_gain = tape.variable(p.ln_global_gain);
  out.ln_global_bias = tape.variable(p.ln_global_bias);
  return out;
}

inline MultiHeadParams<Var> on_tape(Tape& tape, const MultiHeadParams<Tensor>& mp) {
  MultiHeadParams<Var> out;
  for (const auto& h : mp.heads) out.heads.push_back(on_tape(tape, h));
  out.wo = tape.variable(mp.wo);
  return out;
}

/// Flattens parameters in for_each order.
template <class P>
std::vector<Tensor> flatten(const P& params) {
  std::vector<Tensor> out;
  params.for_each([&](const Tensor& t) { out.push_back(t); });
  return out;
}

/// Rebuilds a parameter struct of the same layout as `like` from a flat list.
template <class V, template <class> class P>
P<V> unflatten(const P<Tensor>& like, std::span<const V> flat) {
  P<V> out;
  if constexpr (std::is_same_v<P<V>, MultiHeadParams<V>>) {
    out.heads.resize(like.heads.size());
  }
  std::size_t i = 0;
  out.for_each([&](V& slot) { slot = flat[i++]; });
  if (i != flat.size()) throw ContractError("unflatten: parameter count mismatch");
  return out;
}

}  // namespace lsattn
