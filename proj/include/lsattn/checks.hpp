#pragma once

// Self-check suite behind `lsattn check`. Each check is small enough that the
// whole suite runs in well under a minute on one core.

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lsattn/bench.hpp"
#include "lsattn/toy_lm.hpp"

namespace lsattn {

/// Head computations covered by gradient and stochasticity checks.
enum class HeadKind { Full, Window, Projection, Plain, DualLN, Causal };

inline constexpr HeadKind kAllHeadKinds[] = {HeadKind::Full,  HeadKind::Window, HeadKind::Projection,
                                             HeadKind::Plain, HeadKind::DualLN, HeadKind::Causal};

inline std::string_view to_string(HeadKind k) {
  switch (k) {
    case HeadKind::Full: return "full";
    case HeadKind::Window: return "window";
    case HeadKind::Projection: return "projection";
    case HeadKind::Plain: return "plain-aggregate";
    case HeadKind::DualLN: return "dualln-aggregate";
    case HeadKind::Causal: return "causal-aggregate";
  }
  return "?";
}

/// A valid config for `kind` at length n (w, r, l chosen small).
inline LSConfig head_kind_config(HeadKind kind, std::size_t n, std::size_t d, std::size_t h) {
  LSConfig cfg;
  cfg.n = n;
  cfg.d = d;
  cfg.h = h;
  cfg.w = 2;
  cfg.r = 2;
  cfg.l = 2;
  cfg.dual_ln = false;
  switch (kind) {
    case HeadKind::Full: cfg.w = 0; cfg.r = 1; break;
    case HeadKind::Window: cfg.r = 0; break;
    case HeadKind::Projection: cfg.w = 0; cfg.r = 3; break;
    case HeadKind::Plain: break;
    case HeadKind::DualLN: cfg.dual_ln = true; break;
    case HeadKind::Causal: cfg.mode = Mode::Causal; cfg.dual_ln = true; break;
  }
  return cfg;
}

template <class V>
V apply_head(HeadKind kind, const V& x, const HeadParams<V>& p, const LSConfig& cfg, AttentionTrace* trace = nullptr) {
  switch (kind) {
    case HeadKind::Full: return full_attention_head(x, p, trace);
    case HeadKind::Window: return sliding_window_attention_head(x, p, cfg, trace);
    case HeadKind::Projection: return long_short_head(x, p, cfg, BranchOptions{false, true, false}, trace);
    case HeadKind::Plain: return aggregate_plain_head(x, p, cfg, trace);
    case HeadKind::DualLN: return aggregate_dualln_head(x, p, cfg, trace);
    case HeadKind::Causal: return causal_aggregate_head(x, p, cfg, trace);
  }
  throw ContractError("apply_head: unknown kind");
}

/// Gradient check of weighted_sum(multi_head(x)) with respect to x and every
/// attention parameter. A plain sum would be degenerate: under DualLN each
/// normalized value row has zero mean, so the sum of outputs is constant.
inline GradCheckReport attention_grad_check(HeadKind kind, std::uint64_t seed, std::size_t n = 8, std::size_t d = 8,
                                            std::size_t h = 2) {
  const LSConfig cfg = head_kind_config(kind, n, d, h);
  Rng rng(seed);
  const auto mp = init_multi_head_params(rng, cfg);
  std::vector<Tensor> params{random_normal(rng, {n, d})};
  for (auto& t : flatten(mp)) params.push_back(std::move(t));
  const Tensor weights = random_normal(rng, {n, d});

  auto loss = [&](Tape&, std::span<const Var> vars) {
    const auto mpv = unflatten<Var, MultiHeadParams>(mp, vars.subspan(1));
    const Var y = multi_head(vars[0], mpv, [&](const Var& in, const HeadParams<Var>& hp) { return apply_head(kind, in, hp, cfg); });
    return weighted_sum(y, weights);
  };
  GradCheckOptions opts;
  opts.seed = seed;
  return finite_diff_check(loss, params, opts);
}

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

inline CheckResult run_check(const std::string& name, const std::function<std::string(bool&)>& body) {
  CheckResult r{name, false, {}};
  try {
    bool ok = true;
    r.detail = body(ok);
    r.passed = ok;
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

}  // namespace detail

inline CheckResult check_flop_table() {
  return detail::run_check("flop-table", [](bool& ok) {
    const char* presets[] = {"lra-listops", "lra-text", "lra-retrieval"};
    const double full_expected[] = {1.21, 4.57, 9.14};
    const double ls_expected[] = {0.20, 0.40, 0.80};
    std::string detail;
    for (int i = 0; i < 3; ++i) {
      ArchSpec a = *named_preset(presets[i]);
      a.variant = Variant::Full;
      const double full = count_flops(a).gflops();
      a.variant = Variant::LongShort;
      const double ls = count_flops(a).gflops();
      ok = ok && detail::round2(full) == full_expected[i] && std::abs(ls / ls_expected[i] - 1.0) <= 0.10;
      detail += std::string(presets[i]) + " full=" + detail::fmt(full) + " ls=" + detail::fmt(ls) + "; ";
    }
    return detail;
  });
}

inline CheckResult check_flops_instrumented(std::uint64_t seed) {
  return detail::run_check("flops-closed-form-vs-instrumented", [seed](bool& ok) {
    std::size_t cases = 0;
    for (const auto variant : {Variant::Full, Variant::Window, Variant::Projection, Variant::LongShort}) {
      for (const auto mode : {Mode::Bidirectional, Mode::Causal}) {
        if (mode == Mode::Causal && (variant == Variant::Window || variant == Variant::Projection)) continue;
        for (const auto scope : {Scope::Encoder, Scope::Attention}) {
          ArchSpec a;
          a.layers = 2;
          a.d = 8;
          a.h = 2;
          a.ffn = 12;
          a.n = 21;
          a.w = 4;
          a.r = 3;
          a.l = 4;
          a.variant = variant;
          a.mode = mode;
          a.scope = scope;
          a.documents = 2;
          ok = ok && count_flops(a).total() == measure_flops(a, seed);
          ++cases;
        }
      }
    }
    return std::to_string(cases) + " configurations";
  });
}

inline CheckResult check_oracle_equivalence(std::uint64_t seed, std::size_t instances = 5) {
  return detail::run_check("window-covers-all-equals-full", [=](bool& ok) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      LSConfig cfg;
      cfg.n = 1 + rng.below(24);
      cfg.h = 1 + rng.below(2);
      cfg.d = cfg.h * (1 + rng.below(4));
      cfg.w = 2 * ((cfg.n + 1) / 2);
      cfg.r = 0;
      const auto p = init_head_params(rng, cfg);
      const Tensor x = random_normal(rng, {cfg.n, cfg.d});
      worst = std::max(worst, max_abs_diff(aggregate_plain_head(x, p, cfg), full_attention_head(x, p)));
    }
    ok = worst <= 1e-12;
    return "max abs diff " + detail::fmt(worst);
  });
}

/// Rows of every attention matrix sum to 1 with masked entries exactly 0, and
/// projection columns are distributions over tokens.
inline CheckResult check_stochasticity(std::uint64_t seed, std::size_t configs = 20) {
  return detail::run_check("row-column-stochastic", [=](bool& ok) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t c = 0; c < configs; ++c) {
      const HeadKind kind = kAllHeadKinds[c % std::size(kAllHeadKinds)];
      const std::size_t n = 4 + rng.below(20);
      LSConfig cfg = head_kind_config(kind, n, 4, 1);
      if (cfg.w) cfg.w = 2 * (1 + rng.below(4));
      if (cfg.r) cfg.r = 1 + rng.below(5);
      if (cfg.mode == Mode::Causal) cfg.l = 1 + rng.below(2 * cfg.w);
      const auto p = init_head_params(rng, cfg);
      const Tensor x = random_normal(rng, {n, cfg.d}, 2.0);
      AttentionTrace trace;
      (void)apply_head(kind, x, p, cfg, &trace);
      for (std::size_t b = 0; b < trace.weights.size(); ++b) {
        const Tensor& wts = trace.weights[b];
        for (std::size_t i = 0; i < wts.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < wts.cols(); ++j) {
            const double v = wts(i, j);
            if (v < 0.0 || (!trace.masks[b](i, j) && v != 0.0)) ok = false;
            s += v;
          }
          worst = std::max(worst, std::abs(s - 1.0));
        }
      }
      if (cfg.r > 0 && cfg.mode == Mode::Bidirectional) {
        const Tensor pm = dynamic_projection(x, p, cfg).p;
        for (std::size_t j = 0; j < pm.cols(); ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < pm.rows(); ++i) s += pm(i, j);
          worst = std::max(worst, std::abs(s - 1.0));
        }
      }
    }
    ok = ok && worst <= 1e-12;
    return "max |sum - 1| " + detail::fmt(worst);
  });
}

inline CheckResult check_causality(std::uint64_t seed, std::size_t n = 16) {
  return detail::run_check("causal-no-future-leak", [=](bool& ok) {
    LSConfig cfg;
    cfg.n = n;
    cfg.d = 4;
    cfg.h = 2;
    cfg.w = 4;
    cfg.l = 4;
    cfg.r = 2;
    cfg.mode = Mode::Causal;
    Rng rng(seed);
    const auto mp = init_multi_head_params(rng, cfg);
    const Tensor x = random_normal(rng, {n, cfg.d});
    auto run = [&](const Tensor& in) {
      return multi_head(in, mp, [&](const Tensor& xi, const HeadParams<Tensor>& hp) { return causal_aggregate_head(xi, hp, cfg); });
    };
    const Tensor base = run(x);
    std::size_t perturbations = 0;
    for (std::size_t j = 0; j < n; ++j) {
      Tensor y = x;
      for (std::size_t c = 0; c < cfg.d; ++c) y(j, c) += 1.0 + rng.uniform();
      const Tensor out = run(y);
      for (std::size_t t = 0; t < j; ++t)
        for (std::size_t c = 0; c < cfg.d; ++c) ok = ok && out(t, c) == base(t, c);
      ++perturbations;
    }
    return std::to_string(perturbations) + " perturbations";
  });
}

inline CheckResult check_gradients(std::uint64_t seed) {
  return detail::run_check("finite-difference-gradients", [=](bool& ok) {
    std::string detail;
    for (const auto kind : kAllHeadKinds) {
      const auto rep = attention_grad_check(kind, seed);
      ok = ok && rep.max_rel_error < 1e-5;
      detail += std::string(to_string(kind)) + "=" + detail::fmt(rep.max_rel_error) + " ";
    }
    return detail;
  });
}

inline CheckResult check_head_schedule(std::uint64_t seed, std::size_t threads) {
  return detail::run_check("head-order-independence", [=](bool& ok) {
    LSConfig cfg;
    cfg.n = 32;
    cfg.d = 16;
    cfg.h = 4;
    cfg.w = 4;
    cfg.r = 3;
    cfg.dual_ln = true;
    Rng rng(seed);
    const auto mp = init_multi_head_params(rng, cfg);
    const Tensor x = random_normal(rng, {cfg.n, cfg.d});
    auto fn = [&](const Tensor& in, const HeadParams<Tensor>& hp) { return aggregate_dualln_head(in, hp, cfg); };
    const Tensor ref = multi_head(x, mp, fn);
    const Tensor reversed = multi_head(x, mp, fn, HeadSchedule{{3, 2, 1, 0}, 1});
    const Tensor threaded = multi_head(x, mp, fn, HeadSchedule{{}, std::max<std::size_t>(threads, 2)});
    ok = ref == reversed && ref == threaded;
    return "bitwise comparison";
  });
}

inline CheckResult check_norm_probe(std::uint64_t seed) {
  return detail::run_check("norm-ratio-probe", [=](bool& ok) {
    LSConfig cfg;
    cfg.n = 256;
    cfg.d = 64;
    cfg.h = 2;
    cfg.w = 8;
    cfg.r = 8;
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(seed * 1000 + s);
    cfg.dual_ln = false;
    const auto plain = norm_ratio_probe(cfg, seeds);
    cfg.dual_ln = true;
    const auto dual = norm_ratio_probe(cfg, seeds);
    ok = plain.mean_key_ratio() > 1.05;
    for (const auto& row : dual.rows) ok = ok && row.key_ratio >= 0.98 && row.key_ratio <= 1.02;

    LSConfig full_rank = cfg;
    full_rank.n = 16;
    full_rank.r = 16;
    full_rank.dual_ln = false;
    NormProbeOptions one_hot;
    one_hot.force_one_hot = true;
    const auto boundary = norm_ratio_probe(full_rank, seeds, one_hot);
    for (const auto& row : boundary.rows) ok = ok && std::abs(row.key_ratio - 1.0) <= 1e-6;
    return "plain=" + detail::fmt(plain.mean_key_ratio()) + " dual=" + detail::fmt(dual.mean_key_ratio()) +
           " one-hot=" + detail::fmt(boundary.mean_key_ratio());
  });
}

inline CheckResult check_toy_lm(std::uint64_t seed) {
  return detail::run_check("toy-lm", [=](bool& ok) {
    ModelConfig cfg;
    cfg.seed = seed;
    Rng rng(seed);
    std::vector<std::uint8_t> random_bytes(4096);
    for (auto& b : random_bytes) b = static_cast<std::uint8_t>(rng.below(256));
    Rng init(seed);
    const auto model = build_model(cfg, init);
    const double untrained = evaluate_bpc(model, cfg, random_bytes);
    ok = std::abs(untrained - 8.0) <= 0.1;

    cfg.steps = 200;
    cfg.eval_every = 0;
    const std::vector<std::uint8_t> constant(1024, 'a');
    const auto rep = train(cfg, constant);
    ok = ok && rep.final_val_bpc < 0.05;

    cfg.steps = 3;
    const auto a = train(cfg, random_bytes);
    const auto b = train(cfg, random_bytes);
    ok = ok && flatten(a.params.blocks.front().attn) == flatten(b.params.blocks.front().attn) && a.params.w_out == b.params.w_out;
    return "untrained=" + detail::fmt(untrained) + " one-byte=" + detail::fmt(rep.final_val_bpc);
  });
}

inline std::vector<CheckResult> run_invariant_suite(std::uint64_t seed, std::size_t threads = 1) {
  return {check_flop_table(),          check_flops_instrumented(seed), check_oracle_equivalence(seed),
          check_stochasticity(seed),   check_causality(seed),          check_gradients(seed),
          check_head_schedule(seed, threads), check_norm_probe(seed), check_toy_lm(seed)};
}

}  // namespace lsattn
