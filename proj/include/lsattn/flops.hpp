#pragma once

// Closed-form operation counts for an encoder stack, and an independent
// runtime measurement that executes the same stack with instrumented kernels.
//
// Convention: one multiply-accumulate of a matrix product counts as one
// FLOP; an affine layer norm counts five per element. Softmax, residual adds,
// biases and activations are free. Embeddings and classifier heads are not
// part of the stack.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "lsattn/attention.hpp"
#include "lsattn/causal.hpp"
#include "lsattn/config.hpp"

namespace lsattn {

enum class Variant { Full, Window, Projection, LongShort };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::Window: return "window";
    case Variant::Projection: return "projection";
    case Variant::LongShort: return "long-short";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view name) {
  if (name == "full") return Variant::Full;
  if (name == "window") return Variant::Window;
  if (name == "projection") return Variant::Projection;
  if (name == "long-short") return Variant::LongShort;
  return std::nullopt;
}

/// Whole encoder layers (pre-LN, attention, feed-forward) or the multi-head
/// attention block alone.
enum class Scope { Encoder, Attention };

struct ArchSpec {
  std::size_t layers = 1;
  std::size_t d = 64;
  std::size_t h = 2;
  std::size_t ffn = 128;
  std::size_t n = 1024;
  std::size_t w = 0;
  std::size_t r = 0;
  std::size_t l = 1;
  Variant variant = Variant::Full;
  Mode mode = Mode::Bidirectional;
  bool dual_ln = true;  // only meaningful when both branches are present
  std::size_t documents = 1;
  Scope scope = Scope::Encoder;

  bool uses_window() const { return variant == Variant::Window || variant == Variant::LongShort; }
  bool uses_global() const { return variant == Variant::Projection || variant == Variant::LongShort; }
  bool uses_dual_ln() const { return dual_ln && variant == Variant::LongShort; }

  LSConfig attention_config() const {
    LSConfig cfg;
    cfg.n = n;
    cfg.d = d;
    cfg.h = h;
    cfg.w = uses_window() ? w : 0;
    cfg.r = uses_global() ? r : 0;
    cfg.l = l;
    cfg.mode = mode;
    cfg.dual_ln = uses_dual_ln();
    return cfg;
  }

  void validate() const {
    if (layers == 0 || documents == 0 || n == 0) throw ConfigError("arch: layers, documents and n must be positive");
    if (uses_window() && w == 0) throw ConfigError("arch: variant needs w > 0");
    if (uses_global() && r == 0) throw ConfigError("arch: variant needs r > 0");
    if (mode == Mode::Causal && variant != Variant::LongShort && variant != Variant::Full) {
      throw ConfigError("arch: causal mode supports full and long-short variants");
    }
    if (variant != Variant::Full) attention_config().validate();
    else if (d % h != 0) throw ConfigError("arch: d not divisible by h");
  }
};

struct FlopReport {
  // Per layer, per document.
  std::uint64_t qkv = 0;
  std::uint64_t scores = 0;
  std::uint64_t values = 0;
  std::uint64_t projection = 0;
  std::uint64_t output = 0;
  std::uint64_t ffn = 0;
  std::uint64_t layer_norm = 0;
  std::size_t layers = 1;
  std::size_t documents = 1;

  std::uint64_t per_layer() const { return qkv + scores + values + projection + output + ffn + layer_norm; }
  std::uint64_t total() const { return per_layer() * layers * documents; }
  double gflops() const { return static_cast<double>(total()) * 1e-9; }
};

inline FlopReport count_flops(const ArchSpec& arch) {
  arch.validate();
  using U = std::uint64_t;
  const U n = arch.n, d = arch.d, h = arch.h, ffn = arch.ffn, w = arch.w, r = arch.r, l = arch.l;
  const U dk = d / h;
  FlopReport rep;
  rep.layers = arch.layers;
  rep.documents = arch.documents;

  rep.qkv = 3 * n * d * d;
  rep.output = n * d * d;

  // Key slots attended per head, summed over queries.
  U slots = 0;
  if (arch.variant == Variant::Full) {
    slots = n * n;  // the causal oracle masks but still forms every product
  } else {
    if (arch.uses_window()) slots += n * 2 * w;
    if (arch.uses_global()) {
      if (arch.mode == Mode::Bidirectional) {
        slots += n * r;
        rep.projection = h * (n * d * r + 2 * r * n * dk);
      } else {
        const U segments = n / l;
        rep.projection = h * segments * (l * d * r + 2 * r * l * dk);
        for (U start = 0; start < n; start += w) {
          const U end = std::min(start + w, n);
          slots += (end - start) * std::min(segments, (end - 1) / l) * r;
        }
      }
    }
  }
  rep.scores = h * slots * dk;
  rep.values = h * slots * dk;

  if (arch.uses_dual_ln()) {
    // Local LN on all n key and value rows; global LN on the projected rows.
    const U projected_rows = arch.mode == Mode::Bidirectional ? r : (n / l) * r;
    rep.layer_norm += h * 2 * 5 * (n + projected_rows) * dk;
  }
  if (arch.scope == Scope::Encoder) {
    rep.ffn = 2 * n * d * ffn;
    rep.layer_norm += 2 * 5 * n * d;
  }
  return rep;
}

/// Executes the stack described by `arch` on random data and returns what the
/// instrumented kernels observed. Should equal count_flops(arch).total().
inline std::uint64_t measure_flops(const ArchSpec& arch, std::uint64_t seed = 0) {
  arch.validate();
  const LSConfig cfg = arch.attention_config();
  const BranchOptions branches{arch.uses_window(), arch.uses_global(), arch.uses_dual_ln()};
  Rng rng(seed);

  FlopCounter counter;
  for (std::size_t doc = 0; doc < arch.documents; ++doc) {
    Tensor x = random_normal(rng, {arch.n, arch.d});
    for (std::size_t layer = 0; layer < arch.layers; ++layer) {
      LSConfig init_cfg = cfg;
      if (arch.variant == Variant::Full) {
        init_cfg.w = 0;
        init_cfg.r = 1;
        init_cfg.mode = Mode::Bidirectional;
      }
      const auto mp = init_multi_head_params(rng, init_cfg);
      Tensor w1 = init_matrix(rng, arch.d, arch.ffn);
      Tensor w2 = init_matrix(rng, arch.ffn, arch.d);
      const Tensor gain({arch.d}, 1.0), bias({arch.d}, 0.0);

      CountFlopsScope scope(counter);
      auto head_fn = [&](const Tensor& in, const HeadParams<Tensor>& hp) {
        if (arch.variant == Variant::Full) {
          return arch.mode == Mode::Causal ? causal_full_attention_oracle(in, hp) : full_attention_head(in, hp);
        }
        return arch.mode == Mode::Causal ? causal_aggregate_head(in, hp, cfg) : long_short_head(in, hp, cfg, branches);
      };
      if (arch.scope == Scope::Attention) {
        x = multi_head(x, mp, head_fn);
        continue;
      }
      x = add(x, multi_head(layer_norm(x, gain, bias), mp, head_fn));
      x = add(x, matmul(gelu(matmul(layer_norm(x, gain, bias), w1)), w2));
    }
  }
  return counter.total();
}

/// Long-range benchmark encoder presets: 2 layers, d=64, h=2, ffn=128.
inline std::optional<ArchSpec> named_preset(std::string_view name) {
  ArchSpec a;
  a.layers = 2;
  a.d = 64;
  a.h = 2;
  a.ffn = 128;
  a.w = 8;
  a.r = 32;
  if (name == "lra-listops") {
    a.n = 2048;
  } else if (name == "lra-text") {
    a.n = 4096;
  } else if (name == "lra-retrieval") {
    a.n = 4096;
    a.documents = 2;  // two documents encoded per example
  } else if (name == "char-lm") {
    const auto cfg = char_lm_preset(8192, 512, 8);
    a.n = cfg.n;
    a.d = cfg.d;
    a.h = cfg.h;
    a.ffn = 4 * cfg.d;
    a.w = cfg.w;
    a.l = cfg.l;
    a.r = cfg.r;
    a.layers = 12;
    a.mode = Mode::Causal;
    a.variant = Variant::LongShort;
  } else {
    return std::nullopt;
  }
  return a;
}

/// Applies `key = value` overrides (layers, d, h, ffn, n, w, r, l, documents,
/// dual_ln, mode, variant, scope).
inline ArchSpec apply_overrides(ArchSpec a, const KeyValueFile& kv) {
  a.layers = kv.get_size("layers", a.layers);
  a.d = kv.get_size("d", a.d);
  a.h = kv.get_size("h", a.h);
  a.ffn = kv.get_size("ffn", a.ffn);
  a.n = kv.get_size("n", a.n);
  a.w = kv.get_size("w", a.w);
  a.r = kv.get_size("r", a.r);
  a.l = kv.get_size("l", a.l);
  a.documents = kv.get_size("documents", a.documents);
  a.dual_ln = kv.get_bool("dual_ln", a.dual_ln);
  if (kv.contains("mode")) {
    const auto m = kv.get("mode", "");
    if (m == "causal") a.mode = Mode::Causal;
    else if (m == "bidirectional") a.mode = Mode::Bidirectional;
    else throw ConfigError("presets: unknown mode " + m);
  }
  if (kv.contains("variant")) {
    const auto v = parse_variant(kv.get("variant", ""));
    if (!v) throw ConfigError("presets: unknown variant " + kv.get("variant", ""));
    a.variant = *v;
  }
  if (kv.contains("scope")) {
    const auto s = kv.get("scope", "");
    if (s == "encoder") a.scope = Scope::Encoder;
    else if (s == "attention") a.scope = Scope::Attention;
    else throw ConfigError("presets: unknown scope " + s);
  }
  return a;
}

}  // namespace lsattn
