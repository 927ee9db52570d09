#pragma once

// Byte-level pre-LN autoregressive language model built on causal
// long-short attention, trained with plain SGD. Small enough to train on a
// laptop core in seconds; used to exercise the full forward/backward path and
// the DualLN ablation.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsattn/autodiff.hpp"
#include "lsattn/causal.hpp"
#include "lsattn/params.hpp"

namespace lsattn {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d = 32;
  std::size_t h = 2;
  std::size_t ffn = 64;
  std::size_t vocab = 256;
  std::size_t seq_len = 32;
  std::size_t w = 4;
  std::size_t l = 4;
  std::size_t r = 1;
  bool dual_ln = true;
  double dropout = 0.0;
  double learning_rate = 0.1;
  std::size_t steps = 200;
  std::size_t batch = 4;
  std::uint64_t seed = 1;
  std::size_t eval_every = 50;
  std::size_t eval_windows = 8;  // validation windows per evaluation
  double output_init_gain = 0.1;
  double stop_below_val_bpc = 0.0;  // end training once an evaluation drops below this; 0 disables

  LSConfig attention() const {
    LSConfig cfg;
    cfg.n = seq_len;
    cfg.d = d;
    cfg.h = h;
    cfg.w = w;
    cfg.l = l;
    cfg.r = r;
    cfg.mode = Mode::Causal;
    cfg.dual_ln = dual_ln;
    return cfg;
  }

  void validate() const {
    attention().validate();
    if (layers == 0 || ffn == 0 || seq_len == 0) throw ConfigError("model: layers, ffn and seq_len must be positive");
    if (vocab == 0 || vocab > 256) throw ConfigError("model: vocab must be in [1, 256]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
    if (batch == 0) throw ConfigError("model: batch must be positive");
  }
};

template <class V>
struct BlockParams {
  V ln1_gain, ln1_bias;
  MultiHeadParams<V> attn;
  V ln2_gain, ln2_bias;
  V w1, b1, w2, b2;

  template <class F>
  void for_each(F&& f) {
    f(ln1_gain), f(ln1_bias);
    attn.for_each(f);
    f(ln2_gain), f(ln2_bias), f(w1), f(b1), f(w2), f(b2);
  }
  template <class F>
  void for_each(F&& f) const {
    f(ln1_gain), f(ln1_bias);
    attn.for_each(f);
    f(ln2_gain), f(ln2_bias), f(w1), f(b1), f(w2), f(b2);
  }
};

template <class V>
struct ModelParams {
  V token_embedding;     // vocab × d
  V position_embedding;  // seq_len × d
  std::vector<BlockParams<V>> blocks;
  V final_gain, final_bias;
  V w_out, b_out;  // untied output head

  template <class F>
  void for_each(F&& f) {
    f(token_embedding), f(position_embedding);
    for (auto& b : blocks) b.for_each(f);
    f(final_gain), f(final_bias), f(w_out), f(b_out);
  }
  template <class F>
  void for_each(F&& f) const {
    f(token_embedding), f(position_embedding);
    for (const auto& b : blocks) b.for_each(f);
    f(final_gain), f(final_bias), f(w_out), f(b_out);
  }
};

inline ModelParams<Tensor> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const LSConfig attn = cfg.attention();
  ModelParams<Tensor> m;
  m.token_embedding = random_normal(rng, {cfg.vocab, cfg.d});
  m.position_embedding = random_normal(rng, {cfg.seq_len, cfg.d}, 0.1);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    BlockParams<Tensor> b;
    b.ln1_gain = Tensor({cfg.d}, 1.0);
    b.ln1_bias = Tensor({cfg.d}, 0.0);
    b.attn = init_multi_head_params(rng, attn);
    b.ln2_gain = Tensor({cfg.d}, 1.0);
    b.ln2_bias = Tensor({cfg.d}, 0.0);
    b.w1 = init_matrix(rng, cfg.d, cfg.ffn);
    b.b1 = Tensor({cfg.ffn}, 0.0);
    b.w2 = init_matrix(rng, cfg.ffn, cfg.d);
    b.b2 = Tensor({cfg.d}, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.final_gain = Tensor({cfg.d}, 1.0);
  m.final_bias = Tensor({cfg.d}, 0.0);
  m.w_out = init_matrix(rng, cfg.d, cfg.vocab, InitScheme::ScaledUniform, cfg.output_init_gain);
  m.b_out = Tensor({cfg.vocab}, 0.0);
  return m;
}

template <class V>
std::size_t parameter_count(const ModelParams<V>& m) {
  std::size_t total = 0;
  m.for_each([&](const V& p) { total += value_of(p).size(); });
  return total;
}

inline ModelParams<Var> on_tape(Tape& tape, const ModelParams<Tensor>& m) {
  ModelParams<Var> out;
  out.blocks.resize(m.blocks.size());
  for (auto& b : out.blocks) b.attn.heads.resize(m.blocks.front().attn.heads.size());
  std::vector<Var> leaves;
  m.for_each([&](const Tensor& t) { leaves.push_back(tape.variable(t)); });
  std::size_t i = 0;
  out.for_each([&](Var& slot) { slot = leaves[i++]; });
  return out;
}

/// Next-token logits (len × vocab) for `tokens` (len ≤ seq_len). With a
/// non-null `dropout_rng` and cfg.dropout > 0, dropout is applied to each
/// residual branch.
template <class V>
V forward(const ModelParams<V>& m, const ModelConfig& cfg, std::span<const int> tokens, Rng* dropout_rng = nullptr) {
  const std::size_t len = tokens.size();
  if (len == 0 || len > cfg.seq_len) throw ContractError("forward: token count must be in [1, seq_len]");
  std::vector<std::ptrdiff_t> ids(tokens.begin(), tokens.end());
  for (const auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) throw ContractError("forward: token id out of vocabulary");
  }
  LSConfig attn = cfg.attention();
  attn.n = len;

  auto residual_dropout = [&](const V& branch) -> V {
    if (dropout_rng && cfg.dropout > 0.0) return dropout(branch, cfg.dropout, *dropout_rng);
    return branch;
  };

  V x = add(gather_rows(m.token_embedding, ids), slice_rows(m.position_embedding, 0, len));
  for (const auto& b : m.blocks) {
    V u = layer_norm(x, b.ln1_gain, b.ln1_bias);
    V a = multi_head(u, b.attn, [&](const V& in, const HeadParams<V>& hp) { return causal_aggregate_head(in, hp, attn); });
    x = add(x, residual_dropout(a));
    V u2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
    V f = add_row(matmul(gelu(add_row(matmul(u2, b.w1), b.b1)), b.w2), b.b2);
    x = add(x, residual_dropout(f));
  }
  return add_row(matmul(layer_norm(x, m.final_gain, m.final_bias), m.w_out), m.b_out);
}

inline double bpc_from_logits(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy(logits, targets) / std::numbers::ln2;
}

/// Mean next-token cross-entropy over non-overlapping windows of the slice,
/// in bits per character. `max_windows` = 0 evaluates every window.
inline double evaluate_bpc(const ModelParams<Tensor>& m, const ModelConfig& cfg, std::span<const std::uint8_t> slice,
                           std::size_t max_windows = 0) {
  if (slice.size() < 2) throw ContractError("evaluate_bpc: slice too short");
  double total = 0.0;
  std::size_t count = 0;
  std::vector<int> inputs, targets;
  for (std::size_t start = 0; start + 1 < slice.size(); start += cfg.seq_len) {
    const std::size_t len = std::min(cfg.seq_len, slice.size() - 1 - start);
    inputs.assign(slice.begin() + static_cast<std::ptrdiff_t>(start), slice.begin() + static_cast<std::ptrdiff_t>(start + len));
    targets.assign(slice.begin() + static_cast<std::ptrdiff_t>(start + 1),
                   slice.begin() + static_cast<std::ptrdiff_t>(start + len + 1));
    total += cross_entropy(forward(m, cfg, inputs), targets) * static_cast<double>(len);
    count += len;
    if (max_windows && count >= max_windows * cfg.seq_len) break;
  }
  return total / static_cast<double>(count) / std::numbers::ln2;
}

struct StepMetrics {
  std::size_t step = 0;
  double train_loss = 0.0;  // nats
  double train_bpc = 0.0;
  double val_bpc = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated this step
  double wall_ms = 0.0;
};

struct TrainReport {
  std::vector<StepMetrics> steps;
  ModelParams<Tensor> params;
  double final_val_bpc = 0.0;
  double initial_val_bpc = 0.0;
};

struct CorpusSplit {
  std::span<const std::uint8_t> train;
  std::span<const std::uint8_t> validation;
};

/// Last tenth (at least one window) held out for validation.
inline CorpusSplit split_corpus(std::span<const std::uint8_t> corpus, std::size_t seq_len) {
  const std::size_t window = seq_len + 1;
  const std::size_t val = std::max(window, corpus.size() / 10);
  if (corpus.size() < val + window) throw ContractError("split_corpus: corpus too short");
  return {corpus.first(corpus.size() - val), corpus.last(val)};
}

using StepCallback = std::function<void(const StepMetrics&)>;

inline TrainReport train(const ModelConfig& cfg, std::span<const std::uint8_t> corpus, const StepCallback& on_step = {}) {
  cfg.validate();
  if (corpus.size() < 10 * cfg.seq_len) throw ContractError("train: corpus must hold at least 10 sequence lengths");
  for (const auto byte : corpus) {
    if (byte >= cfg.vocab) throw ContractError("train: corpus byte outside vocabulary");
  }
  const auto split = split_corpus(corpus, cfg.seq_len);

  Rng init_rng(cfg.seed);
  TrainReport report;
  report.params = build_model(cfg, init_rng);
  Rng data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  Rng dropout_rng(cfg.seed + 17);
  report.initial_val_bpc = evaluate_bpc(report.params, cfg, split.validation, cfg.eval_windows);

  const auto clock_start = std::chrono::steady_clock::now();
  const std::size_t window = cfg.seq_len + 1;
  std::vector<int> inputs(cfg.seq_len), targets(cfg.seq_len);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    Tape tape;
    const auto params = on_tape(tape, report.params);
    Var loss;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto offset = static_cast<std::size_t>(data_rng.below(split.train.size() - window + 1));
      for (std::size_t i = 0; i < cfg.seq_len; ++i) {
        inputs[i] = split.train[offset + i];
        targets[i] = split.train[offset + i + 1];
      }
      Var ce = cross_entropy(forward(params, cfg, inputs, &dropout_rng), targets);
      loss = b == 0 ? ce : add(loss, ce);
    }
    loss = scale(loss, 1.0 / static_cast<double>(cfg.batch));
    const double loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) {
      throw TrainingError("train: non-finite loss " + std::to_string(loss_value) + " at step " + std::to_string(step) +
                          " (learning rate " + std::to_string(cfg.learning_rate) + ")");
    }

    const Gradients grads = backward(tape, loss);
    std::vector<Tensor*> slots;
    report.params.for_each([&](Tensor& t) { slots.push_back(&t); });
    std::size_t i = 0;
    params.for_each([&](const Var& v) {
      Tensor& p = *slots[i++];
      const Tensor& g = grads[v];
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= cfg.learning_rate * g[j];
    });

    StepMetrics metrics;
    metrics.step = step;
    metrics.train_loss = loss_value;
    metrics.train_bpc = loss_value / std::numbers::ln2;
    if (step == cfg.steps || (cfg.eval_every && step % cfg.eval_every == 0)) {
      metrics.val_bpc = evaluate_bpc(report.params, cfg, split.validation, cfg.eval_windows);
    }
    metrics.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock_start).count();
    report.steps.push_back(metrics);
    if (on_step) on_step(metrics);
    if (metrics.val_bpc < cfg.stop_below_val_bpc) break;
  }
  report.final_val_bpc = report.steps.empty() ? report.initial_val_bpc : report.steps.back().val_bpc;
  return report;
}

struct AblationResult {
  TrainReport with_dual_ln;
  TrainReport without_dual_ln;

  // Validation loss in nats at the evaluated steps.
  double final_loss_with() const { return with_dual_ln.final_val_bpc * std::numbers::ln2; }
  double final_loss_without() const { return without_dual_ln.final_val_bpc * std::numbers::ln2; }
};

/// Two identical runs that differ only in the DualLN flag.
inline AblationResult dualln_ablation(ModelConfig cfg, std::span<const std::uint8_t> corpus, std::size_t steps) {
  cfg.steps = steps;
  AblationResult out;
  cfg.dual_ln = true;
  out.with_dual_ln = train(cfg, corpus);
  cfg.dual_ln = false;
  out.without_dual_ln = train(cfg, corpus);
  return out;
}

inline void write_train_csv_header(std::ostream& out) { out << "step,train_loss_nats,val_bpc,wall_ms\n"; }

}  // namespace lsattn
