#pragma once

// Reverse-mode differentiation over the tensor kernels. A Tape records every
// primitive applied to Vars in topological order; backward() walks it once in
// reverse. Var overloads mirror the Tensor kernels so the attention templates
// run unchanged on either.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "lsattn/tensor.hpp"

namespace lsattn {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulates gradients per tape node during the reverse sweep.
class GradSink {
 public:
  explicit GradSink(const Tape& tape);

  void accumulate(std::size_t id, Tensor grad);
  bool has(std::size_t id) const { return !grads_[id].shape().empty(); }
  Tensor& at(std::size_t id) { return grads_[id]; }
  std::vector<Tensor> release() && { return std::move(grads_); }

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out, GradSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Tensor value) { return push(std::move(value), {}, true, nullptr); }
  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), {}, false, nullptr); }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) throw ContractError("tape: input Var belongs to another tape");
      ids.push_back(in.id());
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  bool has_backward(std::size_t id) const { return static_cast<bool>(nodes_[id].backward); }
  void run_backward(std::size_t id, const Tensor& grad_out, GradSink& sink) const { nodes_[id].backward(grad_out, sink); }

 private:

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad;
    Backward backward;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps node references stable while the tape grows.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& value_of(const Var& v) { return v.value(); }

inline GradSink::GradSink(const Tape& tape) : tape_(&tape), grads_(tape.size()) {}

inline void GradSink::accumulate(std::size_t id, Tensor grad) {
  if (!tape_->requires_grad(id)) return;
  auto& slot = grads_[id];
  if (slot.shape().empty()) {
    slot = std::move(grad);
    return;
  }
  auto dst = slot.values();
  const auto src = grad.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Gradient of the differentiated output with respect to every tape node.
/// Nodes the output does not depend on report zeros of matching shape.
class Gradients {
 public:
  Gradients(const Tape& tape, std::vector<Tensor> grads) : grads_(std::move(grads)) {
    for (std::size_t id = 0; id < grads_.size(); ++id) {
      if (grads_[id].shape().empty()) grads_[id] = Tensor(tape.value(id).shape());
    }
  }

  const Tensor& operator[](const Var& v) const { return grads_.at(v.id()); }

 private:
  std::vector<Tensor> grads_;
};

inline Gradients backward(const Tape& tape, const Var& output, const Tensor& seed) {
  if (output.tape() != &tape) throw ContractError("backward: output is not on this tape");
  if (seed.shape() != output.value().shape()) {
    throw ShapeError("backward: seed shape " + to_string(seed.shape()) + " does not match output " +
                     to_string(output.value().shape()));
  }
  GradSink sink(tape);
  sink.accumulate(output.id(), seed);
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    if (!tape.has_backward(id) || !sink.has(id)) continue;
    // Copy: the callback may accumulate into other slots of the sink.
    const Tensor grad = sink.at(id);
    tape.run_backward(id, grad, sink);
  }
  return Gradients(tape, std::move(sink).release());
}

inline Gradients backward(const Tape& tape, const Var& output) {
  return backward(tape, output, Tensor(output.value().shape(), 1.0));
}

// ---------------------------------------------------------------------------
// Differentiable primitives.

inline Var matmul(const Var& a, const Var& b) {
  auto* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return tape->record(matmul(a.value(), b.value()), {a, b}, [tape, ia, ib](const Tensor& g, GradSink& sink) {
    if (tape->requires_grad(ia)) sink.accumulate(ia, kernel::matmul(g, kernel::transpose(tape->value(ib))));
    if (tape->requires_grad(ib)) sink.accumulate(ib, kernel::matmul(kernel::transpose(tape->value(ia)), g));
  });
}

inline Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape()->record(transpose(a.value()), {a}, [ia](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, kernel::transpose(g));
  });
}

inline Var scale(const Var& a, double s) {
  const std::size_t ia = a.id();
  return a.tape()->record(scale(a.value(), s), {a}, [ia, s](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, scale(g, s));
  });
}

inline Var add(const Var& a, const Var& b) {
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(add(a.value(), b.value()), {a, b}, [ia, ib](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, g);
    sink.accumulate(ib, g);
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  auto* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return tape->record(hadamard(a.value(), b.value()), {a, b}, [tape, ia, ib](const Tensor& g, GradSink& sink) {
    if (tape->requires_grad(ia)) sink.accumulate(ia, hadamard(g, tape->value(ib)));
    if (tape->requires_grad(ib)) sink.accumulate(ib, hadamard(g, tape->value(ia)));
  });
}

inline Var add_row(const Var& a, const Var& bias) {
  auto* tape = a.tape();
  const std::size_t ia = a.id(), ib = bias.id();
  return tape->record(add_row(a.value(), bias.value()), {a, bias}, [tape, ia, ib](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, g);
    if (tape->requires_grad(ib)) {
      Tensor db(tape->value(ib).shape());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const auto r = g.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) db[j] += r[j];
      }
      sink.accumulate(ib, std::move(db));
    }
  });
}

// Fused row-wise softmax backward: dx = p ⊙ (g - <g, p>). Masked entries
// have p = 0 and so receive exactly zero gradient.
inline Var masked_softmax(const Var& a, const Mask& mask) {
  auto* tape = a.tape();
  const std::size_t ia = a.id();
  Tensor out = masked_softmax(a.value(), mask);
  const std::size_t id_out = tape->size();
  return tape->record(std::move(out), {a}, [tape, ia, id_out](const Tensor& g, GradSink& sink) {
    const Tensor& p = tape->value(id_out);
    Tensor dx(p.shape());
    for (std::size_t i = 0; i < p.rows(); ++i) {
      const auto pr = p.row(i);
      const auto gr = g.row(i);
      double inner = 0.0;
      for (std::size_t j = 0; j < pr.size(); ++j) inner += gr[j] * pr[j];
      auto dr = dx.row(i);
      for (std::size_t j = 0; j < pr.size(); ++j) dr[j] = pr[j] * (gr[j] - inner);
    }
    sink.accumulate(ia, std::move(dx));
  });
}

inline Var softmax(const Var& a) { return masked_softmax(a, Mask(a.value().rows(), a.value().cols())); }

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
  auto* tape = x.tape();
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  Tensor out = layer_norm(x.value(), gain.value(), bias.value(), eps);
  return tape->record(std::move(out), {x, gain, bias}, [tape, ix, ig, ib, eps](const Tensor& g, GradSink& sink) {
    const Tensor& xv = tape->value(ix);
    const Tensor& gv = tape->value(ig);
    const std::size_t d = xv.cols();
    const double inv_d = 1.0 / static_cast<double>(d);
    Tensor dx(xv.shape());
    Tensor dgain(gv.shape());
    Tensor dbias(gv.shape());
    std::vector<double> xhat(d);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      const auto row = xv.row(i);
      const auto gr = g.row(i);
      double mean = 0.0;
      for (double v : row) mean += v;
      mean *= inv_d;
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var *= inv_d;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - mean) * inv_std;
        dxhat[j] = gr[j] * gv[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
        dgain[j] += gr[j] * xhat[j];
        dbias[j] += gr[j];
      }
      mean_dxhat *= inv_d;
      mean_dxhat_xhat *= inv_d;
      auto dr = dx.row(i);
      for (std::size_t j = 0; j < d; ++j) dr[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
    sink.accumulate(ix, std::move(dx));
    sink.accumulate(ig, std::move(dgain));
    sink.accumulate(ib, std::move(dbias));
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  auto* tape = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t split = a.value().rows();
  return tape->record(concat_rows(a.value(), b.value()), {a, b}, [tape, ia, ib, split](const Tensor& g, GradSink& sink) {
    if (tape->requires_grad(ia)) {
      Tensor ga = slice_rows(g, 0, split);
      if (ga.shape() != tape->value(ia).shape()) ga = Tensor(tape->value(ia).shape(), ga.values());
      sink.accumulate(ia, std::move(ga));
    }
    if (tape->requires_grad(ib)) {
      Tensor gb = slice_rows(g, split, g.rows());
      if (gb.shape() != tape->value(ib).shape()) gb = Tensor(tape->value(ib).shape(), gb.values());
      sink.accumulate(ib, std::move(gb));
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  auto* tape = parts.front().tape();
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  Tensor out = concat_rows(std::span<const Tensor>(values));
  return tape->record(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [tape, ids](const Tensor& g, GradSink& sink) {
    std::size_t offset = 0;
    for (const auto id : ids) {
      const Tensor& v = tape->value(id);
      const std::size_t count = v.size();
      if (count && tape->requires_grad(id)) {
        sink.accumulate(id, Tensor(v.shape(), g.values().subspan(offset, count)));
      }
      offset += count;
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  auto* tape = parts.front().tape();
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  Tensor out = concat_cols(values);
  return tape->record(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [tape, ids](const Tensor& g, GradSink& sink) {
    std::size_t offset = 0;
    for (const auto id : ids) {
      const std::size_t width = tape->value(id).cols();
      if (tape->requires_grad(id)) {
        Tensor part = Tensor::matrix(g.rows(), width);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const auto src = g.row(i).subspan(offset, width);
          std::copy(src.begin(), src.end(), part.row(i).begin());
        }
        sink.accumulate(id, std::move(part));
      }
      offset += width;
    }
  });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  auto* tape = a.tape();
  const std::size_t ia = a.id();
  return tape->record(slice_rows(a.value(), begin, end), {a}, [tape, ia, begin](const Tensor& g, GradSink& sink) {
    Tensor full(tape->value(ia).shape());
    std::copy(g.values().begin(), g.values().end(), full.values().begin() + static_cast<std::ptrdiff_t>(begin * full.cols()));
    sink.accumulate(ia, std::move(full));
  });
}

inline Var gather_rows(const Var& a, std::span<const std::ptrdiff_t> index) {
  auto* tape = a.tape();
  const std::size_t ia = a.id();
  std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
  return tape->record(gather_rows(a.value(), index), {a}, [tape, ia, idx = std::move(idx)](const Tensor& g, GradSink& sink) {
    Tensor full(tape->value(ia).shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] == kPadIndex) continue;
      auto dst = full.row(static_cast<std::size_t>(idx[i]));
      const auto src = g.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    sink.accumulate(ia, std::move(full));
  });
}

inline Var gelu(const Var& a) {
  auto* tape = a.tape();
  const std::size_t ia = a.id();
  return tape->record(gelu(a.value()), {a}, [tape, ia](const Tensor& g, GradSink& sink) {
    const Tensor& x = tape->value(ia);
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * detail::gelu_grad(x[i]);
    sink.accumulate(ia, std::move(dx));
  });
}

// Inverted dropout with a mask drawn from `rng`.
inline Var dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  Tensor keep(a.value().shape());
  const double scale_kept = 1.0 / (1.0 - rate);
  for (auto& k : keep.values()) k = rng.uniform() < rate ? 0.0 : scale_kept;
  Tensor out = hadamard(a.value(), keep);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, keep = std::move(keep)](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, hadamard(g, keep));
  });
}

inline Tensor dropout(const Tensor& a, double, Rng&) { return a; }

inline Var sum(const Var& a) {
  auto* tape = a.tape();
  const std::size_t ia = a.id();
  return tape->record(Tensor({1}, {sum(a.value())}), {a}, [tape, ia](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, Tensor(tape->value(ia).shape(), g[0]));
  });
}

inline Var weighted_sum(const Var& a, const Tensor& weights) {
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor({1}, {weighted_sum(a.value(), weights)}), {a}, [ia, weights](const Tensor& g, GradSink& sink) {
    sink.accumulate(ia, scale(weights, g[0]));
  });
}

/// Mean next-token cross-entropy (nats) of row-wise logits against targets.
inline double cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) throw ShapeError("cross_entropy: one target per logit row required");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - peak);
    total += std::log(z) + peak - row[static_cast<std::size_t>(targets[i])];
  }
  return total / static_cast<double>(logits.rows());
}

inline Var cross_entropy(const Var& logits, std::span<const int> targets) {
  auto* tape = logits.tape();
  const std::size_t il = logits.id();
  std::vector<int> tgt(targets.begin(), targets.end());
  const double loss = cross_entropy(logits.value(), targets);
  return tape->record(Tensor({1}, {loss}), {logits}, [tape, il, tgt = std::move(tgt)](const Tensor& g, GradSink& sink) {
    Tensor dl = softmax(tape->value(il));
    const double inv_rows = g[0] / static_cast<double>(dl.rows());
    for (std::size_t i = 0; i < dl.rows(); ++i) {
      auto r = dl.row(i);
      r[static_cast<std::size_t>(tgt[i])] -= 1.0;
      for (auto& v : r) v *= inv_rows;
    }
    sink.accumulate(il, std::move(dl));
  });
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check.

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Builds a scalar loss on `tape` from one Var per parameter tensor.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_coordinates = 400;  // never below 200 when subsampling
  std::uint64_t seed = 0;             // coordinate subsampling
};

inline GradCheckReport finite_diff_check(const LossBuilder& loss, std::vector<Tensor> params, const GradCheckOptions& opts = {}) {
  if (!(opts.step >= 1e-7 && opts.step <= 1e-4)) throw ContractError("finite_diff_check: step must lie in [1e-7, 1e-4]");

  auto evaluate = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const auto& v : values) vars.push_back(tape.constant(v));
    const Var out = loss(tape, vars);
    if (out.value().size() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    return out.value()[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.variable(p));
    const Var out = loss(tape, vars);
    if (out.value().size() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    const Gradients grads = backward(tape, out);
    for (const auto& v : vars) analytic.push_back(grads[v]);
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);

  const std::size_t budget = std::max<std::size_t>(opts.max_coordinates, 200);
  if (coords.size() > budget) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < budget; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(budget);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  report.coordinates = coords.size();
  for (const auto& [p, i] : coords) {
    const double original = params[p][i];
    params[p][i] = original + opts.step;
    const double plus = evaluate(params);
    params[p][i] = original - opts.step;
    const double minus = evaluate(params);
    params[p][i] = original;
    const double numeric = (plus - minus) / (2.0 * opts.step);
    const double exact = analytic[p][i];
    const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
    const double rel = std::abs(exact - numeric) / denom;
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_param = p;
      report.worst_index = i;
      report.worst_analytic = exact;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace lsattn
