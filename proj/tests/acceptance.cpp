// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `--cli <path>` exercises the flops subcommand through the
// real executable; without it the closed form is called in-process.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lsattn/lsattn.hpp"
#include "oracles.hpp"

using namespace lsattn;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool passed = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::string run_command(const std::string& cmd, int& status) {
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) {
    status = -1;
    return out;
  }
  std::array<char, 512> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) out += buf.data();
  status = pclose(pipe);
  return out;
}

// Last CSV field of the second line (the data row).
double csv_gflops(const std::string& text) {
  const auto first = text.find('\n');
  const auto second = text.find('\n', first + 1);
  const std::string row = text.substr(first + 1, second - first - 1);
  return std::stod(row.substr(row.rfind(',') + 1));
}

Outcome flop_table(const std::string& cli) {
  Outcome o;
  const auto t0 = Clock::now();
  const char* presets[] = {"lra-listops", "lra-text", "lra-retrieval"};
  const double full_expected[] = {1.21, 4.57, 9.14};
  const double ls_expected[] = {0.20, 0.40, 0.80};
  for (int i = 0; i < 3; ++i) {
    double full = 0.0, ls = 0.0;
    if (!cli.empty()) {
      int s1 = 0, s2 = 0;
      const std::string base = "\"" + cli + "\" flops --format csv --preset " + presets[i];
      full = csv_gflops(run_command(base + " --variant full", s1));
      ls = csv_gflops(run_command(base + " --variant long-short --w 8 --r 32", s2));
      if (s1 != 0 || s2 != 0) o.passed = false;
    } else {
      ArchSpec a = *named_preset(presets[i]);
      a.variant = Variant::Full;
      full = count_flops(a).gflops();
      a.variant = Variant::LongShort;
      ls = count_flops(a).gflops();
    }
    o.passed = o.passed && std::round(full * 100.0) / 100.0 == full_expected[i] && std::abs(ls / ls_expected[i] - 1.0) <= 0.10;
    o.detail += std::string(presets[i]) + " " + fmt(full) + "/" + fmt(ls) + " G; ";
  }
  const double elapsed = seconds_since(t0);
  o.passed = o.passed && elapsed < 1.0;
  o.detail += fmt(elapsed, 3) + " s";
  return o;
}

Outcome oracle_equivalence() {
  Outcome o;
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    LSConfig cfg;
    cfg.n = 1 + rng.below(64);
    cfg.h = 1 + rng.below(2);
    cfg.d = cfg.h * (2 + rng.below(4));
    cfg.w = 2 * ((cfg.n + 1) / 2) + 2 * rng.below(3);
    cfg.r = 0;
    const auto p = init_head_params(rng, cfg);
    const Tensor x = random_normal(rng, {cfg.n, cfg.d});
    const Tensor fast = aggregate_plain_head(x, p, cfg);
    worst = std::max(worst, max_abs_diff(fast, full_attention_head(x, p)));
    worst = std::max(worst, oracle::max_abs_diff(oracle::full_head(oracle::from(x), oracle::Head(p)), fast));
  }
  o.passed = worst <= 1e-12;
  o.detail = "20 instances, max abs diff " + fmt(worst);
  return o;
}

Outcome stochasticity() {
  Outcome o;
  Rng rng(77);
  double worst = 0.0;
  bool masked_zero = true;
  for (int c = 0; c < 100; ++c) {
    const HeadKind kind = kAllHeadKinds[static_cast<std::size_t>(c) % std::size(kAllHeadKinds)];
    const std::size_t n = 2 + rng.below(40);
    LSConfig cfg = head_kind_config(kind, n, 8, 2);
    if (cfg.w) cfg.w = 2 * (1 + rng.below(5));
    if (cfg.r) cfg.r = 1 + rng.below(6);
    if (cfg.mode == Mode::Causal) cfg.l = 1 + rng.below(2 * cfg.w);
    const auto p = init_head_params(rng, cfg);
    const Tensor x = random_normal(rng, {n, cfg.d}, 3.0);
    AttentionTrace trace;
    (void)apply_head(kind, x, p, cfg, &trace);
    for (std::size_t b = 0; b < trace.weights.size(); ++b) {
      const Tensor& a = trace.weights[b];
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (!trace.masks[b](i, j) && a(i, j) != 0.0) masked_zero = false;
          if (a(i, j) < 0.0) masked_zero = false;
          s += a(i, j);
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    std::vector<Tensor> projections;
    if (cfg.r > 0 && cfg.mode == Mode::Bidirectional) projections.push_back(dynamic_projection(x, p, cfg).p);
    if (cfg.r > 0 && cfg.mode == Mode::Causal)
      for (const auto& seg : causal_segment_projection(x, p, cfg).segments) projections.push_back(seg.p);
    for (const auto& pm : projections) {
      for (std::size_t j = 0; j < pm.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < pm.rows(); ++i) s += pm(i, j);
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
  }
  o.passed = masked_zero && worst <= 1e-12;
  o.detail = "100 configs, max |sum - 1| " + fmt(worst) + (masked_zero ? "" : ", nonzero masked weight");
  return o;
}

Outcome causality() {
  Outcome o;
  std::size_t perturbations = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    LSConfig cfg;
    cfg.n = 16 + rng.below(17);
    cfg.h = 2;
    cfg.d = 8;
    cfg.w = 2 * (1 + rng.below(4));
    cfg.l = 1 + rng.below(2 * cfg.w);
    cfg.r = 1 + rng.below(3);
    cfg.mode = Mode::Causal;
    cfg.dual_ln = seed % 2 == 0;
    const auto mp = init_multi_head_params(rng, cfg);
    const Tensor x = random_normal(rng, {cfg.n, cfg.d});
    const std::function<Tensor(const Tensor&)> variants[] = {
        [&](const Tensor& in) {
          return multi_head(in, mp, [&](const Tensor& v, const HeadParams<Tensor>& hp) { return causal_aggregate_head(v, hp, cfg); });
        },
        [&](const Tensor& in) {
          return multi_head(in, mp, [&](const Tensor& v, const HeadParams<Tensor>& hp) { return causal_full_attention_oracle(v, hp); });
        }};
    for (const auto& run : variants) {
      const Tensor base = run(x);
      for (std::size_t j = 0; j < cfg.n; ++j) {
        Tensor y = x;
        for (std::size_t c = 0; c < cfg.d; ++c) y(j, c) += rng.normal() * 5.0;
        const Tensor out = run(y);
        for (std::size_t t = 0; t < j; ++t)
          for (std::size_t c = 0; c < cfg.d; ++c) o.passed = o.passed && out(t, c) == base(t, c);
        ++perturbations;
      }
    }
  }
  o.detail = std::to_string(perturbations) + " single-token perturbations over 10 seeds";
  return o;
}

Outcome gradients() {
  Outcome o;
  double worst = 0.0;
  for (const auto kind : kAllHeadKinds) {
    double kind_worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) kind_worst = std::max(kind_worst, attention_grad_check(kind, seed).max_rel_error);
    o.detail += std::string(to_string(kind)) + "=" + fmt(kind_worst, 2) + " ";
    worst = std::max(worst, kind_worst);
  }
  o.passed = worst < 1e-5;
  return o;
}

Outcome norm_probe() {
  Outcome o;
  LSConfig cfg;
  cfg.n = 256;
  cfg.d = 64;
  cfg.h = 2;
  cfg.w = 8;
  cfg.r = 8;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= 10; ++s) seeds.push_back(s);
  cfg.dual_ln = false;
  const auto plain = norm_ratio_probe(cfg, seeds);
  cfg.dual_ln = true;
  const auto dual = norm_ratio_probe(cfg, seeds);
  const double dual_mean = dual.mean_key_ratio();
  o.passed = plain.mean_key_ratio() > 1.05 && dual_mean >= 0.98 && dual_mean <= 1.02;
  o.detail = "without DualLN " + fmt(plain.mean_key_ratio()) + ", with DualLN " + fmt(dual_mean) + " (10 seeds)";
  return o;
}

Outcome scaling() {
  Outcome o;
  SweepSpec spec;
  spec.lengths = {1024, 2048, 4096};
  spec.w = 8;
  spec.r = 32;
  spec.reps = 9;  // median of 9 interleaved rounds; a shared core makes 5 flaky
  for (const auto variant : {Variant::LongShort, Variant::Full}) {
    spec.variant = variant;
    const auto rows = run_scaling(spec);
    const double target = variant == Variant::Full ? 4.0 : 2.0;
    const double band = variant == Variant::Full ? 0.10 : 0.05;
    o.detail += std::string(to_string(variant)) + " flops x";
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].oom || rows[i - 1].oom) {
        o.passed = false;
        o.detail += "oom ";
        continue;
      }
      const double ratio = static_cast<double>(rows[i].measured_flops) / static_cast<double>(rows[i - 1].measured_flops);
      o.passed = o.passed && std::abs(ratio / target - 1.0) <= band && rows[i].measured_flops == rows[i].flops;
      o.detail += fmt(ratio, 3) + " ";
      if (variant == Variant::LongShort) {
        const double time_ratio = rows[i].wall_ms / rows[i - 1].wall_ms;
        o.passed = o.passed && time_ratio <= 2.5;
        o.detail += "(time x" + fmt(time_ratio, 3) + ") ";
      }
    }
    o.detail += "; ";
  }
  return o;
}

// Words drawn from a small fixed vocabulary with a bigram bias, so there is
// structure beyond unigram statistics for the model to pick up.
std::vector<std::uint8_t> synthetic_text(std::uint64_t seed, std::size_t bytes) {
  static const char* words[] = {"the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "to", "red", "big", "old", "sun"};
  constexpr std::size_t kWords = std::size(words);
  Rng rng(seed);
  std::vector<std::uint8_t> out;
  std::size_t prev = 0;
  while (out.size() < bytes) {
    const std::size_t next = rng.uniform() < 0.6 ? (prev * 5 + 3) % kWords : static_cast<std::size_t>(rng.below(kWords));
    for (const char* c = words[next]; *c; ++c) out.push_back(static_cast<std::uint8_t>(*c));
    out.push_back(rng.uniform() < 0.1 ? '.' : ' ');
    prev = next;
  }
  out.resize(bytes);
  return out;
}

Outcome toy_lm() {
  Outcome o;
  const auto t0 = Clock::now();

  ModelConfig cfg;
  Rng byte_rng(99);
  std::vector<std::uint8_t> random_bytes(8192);
  for (auto& b : random_bytes) b = static_cast<std::uint8_t>(byte_rng.below(256));
  Rng init(cfg.seed);
  const double untrained = evaluate_bpc(build_model(cfg, init), cfg, random_bytes);
  const bool untrained_ok = std::abs(untrained - 8.0) <= 0.1;

  ModelConfig one = cfg;
  one.steps = 200;
  const double one_byte = train(one, std::vector<std::uint8_t>(2048, 'x')).final_val_bpc;
  const bool one_byte_ok = one_byte < 0.05;

  ModelConfig periodic = cfg;
  periodic.steps = 2000;
  periodic.eval_every = 25;
  periodic.stop_below_val_bpc = 0.5;
  std::vector<std::uint8_t> abcd;
  for (int i = 0; i < 1000; ++i) abcd.push_back(static_cast<std::uint8_t>('a' + i % 4));
  const auto periodic_report = train(periodic, abcd);
  const bool periodic_ok = periodic_report.final_val_bpc < 0.5;

  std::size_t wins = 0;
  ModelConfig ablate = cfg;
  ablate.eval_windows = 16;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ablate.seed = seed;
    const auto res = dualln_ablation(ablate, synthetic_text(seed, 12000), 300);
    if (res.final_loss_with() <= res.final_loss_without()) ++wins;
  }
  const bool ablation_ok = wins >= 3;

  const double elapsed = seconds_since(t0);
  o.passed = untrained_ok && one_byte_ok && periodic_ok && ablation_ok && elapsed < 600.0;
  auto mark = [](bool ok) { return ok ? std::string() : std::string(" [FAIL]"); };
  o.detail = "untrained " + fmt(untrained) + mark(untrained_ok) + ", one-byte " + fmt(one_byte, 3) + mark(one_byte_ok) +
             ", periodic " + fmt(periodic_report.final_val_bpc, 3) + " at step " +
             std::to_string(periodic_report.steps.size()) + mark(periodic_ok) + ", DualLN ablation " +
             std::to_string(wins) + "/5" + mark(ablation_ok) + ", " + fmt(elapsed, 3) + " s";
  return o;
}

Outcome non_reproducibility() {
  Outcome o;
  o.detail =
      "full-scale task accuracies, full-scale character-level BPC and image classification results need full-size "
      "training and are not reproduced here; their mechanisms are covered by criteria 1-8";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--cli") cli = argv[i + 1];

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"flop-table", [&] { return flop_table(cli); }},
      {"oracle-equivalence", oracle_equivalence},
      {"stochasticity", stochasticity},
      {"causality", causality},
      {"gradient-checks", gradients},
      {"norm-ratio-probe", norm_probe},
      {"scaling-law", scaling},
      {"toy-lm", toy_lm},
      {"non-reproducibility", non_reproducibility},
  };
  bool all = true;
  int index = 0;
  for (const auto& [name, run] : criteria) {
    ++index;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail = std::string("exception: ") + e.what();
    }
    all = all && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << index << " " << name << ": " << o.detail << std::endl;
  }
  std::cout << (all ? "all criteria passed" : "some criteria FAILED") << std::endl;
  return all ? 0 : 1;
}
