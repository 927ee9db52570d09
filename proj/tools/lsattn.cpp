// lsattn: FLOP accounting, scaling sweeps, norm probe, toy LM training and
// the self-check suite.
//
// Exit codes: 0 success, 1 invariant failure or training abort, 2 usage or
// configuration error.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lsattn/lsattn.hpp"

namespace {

using namespace lsattn;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t threads_from_env() {
  const char* raw = std::getenv("LSATTN_THREADS");
  if (!raw || !*raw) return 1;
  try {
    std::size_t pos = 0;
    const long v = std::stol(raw, &pos);
    if (pos != std::string(raw).size() || v < 1) throw std::invalid_argument(raw);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(std::string("LSATTN_THREADS must be a positive integer, got '") + raw + "'");
  }
}

/// Output stream for --out; stdout when the path is empty or "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path);
    if (!*file_) throw UsageError("cannot open output file " + path);
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::vector<std::uint8_t> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read corpus " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Variant variant_or_throw(const std::string& name) {
  const auto v = parse_variant(name);
  if (!v) throw UsageError("unknown variant '" + name + "' (full, window, projection, long-short)");
  return *v;
}

Mode mode_or_throw(const std::string& name) {
  if (name == "bidirectional") return Mode::Bidirectional;
  if (name == "causal") return Mode::Causal;
  throw UsageError("unknown mode '" + name + "' (bidirectional, causal)");
}

// ---------------------------------------------------------------------------

struct ArchFlags {
  std::string preset;
  std::string preset_file;
  std::string variant;
  std::string mode;
  std::string scope;
  std::size_t w = 0, r = 0, l = 0, d = 0, h = 0;
  std::vector<std::size_t> n;
  CLI::App* app = nullptr;

  void add(CLI::App* sub, const std::string& default_preset) {
    app = sub;
    preset = default_preset;
    sub->add_option("--preset", preset, "named preset: lra-listops, lra-text, lra-retrieval, char-lm")
        ->capture_default_str();
    sub->add_option("--preset-file", preset_file, "key = value overrides applied after the preset");
    sub->add_option("--variant", variant, "full, window, projection or long-short");
    sub->add_option("--mode", mode, "bidirectional or causal");
    sub->add_option("--scope", scope, "encoder or attention");
    sub->add_option("--w", w, "window size (even)");
    sub->add_option("--r", r, "projection rank");
    sub->add_option("--l", l, "causal projection segment length");
    sub->add_option("--d", d, "model width");
    sub->add_option("--heads", h, "heads");
    sub->add_option("--n", n, "sequence length(s), comma separated")->delimiter(',');
  }

  bool given(const std::string& name) const { return app->count(name) > 0; }

  ArchSpec resolve() const {
    const auto base = named_preset(preset);
    if (!base) throw UsageError("unknown preset '" + preset + "'");
    ArchSpec a = *base;
    if (!preset_file.empty()) a = apply_overrides(a, KeyValueFile::load(preset_file));
    if (given("--variant")) a.variant = variant_or_throw(variant);
    if (given("--mode")) a.mode = mode_or_throw(mode);
    if (given("--scope")) {
      if (scope == "encoder") a.scope = Scope::Encoder;
      else if (scope == "attention") a.scope = Scope::Attention;
      else throw UsageError("unknown scope '" + scope + "'");
    }
    if (given("--w")) a.w = w;
    if (given("--r")) a.r = r;
    if (given("--l")) a.l = l;
    if (given("--d")) a.d = d;
    if (given("--heads")) a.h = h;
    return a;
  }
};

int run_flops(const ArchFlags& flags, const std::string& format, const std::string& out_path) {
  ArchSpec arch = flags.resolve();
  std::vector<std::size_t> lengths = flags.n;
  if (lengths.empty()) lengths.push_back(arch.n);
  Output out(out_path);
  auto& os = out.stream();
  if (format == "csv") csv::flops_header(os);
  for (const auto n : lengths) {
    arch.n = n;
    const FlopReport rep = count_flops(arch);
    if (format == "csv") {
      csv::flops_row(os, flags.preset, arch, rep);
    } else {
      os << flags.preset << ' ' << to_string(arch.variant) << " n=" << n << ": total " << rep.total() << " MACs = "
         << std::fixed << std::setprecision(2) << rep.gflops() << " G\n"
         << std::defaultfloat;
    }
  }
  return 0;
}

int run_sweep(const ArchFlags& flags, std::size_t reps, bool dual_ln, std::uint64_t seed, const std::string& out_path) {
  const std::size_t threads = threads_from_env();
  if (threads != 1) throw ConfigError("sweep: LSATTN_THREADS must be 1 for timed runs");
  if (flags.n.empty()) throw UsageError("sweep: --n is required");
  const ArchSpec a = flags.resolve();
  SweepSpec spec;
  spec.lengths = flags.n;
  spec.variant = a.variant;
  spec.mode = a.mode;
  spec.d = a.d;
  spec.h = a.h;
  spec.w = a.w;
  spec.r = a.r;
  spec.l = a.l;
  spec.dual_ln = dual_ln;
  spec.reps = reps;
  spec.seed = seed;
  const auto rows = run_scaling(spec);
  Output out(out_path);
  csv::sweep_header(out.stream());
  for (const auto& row : rows) csv::sweep_row(out.stream(), row);
  return 0;
}

struct NormFlags {
  std::size_t n = 256, d = 64, h = 2, w = 8, r = 8, layers = 1, seeds = 10;
  std::uint64_t seed = 1;
  std::string dual_ln = "both";
  bool one_hot = false;
};

int run_norms(const NormFlags& f, const std::string& out_path) {
  LSConfig cfg;
  cfg.n = f.n;
  cfg.d = f.d;
  cfg.h = f.h;
  cfg.w = f.w;
  cfg.r = f.r;
  std::vector<std::uint64_t> seeds(f.seeds);
  std::iota(seeds.begin(), seeds.end(), f.seed);
  if (f.seeds < 10) throw ConfigError("norms: at least 10 seeds required");
  std::vector<bool> flags;
  if (f.dual_ln == "both") flags = {false, true};
  else if (f.dual_ln == "on") flags = {true};
  else if (f.dual_ln == "off") flags = {false};
  else throw UsageError("norms: --dual-ln must be on, off or both");

  NormProbeOptions opts;
  opts.layers = f.layers;
  opts.force_one_hot = f.one_hot;
  Output out(out_path);
  csv::norm_header(out.stream());
  for (const bool flag : flags) {
    cfg.dual_ln = flag;
    for (const auto& row : norm_ratio_probe(cfg, seeds, opts).rows) csv::norm_row(out.stream(), row);
  }
  return 0;
}

void add_model_flags(CLI::App* sub, ModelConfig& cfg, bool& no_dual_ln) {
  sub->add_option("--layers", cfg.layers)->capture_default_str();
  sub->add_option("--d", cfg.d)->capture_default_str();
  sub->add_option("--heads", cfg.h)->capture_default_str();
  sub->add_option("--ffn", cfg.ffn)->capture_default_str();
  sub->add_option("--seq-len", cfg.seq_len)->capture_default_str();
  sub->add_option("--w", cfg.w)->capture_default_str();
  sub->add_option("--l", cfg.l)->capture_default_str();
  sub->add_option("--r", cfg.r)->capture_default_str();
  sub->add_option("--lr", cfg.learning_rate, "SGD step size")->capture_default_str();
  sub->add_option("--steps", cfg.steps)->capture_default_str();
  sub->add_option("--batch", cfg.batch)->capture_default_str();
  sub->add_option("--dropout", cfg.dropout)->capture_default_str();
  sub->add_option("--eval-every", cfg.eval_every, "0 evaluates only at the end")->capture_default_str();
  sub->add_option("--eval-windows", cfg.eval_windows, "validation windows per evaluation, 0 = all")->capture_default_str();
  sub->add_option("--seed", cfg.seed)->capture_default_str();
  sub->add_flag("--no-dual-ln", no_dual_ln, "disable DualLN");
}

void write_optional(std::ostream& os, double v) {
  if (!std::isnan(v)) os << v;
}

int run_train(ModelConfig cfg, bool no_dual_ln, const std::string& corpus_path, const std::string& out_path) {
  cfg.dual_ln = !no_dual_ln;
  const auto corpus = read_corpus(corpus_path);
  Output out(out_path);
  auto& os = out.stream();
  write_train_csv_header(os);
  os << std::setprecision(6);
  train(cfg, corpus, [&](const StepMetrics& m) {
    os << m.step << ',' << m.train_loss << ',';
    write_optional(os, m.val_bpc);
    os << ',' << m.wall_ms << '\n';
  });
  return 0;
}

int run_ablate(ModelConfig cfg, std::size_t seeds, const std::string& corpus_path, const std::string& out_path) {
  const auto corpus = read_corpus(corpus_path);
  Output out(out_path);
  auto& os = out.stream();
  os << "seed,step,train_loss_with,train_loss_without,val_loss_with,val_loss_without\n" << std::setprecision(6);
  const std::uint64_t base = cfg.seed;
  std::size_t wins = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    cfg.seed = base + s;
    const auto result = dualln_ablation(cfg, corpus, cfg.steps);
    const auto& a = result.with_dual_ln.steps;
    const auto& b = result.without_dual_ln.steps;
    for (std::size_t i = 0; i < a.size(); ++i) {
      os << cfg.seed << ',' << a[i].step << ',' << a[i].train_loss << ',' << b[i].train_loss << ',';
      write_optional(os, a[i].val_bpc * std::numbers::ln2);
      os << ',';
      write_optional(os, b[i].val_bpc * std::numbers::ln2);
      os << '\n';
    }
    wins += result.final_loss_with() <= result.final_loss_without() ? 1 : 0;
  }
  std::cerr << "DualLN final validation loss <= baseline on " << wins << " of " << seeds << " seeds\n";
  return 0;
}

int run_check(std::uint64_t seed, const std::string& out_path) {
  const auto results = run_invariant_suite(seed, threads_from_env());
  Output out(out_path);
  bool all = true;
  for (const auto& r : results) {
    out.stream() << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all = all && r.passed;
  }
  out.stream() << (all ? "all checks passed" : "some checks FAILED") << '\n';
  return all ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-short attention toolkit"};
  app.require_subcommand(1);
  std::string out_path;
  app.add_option("--out", out_path, "output file (default stdout)");

  auto* flops = app.add_subcommand("flops", "closed-form FLOP count of an encoder");
  ArchFlags flops_flags;
  flops_flags.add(flops, "lra-listops");
  std::string format = "text";
  flops->add_option("--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();
  flops->add_option("--out", out_path, "output file (default stdout)");

  auto* sweep = app.add_subcommand("sweep", "timing and memory over a doubling ladder of lengths");
  ArchFlags sweep_flags;
  sweep_flags.add(sweep, "lra-listops");
  std::size_t reps = 5;
  std::uint64_t sweep_seed = 1;
  bool sweep_no_dual_ln = false;
  sweep->add_option("--reps", reps, "timed repetitions (>= 5)")->capture_default_str();
  sweep->add_option("--seed", sweep_seed)->capture_default_str();
  sweep->add_flag("--no-dual-ln", sweep_no_dual_ln);
  sweep->add_option("--out", out_path, "output file (default stdout)");

  auto* norms = app.add_subcommand("norms", "local/global key and value norm ratios at initialization");
  NormFlags norm_flags;
  norms->add_option("--n", norm_flags.n)->capture_default_str();
  norms->add_option("--d", norm_flags.d)->capture_default_str();
  norms->add_option("--heads", norm_flags.h)->capture_default_str();
  norms->add_option("--w", norm_flags.w)->capture_default_str();
  norms->add_option("--r", norm_flags.r)->capture_default_str();
  norms->add_option("--layers", norm_flags.layers)->capture_default_str();
  norms->add_option("--seeds", norm_flags.seeds, "number of seeds (>= 10)")->capture_default_str();
  norms->add_option("--seed", norm_flags.seed, "first seed")->capture_default_str();
  norms->add_option("--dual-ln", norm_flags.dual_ln, "on, off or both")->capture_default_str();
  norms->add_flag("--one-hot", norm_flags.one_hot, "force one-hot projection columns");
  norms->add_option("--out", out_path, "output file (default stdout)");

  auto* train_cmd = app.add_subcommand("train", "train the byte-level toy language model");
  ModelConfig train_cfg;
  bool train_no_dual_ln = false;
  std::string train_corpus;
  add_model_flags(train_cmd, train_cfg, train_no_dual_ln);
  train_cmd->add_option("--stop-below", train_cfg.stop_below_val_bpc, "stop once validation BPC drops below this; 0 disables")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--corpus", train_corpus, "raw byte file")->required();
  train_cmd->add_option("--out", out_path, "output file (default stdout)");

  auto* ablate = app.add_subcommand("ablate", "paired runs with and without DualLN");
  ModelConfig ablate_cfg;
  bool ablate_unused = false;
  std::string ablate_corpus;
  std::size_t ablate_seeds = 1;
  add_model_flags(ablate, ablate_cfg, ablate_unused);
  ablate->add_option("--corpus", ablate_corpus, "raw byte file")->required();
  ablate->add_option("--seeds", ablate_seeds, "consecutive seeds starting at --seed")->capture_default_str();
  ablate->add_option("--out", out_path, "output file (default stdout)");

  auto* check = app.add_subcommand("check", "run the invariant suite");
  std::uint64_t check_seed = 1;
  check->add_option("--seed", check_seed)->capture_default_str();
  check->add_option("--out", out_path, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*flops) return run_flops(flops_flags, format, out_path);
    if (*sweep) return run_sweep(sweep_flags, reps, !sweep_no_dual_ln, sweep_seed, out_path);
    if (*norms) return run_norms(norm_flags, out_path);
    if (*train_cmd) return run_train(train_cfg, train_no_dual_ln, train_corpus, out_path);
    if (*ablate) {
      if (ablate_unused) throw UsageError("ablate: --no-dual-ln has no effect here");
      return run_ablate(ablate_cfg, ablate_seeds, ablate_corpus, out_path);
    }
    if (*check) return run_check(check_seed, out_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
