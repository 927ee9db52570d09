#pragma once

// Sequence-length scaling sweeps over one multi-head attention block, and the
// CSV writers shared by the command-line tool.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <new>
#include <ostream>
#include <vector>

#include "lsattn/flops.hpp"
#include "lsattn/probe.hpp"

namespace lsattn {

struct SweepSpec {
  std::vector<std::size_t> lengths;
  Variant variant = Variant::LongShort;
  Mode mode = Mode::Bidirectional;
  std::size_t d = 64;
  std::size_t h = 2;
  std::size_t w = 8;
  std::size_t r = 32;
  std::size_t l = 16;
  bool dual_ln = true;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 1;
  std::size_t threads = 1;  // heads evaluated in parallel when > 1; keep 1 for timing

  ArchSpec arch(std::size_t n) const {
    ArchSpec a;
    a.layers = 1;
    a.d = d;
    a.h = h;
    a.ffn = 0;
    a.n = n;
    a.w = w;
    a.r = r;
    a.l = l;
    a.variant = variant;
    a.mode = mode;
    a.dual_ln = dual_ln;
    a.scope = Scope::Attention;
    return a;
  }
};

struct SweepRow {
  std::size_t n = 0;
  std::size_t w = 0;
  std::size_t r = 0;
  Mode mode = Mode::Bidirectional;
  Variant variant = Variant::Full;
  std::uint64_t flops = 0;           // closed form
  std::uint64_t measured_flops = 0;  // instrumented count of the timed block
  double wall_ms = 0.0;     // median over reps
  std::size_t peak_bytes = 0;
  bool oom = false;
};

inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const std::size_t mid = xs.size() / 2;
  return xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

/// Timed repetitions are interleaved across lengths (one round visits every
/// length) so slow phases of a shared machine hit all rows alike.
inline std::vector<SweepRow> run_scaling(const SweepSpec& spec) {
  if (spec.lengths.empty()) throw ConfigError("sweep: no sequence lengths given");
  for (std::size_t i = 1; i < spec.lengths.size(); ++i) {
    if (spec.lengths[i] != 2 * spec.lengths[i - 1]) throw ConfigError("sweep: lengths must form a doubling ladder");
  }
  if (spec.reps < 5) throw ConfigError("sweep: at least 5 timed repetitions required");

  struct Cell {
    LSConfig run_cfg;
    BranchOptions branches;
    MultiHeadParams<Tensor> mp;
    Tensor x;
    std::vector<double> times;
  };
  std::vector<SweepRow> rows;
  std::vector<Cell> cells;
  for (const auto n : spec.lengths) {
    const ArchSpec arch = spec.arch(n);
    arch.validate();
    SweepRow row;
    row.n = n;
    row.w = arch.uses_window() ? spec.w : 0;
    row.r = arch.uses_global() ? spec.r : 0;
    row.mode = spec.mode;
    row.variant = spec.variant;
    row.flops = count_flops(arch).total();
    rows.push_back(row);

    Cell cell;
    cell.run_cfg = arch.attention_config();
    cell.branches = BranchOptions{arch.uses_window(), arch.uses_global(), arch.uses_dual_ln()};
    LSConfig init_cfg = cell.run_cfg;
    if (spec.variant == Variant::Full) {
      init_cfg.w = 0;
      init_cfg.r = 1;
      init_cfg.mode = Mode::Bidirectional;
    }
    try {
      Rng rng(spec.seed + n);
      cell.mp = init_multi_head_params(rng, init_cfg);
      cell.x = random_normal(rng, {n, spec.d});
    } catch (const std::bad_alloc&) {
      rows.back().oom = true;
    }
    cells.push_back(std::move(cell));
  }

  HeadSchedule schedule;
  schedule.threads = spec.threads;
  auto run = [&](const Cell& cell) {
    auto head_fn = [&](const Tensor& in, const HeadParams<Tensor>& hp) {
      if (spec.variant == Variant::Full) {
        return spec.mode == Mode::Causal ? causal_full_attention_oracle(in, hp) : full_attention_head(in, hp);
      }
      return spec.mode == Mode::Causal ? causal_aggregate_head(in, hp, cell.run_cfg)
                                       : long_short_head(in, hp, cell.run_cfg, cell.branches);
    };
    return multi_head(cell.x, cell.mp, head_fn, schedule);
  };

  for (std::size_t round = 0; round < spec.warmup + spec.reps; ++round) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      SweepRow& row = rows[c];
      if (row.oom) continue;
      try {
        if (round < spec.warmup) {
          (void)run(cells[c]);
          continue;
        }
        auto& stats = AllocationStats::instance();
        const std::size_t baseline = stats.current();
        stats.reset_peak();
        FlopCounter counter;
        const auto t0 = std::chrono::steady_clock::now();
        {
          CountFlopsScope scope(counter);
          (void)run(cells[c]);
        }
        const auto t1 = std::chrono::steady_clock::now();
        cells[c].times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        row.measured_flops = counter.total();
        row.peak_bytes = std::max(row.peak_bytes, stats.peak() - baseline);
      } catch (const std::bad_alloc&) {
        row.oom = true;
      }
    }
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    if (rows[c].oom) {
      rows[c].wall_ms = 0.0;
      rows[c].peak_bytes = 0;
      rows[c].measured_flops = 0;
    } else {
      rows[c].wall_ms = median(cells[c].times);
    }
  }
  return rows;
}

namespace csv {

inline void sweep_header(std::ostream& out) { out << "n,w,r,mode,variant,flops,wall_ms,peak_bytes,status\n"; }

inline void sweep_row(std::ostream& out, const SweepRow& row) {
  out << row.n << ',' << row.w << ',' << row.r << ',' << to_string(row.mode) << ',' << to_string(row.variant) << ','
      << row.flops << ',' << std::setprecision(6) << row.wall_ms << ',' << row.peak_bytes << ','
      << (row.oom ? "oom" : "ok") << '\n';
}

inline void norm_header(std::ostream& out) { out << "layer,seed,key_ratio,value_ratio,dual_ln\n"; }

inline void norm_row(std::ostream& out, const NormProbeRow& row) {
  out << row.layer << ',' << row.seed << ',' << std::setprecision(6) << row.key_ratio << ',' << row.value_ratio << ','
      << (row.dual_ln ? "true" : "false") << '\n';
}

inline void flops_header(std::ostream& out) {
  out << "preset,variant,n,w,r,layers,documents,qkv,scores,values,projection,output,ffn,layer_norm,total,gflops\n";
}

inline void flops_row(std::ostream& out, std::string_view preset, const ArchSpec& arch, const FlopReport& rep) {
  out << preset << ',' << to_string(arch.variant) << ',' << arch.n << ',' << (arch.uses_window() ? arch.w : 0) << ','
      << (arch.uses_global() ? arch.r : 0) << ',' << rep.layers << ',' << rep.documents << ',' << rep.qkv << ','
      << rep.scores << ',' << rep.values << ',' << rep.projection << ',' << rep.output << ',' << rep.ffn << ','
      << rep.layer_norm << ',' << rep.total() << ',' << std::setprecision(6) << rep.gflops() << '\n';
}

}  // namespace csv

}  // namespace lsattn
