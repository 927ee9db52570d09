#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "lsattn/bench.hpp"
#include "lsattn/flops.hpp"

using namespace lsattn;

namespace {

// Independent tally: walk each matrix product and normalization of one layer.
std::uint64_t tally(const ArchSpec& a) {
  const std::uint64_t n = a.n, d = a.d, h = a.h, dk = d / h, f = a.ffn, w = a.w, r = a.r;
  std::uint64_t per_head = 0;
  per_head += 3 * n * d * dk;  // q, k, v for this head
  std::uint64_t keys_per_query = 0;
  if (a.variant == Variant::Full) keys_per_query = n;
  if (a.uses_window()) keys_per_query += 2 * w;
  if (a.uses_global()) {
    keys_per_query += r;
    per_head += n * d * r;       // X Wp
    per_head += 2 * r * n * dk;  // P^T K and P^T V
  }
  per_head += 2 * n * keys_per_query * dk;
  if (a.uses_dual_ln()) per_head += 5 * dk * 2 * (n + r);
  std::uint64_t layer = h * per_head + n * d * d;
  if (a.scope == Scope::Encoder) layer += 2 * n * d * f + 2 * 5 * n * d;
  return layer * a.layers * a.documents;
}

ArchSpec preset(const char* name, Variant v) {
  auto a = *named_preset(name);
  a.variant = v;
  return a;
}

}  // namespace

TEST(Flops, ListopsFullAttentionExact) {
  const auto a = preset("lra-listops", Variant::Full);
  EXPECT_EQ(count_flops(a).total(), 1210580992u);
  EXPECT_EQ(tally(a), 1210580992u);
}

TEST(Flops, PresetTableAgreesWithIndependentTally) {
  const struct {
    const char* name;
    double full_g, ls_g;
  } table[] = {{"lra-listops", 1.21, 0.20}, {"lra-text", 4.57, 0.40}, {"lra-retrieval", 9.14, 0.80}};
  for (const auto& row : table) {
    const auto full = preset(row.name, Variant::Full);
    const auto ls = preset(row.name, Variant::LongShort);
    EXPECT_EQ(count_flops(full).total(), tally(full)) << row.name;
    EXPECT_EQ(count_flops(ls).total(), tally(ls)) << row.name;
    EXPECT_NEAR(count_flops(full).gflops(), row.full_g, 0.005) << row.name;
    EXPECT_NEAR(count_flops(ls).gflops(), row.ls_g, 0.1 * row.ls_g) << row.name;
  }
  EXPECT_EQ(count_flops(preset("lra-listops", Variant::LongShort)).total(), 198221824u);
}

TEST(Flops, ComponentsScaleWithLayersAndDocuments) {
  auto a = preset("lra-text", Variant::LongShort);
  const auto one = count_flops(a);
  a.layers = 5;
  a.documents = 3;
  const auto many = count_flops(a);
  EXPECT_EQ(many.per_layer(), one.per_layer());
  EXPECT_EQ(many.total(), one.per_layer() * 15);
  EXPECT_EQ(one.total(), one.qkv * 2 + one.scores * 2 + one.values * 2 + one.projection * 2 + one.output * 2 +
                             one.ffn * 2 + one.layer_norm * 2);
}

TEST(Flops, ClosedFormEqualsInstrumentedRun) {
  Rng rng(11);
  const Variant variants[] = {Variant::Full, Variant::Window, Variant::Projection, Variant::LongShort};
  for (int trial = 0; trial < 16; ++trial) {
    ArchSpec a;
    a.variant = variants[trial % 4];
    a.h = 1 + rng.below(2);
    a.d = 4 * a.h * (1 + rng.below(2));
    a.ffn = 8;
    a.n = 8 + rng.below(40);
    a.w = 2 * (1 + rng.below(3));
    a.r = 1 + rng.below(4);
    a.l = a.w;
    a.layers = 1 + rng.below(2);
    a.documents = 1 + rng.below(2);
    a.dual_ln = rng.below(2) == 1;
    a.scope = rng.below(2) ? Scope::Encoder : Scope::Attention;
    if (trial >= 12) {
      a.mode = Mode::Causal;
      a.variant = trial % 2 ? Variant::LongShort : Variant::Full;
    }
    EXPECT_EQ(measure_flops(a, trial), count_flops(a).total()) << "trial " << trial;
  }
}

TEST(Flops, DoublingRatiosAtAttentionScope) {
  SweepSpec spec;
  for (const auto variant : {Variant::LongShort, Variant::Full}) {
    spec.variant = variant;
    const double target = variant == Variant::Full ? 4.0 : 2.0;
    const double band = variant == Variant::Full ? 0.10 : 0.05;
    for (std::size_t n : {1024u, 2048u}) {
      const double ratio = static_cast<double>(count_flops(spec.arch(2 * n)).total()) /
                           static_cast<double>(count_flops(spec.arch(n)).total());
      EXPECT_NEAR(ratio, target, band * target) << to_string(variant) << " n=" << n;
      if (variant == Variant::Full && n >= 2048) {
        EXPECT_GE(ratio, 3.6);
        EXPECT_LE(ratio, 4.0);
      }
    }
  }
}

TEST(Flops, RejectsInvalidArchitectures) {
  ArchSpec a;
  a.variant = Variant::LongShort;
  a.w = 0;
  a.r = 4;
  EXPECT_THROW(count_flops(a), ConfigError);
  a.w = 3;
  EXPECT_THROW(count_flops(a), ConfigError);
  a.w = 4;
  a.mode = Mode::Causal;
  a.variant = Variant::Window;
  EXPECT_THROW(count_flops(a), ConfigError);
}

TEST(Sweep, SmallLadder) {
  SweepSpec spec;
  spec.lengths = {32, 64, 128};
  spec.d = 16;
  spec.w = 4;
  spec.r = 4;
  const auto rows = run_scaling(spec);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_FALSE(rows[i].oom);
    EXPECT_EQ(rows[i].measured_flops, rows[i].flops);
    EXPECT_GT(rows[i].peak_bytes, 0u);
    EXPECT_GT(rows[i].wall_ms, 0.0);
    if (i) { EXPECT_GT(rows[i].flops, rows[i - 1].flops); }
  }
}

TEST(Sweep, RejectsBadLadderAndTooFewReps) {
  SweepSpec spec;
  spec.lengths = {32, 60};
  EXPECT_THROW(run_scaling(spec), ConfigError);
  spec.lengths = {};
  EXPECT_THROW(run_scaling(spec), ConfigError);
  spec.lengths = {32};
  spec.reps = 4;
  EXPECT_THROW(run_scaling(spec), ConfigError);
}

TEST(Sweep, AllocationBudgetExhaustionIsReportedAsOom) {
  auto& stats = AllocationStats::instance();
  SweepSpec spec;
  spec.lengths = {16, 32, 64};
  spec.variant = Variant::Full;
  spec.d = 16;
  stats.set_limit(stats.current() + 64 * 1024);
  std::vector<SweepRow> rows;
  try {
    rows = run_scaling(spec);
  } catch (...) {
    stats.set_limit(0);
    throw;
  }
  stats.set_limit(0);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_FALSE(rows[0].oom);
  EXPECT_TRUE(rows[2].oom);
  EXPECT_GT(rows[2].flops, 0u);
  std::ostringstream os;
  csv::sweep_row(os, rows[2]);
  EXPECT_NE(os.str().find(",oom\n"), std::string::npos);
}

TEST(Csv, Formats) {
  std::ostringstream os;
  csv::sweep_header(os);
  SweepRow row;
  row.n = 1024;
  row.w = 8;
  row.r = 32;
  row.variant = Variant::LongShort;
  row.flops = 123;
  row.wall_ms = 1.5;
  row.peak_bytes = 4096;
  csv::sweep_row(os, row);
  EXPECT_EQ(os.str(), "n,w,r,mode,variant,flops,wall_ms,peak_bytes,status\n1024,8,32,bidirectional,long-short,123,1.5,4096,ok\n");

  std::ostringstream fl;
  const auto a = preset("lra-listops", Variant::Full);
  csv::flops_row(fl, "lra-listops", a, count_flops(a));
  EXPECT_EQ(fl.str().rfind("lra-listops,full,2048,0,0,2,1,", 0), 0u);
  EXPECT_NE(fl.str().find(",1210580992,1.21058\n"), std::string::npos);

  std::ostringstream nr;
  csv::norm_row(nr, NormProbeRow{0, 3, 1.25, 0.5, true});
  EXPECT_EQ(nr.str(), "0,3,1.25,0.5,true\n");
}

TEST(Presets, KeyValueParsing) {
  const auto kv = KeyValueFile::parse("# comment\n n = 512 \nvariant=window # trailing\n\ndual_ln = no\nmode = causal\n");
  EXPECT_EQ(kv.get_size("n", 0), 512u);
  EXPECT_EQ(kv.get("variant", ""), "window");
  EXPECT_FALSE(kv.get_bool("dual_ln", true));
  EXPECT_EQ(kv.get_size("missing", 7), 7u);
  EXPECT_THROW(KeyValueFile::parse("just words\n"), ConfigError);
  EXPECT_THROW(KeyValueFile::parse(" = 3\n"), ConfigError);
  EXPECT_THROW(KeyValueFile::parse("n = 12x").get_size("n", 0), ConfigError);
  EXPECT_THROW(KeyValueFile::parse("b = maybe").get_bool("b", false), ConfigError);
  EXPECT_THROW(KeyValueFile::load("/nonexistent/presets.txt"), ConfigError);
}

TEST(Presets, OverridesApply) {
  const auto base = *named_preset("lra-text");
  const auto a = apply_overrides(base, KeyValueFile::parse("n = 1024\nvariant = long-short\nscope = attention\nlayers = 1"));
  EXPECT_EQ(a.n, 1024u);
  EXPECT_EQ(a.variant, Variant::LongShort);
  EXPECT_EQ(a.scope, Scope::Attention);
  EXPECT_EQ(a.layers, 1u);
  EXPECT_EQ(a.d, base.d);
  EXPECT_THROW(apply_overrides(base, KeyValueFile::parse("variant = sparse")), ConfigError);
  EXPECT_THROW(apply_overrides(base, KeyValueFile::parse("mode = sideways")), ConfigError);
  EXPECT_FALSE(named_preset("imagenet").has_value());
}
