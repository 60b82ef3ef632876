#include "spectok/accounting.hpp"

#include <gtest/gtest.h>

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spectok/model.hpp"

using namespace spectok;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.in_channels = 1;
  c.embed_dim = 8;
  c.depth = 3;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.num_classes = 3;
  return c;
}

ModelConfig vit_l() {
  ModelConfig c;
  c.image_size = 518;
  c.patch_size = 14;
  c.in_channels = 3;
  c.embed_dim = 1024;
  c.depth = 24;
  c.num_heads = 16;
  c.mlp_ratio = 4.0;
  c.num_classes = 10;
  return c;
}

SpecConfig norms_all(int depth) {
  SpecConfig s;
  for (LayerKind k : kLayerKinds) {
    if (is_norm_or_scale(k)) s.kinds[k] = KindSpec{{0, depth}, std::nullopt};
  }
  return s;
}

// Independent oracle: what the constructed model actually allocates,
// bucketed by the registry's naming scheme. Toy heads are skipped to match
// the accounting contract.
struct RegistrySums {
  long long total = 0;
  std::map<LayerKind, long long> by_kind;
  long long other = 0;
};

RegistrySums registry_sums(const VitModel& model) {
  RegistrySums sums;
  for (const auto& p : model.params) {
    const std::string& name = p.name;
    if (name.rfind("head.", 0) == 0 || name.rfind("aux_head.", 0) == 0) {
      continue;
    }
    long long n = static_cast<long long>(p.tensor.size());
    sums.total += n;
    bool bucketed = false;
    if (name.rfind("final_ln.", 0) == 0) {
      sums.by_kind[LayerKind::kPreAttnLn] += n;
      bucketed = true;
    } else if (name.rfind("block", 0) == 0) {
      auto first = name.find('.');
      auto second = name.find('.', first + 1);
      std::string segment = name.substr(first + 1, second - first - 1);
      for (LayerKind k : kLayerKinds) {
        if (segment == to_string(k)) {
          sums.by_kind[k] += n;
          bucketed = true;
          break;
        }
      }
    }
    if (!bucketed) sums.other += n;
  }
  return sums;
}

void expect_matches_registry(const ModelConfig& config) {
  ParamReport report = count_params(config);
  VitModel model = build_model(config, 5);
  RegistrySums actual = registry_sums(model);
  EXPECT_EQ(report.specialized_total, actual.total) << "specialized total";
  EXPECT_EQ(report.other, actual.other) << "other bucket";
  for (const KindCount& row : report.per_kind) {
    EXPECT_EQ(row.specialized, actual.by_kind[row.kind])
        << "kind " << to_string(row.kind);
  }

  ModelConfig stripped = config;
  stripped.spec = SpecConfig{};
  stripped.spec.register_routing = config.spec.register_routing;
  VitModel base_model = build_model(stripped, 5);
  EXPECT_EQ(report.baseline_total, registry_sums(base_model).total)
      << "baseline total";
}

}  // namespace

// ==================== parameters vs the real model ====================

TEST(CountParams, MatchesModelRegistryAcrossConfigs) {
  {
    ModelConfig c = tiny_config();
    expect_matches_registry(c);
  }
  for (LayerKind k : kLayerKinds) {
    ModelConfig c = tiny_config();
    c.spec.kinds[k] = KindSpec{{0, c.depth}, std::nullopt};
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.spec.kinds[LayerKind::kQkv] = KindSpec{{0, 2}, 2};
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.num_registers = 2;
    c.attn_bias = true;
    for (LayerKind k : kLayerKinds) {
      if (!is_norm_or_scale(k)) {
        c.spec.kinds[k] = KindSpec{{1, 3}, std::nullopt};
      }
    }
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.num_registers = 1;
    c.spec = SpecConfig::norms_plus_early_qkv(c.depth);
    c.spec.register_routing = RegisterRouting::kWithPatches;
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.spec.kinds[LayerKind::kMlp] = KindSpec{{0, 3}, 3};
    c.spec.kinds[LayerKind::kAttnOut] = KindSpec{{2, 3}, std::nullopt};
    c.cls_init = ClsInit::kCopy;  // copy-init must not change any count
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.spec.kinds[LayerKind::kPreAttnLn] = KindSpec{{0, 3}, std::nullopt};
    c.spec.final_ln = FinalLnMode::kOff;
    expect_matches_registry(c);
  }
  {
    ModelConfig c = tiny_config();
    c.spec.final_ln = FinalLnMode::kOn;
    c.spec.kinds[LayerKind::kPreAttnLn] = KindSpec{{0, 1}, std::nullopt};
    expect_matches_registry(c);
  }
}

TEST(CountParams, EmptySpecHasZeroDelta) {
  ParamReport report = count_params(tiny_config());
  EXPECT_EQ(report.delta(), 0);
  EXPECT_DOUBLE_EQ(report.delta_percent(), 0.0);
}

TEST(CountParams, PerKindDeltasSumToTotal) {
  ModelConfig c = tiny_config();
  c.num_registers = 2;
  c.attn_bias = true;
  c.spec = SpecConfig::norms_plus_early_qkv(c.depth);
  c.spec.kinds[LayerKind::kMlp] = KindSpec{{1, 2}, 2};
  ParamReport report = count_params(c);
  long long sum = 0;
  for (const KindCount& row : report.per_kind) sum += row.delta();
  EXPECT_EQ(sum, report.delta());
  EXPECT_GE(report.delta(), 0);
}

TEST(CountParams, QkvDuplicateClosedForm) {
  ModelConfig c = vit_l();
  c.spec.kinds[LayerKind::kQkv] = KindSpec{{0, 1}, std::nullopt};
  ParamReport report = count_params(c);
  EXPECT_EQ(report.delta(), 3 * 1024LL * 1024 + 3 * 1024);  // 3,148,800
}

// ==================== published overhead percentages ====================

TEST(CountParams, NormSpecializationCostsFiveHundredthsPercent) {
  ModelConfig c = vit_l();
  c.spec = norms_all(c.depth);
  ParamReport report = count_params(c);
  EXPECT_NEAR(report.delta_percent(), 0.05, 0.5);
  EXPECT_NEAR(report.delta_percent(), 0.0491, 5e-4);  // pin the exact value
}

TEST(CountParams, DenseKindCombinationsOnFirstThird) {
  struct Case {
    std::vector<LayerKind> kinds;
    double expected;
  };
  const std::vector<Case> cases = {
      {{LayerKind::kAttnOut}, 3.0},
      {{LayerKind::kQkv}, 8.0},
      {{LayerKind::kQkv, LayerKind::kAttnOut}, 11.0},
      {{LayerKind::kMlp}, 22.0},
      {{LayerKind::kAttnOut, LayerKind::kMlp}, 25.0},
      {{LayerKind::kQkv, LayerKind::kMlp}, 30.0},
      {{LayerKind::kQkv, LayerKind::kAttnOut, LayerKind::kMlp}, 33.0},
  };
  for (const Case& tc : cases) {
    ModelConfig c = vit_l();
    c.spec = norms_all(c.depth);
    for (LayerKind k : tc.kinds) {
      c.spec.kinds[k] = KindSpec{{0, 8}, std::nullopt};
    }
    ParamReport report = count_params(c);
    EXPECT_NEAR(report.delta_percent(), tc.expected, 0.5)
        << "combination ending with " << to_string(tc.kinds.back());
  }
}

TEST(CountParams, LowRankQkvOverheads) {
  for (auto [rank, expected] : {std::pair<int, double>{16, 0.2}, {128, 1.4}}) {
    ModelConfig c = vit_l();
    c.spec = norms_all(c.depth);
    c.spec.kinds[LayerKind::kQkv] = KindSpec{{0, 8}, rank};
    ParamReport report = count_params(c);
    EXPECT_NEAR(report.delta_percent(), expected, 0.1) << "rank " << rank;
  }
}

TEST(CountParams, AttentionBiasCountsTwoVectorsPerBlock) {
  ModelConfig with = tiny_config();
  with.attn_bias = true;
  ModelConfig without = tiny_config();
  EXPECT_EQ(count_params(with).baseline_total -
                count_params(without).baseline_total,
            2LL * with.depth * with.embed_dim);
}

// ==================== FLOPs ====================

TEST(CountFlops, MatchesHandComputedTinyModel) {
  ModelConfig c = tiny_config();
  c.depth = 2;
  // patches=4, tokens=5, d=8, hidden=16, patch_dim=16
  // embed: 4*16*8 = 512
  // per block: qkv 5*8*24=960, attn_out 5*8*8=320, mlp 2*5*8*16=1280,
  //            scores+mix 2*5*5*8=400
  FlopsReport report = count_flops(c);
  EXPECT_EQ(report.baseline_total, 512 + 2 * (960 + 320 + 1280 + 400));
  EXPECT_EQ(report.specialized_total, report.baseline_total);
}

TEST(CountFlops, BiasSlotAddsOneAttendableColumn) {
  ModelConfig c = tiny_config();
  c.depth = 2;
  c.attn_bias = true;
  FlopsReport report = count_flops(c);
  // scores+mix become 2*5*6*8 = 480 per block
  EXPECT_EQ(report.baseline_total, 512 + 2 * (960 + 320 + 1280 + 480));
}

TEST(CountFlops, SpecializationNeverChangesAnyCount) {
  const std::vector<BlockRange> ranges = {{0, 1}, {1, 3}, {0, 3}};
  for (RegisterRouting routing :
       {RegisterRouting::kWithCls, RegisterRouting::kWithPatches}) {
    for (LayerKind k : kLayerKinds) {
      for (const BlockRange& r : ranges) {
        ModelConfig c = tiny_config();
        c.num_registers = 2;
        c.spec.register_routing = routing;
        c.spec.kinds[k] = KindSpec{{r.lo, r.hi}, std::nullopt};
        FlopsReport report = count_flops(c);
        EXPECT_EQ(report.specialized_total, report.baseline_total)
            << to_string(k) << " [" << r.lo << "," << r.hi << ")";
        for (const KindCount& row : report.per_kind) {
          EXPECT_EQ(row.delta(), 0) << to_string(row.kind);
        }
      }
    }
  }
  for (int rank : {1, 4}) {
    ModelConfig c = tiny_config();
    c.spec.kinds[LayerKind::kQkv] = KindSpec{{0, 3}, rank};
    c.spec.kinds[LayerKind::kMlp] = KindSpec{{0, 2}, rank};
    FlopsReport report = count_flops(c);
    EXPECT_EQ(report.specialized_total, report.baseline_total);
  }
}

TEST(CountFlops, ImageSizeOverrideAndValidation) {
  ModelConfig c = tiny_config();
  FlopsReport small = count_flops(c);
  FlopsReport big = count_flops(c, 16);
  EXPECT_GT(big.baseline_total, small.baseline_total);
  EXPECT_EQ(count_flops(c, c.image_size).baseline_total, small.baseline_total);
  EXPECT_THROW(count_flops(c, 10), ConfigError);
  EXPECT_THROW(count_flops(c, -4), ConfigError);
}

TEST(CountFlops, NormAndScaleKindsCostNothing) {
  FlopsReport report = count_flops(tiny_config());
  for (const KindCount& row : report.per_kind) {
    if (is_norm_or_scale(row.kind)) {
      EXPECT_EQ(row.baseline, 0);
      EXPECT_EQ(row.specialized, 0);
    } else {
      EXPECT_GT(row.baseline, 0);
    }
  }
}

// ==================== CSV ====================

TEST(ReportCsv, LayoutAndArithmetic) {
  ModelConfig c = tiny_config();
  c.spec.kinds[LayerKind::kQkv] = KindSpec{{0, 2}, std::nullopt};
  std::ostringstream os;
  write_report_csv(os, count_params(c));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "kind,baseline,specialized,delta,delta_percent");
  std::vector<std::string> rows;
  while (std::getline(is, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 9u);  // 7 kinds + other + total
  for (std::size_t i = 0; i < kLayerKinds.size(); ++i) {
    EXPECT_EQ(rows[i].substr(0, rows[i].find(',')),
              std::string(to_string(kLayerKinds[i])));
  }
  EXPECT_EQ(rows[7].substr(0, rows[7].find(',')), "other");
  EXPECT_EQ(rows[8].substr(0, rows[8].find(',')), "total");

  // the qkv row carries the whole delta: 2 blocks * (3d^2+3d), d=8
  ParamReport report = count_params(c);
  EXPECT_EQ(report.delta(), 2 * (3 * 64LL + 3 * 8));
  std::string qkv_row = rows[1];
  EXPECT_NE(qkv_row.find(",432,"), std::string::npos);
}

TEST(ReportCsv, FlopsReportSharesLayout) {
  std::ostringstream os;
  write_report_csv(os, count_flops(tiny_config()));
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "kind,baseline,specialized,delta,delta_percent");
}
