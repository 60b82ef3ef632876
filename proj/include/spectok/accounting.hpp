#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "spectok/config.hpp"
#include "spectok/errors.hpp"
#include "spectok/format.hpp"

namespace spectok {

// Per-kind bookkeeping row shared by the parameter and FLOPs reports.
// `baseline` is the count with an empty SpecConfig, `specialized` the count
// under the config's actual SpecConfig; the delta is what specialization adds.
struct KindCount {
  LayerKind kind;
  long long baseline = 0;
  long long specialized = 0;

  long long delta() const { return specialized - baseline; }
};

struct ParamReport {
  long long baseline_total = 0;
  long long specialized_total = 0;
  std::vector<KindCount> per_kind;  // one row per LayerKind, in enum order
  long long other = 0;              // embeddings, tokens, attention biases

  long long delta() const { return specialized_total - baseline_total; }
  double delta_percent() const {
    return 100.0 * static_cast<double>(delta()) /
           static_cast<double>(baseline_total);
  }
};

struct FlopsReport {
  long long baseline_total = 0;
  long long specialized_total = 0;
  std::vector<KindCount> per_kind;  // matmul multiply-adds per kind
  long long other = 0;              // patch embedding + attention products

  long long delta() const { return specialized_total - baseline_total; }
  double delta_percent() const {
    return 100.0 * static_cast<double>(delta()) /
           static_cast<double>(baseline_total);
  }
};

namespace detail {

// Parameters of one unspecialized layer of the given kind in one block.
inline long long kind_param_count(LayerKind kind, const ModelConfig& c) {
  const long long d = c.embed_dim;
  const long long h = c.hidden_dim();
  switch (kind) {
    case LayerKind::kPreAttnLn:
    case LayerKind::kPreMlpLn:
      return 2 * d;  // gamma + beta
    case LayerKind::kQkv:
      return 3 * d * d + 3 * d;
    case LayerKind::kAttnOut:
      return d * d + d;
    case LayerKind::kPostAttnLs:
    case LayerKind::kPostMlpLs:
      return d;  // lambda
    case LayerKind::kMlp:
      return d * h + h + h * d + d;  // fc1 + fc2 with biases
  }
  throw ContractError("kind_param_count: unknown layer kind");
}

// Input/output widths of the dense map a LoRA pair wraps. The low-rank
// delta runs from the layer's input straight to its output, so it costs
// r * (in + out) parameters.
inline std::pair<long long, long long> kind_io_dims(LayerKind kind,
                                                    const ModelConfig& c) {
  const long long d = c.embed_dim;
  switch (kind) {
    case LayerKind::kQkv:
      return {d, 3 * d};
    case LayerKind::kAttnOut:
    case LayerKind::kMlp:
      return {d, d};
    default:
      throw ContractError("kind_io_dims: kind " +
                          std::string(to_string(kind)) +
                          " has no dense input/output map");
  }
}

// Number of blocks in [0, depth) the spec covers for this kind; 0 if the
// kind is not specialized at all.
inline int covered_blocks(const SpecConfig& spec, LayerKind kind, int depth) {
  const KindSpec* ks = spec.find(kind);
  if (ks == nullptr) return 0;
  int n = 0;
  for (int i = 0; i < depth; ++i) {
    if (ks->range.contains(i)) ++n;
  }
  return n;
}

// Multiply-adds of one unspecialized layer of the given kind applied to
// `rows` tokens. Normalization and scaling layers contain no matmul and
// therefore cost zero multiply-adds.
inline long long kind_flops_per_rows(LayerKind kind, const ModelConfig& c,
                                     long long rows) {
  const long long d = c.embed_dim;
  const long long h = c.hidden_dim();
  switch (kind) {
    case LayerKind::kQkv:
      return rows * d * (3 * d);
    case LayerKind::kAttnOut:
      return rows * d * d;
    case LayerKind::kMlp:
      return rows * d * h + rows * h * d;
    case LayerKind::kPreAttnLn:
    case LayerKind::kPreMlpLn:
    case LayerKind::kPostAttnLs:
    case LayerKind::kPostMlpLs:
      return 0;
  }
  throw ContractError("kind_flops_per_rows: unknown layer kind");
}

}  // namespace detail

// Exact trainable-parameter count versus the unspecialized baseline. The
// toy classification and reconstruction heads are excluded: they exist for
// the training exercise, not for the architecture whose overhead is being
// measured. The final norm is attributed to the pre_attn_ln row, since its
// specialization follows that kind's coverage of the last block.
inline ParamReport count_params(const ModelConfig& config) {
  config.validate();
  ParamReport report;
  const long long d = config.embed_dim;

  for (LayerKind kind : kLayerKinds) {
    KindCount row{kind, 0, 0};
    const long long base = detail::kind_param_count(kind, config);
    row.baseline = base * config.depth;
    row.specialized = row.baseline;

    if (const KindSpec* ks = config.spec.find(kind)) {
      const int blocks = detail::covered_blocks(config.spec, kind,
                                                config.depth);
      if (ks->lora_rank.has_value()) {
        auto [in, out] = detail::kind_io_dims(kind, config);
        row.specialized += blocks * (*ks->lora_rank) * (in + out);
      } else {
        row.specialized += blocks * base;
      }
    }

    if (kind == LayerKind::kPreAttnLn) {
      // The final norm reuses this kind's parameter shape (gamma + beta).
      row.baseline += 2 * d;
      row.specialized += 2 * d;
      if (config.final_ln_specialized()) row.specialized += 2 * d;
    }
    report.per_kind.push_back(row);
  }

  report.other = static_cast<long long>(config.patch_dim()) * d + d;  // embed
  report.other += d;                                          // cls token
  report.other += static_cast<long long>(config.num_registers) * d;
  report.other += static_cast<long long>(config.num_patches()) * d;  // pos
  if (config.attn_bias) report.other += config.depth * 2 * d;  // k and v

  report.baseline_total = report.other;
  report.specialized_total = report.other;
  for (const KindCount& row : report.per_kind) {
    report.baseline_total += row.baseline;
    report.specialized_total += row.specialized;
  }
  return report;
}

// Multiply-add count for one forward pass at the given image size (0 means
// the config's own size). A specialized layer is counted as the sum of its
// CLS-route rows and patch-route rows pushed through their respective
// equal-shape weights, so the split can never change the total; a low-rank
// CLS delta folds into the dense weight at inference and costs nothing.
inline FlopsReport count_flops(const ModelConfig& config, int image_size = 0) {
  config.validate();
  if (image_size == 0) image_size = config.image_size;
  if (image_size <= 0 || image_size % config.patch_size != 0) {
    throw ConfigError("count_flops: image size " + std::to_string(image_size) +
                      " is not divisible by patch size " +
                      std::to_string(config.patch_size));
  }
  const long long d = config.embed_dim;
  const long long side = image_size / config.patch_size;
  const long long patches = side * side;
  const long long patch_dim = static_cast<long long>(config.patch_size) *
                              config.patch_size * config.in_channels;
  const long long tokens = 1 + config.num_registers + patches;
  TokenPartition part{config.num_registers, static_cast<int>(patches)};
  const long long cls_rows =
      static_cast<long long>(part.cls_rows(config.spec.register_routing).size());
  const long long patch_rows = tokens - cls_rows;

  FlopsReport report;
  for (LayerKind kind : kLayerKinds) {
    KindCount row{kind, 0, 0};
    for (int i = 0; i < config.depth; ++i) {
      row.baseline += detail::kind_flops_per_rows(kind, config, tokens);
      const KindSpec* ks = config.spec.find(kind);
      if (ks != nullptr && ks->range.contains(i) && !ks->lora_rank) {
        row.specialized +=
            detail::kind_flops_per_rows(kind, config, cls_rows) +
            detail::kind_flops_per_rows(kind, config, patch_rows);
      } else {
        // Shared layer, or a LoRA pair whose delta merges into the weight.
        row.specialized += detail::kind_flops_per_rows(kind, config, tokens);
      }
    }
    report.per_kind.push_back(row);
  }

  report.other = patches * patch_dim * d;  // patch embedding projection
  const long long attendable = tokens + (config.attn_bias ? 1 : 0);
  // Attention scores q·k and mixture softmax·v, summed over heads: each is
  // tokens x attendable x head_dim per head, i.e. tokens*attendable*d total.
  report.other += config.depth * 2 * tokens * attendable * d;

  report.baseline_total = report.other;
  report.specialized_total = report.other;
  for (const KindCount& row : report.per_kind) {
    report.baseline_total += row.baseline;
    report.specialized_total += row.specialized;
  }
  return report;
}

namespace detail {

template <typename Report>
inline void write_report_csv_impl(std::ostream& os, const Report& report) {
  os << "kind,baseline,specialized,delta,delta_percent\n";
  const double base_total = static_cast<double>(report.baseline_total);
  for (const KindCount& row : report.per_kind) {
    os << to_string(row.kind) << ',' << row.baseline << ',' << row.specialized
       << ',' << row.delta() << ','
       << fmt_double(100.0 * static_cast<double>(row.delta()) / base_total)
       << '\n';
  }
  os << "other," << report.other << ',' << report.other << ",0,0\n";
  os << "total," << report.baseline_total << ',' << report.specialized_total
     << ',' << report.delta() << ',' << fmt_double(report.delta_percent())
     << '\n';
}

}  // namespace detail

// CSV layout shared by both reports: one row per layer kind, an `other`
// row for the kind-independent costs, and a `total` row. Per-kind
// delta_percent is the contribution to the headline number (delta over the
// model's baseline total), so the rows sum to the total row.
inline void write_report_csv(std::ostream& os, const ParamReport& report) {
  detail::write_report_csv_impl(os, report);
}

inline void write_report_csv(std::ostream& os, const FlopsReport& report) {
  detail::write_report_csv_impl(os, report);
}

}  // namespace spectok
