#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spectok/errors.hpp"

namespace spectok {

// ==================== Layer kinds ====================

// The seven per-block layer sites that can hold a separate class-token path.
enum class LayerKind {
  kPreAttnLn,
  kQkv,
  kAttnOut,
  kPostAttnLs,
  kPreMlpLn,
  kMlp,
  kPostMlpLs,
};

inline constexpr std::array<LayerKind, 7> kLayerKinds = {
    LayerKind::kPreAttnLn, LayerKind::kQkv,      LayerKind::kAttnOut,
    LayerKind::kPostAttnLs, LayerKind::kPreMlpLn, LayerKind::kMlp,
    LayerKind::kPostMlpLs,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kPreAttnLn: return "pre_attn_ln";
    case LayerKind::kQkv: return "qkv";
    case LayerKind::kAttnOut: return "attn_out";
    case LayerKind::kPostAttnLs: return "post_attn_ls";
    case LayerKind::kPreMlpLn: return "pre_mlp_ln";
    case LayerKind::kMlp: return "mlp";
    case LayerKind::kPostMlpLs: return "post_mlp_ls";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from(std::string_view s) {
  for (LayerKind k : kLayerKinds) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

// Norm and scale sites: cheap to specialize (vectors, not matrices).
inline bool is_norm_or_scale(LayerKind k) {
  return k == LayerKind::kPreAttnLn || k == LayerKind::kPostAttnLs ||
         k == LayerKind::kPreMlpLn || k == LayerKind::kPostMlpLs;
}

// ==================== Routing and modes ====================

// Which path register tokens follow through specialized layers.
enum class RegisterRouting { kWithCls, kWithPatches };

inline const char* to_string(RegisterRouting r) {
  return r == RegisterRouting::kWithCls ? "with_cls" : "with_patches";
}

inline std::optional<RegisterRouting> register_routing_from(std::string_view s) {
  if (s == "with_cls") return RegisterRouting::kWithCls;
  if (s == "with_patches") return RegisterRouting::kWithPatches;
  return std::nullopt;
}

// Whether the final LayerNorm gets its own class path. kAuto follows
// pre_attn_ln: specialized iff pre_attn_ln is specialized in the last block.
enum class FinalLnMode { kAuto, kOn, kOff };

inline const char* to_string(FinalLnMode m) {
  switch (m) {
    case FinalLnMode::kAuto: return "auto";
    case FinalLnMode::kOn: return "on";
    case FinalLnMode::kOff: return "off";
  }
  return "?";
}

inline std::optional<FinalLnMode> final_ln_mode_from(std::string_view s) {
  if (s == "auto") return FinalLnMode::kAuto;
  if (s == "on") return FinalLnMode::kOn;
  if (s == "off") return FinalLnMode::kOff;
  return std::nullopt;
}

// Class-path weight init: fresh draws, or a bitwise copy of the patch path.
enum class ClsInit { kIndependent, kCopy };

inline const char* to_string(ClsInit c) {
  return c == ClsInit::kIndependent ? "independent" : "copy";
}

inline std::optional<ClsInit> cls_init_from(std::string_view s) {
  if (s == "independent") return ClsInit::kIndependent;
  if (s == "copy") return ClsInit::kCopy;
  return std::nullopt;
}

// ==================== Specialization config ====================

// Half-open block range [lo, hi).
struct BlockRange {
  int lo = 0;
  int hi = 0;
  bool contains(int block) const { return block >= lo && block < hi; }
};

struct KindSpec {
  BlockRange range;
  // Engaged: class path is a low-rank residual adapter of this rank instead
  // of a full weight copy. Norm/scale kinds do not support it.
  std::optional<int> lora_rank;
};

struct SpecConfig {
  std::map<LayerKind, KindSpec> kinds;
  RegisterRouting register_routing = RegisterRouting::kWithCls;
  FinalLnMode final_ln = FinalLnMode::kAuto;

  bool empty() const { return kinds.empty(); }

  const KindSpec* find(LayerKind k) const {
    auto it = kinds.find(k);
    return it == kinds.end() ? nullptr : &it->second;
  }

  bool specialized(LayerKind k, int block) const {
    const KindSpec* s = find(k);
    return s != nullptr && s->range.contains(block);
  }

  void validate(int depth) const {
    for (const auto& [kind, spec] : kinds) {
      if (spec.range.lo < 0 || spec.range.hi > depth ||
          spec.range.lo >= spec.range.hi) {
        throw ConfigError(std::string("spec range [") +
                          std::to_string(spec.range.lo) + ", " +
                          std::to_string(spec.range.hi) + ") for " +
                          to_string(kind) + " invalid for depth " +
                          std::to_string(depth));
      }
      if (spec.lora_rank) {
        if (*spec.lora_rank < 1) {
          throw ConfigError(std::string("lora_rank for ") + to_string(kind) +
                            " must be >= 1");
        }
        if (is_norm_or_scale(kind)) {
          throw ConfigError(std::string("lora_rank not supported for ") +
                            to_string(kind));
        }
      }
    }
    if (final_ln == FinalLnMode::kOn && find(LayerKind::kPreAttnLn) == nullptr) {
      throw ConfigError("final_ln: \"on\" requires pre_attn_ln in the spec");
    }
  }

  // The recipe that works best in practice: all norm/scale sites over the
  // whole depth, plus QKV over the first third of the blocks.
  static SpecConfig norms_plus_early_qkv(int depth) {
    SpecConfig s;
    for (LayerKind k : kLayerKinds) {
      if (is_norm_or_scale(k)) s.kinds[k] = KindSpec{{0, depth}, std::nullopt};
    }
    s.kinds[LayerKind::kQkv] = KindSpec{{0, (depth + 2) / 3}, std::nullopt};
    return s;
  }
};

// ==================== Model config ====================

struct ModelConfig {
  int image_size = 16;
  int patch_size = 4;
  int in_channels = 1;
  int embed_dim = 32;
  int depth = 2;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int num_registers = 0;
  bool attn_bias = false;
  int num_classes = 4;
  double ls_init = 1e-5;
  ClsInit cls_init = ClsInit::kIndependent;
  SpecConfig spec;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_size * patch_size * in_channels; }
  int num_tokens() const { return 1 + num_registers + num_patches(); }
  int head_dim() const { return embed_dim / num_heads; }
  int hidden_dim() const {
    return static_cast<int>(std::lround(mlp_ratio * embed_dim));
  }

  bool final_ln_specialized() const {
    switch (spec.final_ln) {
      case FinalLnMode::kOn: return true;
      case FinalLnMode::kOff: return false;
      case FinalLnMode::kAuto:
        return spec.specialized(LayerKind::kPreAttnLn, depth - 1);
    }
    return false;
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) {
        throw ConfigError(std::string(name) + " must be >= 1, got " +
                          std::to_string(v));
      }
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(in_channels, "in_channels");
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(num_heads, "num_heads");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (num_registers < 0) throw ConfigError("num_registers must be >= 0");
    if (image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
    double hidden = mlp_ratio * embed_dim;
    if (std::fabs(hidden - std::lround(hidden)) > 1e-9) {
      throw ConfigError("mlp_ratio * embed_dim must be an integer");
    }
    if (!std::isfinite(ls_init)) throw ConfigError("ls_init must be finite");
    spec.validate(depth);
  }
};

// ==================== Token partition ====================

// Token row layout: [cls | registers | patches]. Provides the row index sets
// the two specialized paths operate on.
struct TokenPartition {
  int num_registers = 0;
  int num_patches = 0;

  static constexpr std::size_t kClsRow = 0;
  int total() const { return 1 + num_registers + num_patches; }
  int first_patch() const { return 1 + num_registers; }

  std::vector<std::size_t> cls_rows(RegisterRouting routing) const {
    std::vector<std::size_t> rows{kClsRow};
    if (routing == RegisterRouting::kWithCls) {
      for (int i = 0; i < num_registers; ++i) rows.push_back(1 + i);
    }
    return rows;
  }

  std::vector<std::size_t> patch_rows(RegisterRouting routing) const {
    std::vector<std::size_t> rows;
    if (routing == RegisterRouting::kWithPatches) {
      for (int i = 0; i < num_registers; ++i) rows.push_back(1 + i);
    }
    for (int i = 0; i < num_patches; ++i) rows.push_back(first_patch() + i);
    return rows;
  }

  // Strictly patch tokens, regardless of routing. Used for outputs and probes.
  std::vector<std::size_t> patch_only_rows() const {
    std::vector<std::size_t> rows;
    for (int i = 0; i < num_patches; ++i) rows.push_back(first_patch() + i);
    return rows;
  }
};

}  // namespace spectok
