#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spectok/config.hpp"
#include "spectok/errors.hpp"
#include "spectok/rng.hpp"
#include "spectok/tensor.hpp"

namespace spectok {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

// ==================== Parameter groups ====================

struct LnParams {
  Tensor gamma, beta;  // [d]
};

struct LsParams {
  Tensor lambda;  // [d]
};

// y = x W + b with W [in, out], b [out].
struct LinearParams {
  Tensor weight, bias;
};

struct MlpParams {
  LinearParams fc1, fc2;
};

// Low-rank residual: delta(x) = (x A) B, A [in, r], B [r, out].
struct LoraParams {
  Tensor a, b;
};

enum class PathMode { kShared, kFull, kLora };

// A layer site with a patch path and an optional class path. kShared: one set
// of weights for all tokens. kFull: the class path has its own full copy.
// kLora: the class path is patch(x) plus a low-rank residual.
template <class P>
struct PathPair {
  PathMode mode = PathMode::kShared;
  P patch;
  std::optional<P> cls;
  std::optional<LoraParams> lora;
};

// ==================== Layer applications ====================

inline Tensor linear_apply(const LinearParams& p, const Tensor& x) {
  return add(matmul(x, p.weight), p.bias);
}

// Pre-norm transformer LayerNorm: per-row standardization with a learned
// per-dimension affine. Population variance, eps inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta) {
  Tensor centered = sub(x, mean_axis(x, 1));
  Tensor denom = sqrt(shift(var_axis(x, 1), kLayerNormEps));
  return add(mul(div(centered, denom), gamma), beta);
}

inline Tensor ln_apply(const LnParams& p, const Tensor& x) {
  return layer_norm(x, p.gamma, p.beta);
}

inline Tensor ls_apply(const LsParams& p, const Tensor& x) {
  return mul(x, p.lambda);
}

inline Tensor mlp_apply(const MlpParams& p, const Tensor& x) {
  return linear_apply(p.fc2, gelu(linear_apply(p.fc1, x)));
}

// Routes rows through the pair's paths and restores the original row order.
// Every row goes through exactly one path.
template <class P, class Apply>
Tensor specialized_apply(const PathPair<P>& pair, const Tensor& x,
                         const TokenPartition& part, RegisterRouting routing,
                         Apply&& apply) {
  if (pair.mode == PathMode::kShared) return apply(pair.patch, x);
  if (x.shape()[0] != static_cast<std::size_t>(part.total())) {
    throw ShapeError("specialized_apply: " + std::to_string(x.shape()[0]) +
                     " rows for a partition of " + std::to_string(part.total()));
  }
  std::vector<std::size_t> cls_rows = part.cls_rows(routing);
  std::vector<std::size_t> patch_rows = part.patch_rows(routing);
  Tensor xc = select_rows(x, cls_rows);
  Tensor xp = select_rows(x, patch_rows);
  Tensor yc = pair.mode == PathMode::kFull
                  ? apply(*pair.cls, xc)
                  : add(apply(pair.patch, xc),
                        matmul(matmul(xc, pair.lora->a), pair.lora->b));
  Tensor yp = apply(pair.patch, xp);
  std::vector<std::size_t> inverse(part.total());
  for (std::size_t i = 0; i < cls_rows.size(); ++i) inverse[cls_rows[i]] = i;
  for (std::size_t i = 0; i < patch_rows.size(); ++i) {
    inverse[patch_rows[i]] = cls_rows.size() + i;
  }
  return select_rows(concat_rows({yc, yp}), inverse);
}

// ==================== Model ====================

struct Block {
  PathPair<LnParams> pre_attn_ln;
  PathPair<LinearParams> qkv;       // weight [d, 3d], layout [q | k | v]
  PathPair<LinearParams> attn_out;  // weight [d, d]
  PathPair<LsParams> post_attn_ls;
  PathPair<LnParams> pre_mlp_ln;
  PathPair<MlpParams> mlp;
  PathPair<LsParams> post_mlp_ls;
  Tensor attn_bias_k, attn_bias_v;  // [num_heads, head_dim] when enabled
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct VitModel {
  ModelConfig config;
  TokenPartition partition;
  LinearParams patch_embed;  // weight [patch_dim, d]
  Tensor cls_token;          // [1, d]
  Tensor registers;          // [R, d] when R > 0
  Tensor pos_embed;          // [P, d], patch tokens only
  std::vector<Block> blocks;
  PathPair<LnParams> final_ln;
  LinearParams head;      // [d, num_classes]
  LinearParams aux_head;  // [d, patch_dim]
  std::vector<NamedParam> params;  // aliases every trainable tensor, in order

  Tensor* find_param(std::string_view name) {
    for (auto& p : params) {
      if (p.name == name) return &p.tensor;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
  }
};

// ==================== Initialization ====================

namespace detail {

// Every tensor draws from its own stream keyed by name, so the draws a tensor
// sees never depend on which other tensors exist (different spec configs
// leave shared weights bit-identical).
inline Tensor init_trunc_normal(std::vector<std::size_t> shape,
                                std::uint64_t seed, const std::string& name) {
  Rng rng = Rng::keyed(seed, name);
  std::vector<double> d(numel(shape));
  for (double& v : d) v = rng.trunc_normal(0.0, kInitStd);
  Tensor t(std::move(shape), std::move(d));
  t.set_requires_grad(true);
  return t;
}

inline Tensor init_normal(std::vector<std::size_t> shape, std::uint64_t seed,
                          const std::string& name) {
  Rng rng = Rng::keyed(seed, name);
  std::vector<double> d(numel(shape));
  for (double& v : d) v = rng.normal(0.0, kInitStd);
  Tensor t(std::move(shape), std::move(d));
  t.set_requires_grad(true);
  return t;
}

inline Tensor init_const(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape), v);
  t.set_requires_grad(true);
  return t;
}

struct Builder {
  VitModel& model;
  std::uint64_t seed;

  void reg(const std::string& name, Tensor& t) {
    model.params.push_back({name, t});
  }

  Tensor trunc(const std::string& name, std::vector<std::size_t> shape) {
    return init_trunc_normal(std::move(shape), seed, name);
  }

  LinearParams make_linear(const std::string& base, std::size_t in,
                           std::size_t out) {
    LinearParams p;
    p.weight = trunc(base + ".weight", {in, out});
    p.bias = init_const({out}, 0.0);
    reg(base + ".weight", p.weight);
    reg(base + ".bias", p.bias);
    return p;
  }

  LinearParams copy_linear(const std::string& base, const LinearParams& src) {
    LinearParams p{src.weight.detach(), src.bias.detach()};
    p.weight.set_requires_grad(true);
    p.bias.set_requires_grad(true);
    reg(base + ".weight", p.weight);
    reg(base + ".bias", p.bias);
    return p;
  }

  LnParams make_ln(const std::string& base, std::size_t d) {
    LnParams p{init_const({d}, 1.0), init_const({d}, 0.0)};
    reg(base + ".gamma", p.gamma);
    reg(base + ".beta", p.beta);
    return p;
  }

  LsParams make_ls(const std::string& base, std::size_t d) {
    LsParams p{init_const({d}, model.config.ls_init)};
    reg(base + ".lambda", p.lambda);
    return p;
  }

  MlpParams make_mlp(const std::string& base, std::size_t d,
                     std::size_t hidden) {
    return MlpParams{make_linear(base + ".fc1", d, hidden),
                     make_linear(base + ".fc2", hidden, d)};
  }

  MlpParams copy_mlp(const std::string& base, const MlpParams& src) {
    return MlpParams{copy_linear(base + ".fc1", src.fc1),
                     copy_linear(base + ".fc2", src.fc2)};
  }

  LoraParams make_lora(const std::string& base, std::size_t in,
                       std::size_t out, int rank) {
    // A gets small random values, B starts at zero: the class path begins as
    // an exact copy of the patch path's function.
    LoraParams p;
    p.a = init_normal({in, static_cast<std::size_t>(rank)}, seed, base + ".lora_a");
    p.b = init_const({static_cast<std::size_t>(rank), out}, 0.0);
    reg(base + ".lora_a", p.a);
    reg(base + ".lora_b", p.b);
    return p;
  }

  // Assembles a PathPair for one (kind, block) site. make builds the patch
  // path under `base + ".patch"`; clone/copy handle the class path.
  template <class P, class Make, class Copy>
  PathPair<P> make_pair(LayerKind kind, int block_index, const std::string& base,
                        std::size_t in, std::size_t out, Make&& make,
                        Copy&& copy) {
    PathPair<P> pair;
    pair.patch = make(base + ".patch");
    const KindSpec* spec = model.config.spec.find(kind);
    bool on = spec != nullptr && spec->range.contains(block_index);
    if (!on) return pair;
    if (spec->lora_rank) {
      pair.mode = PathMode::kLora;
      pair.lora = make_lora(base, in, out, *spec->lora_rank);
    } else {
      pair.mode = PathMode::kFull;
      pair.cls = model.config.cls_init == ClsInit::kCopy
                     ? copy(base + ".cls", pair.patch)
                     : make(base + ".cls");
    }
    return pair;
  }
};

}  // namespace detail

inline VitModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  VitModel model;
  model.config = config;
  model.partition =
      TokenPartition{config.num_registers, config.num_patches()};
  detail::Builder b{model, seed};

  std::size_t d = config.embed_dim;
  std::size_t pd = config.patch_dim();
  std::size_t hidden = config.hidden_dim();

  model.patch_embed = b.make_linear("patch_embed", pd, d);
  model.cls_token = b.trunc("cls_token", {1, d});
  b.reg("cls_token", model.cls_token);
  if (config.num_registers > 0) {
    model.registers =
        b.trunc("registers", {static_cast<std::size_t>(config.num_registers), d});
    b.reg("registers", model.registers);
  }
  model.pos_embed =
      b.trunc("pos_embed", {static_cast<std::size_t>(config.num_patches()), d});
  b.reg("pos_embed", model.pos_embed);

  for (int i = 0; i < config.depth; ++i) {
    Block block;
    std::string prefix = "block" + std::to_string(i) + ".";
    auto base = [&](LayerKind k) { return prefix + to_string(k); };

    block.pre_attn_ln = b.make_pair<LnParams>(
        LayerKind::kPreAttnLn, i, base(LayerKind::kPreAttnLn), d, d,
        [&](const std::string& p) { return b.make_ln(p, d); },
        [&](const std::string& p, const LnParams&) { return b.make_ln(p, d); });
    block.qkv = b.make_pair<LinearParams>(
        LayerKind::kQkv, i, base(LayerKind::kQkv), d, 3 * d,
        [&](const std::string& p) { return b.make_linear(p, d, 3 * d); },
        [&](const std::string& p, const LinearParams& src) {
          return b.copy_linear(p, src);
        });
    block.attn_out = b.make_pair<LinearParams>(
        LayerKind::kAttnOut, i, base(LayerKind::kAttnOut), d, d,
        [&](const std::string& p) { return b.make_linear(p, d, d); },
        [&](const std::string& p, const LinearParams& src) {
          return b.copy_linear(p, src);
        });
    block.post_attn_ls = b.make_pair<LsParams>(
        LayerKind::kPostAttnLs, i, base(LayerKind::kPostAttnLs), d, d,
        [&](const std::string& p) { return b.make_ls(p, d); },
        [&](const std::string& p, const LsParams&) { return b.make_ls(p, d); });
    block.pre_mlp_ln = b.make_pair<LnParams>(
        LayerKind::kPreMlpLn, i, base(LayerKind::kPreMlpLn), d, d,
        [&](const std::string& p) { return b.make_ln(p, d); },
        [&](const std::string& p, const LnParams&) { return b.make_ln(p, d); });
    block.mlp = b.make_pair<MlpParams>(
        LayerKind::kMlp, i, base(LayerKind::kMlp), d, d,
        [&](const std::string& p) { return b.make_mlp(p, d, hidden); },
        [&](const std::string& p, const MlpParams& src) {
          return b.copy_mlp(p, src);
        });
    block.post_mlp_ls = b.make_pair<LsParams>(
        LayerKind::kPostMlpLs, i, base(LayerKind::kPostMlpLs), d, d,
        [&](const std::string& p) { return b.make_ls(p, d); },
        [&](const std::string& p, const LsParams&) { return b.make_ls(p, d); });

    if (config.attn_bias) {
      std::size_t h = config.num_heads;
      std::size_t hd = config.head_dim();
      block.attn_bias_k = b.trunc(prefix + "attn_bias_k", {h, hd});
      block.attn_bias_v = b.trunc(prefix + "attn_bias_v", {h, hd});
      b.reg(prefix + "attn_bias_k", block.attn_bias_k);
      b.reg(prefix + "attn_bias_v", block.attn_bias_v);
    }
    model.blocks.push_back(std::move(block));
  }

  {
    // The final LayerNorm inherits pre_attn_ln's specialization when active.
    PathPair<LnParams> pair;
    pair.patch = b.make_ln("final_ln.patch", d);
    if (config.final_ln_specialized()) {
      pair.mode = PathMode::kFull;
      pair.cls = b.make_ln("final_ln.cls", d);
    }
    model.final_ln = std::move(pair);
  }
  model.head =
      b.make_linear("head", d, static_cast<std::size_t>(config.num_classes));
  model.aux_head = b.make_linear("aux_head", d, pd);
  return model;
}

// ==================== Embedding ====================

// Splits a [C, H, W] image into non-overlapping patches, row-major over the
// patch grid; each row is flattened (channel, y, x). Produces a graph leaf:
// gradients do not flow into the image.
inline Tensor patchify(const Tensor& image, int patch_size) {
  if (image.rank() != 3) {
    throw ShapeError("patchify expects a [C, H, W] image, got shape " +
                     detail::shape_str(image.shape()));
  }
  std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  std::size_t p = patch_size;
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("patchify: image " + detail::shape_str(image.shape()) +
                     " not divisible into " + std::to_string(patch_size) +
                     "-pixel patches");
  }
  std::size_t gh = h / p, gw = w / p;
  std::vector<double> out;
  out.reserve(gh * gw * p * p * c);
  const auto& d = image.data();
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            out.push_back(d[(ch * h + gy * p + py) * w + gx * p + px]);
          }
        }
      }
    }
  }
  return Tensor({gh * gw, p * p * c}, std::move(out));
}

inline Tensor embed_image(const VitModel& model, const Tensor& image) {
  const ModelConfig& cfg = model.config;
  std::vector<std::size_t> expected{
      static_cast<std::size_t>(cfg.in_channels),
      static_cast<std::size_t>(cfg.image_size),
      static_cast<std::size_t>(cfg.image_size)};
  if (image.shape() != expected) {
    throw ShapeError("embed_image: image shape " +
                     detail::shape_str(image.shape()) + " does not match " +
                     detail::shape_str(expected));
  }
  Tensor patches = patchify(image, cfg.patch_size);
  Tensor tokens = add(linear_apply(model.patch_embed, patches), model.pos_embed);
  std::vector<Tensor> rows{model.cls_token};
  if (cfg.num_registers > 0) rows.push_back(model.registers);
  rows.push_back(tokens);
  return concat_rows(rows);
}

// ==================== Attention ====================

// Multi-head self-attention. With attn_bias, each head gets one extra
// attendable slot whose key/value are learned vectors: scores are
// [N, N+1] and the slot contributes bias_v weighted by its softmax mass.
inline Tensor attention(const VitModel& model, const Block& block,
                        const Tensor& x) {
  const ModelConfig& cfg = model.config;
  std::size_t d = cfg.embed_dim;
  std::size_t hd = cfg.head_dim();
  RegisterRouting routing = cfg.spec.register_routing;
  Tensor qkv = specialized_apply(block.qkv, x, model.partition, routing,
                                 linear_apply);
  double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  for (int i = 0; i < cfg.num_heads; ++i) {
    std::size_t lo = i * hd;
    Tensor q = slice_cols(qkv, lo, lo + hd);
    Tensor k = slice_cols(qkv, d + lo, d + lo + hd);
    Tensor v = slice_cols(qkv, 2 * d + lo, 2 * d + lo + hd);
    if (cfg.attn_bias) {
      k = concat_rows({k, select_rows(block.attn_bias_k, {static_cast<std::size_t>(i)})});
      v = concat_rows({v, select_rows(block.attn_bias_v, {static_cast<std::size_t>(i)})});
    }
    Tensor scores = scale(matmul(q, transpose(k)), inv_scale);
    heads.push_back(matmul(softmax_rows(scores), v));
  }
  Tensor mixed = concat_cols(heads);
  return specialized_apply(block.attn_out, mixed, model.partition, routing,
                           linear_apply);
}

// ==================== Probe trace ====================

// Activation names recorded by block_forward, in emission order.
inline constexpr std::array<std::string_view, 11> kProbePoints = {
    "pre_attn_ln_in", "pre_attn_ln_out", "attn_out",       "post_attn_ls_out",
    "pre_mlp_ln_in",  "pre_mlp_ln_out",  "mlp_in",         "mlp_out",
    "post_mlp_ls_in", "post_mlp_ls_out", "block_out",
};

struct ProbeRecord {
  int block = 0;
  std::string point;
  std::vector<std::size_t> shape;  // [num_tokens, embed_dim]
  std::vector<double> data;
};

struct ProbeTrace {
  TokenPartition partition;
  std::vector<ProbeRecord> records;

  const ProbeRecord* find(int block, std::string_view point) const {
    for (const auto& r : records) {
      if (r.block == block && r.point == point) return &r;
    }
    return nullptr;
  }

  const ProbeRecord& at(int block, std::string_view point) const {
    const ProbeRecord* r = find(block, point);
    if (r == nullptr) {
      throw ContractError("no probe record for block " + std::to_string(block) +
                          " point " + std::string(point));
    }
    return *r;
  }
};

using ProbeSink =
    std::function<void(int block, std::string_view point, const Tensor&)>;

// ==================== Forward ====================

// One pre-norm residual block. Emits exactly the 11 kProbePoints per call.
inline Tensor block_forward(const VitModel& model, int block_index,
                            const Tensor& x_in, const ProbeSink& sink) {
  const Block& block = model.blocks[block_index];
  RegisterRouting routing = model.config.spec.register_routing;
  const TokenPartition& part = model.partition;
  auto emit = [&](std::string_view point, const Tensor& t) {
    if (sink) sink(block_index, point, t);
  };

  emit("pre_attn_ln_in", x_in);
  Tensor normed =
      specialized_apply(block.pre_attn_ln, x_in, part, routing, ln_apply);
  emit("pre_attn_ln_out", normed);
  Tensor attn = attention(model, block, normed);
  emit("attn_out", attn);
  Tensor scaled =
      specialized_apply(block.post_attn_ls, attn, part, routing, ls_apply);
  emit("post_attn_ls_out", scaled);
  Tensor mid = add(x_in, scaled);

  emit("pre_mlp_ln_in", mid);
  Tensor normed2 =
      specialized_apply(block.pre_mlp_ln, mid, part, routing, ln_apply);
  emit("pre_mlp_ln_out", normed2);
  emit("mlp_in", normed2);
  Tensor expanded = specialized_apply(block.mlp, normed2, part, routing,
                                      mlp_apply);
  emit("mlp_out", expanded);
  emit("post_mlp_ls_in", expanded);
  Tensor scaled2 =
      specialized_apply(block.post_mlp_ls, expanded, part, routing, ls_apply);
  emit("post_mlp_ls_out", scaled2);
  Tensor out = add(mid, scaled2);
  emit("block_out", out);
  return out;
}

struct ForwardResult {
  Tensor tokens;     // [num_tokens, d] after the final LayerNorm
  Tensor cls_out;    // [d]
  Tensor patch_out;  // [num_patches, d]
  ProbeTrace trace;  // records only when capture_trace was set
};

inline ForwardResult model_forward(const VitModel& model, const Tensor& image,
                                   bool capture_trace = false) {
  ForwardResult result;
  result.trace.partition = model.partition;
  ProbeSink sink;
  if (capture_trace) {
    sink = [&result](int block, std::string_view point, const Tensor& t) {
      result.trace.records.push_back(
          ProbeRecord{block, std::string(point), t.shape(), t.data()});
    };
  }
  Tensor x = embed_image(model, image);
  for (int i = 0; i < model.config.depth; ++i) {
    x = block_forward(model, i, x, sink);
  }
  Tensor final = specialized_apply(model.final_ln, x, model.partition,
                                   model.config.spec.register_routing, ln_apply);
  result.tokens = final;
  result.cls_out = reshape(select_rows(final, {TokenPartition::kClsRow}),
                           {static_cast<std::size_t>(model.config.embed_dim)});
  result.patch_out = select_rows(final, model.partition.patch_only_rows());
  return result;
}

}  // namespace spectok
