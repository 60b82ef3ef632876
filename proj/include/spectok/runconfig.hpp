#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spectok/config.hpp"
#include "spectok/errors.hpp"
#include "spectok/tensor.hpp"
#include "spectok/training.hpp"

namespace spectok {

// ==================== Raw tensor images ====================
//
// One image per file: a 16-byte header — the magic bytes "STRW", then
// channels, height, width as little-endian uint32 — followed by
// channels*height*width float64 values, little-endian, row-major [C, H, W].
// No image codec: the files are plain tensors.

inline constexpr char kRawImageMagic[4] = {'S', 'T', 'R', 'W'};

inline void write_raw_image(const std::string& path, const Tensor& image) {
  if (image.shape().size() != 3) {
    throw ContractError("write_raw_image: expected a [C, H, W] tensor");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kRawImageMagic, 4);
  for (std::size_t dim : image.shape()) {
    std::uint32_t v = static_cast<std::uint32_t>(dim);
    os.write(reinterpret_cast<const char*>(&v), 4);
  }
  os.write(reinterpret_cast<const char*>(image.data().data()),
           static_cast<std::streamsize>(image.size() * sizeof(double)));
  if (!os) throw IoError("write failed: " + path);
}

inline Tensor read_raw_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  char magic[4];
  std::uint32_t dims[3];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(dims), 12);
  if (!is || !std::equal(magic, magic + 4, kRawImageMagic)) {
    throw IoError("not a raw tensor image (bad header): " + path);
  }
  std::size_t count =
      static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (count == 0 || count > (1u << 28)) {
    throw IoError("implausible image dimensions in header: " + path);
  }
  std::vector<double> data(count);
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!is || is.gcount() !=
                 static_cast<std::streamsize>(count * sizeof(double))) {
    throw IoError("truncated image payload: " + path);
  }
  return Tensor({dims[0], dims[1], dims[2]}, std::move(data));
}

// ==================== Run configuration ====================
//
// One JSON document describes a run. Every key is optional and falls back
// to the documented default; unknown keys are rejected so typos cannot
// silently disable an option. `--set a.b.c=value` overrides individual
// entries before parsing (values are parsed as JSON, with bare words taken
// as strings).

struct CountConfig {
  std::string out_params = "params.csv";
  std::string out_flops = "flops.csv";
  int image_size = 0;  // 0: use the model's configured image size
};

struct ProbeConfig {
  std::string images = "synthetic";  // "synthetic" or a directory path
  int num_images = 4;                // synthetic source only
  std::string out_stats = "probe_stats.csv";
  std::string out_dir = ".";   // PPM maps land here, one per image
  int pca_block = -1;          // block for the PCA map; -1: last block
  std::string pca_point = "block_out";
  bool ln_demo = false;  // also run the LayerNorm separation demonstration
};

struct TrainRunConfig {
  TrainOptions options;  // steps, batch_size, lr, momentum, w_aux,
                         // eval_every, eval_size (seed comes from the top)
  double noise_std = 0.3;
  double shift = 1.0;
  std::uint64_t task_seed = 0;
  std::string out_curve = "loss.csv";
  std::string out_checkpoint = "model.ckpt";
};

struct GradcheckConfig {
  bool grid = false;  // sweep the built-in spec grid instead of model.spec
  bool break_gradient = false;  // fault-injection hook: must make it fail
  double eps = 1e-5;
};

struct RunConfig {
  std::uint64_t seed = 0;  // model initialization seed
  ModelConfig model;
  CountConfig count;
  ProbeConfig probe;
  TrainRunConfig train;
  GradcheckConfig gradcheck;
};

namespace detail {

inline void expect_object(const nlohmann::json& v, const std::string& path) {
  if (!v.is_object()) {
    throw ConfigError(path + " must be a JSON object");
  }
}

inline void reject_unknown(const nlohmann::json& obj, const std::string& path,
                           std::initializer_list<std::string_view> known) {
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (std::string_view k : known) ok = ok || item.key() == k;
    if (!ok) {
      throw ConfigError("unknown config key: " + path + "." + item.key());
    }
  }
}

template <typename T>
void fetch(const nlohmann::json& obj, const char* key, const std::string& path,
           T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for " + path + "." + key + ": " + e.what());
  }
}

template <typename Enum>
void fetch_enum(const nlohmann::json& obj, const char* key,
                const std::string& path,
                std::optional<Enum> (*parse)(std::string_view), Enum& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_string()) {
    throw ConfigError(path + "." + key + " must be a string");
  }
  std::optional<Enum> v = parse(it->get<std::string>());
  if (!v) {
    throw ConfigError("bad value for " + path + "." + key + ": \"" +
                      it->get<std::string>() + "\"");
  }
  out = *v;
}

inline SpecConfig parse_spec(const nlohmann::json& obj,
                             const std::string& path) {
  expect_object(obj, path);
  reject_unknown(obj, path, {"kinds", "register_routing", "final_ln"});
  SpecConfig spec;
  fetch_enum(obj, "register_routing", path, register_routing_from,
             spec.register_routing);
  fetch_enum(obj, "final_ln", path, final_ln_mode_from, spec.final_ln);
  auto kinds = obj.find("kinds");
  if (kinds == obj.end()) return spec;
  expect_object(*kinds, path + ".kinds");
  for (const auto& item : kinds->items()) {
    std::optional<LayerKind> kind = layer_kind_from(item.key());
    if (!kind) {
      throw ConfigError("unknown layer kind: " + path + ".kinds." +
                        item.key());
    }
    const std::string kpath = path + ".kinds." + item.key();
    expect_object(item.value(), kpath);
    reject_unknown(item.value(), kpath, {"range", "lora_rank"});
    auto range = item.value().find("range");
    if (range == item.value().end() || !range->is_array() ||
        range->size() != 2 || !(*range)[0].is_number_integer() ||
        !(*range)[1].is_number_integer()) {
      throw ConfigError(kpath + ".range must be a [lo, hi) integer pair");
    }
    KindSpec ks;
    ks.range = BlockRange{(*range)[0].get<int>(), (*range)[1].get<int>()};
    auto rank = item.value().find("lora_rank");
    if (rank != item.value().end()) {
      if (!rank->is_number_integer()) {
        throw ConfigError(kpath + ".lora_rank must be an integer");
      }
      ks.lora_rank = rank->get<int>();
    }
    spec.kinds[*kind] = ks;
  }
  return spec;
}

inline ModelConfig parse_model(const nlohmann::json& obj,
                               const std::string& path) {
  expect_object(obj, path);
  reject_unknown(obj, path,
                 {"image_size", "patch_size", "in_channels", "embed_dim",
                  "depth", "num_heads", "mlp_ratio", "num_registers",
                  "attn_bias", "num_classes", "ls_init", "cls_init", "spec"});
  ModelConfig c;
  fetch(obj, "image_size", path, c.image_size);
  fetch(obj, "patch_size", path, c.patch_size);
  fetch(obj, "in_channels", path, c.in_channels);
  fetch(obj, "embed_dim", path, c.embed_dim);
  fetch(obj, "depth", path, c.depth);
  fetch(obj, "num_heads", path, c.num_heads);
  fetch(obj, "mlp_ratio", path, c.mlp_ratio);
  fetch(obj, "num_registers", path, c.num_registers);
  fetch(obj, "attn_bias", path, c.attn_bias);
  fetch(obj, "num_classes", path, c.num_classes);
  fetch(obj, "ls_init", path, c.ls_init);
  fetch_enum(obj, "cls_init", path, cls_init_from, c.cls_init);
  if (auto it = obj.find("spec"); it != obj.end()) {
    c.spec = parse_spec(*it, path + ".spec");
  }
  return c;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& doc) {
  detail::expect_object(doc, "config");
  detail::reject_unknown(
      doc, "config", {"seed", "model", "count", "probe", "train", "gradcheck"});
  RunConfig rc;
  detail::fetch(doc, "seed", "config", rc.seed);
  if (auto it = doc.find("model"); it != doc.end()) {
    rc.model = detail::parse_model(*it, "model");
  }
  if (auto it = doc.find("count"); it != doc.end()) {
    detail::expect_object(*it, "count");
    detail::reject_unknown(*it, "count",
                           {"out_params", "out_flops", "image_size"});
    detail::fetch(*it, "out_params", "count", rc.count.out_params);
    detail::fetch(*it, "out_flops", "count", rc.count.out_flops);
    detail::fetch(*it, "image_size", "count", rc.count.image_size);
  }
  if (auto it = doc.find("probe"); it != doc.end()) {
    detail::expect_object(*it, "probe");
    detail::reject_unknown(*it, "probe",
                           {"images", "num_images", "out_stats", "out_dir",
                            "pca_block", "pca_point", "ln_demo"});
    detail::fetch(*it, "images", "probe", rc.probe.images);
    detail::fetch(*it, "num_images", "probe", rc.probe.num_images);
    detail::fetch(*it, "out_stats", "probe", rc.probe.out_stats);
    detail::fetch(*it, "out_dir", "probe", rc.probe.out_dir);
    detail::fetch(*it, "pca_block", "probe", rc.probe.pca_block);
    detail::fetch(*it, "pca_point", "probe", rc.probe.pca_point);
    detail::fetch(*it, "ln_demo", "probe", rc.probe.ln_demo);
  }
  if (auto it = doc.find("train"); it != doc.end()) {
    detail::expect_object(*it, "train");
    detail::reject_unknown(
        *it, "train",
        {"steps", "batch_size", "lr", "momentum", "w_aux", "eval_every",
         "eval_size", "noise_std", "shift", "task_seed", "out_curve",
         "out_checkpoint"});
    detail::fetch(*it, "steps", "train", rc.train.options.steps);
    detail::fetch(*it, "batch_size", "train", rc.train.options.batch_size);
    detail::fetch(*it, "lr", "train", rc.train.options.lr);
    detail::fetch(*it, "momentum", "train", rc.train.options.momentum);
    detail::fetch(*it, "w_aux", "train", rc.train.options.w_aux);
    detail::fetch(*it, "eval_every", "train", rc.train.options.eval_every);
    detail::fetch(*it, "eval_size", "train", rc.train.options.eval_size);
    detail::fetch(*it, "noise_std", "train", rc.train.noise_std);
    detail::fetch(*it, "shift", "train", rc.train.shift);
    detail::fetch(*it, "task_seed", "train", rc.train.task_seed);
    detail::fetch(*it, "out_curve", "train", rc.train.out_curve);
    detail::fetch(*it, "out_checkpoint", "train", rc.train.out_checkpoint);
  }
  if (auto it = doc.find("gradcheck"); it != doc.end()) {
    detail::expect_object(*it, "gradcheck");
    detail::reject_unknown(*it, "gradcheck",
                           {"grid", "break_gradient", "eps"});
    detail::fetch(*it, "grid", "gradcheck", rc.gradcheck.grid);
    detail::fetch(*it, "break_gradient", "gradcheck",
                  rc.gradcheck.break_gradient);
    detail::fetch(*it, "eps", "gradcheck", rc.gradcheck.eps);
  }
  rc.model.validate();
  return rc;
}

// Applies one `key.path=value` override onto the raw JSON document. The
// value text is parsed as JSON when possible (numbers, booleans, arrays,
// quoted strings); anything unparsable is kept as a plain string, so
// `--set probe.images=synthetic` works without extra quoting.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like key.path=value, got \"" +
                      assignment + "\"");
  }
  std::string path = assignment.substr(0, eq);
  std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot - start);
    if (key.empty()) {
      throw ConfigError("override path has an empty segment: \"" + path +
                        "\"");
    }
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

// Reads, overrides, and parses a config file in one step.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  return parse_run_config(doc);
}

}  // namespace spectok
