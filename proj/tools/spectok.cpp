// spectok — experiment driver for the specialized-token ViT engine.
//
//   spectok {count|probe|train|gradcheck} --config run.json [--set k.ey=v]...
//
// Exit codes (stable contract): 0 success, 1 check failure, 2 config error,
// 3 I/O error, 4 training divergence.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spectok/accounting.hpp"
#include "spectok/checkpoint.hpp"
#include "spectok/model.hpp"
#include "spectok/probes.hpp"
#include "spectok/runconfig.hpp"
#include "spectok/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw spectok::IoError("cannot open for writing: " + path);
  os << content;
  if (!os) throw spectok::IoError("write failed: " + path);
}

int cmd_count(const spectok::RunConfig& rc) {
  spectok::ParamReport params = spectok::count_params(rc.model);
  spectok::FlopsReport flops =
      spectok::count_flops(rc.model, rc.count.image_size);
  {
    std::ostringstream os;
    spectok::write_report_csv(os, params);
    write_text_file(rc.count.out_params, os.str());
  }
  {
    std::ostringstream os;
    spectok::write_report_csv(os, flops);
    write_text_file(rc.count.out_flops, os.str());
  }
  std::cout << "params: baseline=" << params.baseline_total
            << " specialized=" << params.specialized_total
            << " delta_percent=" << params.delta_percent() << "\n";
  std::cout << "flops: baseline=" << flops.baseline_total
            << " specialized=" << flops.specialized_total
            << " delta_percent=" << flops.delta_percent() << "\n";
  return kExitOk;
}

// Deterministic stand-in images when no directory is given: unit-normal
// pixels, one RNG stream per image index.
spectok::Tensor synthetic_image(const spectok::ModelConfig& model,
                                std::uint64_t seed, int index) {
  spectok::Rng rng = spectok::Rng::keyed(
      seed, "probe_image:" + std::to_string(index));
  std::size_t c = static_cast<std::size_t>(model.in_channels);
  std::size_t s = static_cast<std::size_t>(model.image_size);
  std::vector<double> pixels(c * s * s);
  for (double& v : pixels) v = rng.normal(0.0, 1.0);
  return spectok::Tensor({c, s, s}, std::move(pixels));
}

int cmd_probe(const spectok::RunConfig& rc) {
  spectok::VitModel model = spectok::build_model(rc.model, rc.seed);

  std::vector<std::pair<std::string, spectok::Tensor>> images;
  if (rc.probe.images == "synthetic") {
    if (rc.probe.num_images < 1) {
      throw spectok::ConfigError("probe.num_images must be >= 1");
    }
    for (int i = 0; i < rc.probe.num_images; ++i) {
      images.emplace_back("synthetic_" + std::to_string(i),
                          synthetic_image(rc.model, rc.seed, i));
    }
  } else {
    std::vector<std::string> paths;
    std::error_code ec;
    for (const auto& entry :
         std::filesystem::directory_iterator(rc.probe.images, ec)) {
      if (entry.is_regular_file()) paths.push_back(entry.path().string());
    }
    if (ec) {
      throw spectok::IoError("cannot list image directory: " +
                             rc.probe.images + " (" + ec.message() + ")");
    }
    if (paths.empty()) {
      throw spectok::IoError("no image files in: " + rc.probe.images);
    }
    std::sort(paths.begin(), paths.end());
    for (const std::string& p : paths) {
      images.emplace_back(std::filesystem::path(p).stem().string(),
                          spectok::read_raw_image(p));
    }
  }

  std::vector<spectok::ProbeTrace> traces;
  traces.reserve(images.size());
  for (const auto& [name, image] : images) {
    traces.push_back(spectok::model_forward(model, image, true).trace);
  }

  std::vector<int> all_blocks;
  for (int b = 0; b < rc.model.depth; ++b) all_blocks.push_back(b);
  std::vector<spectok::StatsCsvRow> rows;
  for (int b : all_blocks) {
    for (std::string_view point : spectok::kProbePoints) {
      spectok::SimStats stats =
          spectok::cosine_stats(traces, point, {b});
      rows.push_back({b, std::string(point), "cls_patch",
                      stats.cls_patch_mean, stats.cls_patch_std});
      rows.push_back({b, std::string(point), "patch_patch",
                      stats.patch_patch_mean, stats.patch_patch_std});
    }
  }
  {
    std::ostringstream os;
    spectok::write_stats_csv(os, rows);
    write_text_file(rc.probe.out_stats, os.str());
  }

  int pca_block =
      rc.probe.pca_block < 0 ? rc.model.depth - 1 : rc.probe.pca_block;
  int side = rc.model.patches_per_side();
  for (std::size_t i = 0; i < traces.size(); ++i) {
    std::vector<double> rgb =
        spectok::pca_rgb(traces[i], pca_block, rc.probe.pca_point);
    std::string path = rc.probe.out_dir + "/" + images[i].first + "_pca.ppm";
    spectok::write_ppm(path, side, side, rgb);
  }
  std::cout << "probe: images=" << images.size() << " stats_rows="
            << rows.size() << " pca_block=" << pca_block << "\n";

  if (rc.probe.ln_demo) {
    spectok::LnSeparation sep =
        spectok::ln_separation_demo(rc.model.embed_dim,
                                    rc.model.num_patches(), rc.seed);
    std::cout << "ln_separation: pre_sim=" << sep.pre_sim
              << " post_sim=" << sep.post_sim << "\n";
  }
  return kExitOk;
}

int cmd_train(const spectok::RunConfig& rc) {
  spectok::ToyTask task;
  task.seed = rc.train.task_seed;
  task.image_size = rc.model.image_size;
  task.channels = rc.model.in_channels;
  task.noise_std = rc.train.noise_std;
  task.shift = rc.train.shift;
  spectok::TrainOptions options = rc.train.options;
  options.seed = rc.seed;

  spectok::VitModel model;
  spectok::TrainResult result =
      spectok::train_toy(rc.model, task, options, &model);
  {
    std::ostringstream os;
    spectok::write_loss_csv(os, result);
    write_text_file(rc.train.out_curve, os.str());
  }
  spectok::save_checkpoint(model, rc.train.out_checkpoint);
  std::cout << "train: steps=" << result.losses.size()
            << " final_accuracy=" << result.final_accuracy << "\n";
  return kExitOk;
}

int cmd_gradcheck(const spectok::RunConfig& rc) {
  std::vector<spectok::ModelConfig> configs;
  if (rc.gradcheck.grid) {
    // The built-in grid: every layer kind specialized alone on the model's
    // first block (alternating register routing), plus a rank-2 LoRA QKV.
    for (int i = 0; i < 7; ++i) {
      spectok::ModelConfig c = rc.model;
      c.spec = spectok::SpecConfig{};
      c.spec.kinds[spectok::kLayerKinds[i]] =
          spectok::KindSpec{spectok::BlockRange{0, 1}, std::nullopt};
      c.spec.register_routing = (i % 2 == 0)
                                    ? spectok::RegisterRouting::kWithCls
                                    : spectok::RegisterRouting::kWithPatches;
      configs.push_back(c);
    }
    spectok::ModelConfig lora = rc.model;
    lora.spec = spectok::SpecConfig{};
    lora.spec.kinds[spectok::LayerKind::kQkv] =
        spectok::KindSpec{spectok::BlockRange{0, 1}, 2};
    configs.push_back(lora);
  } else {
    configs.push_back(rc.model);
  }

  double worst = 0.0;
  std::string worst_param;
  for (const spectok::ModelConfig& c : configs) {
    long long param_count = spectok::count_params(c).specialized_total;
    if (param_count > 10000) {
      throw spectok::ConfigError(
          "gradcheck: model has " + std::to_string(param_count) +
          " parameters; the exhaustive sweep is limited to 10000");
    }
    spectok::ModelGradCheck r = spectok::grad_check_model(
        c, rc.seed, rc.gradcheck.break_gradient, rc.gradcheck.eps);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_param = r.worst_param;
    }
  }
  std::cout << "gradcheck: max_rel_error=" << worst
            << " worst_param=" << worst_param
            << " configs=" << configs.size() << "\n";
  return worst < 1e-4 ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectok: CLS/patch layer-specialization ViT engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"count", "probe", "train", "gradcheck"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run configuration")
        ->required();
    sub->add_option("--set", overrides,
                    "override a config entry, e.g. --set train.lr=0.1");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Fold CLI11's assorted usage-error codes into the config-error class;
    // --help stays a success.
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  std::string command = app.get_subcommands().front()->get_name();

  try {
    spectok::RunConfig rc = spectok::load_run_config(config_path, overrides);
    if (command == "count") return cmd_count(rc);
    if (command == "probe") return cmd_probe(rc);
    if (command == "train") return cmd_train(rc);
    return cmd_gradcheck(rc);
  } catch (const spectok::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const spectok::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const spectok::DivergenceError& e) {
    std::cerr << "divergence at step " << e.step() << ": " << e.what()
              << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}
