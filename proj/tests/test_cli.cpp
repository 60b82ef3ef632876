// End-to-end tests for the spectok command-line tool. Each test writes its
// own JSON config into a fresh temp directory, spawns the real binary, and
// inspects exit codes and the files it leaves behind. The binary path is
// injected by the build as SPECTOK_CLI_PATH.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spectok/runconfig.hpp"
#include "spectok/tensor.hpp"

#ifndef SPECTOK_CLI_PATH
#error "SPECTOK_CLI_PATH must point at the spectok binary"
#endif

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

// A model small enough that every invocation finishes in milliseconds.
const char* kTinyModel = R"(
  "model": {
    "image_size": 8,
    "patch_size": 4,
    "in_channels": 1,
    "embed_dim": 8,
    "depth": 1,
    "num_heads": 2,
    "mlp_ratio": 2.0,
    "num_registers": 2,
    "attn_bias": true,
    "num_classes": 4,
    "ls_init": 1.0
  })";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           (std::string("spectok_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  void TearDown() override { fs::remove_all(dir_); }

  // Runs the binary inside dir_ with stdout+stderr captured into cli.log,
  // returning the process exit code.
  int run(const std::string& args) {
    std::string cmd = "cd '" + dir_.string() + "' && '" + SPECTOK_CLI_PATH +
                      "' " + args + " > cli.log 2>&1";
    int status = std::system(cmd.c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
  }

  std::string log() const { return slurp(dir_ / "cli.log"); }

  fs::path dir_;
};

TEST_F(CliTest, HelpExitsZero) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_NE(log().find("Usage"), std::string::npos) << log();
}

TEST_F(CliTest, UsageErrorsMapToConfigExit) {
  EXPECT_EQ(run("bogus --config x.json"), 2);
  EXPECT_EQ(run("count"), 2);  // missing required --config
}

TEST_F(CliTest, CountWritesReportsAndSummary) {
  write_file(dir_ / "c.json", std::string(R"({
  "seed": 1,)") + kTinyModel + R"(,
  "count": {"out_params": "params.csv", "out_flops": "flops.csv"}
})");
  // Give the model something to specialize so the delta is nonzero.
  ASSERT_EQ(run("count --config c.json "
                "--set model.spec.kinds.qkv.range=[0,1]"),
            0)
      << log();
  EXPECT_NE(log().find("params: baseline="), std::string::npos) << log();
  EXPECT_NE(log().find("flops: baseline="), std::string::npos) << log();

  std::string params = slurp(dir_ / "params.csv");
  EXPECT_EQ(params.rfind("kind,baseline,specialized,delta,delta_percent", 0),
            0u)
      << params;
  EXPECT_NE(params.find("\nqkv,"), std::string::npos) << params;
  std::string flops = slurp(dir_ / "flops.csv");
  EXPECT_EQ(flops.rfind("kind,baseline,specialized,delta,delta_percent", 0),
            0u)
      << flops;
}

TEST_F(CliTest, ProbeSyntheticWritesStatsImagesAndLnDemo) {
  write_file(dir_ / "p.json", std::string(R"({
  "seed": 5,)") + kTinyModel + R"(,
  "probe": {"images": "synthetic", "num_images": 2, "ln_demo": true}
})");
  ASSERT_EQ(run("probe --config p.json"), 0) << log();
  EXPECT_NE(log().find("probe: images=2 stats_rows=22 pca_block=0"),
            std::string::npos)
      << log();
  EXPECT_NE(log().find("ln_separation: pre_sim="), std::string::npos) << log();

  // depth 1 -> 1 block x 11 probe points x 2 populations + header.
  std::string stats = slurp(dir_ / "probe_stats.csv");
  EXPECT_EQ(count_lines(stats), 23u) << stats;
  EXPECT_EQ(stats.rfind("block,point,population,mean,std", 0), 0u) << stats;

  // 8x8 image with 4x4 patches -> a 2x2 PCA thumbnail per input.
  for (const char* name : {"synthetic_0_pca.ppm", "synthetic_1_pca.ppm"}) {
    std::string ppm = slurp(dir_ / name);
    ASSERT_EQ(ppm.size(), 11u + 2u * 2u * 3u) << name;
    EXPECT_EQ(ppm.rfind("P6\n2 2\n255\n", 0), 0u) << name;
  }
}

TEST_F(CliTest, ProbeReadsRawImageDirectory) {
  fs::create_directories(dir_ / "imgs");
  std::vector<double> ramp(64);
  for (std::size_t i = 0; i < ramp.size(); ++i) {
    ramp[i] = 0.01 * static_cast<double>(i);
  }
  std::vector<double> waves(64);
  for (std::size_t i = 0; i < waves.size(); ++i) {
    waves[i] = (i % 2 == 0) ? 1.0 : -1.0;
  }
  spectok::write_raw_image((dir_ / "imgs" / "a.raw").string(),
                           spectok::Tensor({1, 8, 8}, std::move(ramp)));
  spectok::write_raw_image((dir_ / "imgs" / "b.raw").string(),
                           spectok::Tensor({1, 8, 8}, std::move(waves)));

  write_file(dir_ / "p.json", std::string(R"({
  "seed": 5,)") + kTinyModel + R"(,
  "probe": {"images": "imgs", "num_images": 2}
})");
  ASSERT_EQ(run("probe --config p.json"), 0) << log();
  EXPECT_NE(log().find("probe: images=2"), std::string::npos) << log();
  EXPECT_TRUE(fs::exists(dir_ / "a_pca.ppm"));
  EXPECT_TRUE(fs::exists(dir_ / "b_pca.ppm"));
  EXPECT_EQ(count_lines(slurp(dir_ / "probe_stats.csv")), 23u);
}

TEST_F(CliTest, ProbeFailsOnCorruptRawImage) {
  fs::create_directories(dir_ / "imgs");
  write_file(dir_ / "imgs" / "bad.raw", "this is not an image");
  write_file(dir_ / "p.json", std::string(R"({
  "seed": 5,)") + kTinyModel + R"(,
  "probe": {"images": "imgs"}
})");
  EXPECT_EQ(run("probe --config p.json"), 3);
  EXPECT_NE(log().find("io error"), std::string::npos) << log();
}

TEST_F(CliTest, ProbeFailsOnEmptyDirectory) {
  fs::create_directories(dir_ / "imgs");
  write_file(dir_ / "p.json", std::string(R"({
  "seed": 5,)") + kTinyModel + R"(,
  "probe": {"images": "imgs"}
})");
  EXPECT_EQ(run("probe --config p.json"), 3);
}

TEST_F(CliTest, TrainWritesCurveAndCheckpointDeterministically) {
  write_file(dir_ / "t.json", std::string(R"({
  "seed": 2,)") + kTinyModel + R"(,
  "train": {"steps": 20, "batch_size": 8, "lr": 0.05, "momentum": 0.9,
            "w_aux": 0.1, "eval_size": 16, "noise_std": 0.3, "shift": 1.0,
            "task_seed": 3}
})");
  ASSERT_EQ(run("train --config t.json"), 0) << log();
  EXPECT_NE(log().find("train: steps=20 final_accuracy="), std::string::npos)
      << log();

  std::string curve = slurp(dir_ / "loss.csv");
  EXPECT_EQ(count_lines(curve), 21u) << curve;  // header + one row per step
  EXPECT_EQ(curve.rfind("step,loss,eval_acc", 0), 0u) << curve;
  ASSERT_TRUE(fs::exists(dir_ / "model.ckpt"));

  // A rerun with the same config must reproduce both artifacts bit for bit.
  ASSERT_EQ(run("train --config t.json --set train.out_curve=loss2.csv "
                "--set train.out_checkpoint=model2.ckpt"),
            0)
      << log();
  EXPECT_EQ(slurp(dir_ / "loss2.csv"), curve);
  EXPECT_EQ(slurp(dir_ / "model2.ckpt"), slurp(dir_ / "model.ckpt"));
}

TEST_F(CliTest, TrainStepsOverrideShortensCurve) {
  write_file(dir_ / "t.json", std::string(R"({
  "seed": 2,)") + kTinyModel + R"(,
  "train": {"steps": 20, "batch_size": 4, "task_seed": 3}
})");
  ASSERT_EQ(run("train --config t.json --set train.steps=5"), 0) << log();
  EXPECT_EQ(count_lines(slurp(dir_ / "loss.csv")), 6u);
}

TEST_F(CliTest, TrainDivergenceExitsFour) {
  write_file(dir_ / "t.json", std::string(R"({
  "seed": 2,)") + kTinyModel + R"(,
  "train": {"steps": 15, "batch_size": 8, "lr": 1e9, "momentum": 0.9,
            "w_aux": 0.1, "eval_size": 8, "task_seed": 3}
})");
  EXPECT_EQ(run("train --config t.json"), 4);
  EXPECT_NE(log().find("divergence at step"), std::string::npos) << log();
}

TEST_F(CliTest, GradcheckPassesCleanAndFlagsBrokenGradient) {
  write_file(dir_ / "g.json", std::string(R"({
  "seed": 21,)") + kTinyModel + R"(,
  "gradcheck": {"grid": false}
})");
  ASSERT_EQ(run("gradcheck --config g.json"), 0) << log();
  EXPECT_NE(log().find("gradcheck: max_rel_error="), std::string::npos)
      << log();

  EXPECT_EQ(run("gradcheck --config g.json "
                "--set gradcheck.break_gradient=true"),
            1);
  EXPECT_NE(log().find("gradcheck: max_rel_error="), std::string::npos)
      << log();
}

TEST_F(CliTest, BadConfigsUseContractedExitCodes) {
  write_file(dir_ / "ok.json", std::string(R"({
  "seed": 1,)") + kTinyModel + R"(
})");
  // Unknown key, whether from the file or a --set override.
  EXPECT_EQ(run("count --config ok.json --set bogus.key=1"), 2);
  EXPECT_NE(log().find("unknown config key"), std::string::npos) << log();

  write_file(dir_ / "broken.json", "{ this is not json");
  EXPECT_EQ(run("count --config broken.json"), 2);

  EXPECT_EQ(run("count --config missing.json"), 3);
  EXPECT_NE(log().find("io error"), std::string::npos) << log();

  // The exhaustive gradient sweep refuses models beyond its size budget.
  write_file(dir_ / "big.json", R"({
  "seed": 1,
  "model": {
    "image_size": 224,
    "patch_size": 16,
    "in_channels": 3,
    "embed_dim": 1024,
    "depth": 24,
    "num_heads": 16,
    "mlp_ratio": 4.0
  }
})");
  EXPECT_EQ(run("gradcheck --config big.json"), 2);
  EXPECT_NE(log().find("config error"), std::string::npos) << log();
}

}  // namespace
