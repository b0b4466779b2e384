#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "slicegs/checkpoint.hpp"

using namespace slicegs;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SLICEGS_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Shared phantom plus one short training run, built once for the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "slicegs_cli_suite";
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream cfg(root_ / "small.cfg");
    cfg << "init_gaussians = 300\nplane_resolution = 8\nplane_channels = 4\ndecoder_hidden = 16\n"
        << "eval_interval = 10\nfraction = 0.5\n";
    cfg.close();
    phantom_ = run("phantom --dims 32 --seed 5 --out " + (root_ / "ph").string());
    train_ = run("train --volume " + (root_ / "ph" / "phantom.vol").string() + " --labels " +
                 (root_ / "ph" / "labels.vol").string() + " --palette " + (root_ / "ph" / "palette.txt").string() +
                 " --config " + (root_ / "small.cfg").string() + " --iterations 20 --out " + (root_ / "run").string());
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data_flags() {
    return "--volume " + (root_ / "ph" / "phantom.vol").string() + " --labels " + (root_ / "ph" / "labels.vol").string() +
           " --palette " + (root_ / "ph" / "palette.txt").string();
  }
  fs::path dir(const std::string& name) const { return root_ / name; }

  static inline fs::path root_;
  static inline Result phantom_, train_;
};

}  // namespace

TEST_F(Cli, PhantomWritesVolumesWithExpectedSizes) {
  ASSERT_EQ(phantom_.code, 0) << phantom_.output;
  EXPECT_EQ(fs::file_size(dir("ph") / "phantom.raw"), 32u * 32 * 32 * 4);
  EXPECT_EQ(fs::file_size(dir("ph") / "labels.raw"), 32u * 32 * 32);
  EXPECT_TRUE(fs::exists(dir("ph") / "palette.txt"));
  const auto v = read_volume(dir("ph") / "phantom.vol");
  EXPECT_EQ(v.meta.dims, (std::array<int, 3>{32, 32, 32}));
}

TEST_F(Cli, PhantomIsByteIdenticalForTheSameSeed) {
  ASSERT_EQ(run("phantom --dims 32 --seed 5 --out " + dir("ph2").string()).code, 0);
  for (const char* f : {"phantom.raw", "labels.raw", "phantom.vol", "palette.txt"})
    EXPECT_EQ(slurp(dir("ph") / f), slurp(dir("ph2") / f)) << f;
}

TEST_F(Cli, PhantomRejectsSmallDims) {
  const auto r = run("phantom --dims 16 --out " + dir("small").string());
  EXPECT_EQ(r.code, 1) << r.output;
}

TEST_F(Cli, TrainWritesCheckpointMetricsAndRenders) {
  ASSERT_EQ(train_.code, 0) << train_.output;
  const auto ck = read_checkpoint<float>(dir("run") / "checkpoint.bin");
  EXPECT_EQ(ck.iteration, 20u);
  EXPECT_EQ(ck.scene.semantic_dim(), 3);
  const auto rows = lines(dir("run") / "metrics.csv");
  ASSERT_EQ(rows.size(), 21u);
  EXPECT_EQ(rows[0], "iteration,l1,ssim_term,semantic_mse,total,N,heldout_psnr,heldout_ssim");
  EXPECT_TRUE(rows[1].starts_with("1,"));
  EXPECT_TRUE(fs::exists(dir("run") / "renders" / "heldout_0001.ppm"));
  EXPECT_TRUE(fs::exists(dir("run") / "renders" / "heldout_semantic_0001.ppm"));
  const auto img = read_pnm(dir("run") / "renders" / "heldout_0001.ppm");
  EXPECT_EQ(img.shape, (ImageShape{32, 64, 3}));
}

TEST_F(Cli, TrainWithZeroIterationsWritesInitialization) {
  const auto r = run("train " + data_flags() + " --config " + dir("small.cfg").string() +
                     " --iterations 0 --no-renders --out " + dir("zero").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(lines(dir("zero") / "metrics.csv").size(), 1u);
  EXPECT_EQ(read_checkpoint<float>(dir("zero") / "checkpoint.bin").iteration, 0u);
  EXPECT_FALSE(fs::exists(dir("zero") / "renders"));
}

TEST_F(Cli, TrainIsReproducible) {
  const auto r = run("train " + data_flags() + " --config " + dir("small.cfg").string() +
                     " --iterations 20 --threads 3 --no-renders --out " + dir("again").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(dir("again") / "checkpoint.bin"), slurp(dir("run") / "checkpoint.bin"));
  EXPECT_EQ(slurp(dir("again") / "metrics.csv"), slurp(dir("run") / "metrics.csv"));
}

TEST_F(Cli, InvalidFractionIsArgumentError) {
  const auto r = run("train " + data_flags() + " --fraction 1.5 --out " + dir("bad").string());
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("fraction"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir("bad")));
}

TEST_F(Cli, MissingVolumeIsDataError) {
  const auto r = run("train --volume " + dir("nope.vol").string() + " --out " + dir("missing").string());
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("nope.vol"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsValidationError) {
  std::ofstream(dir("typo.cfg")) << "iterationz = 3\n";
  const auto r = run("train " + data_flags() + " --config " + dir("typo.cfg").string() + " --out " + dir("t").string());
  EXPECT_EQ(r.code, 1) << r.output;
}

TEST_F(Cli, RenderAtTrainingDepthMatchesInTrainingRender) {
  ASSERT_EQ(train_.code, 0);
  const auto r = run("render --checkpoint " + (dir("run") / "checkpoint.bin").string() +
                     " --count 32 --first 1 --last 1 --width 32 --height 32 --raw --out " + dir("render").string());
  ASSERT_EQ(r.code, 0) << r.output;
  // same code path as the held-out render written by train (right half)
  const auto side = read_pnm(dir("run") / "renders" / "heldout_0001.ppm");
  const auto mine = read_pnm(dir("render") / "render_0000.ppm");
  for (int row = 0; row < 32; ++row)
    for (int col = 0; col < 32; ++col)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(mine.at(row, col, c), side.at(row, 32 + col, c));
  EXPECT_EQ(fs::file_size(dir("render") / "render_0000.f32"), 32u * 32 * 3 * 4);
  EXPECT_EQ(lines(dir("render") / "renders.csv").size(), 2u);
}

TEST_F(Cli, RenderBetweenSlicesAtOtherResolutions) {
  const auto r = run("render --checkpoint " + (dir("run") / "checkpoint.bin").string() +
                     " --depth 0.5 --depth 0.123 --width 48 --height 20 --axis x --out " + dir("novel").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_pnm(dir("novel") / "render_0001.ppm").shape, (ImageShape{20, 48, 3}));
}

TEST_F(Cli, RenderRejectsBadDepthAndAxis) {
  const auto ck = (dir("run") / "checkpoint.bin").string();
  EXPECT_EQ(run("render --checkpoint " + ck + " --depth 1.5 --out " + dir("r1").string()).code, 1);
  EXPECT_EQ(run("render --checkpoint " + ck + " --depth 0.5 --axis w --out " + dir("r2").string()).code, 1);
  EXPECT_EQ(run("render --checkpoint " + dir("none.bin").string() + " --depth 0.5 --out " + dir("r3").string()).code,
            2);
}

TEST_F(Cli, EvalReportsPerSliceAndAggregateRows) {
  ASSERT_EQ(train_.code, 0);
  const auto r = run("eval --checkpoint " + (dir("run") / "checkpoint.bin").string() + " " + data_flags() +
                     " --fraction 0.5 --out " + dir("eval").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(dir("eval") / "eval.csv");
  ASSERT_EQ(rows.size(), 1u + 16 + 4);
  EXPECT_EQ(rows[0], "row,slice,depth,psnr,ssim,semantic_mse,label_accuracy");
  double sum = 0;
  for (int i = 1; i <= 16; ++i) {
    std::stringstream ss(rows[i]);
    std::string field;
    for (int k = 0; k < 4; ++k) std::getline(ss, field, ',');
    sum += std::stod(field);
  }
  std::stringstream mean(rows[17]);
  std::string f;
  for (int k = 0; k < 4; ++k) std::getline(mean, f, ',');
  EXPECT_NEAR(std::stod(f), sum / 16, 1e-6 * std::abs(sum / 16));
  EXPECT_TRUE(rows[17].starts_with("mean,"));
  EXPECT_TRUE(rows.back().starts_with("infinite_psnr,"));
}

TEST_F(Cli, EvalWithoutSemanticsLeavesColumnsEmpty) {
  const auto r = run("eval --checkpoint " + (dir("run") / "checkpoint.bin").string() + " --volume " +
                     (dir("ph") / "phantom.vol").string() + " --out " + dir("eval_plain").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(dir("eval_plain") / "eval.csv");
  ASSERT_GT(rows.size(), 2u);
  EXPECT_TRUE(rows[1].ends_with(",,")) << rows[1];
}

TEST_F(Cli, EvalRejectsSemanticWidthMismatch) {
  // a K = 2 checkpoint cannot be scored against RGB semantic slices
  std::ofstream(dir("k2.cfg")) << "init_gaussians = 50\nplane_resolution = 4\nplane_channels = 2\n"
                               << "decoder_hidden = 4\nsemantic_dim = 2\n";
  ASSERT_EQ(run("train --volume " + (dir("ph") / "phantom.vol").string() + " --config " + dir("k2.cfg").string() +
                " --iterations 0 --no-renders --out " + dir("k2").string())
                .code,
            0);
  const auto r = run("eval --checkpoint " + (dir("k2") / "checkpoint.bin").string() + " " + data_flags() + " --out " +
                     dir("k2eval").string());
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("semantic width"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesAndListsGroups) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.output;
  for (const char* g : {"position", "scale", "rotation", "opacity", "color", "semantic", "texels", "decoder"})
    EXPECT_NE(r.output.find(g), std::string::npos) << g;
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
}

TEST_F(Cli, GradcheckCorruptedGradientFails) {
  const auto r = run("gradcheck --corrupt-gradient");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("FAIL"), std::string::npos);
}

TEST_F(Cli, ExportWritesSliceImages) {
  const auto r = run("export " + data_flags() + " --axis y --out " + dir("export").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto st = import_slice_images(dir("export"), Axis::y);
  EXPECT_EQ(st.slices.size(), 32u);
  EXPECT_TRUE(st.has_semantic());
}

TEST_F(Cli, UnknownSubcommandIsArgumentError) { EXPECT_EQ(run("frobnicate").code, 1); }
