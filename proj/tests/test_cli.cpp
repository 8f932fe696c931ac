#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "derain/image_io.hpp"
#include "derain/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace derain;
namespace fs = std::filesystem;
using testutil::scratch;
using testutil::slurp;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "derain_cli");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

const fs::path& identity_model() {
  static const fs::path dir = [] {
    const fs::path d = scratch("identity_model");
    const auto r = run_cli({"make-identity-model", "--out", d.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

void write_config(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"no-such-command"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"eval", "--pred", "x"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kOk);
  EXPECT_EQ(run_cli({"bench", "--scales", "5", "--runs", "1", "--warmup", "0", "--sizes", "16"}).code, cli::kUsage);
}

TEST(Cli, IdentityModelReproducesInputBytes) {
  const fs::path dir = scratch("cli_identity");
  const fs::path in = testutil::small_dataset() / "rainy" / "0003.png";
  const auto r = run_cli({"derain", "--model", identity_model().string(), "--input", in.string(), "--output",
                      (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = read_png(dir / "out" / "0003.png"), b = read_png(in);
  ASSERT_EQ(a.shape(), b.shape());
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_TRUE(std::regex_match(recs[0], std::regex(R"(name=0003\.png psnr= ssim= ms=[0-9.]+)"))) << recs[0];
  EXPECT_EQ(slurp(dir / "out" / "records.txt"), r.out);
}

TEST(Cli, DerainScoresAgainstGroundTruth) {
  const fs::path dir = scratch("cli_gt");
  const fs::path data = testutil::small_dataset();
  const auto r = run_cli({"derain", "--model", identity_model().string(), "--input", (data / "rainy").string(),
                      "--output", (dir / "out").string(), "--gt", (data / "clean").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 10u);
  // Identity output scores exactly like the rainy input.
  const auto rainy = read_png(data / "rainy" / "0000.png"), clean = read_png(data / "clean" / "0000.png");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(recs[0], m, std::regex(R"(psnr=([0-9.]+))")));
  EXPECT_NEAR(std::stod(m[1]), psnr(rainy, clean), 1e-4);
}

TEST(Cli, FramesAreProcessedInOrder) {
  const fs::path dir = scratch("cli_frames");
  fs::create_directories(dir / "frames");
  for (int i = 9; i >= 0; --i) {
    const auto img = oracle::random_tensor<float>(Shape{1, 3, 24, 40}, i, 0, 1);
    write_png(dir / "frames" / ("f" + std::to_string(i) + ".png"), img);
  }
  const auto r = run_cli({"derain", "--model", identity_model().string(), "--input", (dir / "frames").string(),
                      "--output", (dir / "out").string(), "--frames"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 10u);
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(recs[i].rfind("name=f" + std::to_string(i) + ".png frame=" + std::to_string(i) + " ", 0), 0u)
        << recs[i];
    EXPECT_EQ(slurp(dir / "out" / ("f" + std::to_string(i) + ".png")),
              slurp(dir / "frames" / ("f" + std::to_string(i) + ".png")));
  }
}

TEST(Cli, DerainDataErrors) {
  const fs::path dir = scratch("cli_bad");
  std::ofstream(dir / "broken.png") << "not a png";
  auto r = run_cli({"derain", "--model", identity_model().string(), "--input", (dir / "broken.png").string(),
                "--output", (dir / "out").string()});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos);
  r = run_cli({"derain", "--model", (dir / "nomodel").string(), "--input", (dir / "broken.png").string(),
           "--output", (dir / "out").string()});
  EXPECT_EQ(r.code, cli::kData);
  r = run_cli({"derain", "--model", identity_model().string(), "--input", (dir / "absent").string(), "--output",
           (dir / "out").string()});
  EXPECT_EQ(r.code, cli::kData);
}

TEST(Cli, EvalScores) {
  const fs::path dir = scratch("cli_eval");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "same");
  fs::create_directories(dir / "shifted");
  // 0.1 is not an 8-bit level, so the offset is 51/255 = 0.2 exactly.
  Tensor<float> g(Shape{1, 3, 32, 32}), s(Shape{1, 3, 32, 32});
  for (std::size_t i = 0; i < g.numel(); ++i) {
    g.mutable_data()[i] = static_cast<float>((51 + 51 * (i % 3)) / 255.0);
    s.mutable_data()[i] = static_cast<float>((102 + 51 * (i % 3)) / 255.0);
  }
  write_png(dir / "gt" / "a.png", g);
  write_png(dir / "same" / "a.png", g);
  write_png(dir / "shifted" / "a.png", s);

  auto r = run_cli({"eval", "--pred", (dir / "same").string(), "--gt", (dir / "gt").string(), "--records",
                (dir / "rec.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("name=a.png psnr=100.000000 ssim=1.00000000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("name=mean count=1"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(dir / "rec.txt"), r.out);

  r = run_cli({"eval", "--pred", (dir / "shifted").string(), "--gt", (dir / "gt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex(R"(psnr=([0-9.]+))")));
  EXPECT_NEAR(std::stod(m[1]), 20 * std::log10(1 / 0.2), 1e-4);

  std::ofstream(dir / "same" / "extra.png") << "x";
  EXPECT_EQ(run_cli({"eval", "--pred", (dir / "same").string(), "--gt", (dir / "gt").string()}).code, cli::kData);
}

TEST(Cli, AugmentPreviewIsDeterministic) {
  const fs::path dir = scratch("cli_preview");
  write_config(dir / "aug.cfg", "rainmix.n_paths = 3\nrainmix.ops_per_path = 2\ntoy.size = 32\n");
  const auto a = run_cli({"augment-preview", "--config", (dir / "aug.cfg").string(), "--seed", "5", "--out",
                      (dir / "a").string()});
  const auto b = run_cli({"augment-preview", "--config", (dir / "aug.cfg").string(), "--seed", "5", "--out",
                      (dir / "b").string()});
  const auto c = run_cli({"augment-preview", "--config", (dir / "aug.cfg").string(), "--seed", "6", "--out",
                      (dir / "c").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_TRUE(fs::exists(dir / "a" / "sheet.png"));
  EXPECT_TRUE(fs::exists(dir / "a" / "rain_path2.png"));
  EXPECT_EQ(slurp(dir / "a" / "sheet.png"), slurp(dir / "b" / "sheet.png"));
  EXPECT_EQ(slurp(dir / "a" / "manifest.txt"), slurp(dir / "b" / "manifest.txt"));
  EXPECT_NE(slurp(dir / "a" / "manifest.txt"), slurp(dir / "c" / "manifest.txt"));
}

TEST(Cli, TrainWritesArtifacts) {
  const fs::path dir = scratch("cli_train");
  write_config(dir / "train.cfg", "data_dir = " + testutil::small_dataset().string() + "\nout_dir = " +
                                      (dir / "run").string() +
                                      "\nbatch = 2\npatch = 32\nstage1_steps = 50\nstage2_steps = 50\n"
                                      "rainmix.synth_layers = 2\n");
  const auto r = run_cli({"train", "--config", (dir / "train.cfg").string(), "--print-every", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(slurp(dir / "run" / "loss.txt")).size(), 100u);
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint" / "manifest.txt"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.txt"));
  EXPECT_NE(slurp(dir / "run" / "metrics.txt").find("psnr="), std::string::npos);

  // The trained checkpoint is usable for inference.
  const auto d = run_cli({"derain", "--model", (dir / "run" / "checkpoint").string(), "--input",
                      (testutil::small_dataset() / "rainy").string(), "--output", (dir / "pred").string()});
  EXPECT_EQ(d.code, 0) << d.err;
}

TEST(Cli, TrainAblationWritesEveryVariant) {
  const fs::path dir = scratch("cli_ablation");
  write_config(dir / "abl.cfg", "data_dir = " + testutil::small_dataset().string() + "\nout_dir = " +
                                    (dir / "run").string() +
                                    "\nbatch = 1\npatch = 16\nstage1_steps = 1\nstage2_steps = 1\n"
                                    "rainmix.synth_layers = 1\n");
  const auto r = run_cli({"train", "--config", (dir / "abl.cfg").string(), "--ablation"});
  ASSERT_EQ(r.code, 0) << r.err;
  int checkpoints = 0;
  for (const auto& v : ablation_matrix()) checkpoints += fs::exists(dir / "run" / v.name / "checkpoint" / "manifest.txt");
  EXPECT_EQ(checkpoints, 8);
  EXPECT_TRUE(fs::exists(dir / "run" / "ablation.txt"));
}

TEST(Cli, TrainErrorCodes) {
  const fs::path dir = scratch("cli_train_err");
  write_config(dir / "bad.cfg", "batch = lots\n");
  auto r = run_cli({"train", "--config", (dir / "bad.cfg").string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find(":1"), std::string::npos) << r.err;

  write_config(dir / "nodata.cfg", "out_dir = " + (dir / "x").string() + "\ndata_dir = " +
                                       (dir / "missing").string() + "\n");
  EXPECT_EQ(run_cli({"train", "--config", (dir / "nodata.cfg").string()}).code, cli::kData);

  // A huge step size overflows the weights within a few steps.
  write_config(dir / "diverge.cfg", "data_dir = " + testutil::small_dataset().string() + "\nout_dir = " +
                                        (dir / "div").string() +
                                        "\nlr = 1e30\nbatch = 1\npatch = 16\nstage1_steps = 20\n"
                                        "stage2_steps = 0\nrainmix = false\n");
  r = run_cli({"train", "--config", (dir / "diverge.cfg").string(), "--print-every", "0"});
  EXPECT_EQ(r.code, cli::kNumeric) << r.err;
  EXPECT_TRUE(fs::exists(dir / "div" / "nonfinite_snapshot" / "reason.txt"));
}

TEST(Cli, SmallBench) {
  const fs::path dir = scratch("cli_bench");
  const auto r = run_cli({"bench", "--sizes", "32", "--scales", "1,2", "--strategies", "ws,mh", "--runs", "1",
                      "--warmup", "0", "--records", (dir / "bench.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = lines(slurp(dir / "bench.txt"));
  EXPECT_EQ(recs.size(), 4u);
  for (const auto& l : recs) EXPECT_NE(l.find("strategy="), std::string::npos);
}
