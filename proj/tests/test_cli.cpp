#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "ebm/cli.hpp"
#include "ebm/formats.hpp"
#include "ebm/tensor_io.hpp"
#include "test_util.hpp"

using namespace ebm;
using ebm::testing::TempDir;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ebm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

std::string value_of(const std::string& out, const std::string& key) {
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
  }
  return "";
}

std::string bytes_of(const std::filesystem::path& path) { return read_text(path); }

// Small eye-movement run shared by several tests.
class CliEye : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(cli({"synth", "--kind", "eyemove", "--n", "2", "--size", "8", "--out", (dir / "eye.ebmt").string()}).code, 0);
    write_text(dir / "eye.cfg",
               "env = eyemove\ndataset = eye.ebmt\nwidths = 8,8\nbatch_size = 4\nepochs = 2\nT = 0.5\n");
  }
  CliRun train(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--config", (dir / "eye.cfg").string(), "--out-dir", (dir / out).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  }
  TempDir dir;
};

}  // namespace

TEST(Cli, HelpAndUsage) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  const CliRun train_help = cli({"train", "--help"});
  EXPECT_EQ(train_help.code, 0);
  EXPECT_NE(train_help.out.find("inv_tau_theta"), std::string::npos);
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"fly"}).code, 2);
  EXPECT_EQ(cli({"train", "--config", "x.cfg"}).code, 2);
  EXPECT_EQ(cli({"synth", "--kind", "clouds", "--out", "x"}).code, 2);
}

TEST(Cli, MissingConfigNamesPath) {
  TempDir dir;
  const std::string path = (dir / "nope.cfg").string();
  const CliRun r = cli({"train", "--config", path, "--out-dir", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(path), std::string::npos) << r.err;
}

TEST(Cli, ConfigErrorsExitTwo) {
  TempDir dir;
  write_text(dir / "bad.cfg", "env = eyemove\nwidth = 3\n");
  const CliRun r = cli({"train", "--config", (dir / "bad.cfg").string(), "--out-dir", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":2: unknown key 'width'"), std::string::npos) << r.err;
  write_text(dir / "nodata.cfg", "env = eyemove\ndataset = missing.ebmt\n");
  EXPECT_EQ(cli({"train", "--config", (dir / "nodata.cfg").string(), "--out-dir", (dir / "o").string()}).code, 2);
}

TEST(Cli, SynthKinds) {
  TempDir dir;
  const CliRun eye = cli({"synth", "--kind", "eyemove", "--n", "3", "--size", "8", "--channels", "3",
                       "--out", (dir / "e.ebmt").string()});
  EXPECT_EQ(eye.code, 0);
  EXPECT_EQ(value_of(eye.out, "dims"), "3,8,8,3");
  const CliRun grid = cli({"synth", "--kind", "gridworld", "--rows", "2", "--cols", "3", "--tile", "4",
                        "--out", (dir / "g.ebmt").string()});
  EXPECT_EQ(value_of(grid.out, "dims"), "2,3,4,4");
  const CliRun bars = cli({"synth", "--kind", "bars", "--n", "2", "--frames", "5", "--size", "6",
                        "--out", (dir / "b.ebmt").string()});
  EXPECT_EQ(value_of(bars.out, "dims"), "2,5,6,6");
  EXPECT_FALSE(value_of(bars.out, "angle_step").empty());
  EXPECT_EQ(read_tensor(dir / "b.ebmt").dims, (std::vector<std::uint32_t>{2, 5, 6, 6}));
}

TEST_F(CliEye, TrainWritesMetricsAndCheckpoint) {
  const CliRun r = train("run", {"--epochs", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_text(dir / "run/metrics.csv");
  std::istringstream in(csv);
  std::string header, row, extra;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,step,mse,loss_l0,loss_l1");
  EXPECT_TRUE(static_cast<bool>(std::getline(in, row)));
  EXPECT_FALSE(static_cast<bool>(std::getline(in, extra)));
  EXPECT_EQ(row.rfind("1,8,", 0), 0u) << row;
  EXPECT_TRUE(std::filesystem::exists(dir / "run/checkpoint.ebmt-bundle/manifest.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run/checkpoint.ebmt-bundle/theta_0.ebmt"));
  EXPECT_EQ(value_of(r.out, "epochs"), "1");
  EXPECT_EQ(value_of(r.out, "steps"), "8");
}

TEST_F(CliEye, SameSeedGivesIdenticalMetrics) {
  ASSERT_EQ(train("a", {"--seed", "5"}).code, 0);
  ASSERT_EQ(train("b", {"--seed", "5"}).code, 0);
  ASSERT_EQ(train("c", {"--seed", "6"}).code, 0);
  EXPECT_EQ(bytes_of(dir / "a/metrics.csv"), bytes_of(dir / "b/metrics.csv"));
  EXPECT_NE(bytes_of(dir / "a/metrics.csv"), bytes_of(dir / "c/metrics.csv"));
}

TEST_F(CliEye, DivergenceExitsThree) {
  write_text(dir / "eye.cfg",
             "env = eyemove\ndataset = eye.ebmt\nwidths = 8,8\nbatch_size = 4\nepochs = 2\nT = 0.5\n"
             "inv_tau_theta = 1000\n");
  const CliRun r = train("div");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("epoch"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "div/metrics.csv"));
}

TEST_F(CliEye, EvalInitKPrintsBothColumns) {
  ASSERT_EQ(train("run").code, 0);
  const CliRun r = cli({"eval", "--checkpoint", (dir / "run/checkpoint.ebmt-bundle").string(), "--dataset",
                     (dir / "eye.ebmt").string(), "--protocol", "eyemove-init-K", "--K", "16", "--out-dir",
                     (dir / "ev").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(value_of(r.out, "mse_all_patches").empty());
  EXPECT_EQ(value_of(r.out, "mse_unseen_patches"), "nan");
  EXPECT_EQ(value_of(r.out, "images"), "2");
  const Image img = read_pnm(dir / "ev/image_0000.pgm");
  EXPECT_EQ(img.height, 8);
  EXPECT_TRUE(std::filesystem::exists(dir / "ev/memory.ebmt"));

  const CliRun k4 = cli({"eval", "--checkpoint", (dir / "run/checkpoint.ebmt-bundle").string(), "--dataset",
                      (dir / "eye.ebmt").string(), "--protocol", "eyemove-init-K", "--K", "4", "--out-dir",
                      (dir / "ev4").string()});
  EXPECT_NE(value_of(k4.out, "mse_unseen_patches"), "nan");
}

TEST_F(CliEye, EvalProtocolMismatchExitsTwo) {
  ASSERT_EQ(train("run").code, 0);
  const CliRun r = cli({"eval", "--checkpoint", (dir / "run/checkpoint.ebmt-bundle").string(), "--dataset",
                     (dir / "eye.ebmt").string(), "--protocol", "sequence-replay"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("does not apply"), std::string::npos);
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir / "run/checkpoint.ebmt-bundle").string(), "--dataset",
                 (dir / "eye.ebmt").string(), "--protocol", "eyemove-init-K", "--K", "17", "--out-dir",
                 (dir / "ev").string()}).code,
            2);
}

TEST_F(CliEye, ImagineNamesAndDeterminism) {
  ASSERT_EQ(train("run").code, 0);
  const std::string ck = (dir / "run/checkpoint.ebmt-bundle").string();
  ASSERT_EQ(cli({"eval", "--checkpoint", ck, "--dataset", (dir / "eye.ebmt").string(), "--protocol",
                 "eyemove-init-K", "--K", "3", "--out-dir", (dir / "ev").string()}).code, 0);
  const std::string mem = (dir / "ev/memory.ebmt").string();
  write_text(dir / "four.txt", "0\n5\n\n15\n3\n");
  auto imagine = [&](const std::string& out, const std::string& actions) {
    return cli({"imagine", "--checkpoint", ck, "--memory", mem, "--actions", (dir / actions).string(),
                "--deterministic", "--out-dir", (dir / out).string()});
  };
  ASSERT_EQ(imagine("i1", "four.txt").code, 0);
  ASSERT_EQ(imagine("i2", "four.txt").code, 0);
  for (int i = 0; i < 4; ++i) {
    const std::string name = "step_000" + std::to_string(i) + ".pgm";
    ASSERT_TRUE(std::filesystem::exists(dir / "i1" / name)) << name;
    EXPECT_EQ(bytes_of(dir / "i1" / name), bytes_of(dir / "i2" / name));
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "i1/step_0004.pgm"));
  EXPECT_EQ(bytes_of(dir / "i1/predictions.ebmt"), bytes_of(dir / "i2/predictions.ebmt"));
  EXPECT_EQ(read_tensor(dir / "i1/predictions.ebmt").dims, (std::vector<std::uint32_t>{4, 2, 2}));

  write_text(dir / "empty.txt", "");
  ASSERT_EQ(imagine("i3", "empty.txt").code, 0);
  const TensorRecord empty = read_tensor(dir / "i3/predictions.ebmt");
  EXPECT_EQ(empty.element_count(), 0u);
  EXPECT_FALSE(std::filesystem::exists(dir / "i3/step_0000.pgm"));

  write_text(dir / "bad.txt", "1\n2\nleft\n");
  const CliRun bad = imagine("i4", "bad.txt");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("bad.txt:3: unknown action token 'left'"), std::string::npos) << bad.err;
}

TEST(Cli, SequenceReplayAndImagine) {
  TempDir dir;
  ASSERT_EQ(cli({"synth", "--kind", "bars", "--n", "2", "--frames", "20", "--size", "6", "--out",
                 (dir / "bars.ebmt").string()}).code, 0);
  write_text(dir / "seq.cfg",
             "env = sequence\ndataset = bars.ebmt\nwidths = 8,8\nbatch_size = 2\nepochs = 1\nT = 0.5\n");
  ASSERT_EQ(cli({"train", "--config", (dir / "seq.cfg").string(), "--out-dir", (dir / "run").string()}).code, 0);
  const std::string ck = (dir / "run/checkpoint.ebmt-bundle").string();
  const CliRun r = cli({"eval", "--checkpoint", ck, "--dataset", (dir / "bars.ebmt").string(), "--protocol",
                     "sequence-replay", "--init-frames", "10", "--out-dir", (dir / "ev").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(value_of(r.out, "frames_per_sequence"), "20");
  EXPECT_TRUE(std::filesystem::exists(dir / "ev/seq_0001/frame_0019.pgm"));
  EXPECT_FALSE(std::filesystem::exists(dir / "ev/seq_0001/frame_0020.pgm"));
  EXPECT_EQ(read_tensor(dir / "ev/predictions.ebmt").dims, (std::vector<std::uint32_t>{2, 20, 6, 6}));
  EXPECT_FALSE(value_of(r.out, "mse_mean_frame_baseline").empty());

  write_text(dir / "acts.txt", "none\nnone\n");
  const CliRun im = cli({"imagine", "--checkpoint", ck, "--memory", (dir / "ev/memory.ebmt").string(), "--actions",
                      (dir / "acts.txt").string(), "--out-dir", (dir / "im").string()});
  EXPECT_EQ(im.code, 0) << im.err;
  EXPECT_EQ(value_of(im.out, "steps"), "2");
  EXPECT_EQ(cli({"eval", "--checkpoint", ck, "--dataset", (dir / "bars.ebmt").string(), "--protocol",
                 "eyemove-init-K"}).code,
            2);
}

TEST(Cli, GridworldActionTokens) {
  TempDir dir;
  ASSERT_EQ(cli({"synth", "--kind", "gridworld", "--rows", "3", "--cols", "3", "--tile", "3", "--out",
                 (dir / "g.ebmt").string()}).code, 0);
  write_text(dir / "g.cfg", "env = gridworld\ndataset = g.ebmt\nwidths = 8\nbatch_size = 4\nepochs = 1\nT = 0.5\n");
  ASSERT_EQ(cli({"train", "--config", (dir / "g.cfg").string(), "--out-dir", (dir / "run").string()}).code, 0);
  // A fresh random memory for a width-8 top layer.
  Matrix rows = Matrix::Zero(4, 8);
  write_tensor(dir / "mem.ebmt", matrix_record(rows));
  write_text(dir / "acts.txt", "up\nright\ndown\nleft\n");
  const std::string ck = (dir / "run/checkpoint.ebmt-bundle").string();
  const CliRun r = cli({"imagine", "--checkpoint", ck, "--memory", (dir / "mem.ebmt").string(), "--actions",
                     (dir / "acts.txt").string(), "--out-dir", (dir / "im").string(), "--seed", "3"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "im/step_0003.pgm"));
  write_text(dir / "bad.txt", "up\n7\n");
  const CliRun bad = cli({"imagine", "--checkpoint", ck, "--memory", (dir / "mem.ebmt").string(), "--actions",
                       (dir / "bad.txt").string(), "--out-dir", (dir / "im2").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find(":2: unknown action token '7'"), std::string::npos);
}
