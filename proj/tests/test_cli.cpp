#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dmssd/gridmap.hpp"
#include "dmssd/neural.hpp"

namespace fs = std::filesystem;

namespace {

struct Sandbox {
  fs::path root;
  Sandbox() : root(fs::temp_directory_path() / ("dmssd_cli_" + std::to_string(::getpid()) + "_" +
                                                ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Sandbox() { fs::remove_all(root); }

  int run(const std::string& args) const {
    const std::string cmd = "DMSSD_RUN_DIR='" + (root / "runs").string() + "' '" + DMSSD_CLI_PATH + "' " + args +
                            " >'" + (root / "stdout.txt").string() + "' 2>'" + (root / "stderr.txt").string() + "'";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::vector<fs::path> runs() const {
    std::vector<fs::path> out;
    if (!fs::exists(root / "runs")) return out;
    for (const auto& e : fs::directory_iterator(root / "runs")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::string stderr_text() const { return dmssd::read_file_bytes((root / "stderr.txt").string()); }
};

std::string slurp(const fs::path& p) { return dmssd::read_file_bytes(p.string()); }

}  // namespace

TEST(Cli, GenMapWritesRunDirectory) {
  Sandbox sb;
  ASSERT_EQ(sb.run("gen-map --x 50 --y 50 --static 0.05 --dynamic 0.02 --seed 42"), 0);
  const auto runs = sb.runs();
  ASSERT_EQ(runs.size(), 1u);
  const std::string name = runs[0].filename().string();
  EXPECT_EQ(name.rfind("gen-map-", 0), 0u);
  EXPECT_NE(name.find("-s42"), std::string::npos);
  const dmssd::GridMap map = dmssd::load_map((runs[0] / "map.txt").string());
  EXPECT_EQ(map, dmssd::generate_map(50, 50, 0.05, 0.02, 42));
  EXPECT_TRUE(fs::exists(runs[0] / "config.cfg"));
}

TEST(Cli, UnknownFlagIsConfigErrorWithoutArtifacts) {
  Sandbox sb;
  EXPECT_EQ(sb.run("train --no-such-flag"), 2);
  EXPECT_EQ(sb.run("train --set widht=3"), 2);
  EXPECT_EQ(sb.run("frobnicate"), 2);
  EXPECT_EQ(sb.run("train --config /nonexistent.cfg"), 2);
  EXPECT_TRUE(sb.runs().empty());
  EXPECT_FALSE(sb.stderr_text().empty());
}

TEST(Cli, RuntimeErrorHasItsOwnCode) {
  Sandbox sb;
  std::ofstream(sb.root / "garbage.bin") << "not a model";
  EXPECT_EQ(sb.run("eval --model '" + (sb.root / "garbage.bin").string() + "' --trials 1"), 3);
}

TEST(Cli, TrainTwiceIsIdentical) {
  Sandbox sb;
  std::ofstream(sb.root / "t.cfg") << "width = 8\nheight = 8\niterations = 2\nrollout_steps = 128\nepochs = 2\n";
  const std::string args = "train --config '" + (sb.root / "t.cfg").string() + "' --seed 7";
  ASSERT_EQ(sb.run(args), 0);
  ASSERT_EQ(sb.run(args), 0);
  const auto runs = sb.runs();
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(slurp(runs[0] / "metrics.csv"), slurp(runs[1] / "metrics.csv"));
  EXPECT_EQ(slurp(runs[0] / "model.bin"), slurp(runs[1] / "model.bin"));
  const std::string cfg = slurp(runs[0] / "config.cfg");
  EXPECT_NE(cfg.find("seed = 7\n"), std::string::npos);
  EXPECT_NE(cfg.find("width = 8\n"), std::string::npos);
  EXPECT_NE(cfg.find("gamma = 0.99\n"), std::string::npos);

  // downstream verbs consume the trained model
  const std::string model = "'" + (runs[0] / "model.bin").string() + "'";
  EXPECT_EQ(sb.run("eval --model " + model + " --set width=8 --set height=8 --trials 5"), 0);
  EXPECT_EQ(sb.run("bench --model " + model + " --samples 50"), 0);
  EXPECT_EQ(sb.run("plot-data --curve ours='" + (runs[0] / "metrics.csv").string() + "' --curve ours='" +
                   (runs[1] / "metrics.csv").string() + "'"),
            0);
  const auto after = sb.runs();
  const auto plot = std::find_if(after.begin(), after.end(),
                                 [](const fs::path& p) { return p.filename().string().rfind("plot-data", 0) == 0; });
  ASSERT_NE(plot, after.end());
  const std::string curves = slurp(*plot / "curves.csv");
  EXPECT_EQ(curves.rfind("label,iteration,mst_mean,mst_std,rm_mean,rm_std,runs\nours,1,", 0), 0u);
}

TEST(Cli, CompatRejectsTooManyRobots) {
  Sandbox sb;
  dmssd::Rng rng(1);
  dmssd::PolicyValueNet net(7, 3, 8, 8);
  net.initialize(rng);
  dmssd::save_model((sb.root / "m.bin").string(), net);
  EXPECT_EQ(sb.run("compat --model '" + (sb.root / "m.bin").string() + "' -k 4 --episodes 1"), 3);
}
