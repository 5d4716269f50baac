#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bmlab/commands.hpp"

using namespace bmlab;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig =
    "# tiny smoke configuration\n"
    "data.train_count = 6\n"
    "data.val_count = 3\n"
    "data.height = 64\n"
    "data.width = 64\n"
    "backbone.stage_channels = 4,4,6,6\n"
    "backbone.channels = 4\n"
    "head.channels = 4\n"
    "train.iterations = 3\n";

struct CliRun {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("bmlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.cfg") << kTinyConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun run(const std::string& args) {
    const fs::path o = dir_ / "stdout.txt", e = dir_ / "stderr.txt";
    const std::string cmd = std::string(BMLAB_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int st = std::system(cmd.c_str());
    return CliRun{WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(o), slurp(e)};
  }

  std::string common(const std::string& out) const {
    return "--config " + (dir_ / "tiny.cfg").string() + " --out " + (dir_ / out).string();
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, ParsesCommentsAndOverrides) {
  ExperimentConfig c;
  apply_config_text(c, "# comment\n\nhead.variant = plain  # trailing\ntrain.base_lr=auto\nbackbone.stage_channels=1,2,3,4\n");
  EXPECT_EQ(c.head.variant, HeadVariant::Plain);
  EXPECT_LT(c.train.base_lr, 0.0);
  EXPECT_EQ(c.backbone.stage_channels, (std::array<std::size_t, 4>{1, 2, 3, 4}));
  apply_override(c, "head.loss.kind=weighted_bce");
  EXPECT_EQ(c.head.loss.kind, BoundaryLossKind::WeightedBce);
  EXPECT_THROW(apply_override(c, "no_equals_sign"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.iterations=abc"), ConfigError);
  EXPECT_THROW(apply_override(c, "head.m2b_fusion=maybe"), ConfigError);
}

TEST(Config, UnknownKeyIsNamed) {
  ExperimentConfig c;
  try {
    apply_override(c, "head.varian=bmask");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("head.varian"), std::string::npos);
  }
}

TEST(Config, FormatRoundTrips) {
  ExperimentConfig a;
  apply_config_text(a, kTinyConfig);
  apply_override(a, "head.loss.lambda=0.25");
  apply_override(a, "seed=42");
  ExperimentConfig b;
  apply_config_text(b, format_config(a));
  EXPECT_EQ(format_config(a), format_config(b));
  for (const auto& k : config_key_names()) EXPECT_EQ(get_config_value(a, k), get_config_value(b, k)) << k;
}

TEST(Ablation, RowSets) {
  auto ids = [](const std::string& m) {
    std::vector<std::string> v;
    for (const auto& r : ablation_rows(m)) v.push_back(r.id);
    return v;
  };
  EXPECT_EQ(ids("fusion"), (std::vector<std::string>{"none", "m2b", "b2m", "both"}));
  EXPECT_EQ(ids("loss"), (std::vector<std::string>{"bce", "weighted_bce", "dice", "dice_bce"}));
  EXPECT_EQ(ids("target"), (std::vector<std::string>{"none", "mask", "boundary"}));
  EXPECT_EQ(ids("roi"), (std::vector<std::string>{"p2-p5@14", "p2@14", "p2-p5@28", "p2@28"}));
  EXPECT_EQ(ids("compute"), (std::vector<std::string>{"plain", "lmh", "bmask"}));
  EXPECT_THROW(ablation_rows("everything"), ConfigError);
}

TEST(Ablation, MedianPerMetric) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0}), 2.5);
}

TEST_F(CliTest, TrainWritesArtifacts) {
  const CliRun r = run("train " + common("t"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "t" / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(dir_ / "t" / "config.txt"));
  const std::string loss = slurp(dir_ / "t" / "loss.csv");
  EXPECT_EQ(loss.substr(0, loss.find('\n')), "iteration,lr,mask_loss,boundary_loss,total");
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 4);
}

TEST_F(CliTest, UnknownKeyExitsWithUsageError) {
  const CliRun r = run("train " + common("t") + " --set head.varian=x");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("head.varian"), std::string::npos);
  EXPECT_EQ(run("bogus").code, 2);
}

TEST_F(CliTest, EvalIsDeterministicAndNeedsCheckpoint) {
  EXPECT_EQ(run("eval " + common("missing")).code, 2);
  ASSERT_EQ(run("train " + common("e")).code, 0);
  ASSERT_EQ(run("eval " + common("e")).code, 0);
  const std::string first = slurp(dir_ / "e" / "ap.csv");
  EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 11);
  EXPECT_TRUE(fs::exists(dir_ / "e" / "ap.json"));
  ASSERT_EQ(run("eval " + common("e")).code, 0);
  EXPECT_EQ(slurp(dir_ / "e" / "ap.csv"), first);
}

TEST_F(CliTest, AblateFusionRows) {
  const CliRun r = run("ablate fusion " + common("a") + " --set train.iterations=1");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir_ / "a" / "ablation_fusion.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "row,ap,ap50,ap75");
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(rows, (std::vector<std::string>{"none", "m2b", "b2m", "both"}));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "ap_curve_fusion.svg"));
}

TEST_F(CliTest, AblateComputeReportsMacs) {
  ASSERT_EQ(run("ablate compute " + common("c") + " --set train.iterations=1").code, 0);
  const std::string csv = slurp(dir_ / "c" / "ablation_compute.csv");
  EXPECT_NE(csv.find("macs"), std::string::npos);
  EXPECT_NE(csv.find("plain,"), std::string::npos);
  EXPECT_NE(csv.find(",462422016\n"), std::string::npos);
  EXPECT_NE(csv.find(",924844032\n"), std::string::npos);
}

TEST_F(CliTest, VisualizeWritesDeterministicPngs) {
  ASSERT_EQ(run("train " + common("v")).code, 0);
  ASSERT_EQ(run("visualize " + common("v") + " --set viz.count=1").code, 0);
  const fs::path png = dir_ / "v" / "viz" / "scene_000.png";
  ASSERT_TRUE(fs::exists(png));
  EXPECT_FALSE(fs::exists(dir_ / "v" / "viz" / "scene_001.png"));
  EXPECT_EQ(png_dimensions(png), (std::pair<std::size_t, std::size_t>{64, 192}));
  const std::string first = slurp(png);
  ASSERT_EQ(run("visualize " + common("v") + " --set viz.count=1").code, 0);
  EXPECT_EQ(slurp(png), first);
  EXPECT_EQ(run("visualize " + common("v") + " --set viz.count=9").code, 2);
}

TEST_F(CliTest, FlopsPrintsPlainTotal) {
  const CliRun r = run("flops --set head.variant=plain");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("462422016"), std::string::npos);
}

TEST_F(CliTest, GenerateThenTrainFromFiles) {
  ASSERT_EQ(run("generate " + common("g")).code, 0);
  const fs::path tr = dir_ / "g" / "train.bmds";
  EXPECT_EQ(load_dataset(tr).samples.size(), 6u);
  const CliRun r = run("train " + common("g2") + " --set data.train_path=" + tr.string());
  EXPECT_EQ(r.code, 0) << r.err;
}
