#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bmlab/bmlab.hpp"

using namespace bmlab;

namespace {

DatasetSpec small_spec(std::uint64_t seed, std::size_t count = 20) {
  DatasetSpec s;
  s.count = count;
  s.height = 64;
  s.width = 64;
  s.min_radius = 4;
  s.max_radius = 14;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Generate, Deterministic) {
  EXPECT_EQ(generate(small_spec(3)), generate(small_spec(3)));
  EXPECT_NE(generate(small_spec(3)), generate(small_spec(4)));
}

TEST(Generate, ScenePrefixIsStable) {
  const auto a = generate(small_spec(5, 5)), b = generate(small_spec(5, 12));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Generate, SceneInvariants) {
  const DatasetSpec spec = small_spec(11, 60);
  for (const auto& s : generate(spec)) {
    EXPECT_EQ(s.height, 64u);
    EXPECT_EQ(s.image.size(), 3u * 64 * 64);
    EXPECT_GE(s.instances.size(), spec.min_instances);
    EXPECT_LE(s.instances.size(), spec.max_instances);
    for (double v : s.image) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_NEAR(v * 255.0, std::round(v * 255.0), 1e-9);
    }
    for (std::size_t a = 0; a < s.instances.size(); ++a) {
      const auto& in = s.instances[a];
      EXPECT_LT(in.cls, kNumShapeClasses);
      EXPECT_FALSE(in.mask.empty());
      EXPECT_EQ(in.box, tight_box(in.mask));
      for (std::size_t b = a + 1; b < s.instances.size(); ++b) {
        EXPECT_LE(mask_iou(in.mask, s.instances[b].mask), spec.max_iou);
      }
    }
  }
}

TEST(Generate, RejectsBadSpecs) {
  DatasetSpec s = small_spec(1);
  s.max_instances = 7;
  EXPECT_THROW(generate(s), ConfigError);
  s = small_spec(1);
  s.max_radius = 40;
  EXPECT_THROW(generate(s), ConfigError);
  s = small_spec(1);
  s.max_iou = 1.5;
  EXPECT_THROW(generate(s), ConfigError);
}

TEST(Runs, StartWithBackgroundRun) {
  BinaryMask m(2, 3, {1, 1, 0, 0, 1, 1});
  EXPECT_EQ(encode_runs(m), (std::vector<std::size_t>{0, 2, 2, 2}));
  EXPECT_EQ(encode_runs(BinaryMask(2, 2)), (std::vector<std::size_t>{4}));
}

TEST(DatasetFile, RoundTrip) {
  const auto samples = generate(small_spec(8, 6));
  const auto path = std::filesystem::temp_directory_path() / "bmlab_roundtrip.bmds";
  save_dataset(samples, 64, 64, path);
  const Dataset d = load_dataset(path);
  EXPECT_EQ(d.height, 64u);
  EXPECT_EQ(d.width, 64u);
  EXPECT_EQ(d.samples, samples);
  std::filesystem::remove(path);
}

TEST(DatasetFile, EmptyDataset) {
  const Dataset d = parse_dataset(format_dataset({}, 32, 32));
  EXPECT_TRUE(d.samples.empty());
  EXPECT_EQ(d.height, 32u);
}

TEST(DatasetFile, TruncationReportsLocation) {
  const std::string text = format_dataset(generate(small_spec(9, 2)), 64, 64);
  const std::string cut = text.substr(0, text.size() / 2);
  try {
    parse_dataset(cut);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GE(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("line"), std::string::npos);
  }
  EXPECT_THROW(parse_dataset("BMDS2 4 4\ncount 0\n"), ParseError);
  EXPECT_THROW(load_dataset("/nonexistent/file.bmds"), std::runtime_error);
}
