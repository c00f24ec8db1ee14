#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "retgrade/config.hpp"

using namespace retgrade;
namespace fs = std::filesystem;

TEST(ExperimentConfig, ParsesKeysCommentsAndBlankLines) {
  const auto c = ExperimentConfig::parse("# experiment\n\n  lr = 0.003  # faster\nepochs=12\r\nval_domain = synthA\n");
  EXPECT_TRUE(c.has("lr"));
  EXPECT_EQ(c.str("lr"), "0.003");
  EXPECT_EQ(c.str("val_domain"), "synthA");
  EXPECT_FALSE(c.has("seed"));
  EXPECT_EQ(c.str("seed", "none"), "none");
  const auto t = c.train();
  EXPECT_DOUBLE_EQ(t.lr, 0.003);
  EXPECT_EQ(t.epochs, 12);
}

TEST(ExperimentConfig, UnknownKeyReportsLine) {
  try {
    ExperimentConfig::parse("lr = 1\n\nlearning_rate = 2\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(ExperimentConfig, MissingEqualsReportsLine) {
  try {
    ExperimentConfig::parse("epochs = 3\nseed 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ExperimentConfig, LaterAssignmentWins) {
  const auto c = ExperimentConfig::parse("seed = 1\nseed = 9\n");
  EXPECT_EQ(c.train().seed, 9u);
}

TEST(ExperimentConfig, SetOverridesAndRejectsUnknown) {
  auto c = ExperimentConfig::parse("epochs = 3\n");
  c.set("epochs", "5");
  EXPECT_EQ(c.train().epochs, 5);
  EXPECT_THROW(c.set("epoch", "5"), InvalidInput);
}

TEST(ExperimentConfig, RequireNamesMissingKey) {
  const auto c = ExperimentConfig::parse("train_manifest = a.csv\n");
  EXPECT_NO_THROW(c.require({"train_manifest"}));
  try {
    c.require({"train_manifest", "val_manifest"});
    FAIL() << "expected InvalidInput";
  } catch (const InvalidInput &e) {
    EXPECT_NE(std::string(e.what()).find("val_manifest"), std::string::npos);
  }
}

TEST(ExperimentConfig, RangeAndTypeChecks) {
  EXPECT_THROW(ExperimentConfig::parse("lr = -1\n").train(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("lr = fast\n").train(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("lr = nan\n").train(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("epochs = 2.5\n").train(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("epochs = 0\n").train(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("crop_threshold = 256\n").preprocess(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("clahe_clip = 0.5\n").preprocess(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("gate_hidden = maybe\n").model(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("branch0_channels = 8,,16\n").model(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("input_std = 0.2,0.2\n").preprocess(), InvalidInput);
  EXPECT_THROW(ExperimentConfig::parse("aug_gamma_lo = 1.2\naug_gamma_hi = 1.1\n").train(), InvalidInput);
}

TEST(ExperimentConfig, DefaultsMatchLibraryDefaults) {
  const ExperimentConfig c;
  EXPECT_EQ(c.preprocess(), PreprocessConfig{});
  EXPECT_EQ(c.model(), ModelConfig{});
  const auto t = c.train();
  const TrainConfig d;
  EXPECT_EQ(t.lr, d.lr);
  EXPECT_EQ(t.lr, 1e-4);
  EXPECT_EQ(t.batch_size, 16u);
  EXPECT_EQ(t.epochs, d.epochs);
  EXPECT_EQ(t.beta1, d.beta1);
  EXPECT_EQ(t.beta2, d.beta2);
  EXPECT_EQ(t.eps, d.eps);
  EXPECT_EQ(t.weight_exponent, 1.0);
  EXPECT_EQ(t.steps_per_epoch, d.steps_per_epoch);
  EXPECT_EQ(t.augment.hflip_prob, d.augment.hflip_prob);
  EXPECT_EQ(t.augment.gamma_lo, d.augment.gamma_lo);
  EXPECT_EQ(t.augment.gamma_hi, d.augment.gamma_hi);
  EXPECT_EQ(t.debug_nonfinite_step, -1);
}

TEST(ExperimentConfig, TypedViewsCarryValues) {
  const auto c = ExperimentConfig::parse("branch0_size = 112\nbranch3_size = 150\nbranch0_channels = 8, 16\n"
                                         "branch3_feature_dim = 20\nfusion_dim = 32\ngate_hidden = yes\n"
                                         "clahe_tiles_x = 4\ninput_mean = 0.1,0.2,0.3\nbatch_size = 8\n");
  const auto p = c.preprocess();
  EXPECT_EQ(p.branch0_size, 112);
  EXPECT_EQ(p.branch3_size, 150);
  EXPECT_EQ(p.clahe.tiles_x, 4);
  EXPECT_EQ(p.clahe.tiles_y, 8);
  EXPECT_EQ(p.norm.mean, (std::array<double, 3>{0.1, 0.2, 0.3}));
  const auto m = c.model();
  EXPECT_EQ(m.branch0.input_size, 112u);
  EXPECT_EQ(m.branch3.input_size, 150u);
  EXPECT_EQ(m.branch0.stage_channels, (std::vector<std::size_t>{8, 16}));
  EXPECT_EQ(m.branch3.feature_dim, 20u);
  EXPECT_EQ(m.fusion.dim, 32u);
  EXPECT_TRUE(m.fusion.gate_hidden);
  EXPECT_EQ(c.train().batch_size, 8u);
}

TEST(ExperimentConfig, LoadResolvesRelativePathsAgainstFile) {
  const auto dir = fs::temp_directory_path() / "retgrade_test_config";
  fs::create_directories(dir);
  const auto file = dir / "exp.cfg";
  std::ofstream(file) << "train_manifest = data/train.csv\nval_manifest = /abs/val.csv\n"
                         "test_manifest = a.csv, /b.csv\n";
  const auto c = ExperimentConfig::load(file);
  EXPECT_EQ(c.path("train_manifest"), dir / "data/train.csv");
  EXPECT_EQ(c.path("val_manifest"), fs::path("/abs/val.csv"));
  const auto ps = c.paths("test_manifest");
  ASSERT_EQ(ps.size(), 2u);
  EXPECT_EQ(ps[0], dir / "a.csv");
  EXPECT_EQ(ps[1], fs::path("/b.csv"));
  EXPECT_EQ(ExperimentConfig::parse("train_manifest = x.csv\n").path("train_manifest"), fs::path("x.csv"));
}

TEST(ExperimentConfig, LoadErrors) {
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/exp.cfg"), IoError);
  const auto file = fs::temp_directory_path() / "retgrade_test_config" / "bad.cfg";
  fs::create_directories(file.parent_path());
  std::ofstream(file) << "seed = 1\nbogus = 2\n";
  try {
    ExperimentConfig::load(file);
    FAIL() << "expected ParseError";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("bad.cfg"), std::string::npos);
  }
}
