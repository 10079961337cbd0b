#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mbfuse/experiment.hpp"
#include "mbfuse/train.hpp"

namespace mbfuse {
namespace {

TEST(Config, ParsesKeyValueLinesWithComments) {
  std::istringstream in(
      "# desk run\n"
      "lr = 0.002   # trailing comment\n"
      "\n"
      "  epochs=7\n"
      "channels = 4,8,16,32\n"
      "dmaf = off\n"
      "iafc_iou = 0.4, 0.8\n"
      "input_h = 48\n");
  const TrainConfig c = parse_config(in, "run.cfg");
  EXPECT_EQ(c.lr, 0.002);
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.model.channels, (std::array<int, 4>{4, 8, 16, 32}));
  EXPECT_FALSE(c.model.toggles.dmaf);
  EXPECT_TRUE(c.model.toggles.iafc);
  EXPECT_EQ(c.model.iafc_lo, 0.4);
  EXPECT_EQ(c.model.iafc_hi, 0.8);
  EXPECT_EQ(c.model.input_h, 48);
  EXPECT_EQ(c.synth.height, 48);
}

std::string error_of(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_config(in, "run.cfg");
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, ErrorsNameSourceAndLine) {
  EXPECT_NE(error_of("lr = 1e-3\nlearning_rate = 2\n").find("run.cfg:2"), std::string::npos);
  EXPECT_NE(error_of("lr = 1e-3\nlearning_rate = 2\n").find("learning_rate"), std::string::npos);
  EXPECT_NE(error_of("\n\nepochs = many\n").find("run.cfg:3"), std::string::npos);
  EXPECT_NE(error_of("dmaf\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(error_of("dmaf = maybe\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(error_of("channels = 1,2,3\n").find("run.cfg:1"), std::string::npos);
}

TEST(Config, LaterSettingsOverrideEarlierOnes) {
  std::istringstream in("seed = 4\nlr = 0.01\n");
  TrainConfig c = parse_config(in);
  apply_setting(c, "seed", "9");
  apply_setting(c, "ma", "off");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_FALSE(c.model.toggles.ma);
  std::istringstream base_in("epochs = 3\n");
  TrainConfig base;
  base.lr = 0.5;
  const TrainConfig merged = parse_config(base_in, "<x>", base);
  EXPECT_EQ(merged.lr, 0.5);
  EXPECT_EQ(merged.epochs, 3);
}

TEST(Config, TextRoundTrip) {
  TrainConfig c = desk_benchmark();
  c.model.toggles = {true, false, true, false};
  c.lr = 3.25e-4;
  c.synth.misalign_dx = -1.75;
  c.model.gate_norm = 2.5;
  std::istringstream in(config_text(c));
  const TrainConfig back = parse_config(in);
  EXPECT_EQ(config_text(back), config_text(c));
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.model.toggles, c.model.toggles);
}

TEST(Config, ValidateRejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.crop_min = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

SyntheticScene blank_scene(std::vector<GroundTruthBox> boxes) {
  SyntheticScene s;
  s.rgb = Tensor<float>(Shape{3, 32, 48});
  s.thermal = Tensor<float>(Shape{1, 32, 48});
  for (std::size_t i = 0; i < s.rgb.numel(); ++i) s.rgb[i] = static_cast<float>(i % 48) / 48.0f;
  s.boxes = std::move(boxes);
  return s;
}

TEST(Prepare, NoAugmentationKeepsPixelsAndBoxes) {
  const auto scene = blank_scene({{{4, 2, 10, 20}, Occlusion::kNone, false, "person"},
                                  {{30, 5, 6, 6}, Occlusion::kNone, true, "people"}});
  const auto s = prepare_sample(scene, 32, 48, nullptr, 0.5, 0.5);
  ASSERT_EQ(s.rgb.shape(), scene.rgb.shape());
  for (std::size_t i = 0; i < s.rgb.numel(); ++i) ASSERT_EQ(s.rgb[i], scene.rgb[i]);
  ASSERT_EQ(s.targets.boxes.size(), 1u);
  EXPECT_EQ(s.targets.boxes[0], (Box{4, 2, 10, 20}));
  ASSERT_EQ(s.targets.ignore.size(), 1u);
  EXPECT_EQ(s.targets.ignore[0], (Box{30, 5, 6, 6}));
}

TEST(Prepare, ResizeScalesBoxes) {
  const auto scene = blank_scene({{{4, 2, 10, 20}, Occlusion::kNone, false, "person"}});
  const auto s = prepare_sample(scene, 64, 96, nullptr, 1.0, 0.0);
  EXPECT_EQ(s.rgb.shape(), (Shape{3, 64, 96}));
  EXPECT_EQ(s.targets.boxes[0], (Box{8, 4, 20, 40}));
}

TEST(Prepare, FlipMirrorsBoxesAndPixels) {
  const auto scene = blank_scene({{{4, 2, 10, 20}, Occlusion::kNone, false, "person"}});
  Rng rng(1);
  const auto s = prepare_sample(scene, 32, 48, &rng, 1.0, 1.0);
  EXPECT_EQ(s.targets.boxes[0], (Box{34, 2, 10, 20}));
  EXPECT_EQ(s.rgb[0], scene.rgb[47]);
  EXPECT_EQ(s.rgb[47], scene.rgb[0]);
}

TEST(Prepare, CropRemnantsBecomeIgnoreRegions) {
  const Box gt{30, 4, 12, 26};
  const auto scene = blank_scene({{gt, Occlusion::kNone, false, "person"}});
  int targets = 0, ignored = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto s = prepare_sample(scene, 32, 48, &rng, 0.4, 0.0);
    for (const auto& b : s.targets.boxes) {
      ++targets;
      EXPECT_GE(b.x, -1e-9);
      EXPECT_LE(b.x + b.w, 48 + 1e-9);
      EXPECT_LE(b.y + b.h, 32 + 1e-9);
    }
    ignored += static_cast<int>(s.targets.ignore.size());
    EXPECT_LE(s.targets.boxes.size() + s.targets.ignore.size(), 1u);
  }
  EXPECT_GT(targets, 20);
  EXPECT_GT(ignored, 5);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  ParamStore<float> p;
  p.add("a", Tensor<float>(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f}));
  Tensor<float> g(Shape{3}, std::vector<float>{0.25f, -4.0f, 0.0f});
  Adam adam(0.1);
  adam.step(p, {g});
  EXPECT_NEAR(p.get("a")[0], 0.9, 1e-6);
  EXPECT_NEAR(p.get("a")[1], -1.9, 1e-6);
  EXPECT_EQ(p.get("a")[2], 0.5f);
  EXPECT_EQ(adam.steps(), 1);
  // Second step with the same gradient: bias-corrected moments are unchanged.
  adam.step(p, {g});
  EXPECT_NEAR(p.get("a")[0], 0.8, 1e-6);
}

TEST(Adam, GradientCountMismatchThrows) {
  ParamStore<float> p;
  p.add("a", Tensor<float>(Shape{1}));
  Adam adam(0.1);
  EXPECT_THROW(adam.step(p, {}), Error);
}

TrainConfig tiny_config() {
  TrainConfig c = desk_benchmark();
  apply_setting(c, "input_h", "32");
  apply_setting(c, "input_w", "48");
  c.model.channels = {4, 4, 8, 8};
  c.model.illum.input_size = 8;
  c.epochs = 2;
  c.batch_size = 4;
  return c;
}

TEST(Train, ZeroLearningRateLeavesParametersBitIdentical) {
  TrainConfig c = tiny_config();
  c.lr = 0.0;
  c.epochs = 3;
  const auto scenes = synth_generate(8, 21, c.synth);
  const auto result = train(c, scenes);
  EXPECT_TRUE(result.params == init_model<float>(c.model, c.seed));
  EXPECT_EQ(result.log.size(), 3u);
}

TEST(Train, SameSeedGivesBitIdenticalRuns) {
  const TrainConfig c = tiny_config();
  const auto scenes = synth_generate(8, 22, c.synth);
  const auto a = train(c, scenes);
  const auto b = train(c, scenes);
  EXPECT_TRUE(a.params == b.params);
  std::ostringstream la, lb;
  write_train_log(la, a.log);
  write_train_log(lb, b.log);
  EXPECT_EQ(la.str(), lb.str());
  TrainConfig other = c;
  other.seed = 2;
  EXPECT_FALSE(train(other, scenes).params == a.params);
}

TEST(Train, LossDecreasesOverFirstFiveEpochs) {
  TrainConfig c = desk_benchmark();
  c.epochs = 5;
  const auto scenes = synth_generate(48, train_scene_seed(1), c.synth);
  std::vector<double> totals;
  train(c, scenes, [&](const EpochLog& e) { totals.push_back(e.total); });
  ASSERT_EQ(totals.size(), 5u);
  for (std::size_t i = 1; i < totals.size(); ++i) EXPECT_LT(totals[i], totals[i - 1]) << "epoch " << i + 1;
}

TEST(Train, EmptySceneListThrows) { EXPECT_THROW(train(tiny_config(), {}), Error); }

TEST(TrainLog, CsvLayout) {
  std::ostringstream out;
  write_train_log(out, {{1, 2.5, 0.5, 1, 0.25, 0.5, 0.25}});
  EXPECT_EQ(out.str(), "epoch,total,illum,cls0,cls1,reg0,reg1\n1,2.5,0.5,1,0.25,0.5,0.25\n");
}

}  // namespace
}  // namespace mbfuse
