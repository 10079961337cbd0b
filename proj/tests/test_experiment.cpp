#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mbfuse/experiment.hpp"

namespace mbfuse {
namespace {

namespace fs = std::filesystem;

class ThreadsEnv : public ::testing::Test {
 protected:
  void SetUp() override {
    if (const char* v = std::getenv("MBFUSE_THREADS")) saved_ = v;
  }
  void TearDown() override {
    if (saved_.empty()) {
      unsetenv("MBFUSE_THREADS");
    } else {
      setenv("MBFUSE_THREADS", saved_.c_str(), 1);
    }
  }
  std::string saved_;
};

TEST_F(ThreadsEnv, BudgetFollowsVariable) {
  setenv("MBFUSE_THREADS", "3", 1);
  EXPECT_EQ(thread_budget(), 3);
  setenv("MBFUSE_THREADS", "0", 1);
  EXPECT_THROW(thread_budget(), Error);
  setenv("MBFUSE_THREADS", "two", 1);
  EXPECT_THROW(thread_budget(), Error);
  unsetenv("MBFUSE_THREADS");
  EXPECT_GE(thread_budget(), 1);
}

TrainConfig tiny_config() {
  TrainConfig c = desk_benchmark();
  apply_setting(c, "input_h", "32");
  apply_setting(c, "input_w", "48");
  c.model.channels = {4, 4, 8, 8};
  c.model.illum.input_size = 8;
  c.epochs = 1;
  c.train_scenes = 8;
  c.test_scenes = 6;
  return c;
}

TEST_F(ThreadsEnv, DetectionsDoNotDependOnThreadCount) {
  const TrainConfig c = tiny_config();
  const auto params = init_model<float>(c.model, 1);
  const auto scenes = synth_generate(6, 5, c.synth);
  setenv("MBFUSE_THREADS", "1", 1);
  const auto one = detect_scenes(params, c.model, scenes, {}, 2);
  setenv("MBFUSE_THREADS", "3", 1);
  const auto three = detect_scenes(params, c.model, scenes, {}, 2);
  std::ostringstream a, b;
  write_detections_csv(a, one);
  write_detections_csv(b, three);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(one.size(), scenes.size());
}

TEST(Ablation, RowsAndToggles) {
  const auto rows = ablation_rows();
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].name, "baseline");
  EXPECT_EQ(rows[0].toggles, (Toggles{false, false, false, false}));
  EXPECT_EQ(rows[1].toggles, (Toggles{true, false, false, false}));
  EXPECT_EQ(rows[2].toggles, (Toggles{false, true, false, true}));
  EXPECT_EQ(rows[3].toggles, (Toggles{true, true, false, true}));
  EXPECT_EQ(rows[4].toggles, (Toggles{true, true, true, true}));
}

TEST(Ablation, MedianOfOddAndEvenLists) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_EQ(median({5.0}), 5.0);
  EXPECT_THROW(median({}), Error);
}

TEST(Ablation, SummaryAndCsv) {
  const std::vector<AblationRow> rows{{"baseline", {false, false, false, false}}, {"+DMAF", {true, false, false, false}}};
  std::vector<AblationRun> runs;
  const double mr[2][3] = {{50, 40, 60}, {30, 45, 35}};
  for (int r = 0; r < 2; ++r) {
    for (int s = 0; s < 3; ++s) runs.push_back({rows[r].name, static_cast<std::uint64_t>(s + 1), mr[r][s], 0.1 * (s + 1), 0.5, 1.0});
  }
  const auto summary = summarize_ablation(runs, rows, {1, 2, 3});
  ASSERT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[0].median_mr2, 50.0);
  EXPECT_EQ(summary[1].median_mr2, 35.0);
  EXPECT_NEAR(summary[1].median_rho, 0.2, 1e-12);
  EXPECT_EQ(summary[1].mr2, (std::vector<double>{30, 45, 35}));
  std::ostringstream out;
  write_ablation_csv(out, summary);
  EXPECT_EQ(out.str(),
            "row,iafc,dmaf,aligned,median_mr2,median_rho,mr2_per_seed\n"
            "baseline,0,0,0,50.0000,0.200000,50.0000;40.0000;60.0000\n"
            "+DMAF,0,1,0,35.0000,0.200000,30.0000;45.0000;35.0000\n");
  std::ostringstream rc;
  write_runs_csv(rc, {runs[0]});
  EXPECT_EQ(rc.str(), "row,seed,mr2,mean_rho,final_loss,seconds\nbaseline,1,50.0000,0.100000,0.500000,1.0\n");
  EXPECT_THROW(summarize_ablation({runs[0]}, rows, {1, 2, 3}), Error);
}

TEST(Ablation, SceneSeedsAreDistinct) {
  for (std::uint64_t s = 1; s <= 5; ++s) {
    EXPECT_NE(train_scene_seed(s), test_scene_seed(s));
    EXPECT_NE(train_scene_seed(s), train_scene_seed(s + 1));
  }
}

TEST(Ablation, TinyRunProducesOneRunPerRowAndSeed) {
  const TrainConfig c = tiny_config();
  const auto rows = ablation_rows();
  int seen = 0;
  const auto runs = run_ablation(c, {1}, rows, [&](const AblationRun&) { ++seen; });
  ASSERT_EQ(runs.size(), rows.size());
  EXPECT_EQ(seen, 5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(runs[i].row, rows[i].name);
    EXPECT_GE(runs[i].mr2, 0.0);
    EXPECT_LE(runs[i].mr2, 100.0);
    EXPECT_GE(runs[i].mean_rho, 0.0);
    EXPECT_LE(runs[i].mean_rho, 1.0);
  }
}

TEST(Run, SaveLoadRoundTrip) {
  TrainConfig c = tiny_config();
  c.model.toggles = {true, false, true, false};
  c.lr = 2.5e-3;
  const auto scenes = synth_generate(4, 3, c.synth);
  const auto result = train(c, scenes);
  const std::string dir = ::testing::TempDir() + "run_rt";
  fs::remove_all(dir);
  save_run(dir, c, result);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "train_log.csv"));
  EXPECT_TRUE(fs::exists(fs::path(dir) / "config.txt"));
  const auto loaded = load_run(dir);
  EXPECT_TRUE(loaded.params == result.params);
  EXPECT_EQ(config_text(loaded.config), config_text(c));
  fs::remove_all(dir);
}

TEST(Run, LoadRejectsParametersThatDoNotMatchTheConfig) {
  TrainConfig c = tiny_config();
  const auto scenes = synth_generate(4, 3, c.synth);
  auto result = train(c, scenes);
  const std::string dir = ::testing::TempDir() + "run_bad";
  fs::remove_all(dir);
  TrainConfig other = c;
  other.model.toggles.ma = false;
  save_run(dir, other, result);
  EXPECT_THROW(load_run(dir), Error);
  fs::remove_all(dir);
}

TEST(Evaluate, PerfectDetectionsGiveZeroMissRate) {
  const auto scenes = synth_generate(10, 8);
  DetectionTable dets;
  for (const auto& s : scenes) {
    auto& list = dets[s.id];
    for (const auto& g : s.boxes) list.push_back({g.box, 0.9});
  }
  bool any = false;
  for (const auto& s : scenes) any = any || !s.boxes.empty();
  ASSERT_TRUE(any);
  EXPECT_LT(evaluate(dets, scenes).mr2, 1e-6);
  EXPECT_EQ(evaluate({}, scenes).mr2, 100.0);
}

}  // namespace
}  // namespace mbfuse
