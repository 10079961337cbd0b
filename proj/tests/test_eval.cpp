#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mbfuse/eval.hpp"
#include "eval_fixtures.hpp"
#include "test_support.hpp"

namespace mbfuse {
namespace {

using namespace fixtures;

TEST(LogAvgMr, HandcraftedFixturesMatchOracle) {
  for (const auto& f : handcrafted()) {
    for (const double t : {0.5, 0.75}) {
      const double got = log_avg_mr(f.dets, f.gts, t).mr2;
      EXPECT_NEAR(got, oracle_mr2(f.dets, f.gts, t), 1e-9);
    }
  }
}

TEST(LogAvgMr, RandomFixturesMatchOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int images = 1 + static_cast<int>(rng.below(6));
    Images dets(images);
    Truth gts(images);
    bool any = false;
    for (int i = 0; i < images; ++i) {
      const int n = static_cast<int>(rng.below(4));
      for (int g = 0; g < n; ++g) {
        auto b = person(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(10, 30), rng.uniform(25, 70));
        b.ignore = rng.bernoulli(0.2);
        any = any || !b.ignore;
        gts[i].push_back(b);
        if (rng.bernoulli(0.7)) {
          dets[i].push_back(det(b.box.x + rng.uniform(-5, 5), b.box.y + rng.uniform(-5, 5), b.box.w, b.box.h,
                                std::round(rng.uniform(0, 20)) / 20.0));
        }
      }
      for (int k = static_cast<int>(rng.below(4)); k > 0; --k) {
        dets[i].push_back(det(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(10, 30), rng.uniform(25, 70),
                              std::round(rng.uniform(0, 20)) / 20.0));
      }
    }
    if (!any) continue;
    ASSERT_NEAR(log_avg_mr(dets, gts, 0.5).mr2, oracle_mr2(dets, gts, 0.5), 1e-9) << "trial " << trial;
  }
}

TEST(LogAvgMr, PerfectAndEmptyDetectors) {
  Truth gts{{person(0, 0, 20, 50), person(50, 0, 20, 50)}, {person(5, 5, 20, 60)}};
  Images perfect{{det(0, 0, 20, 50, 1.0), det(50, 0, 20, 50, 1.0)}, {det(5, 5, 20, 60, 1.0)}};
  const auto p = log_avg_mr(perfect, gts);
  EXPECT_LT(p.mr2, 1e-6);
  EXPECT_EQ(p.points.size(), 9u);
  const auto e = log_avg_mr(Images(2), gts);
  EXPECT_DOUBLE_EQ(e.mr2, 100.0);
  for (const auto& pt : e.points) EXPECT_EQ(pt.miss_rate, 1.0);
}

TEST(LogAvgMr, ReferencePointsAreLogSpaced) {
  const auto refs = fppi_references();
  EXPECT_DOUBLE_EQ(refs.front(), 0.01);
  EXPECT_DOUBLE_EQ(refs.back(), 1.0);
  for (int i = 1; i < 9; ++i) EXPECT_NEAR(std::log10(refs[i]) - std::log10(refs[i - 1]), 0.25, 1e-12);
}

TEST(LogAvgMr, NoGroundTruthThrows) {
  EXPECT_THROW(log_avg_mr(Images(1), Truth(1)), Error);
  EXPECT_THROW(log_avg_mr(Images(2), Truth(1)), Error);
}

TEST(LogAvgMr, MonotoneInFalseAndTruePositives) {
  for (auto f : handcrafted()) {
    const double base = log_avg_mr(f.dets, f.gts).mr2;
    auto with_fp = f;
    with_fp.dets[0].push_back(det(-500, -500, 10, 10, 0.97));
    EXPECT_GE(log_avg_mr(with_fp.dets, with_fp.gts).mr2, base);
    // A top-scoring hit on an unmatched gt, if any is left.
    for (std::size_t i = 0; i < f.gts.size(); ++i) {
      for (const auto& g : f.gts[i]) {
        const bool covered = std::any_of(f.dets[i].begin(), f.dets[i].end(),
                                         [&](const Detection& d) { return iou(d.box, g.box) >= 0.5; });
        if (g.ignore || covered) continue;
        auto with_tp = f;
        with_tp.dets[i].push_back({g.box, 2.0});
        EXPECT_LE(log_avg_mr(with_tp.dets, with_tp.gts).mr2, base + 1e-12);
      }
    }
  }
}

TEST(Match, HandCases) {
  const std::vector<GroundTruthBox> gts{person(0, 0, 20, 50), person(100, 0, 20, 50)};
  const std::vector<Detection> perfect{det(0, 0, 20, 50, 0.9), det(100, 0, 20, 50, 0.8)};
  const auto m = match_greedy(perfect, gts, 0.5);
  EXPECT_EQ(m.tp, 2);
  EXPECT_EQ(m.fp, 0);
  EXPECT_EQ(m.missed, 0);
  const auto none = match_greedy({}, gts, 0.5);
  EXPECT_EQ(none.missed, 2);
  const std::vector<GroundTruthBox> one{person(0, 0, 20, 50)};
  const std::vector<Detection> two{det(0, 0, 20, 50, 0.9), det(1, 0, 20, 50, 0.8)};
  const auto d = match_greedy(two, one, 0.5);
  EXPECT_EQ(d.tp, 1);
  EXPECT_EQ(d.fp, 1);
  EXPECT_EQ(d.status, (std::vector<std::int8_t>{kTruePositive, kFalsePositive}));
}

TEST(Match, IgnoreRegionsUseIntersectionOverDetection) {
  const std::vector<GroundTruthBox> gts{region(0, 0, 100, 100)};
  const std::vector<Detection> dets{det(10, 10, 10, 10, 0.9), det(95, 95, 10, 10, 0.8)};
  const auto m = match_greedy(dets, gts, 0.5);
  EXPECT_EQ(m.status, (std::vector<std::int8_t>{kIgnored, kFalsePositive}));
  EXPECT_EQ(m.tp, 0);
  EXPECT_EQ(m.fp, 1);
  EXPECT_EQ(m.missed, 0);
}

TEST(Match, EqualScoresFollowInputOrder) {
  const std::vector<GroundTruthBox> gts{person(0, 0, 20, 50)};
  const std::vector<Detection> dets{det(2, 0, 20, 50, 0.5), det(0, 0, 20, 50, 0.5)};
  EXPECT_EQ(match_greedy(dets, gts, 0.5).status, (std::vector<std::int8_t>{kTruePositive, kFalsePositive}));
}

TEST(Reasonable, HeightAndOcclusion) {
  std::vector<GroundTruthBox> gts{person(0, 0, 25, 60), person(0, 0, 25, 54), person(0, 0, 40, 100),
                                  person(0, 0, 40, 100)};
  gts[2].occlusion = Occlusion::kHeavy;
  gts[3].occlusion = Occlusion::kPartial;
  const auto r = reasonable_filter(gts);
  EXPECT_FALSE(r[0].ignore);
  EXPECT_TRUE(r[1].ignore);
  EXPECT_TRUE(r[2].ignore);
  EXPECT_FALSE(r[3].ignore);
  // At a 64-px input the height floor scales to 55 / 8.
  const std::vector<GroundTruthBox> small{person(0, 0, 4, 7), person(0, 0, 4, 6.8)};
  const auto s = reasonable_filter(small, 64.0);
  EXPECT_FALSE(s[0].ignore);
  EXPECT_TRUE(s[1].ignore);
}

TEST(Pearson, SelfAndAntiCorrelationFillTheTopBin) {
  Rng rng(3);
  const auto x = Tensor<float>::uniform(Shape{8, 5, 6}, rng, -1.0, 1.0);
  Tensor<float> neg_values = x;
  for (std::size_t i = 0; i < neg_values.numel(); ++i) neg_values[i] = -neg_values[i];
  const Tensor<float>& neg = neg_values;
  for (const auto level : {RedundancyLevel::kChannel, RedundancyLevel::kFeature}) {
    for (const auto* other : {&x, &neg}) {
      const auto h = pearson_redundancy(x, *other, level);
      EXPECT_EQ(h.proportions[9], 1.0);
      EXPECT_NEAR(h.mean_abs_rho, 1.0, 1e-9);
    }
  }
  EXPECT_EQ(pearson_redundancy(x, x, RedundancyLevel::kChannel).counted, 30u);
  EXPECT_EQ(pearson_redundancy(x, x, RedundancyLevel::kFeature).counted, 8u);
}

TEST(Pearson, AffineInvariance) {
  Rng rng(4);
  const auto a = Tensor<float>::uniform(Shape{6, 4, 4}, rng, 0.0, 1.0);
  const auto b = Tensor<float>::uniform(Shape{6, 4, 4}, rng, 0.0, 1.0);
  Tensor<float> b2 = b;
  for (std::size_t i = 0; i < b2.numel(); ++i) b2[i] = 3.0f * b2[i] + 2.0f;
  const auto h1 = pearson_redundancy(a, b, RedundancyLevel::kChannel);
  const auto h2 = pearson_redundancy(a, b2, RedundancyLevel::kChannel);
  EXPECT_NEAR(h1.mean_abs_rho, h2.mean_abs_rho, 1e-5);
  std::vector<double> x{1, 2, 3, 4}, y{2, 1, 4, 3};
  std::vector<double> y2{7, 4, 13, 10};
  EXPECT_NEAR(pearson_abs(x, y), 0.6, 1e-12);
  EXPECT_NEAR(pearson_abs(x, y2), 0.6, 1e-12);
}

TEST(Pearson, IndependentMapsConcentrateLow) {
  Rng rng(5);
  const auto a = Tensor<float>::normal(Shape{256, 8, 8}, rng, 0.0, 1.0);
  const auto b = Tensor<float>::normal(Shape{256, 8, 8}, rng, 0.0, 1.0);
  const auto h = pearson_redundancy(a, b, RedundancyLevel::kChannel);
  // |rho| ~ |N(0, 1/256)|: about 89% of the mass is below 0.1.
  EXPECT_GT(h.proportions[0], 0.8);
  EXPECT_LT(h.mean_abs_rho, 0.1);
}

TEST(Pearson, ConstantVectorsAreSkipped) {
  Tensor<float> a(Shape{3, 2, 2});
  Rng rng(6);
  const auto b = Tensor<float>::uniform(Shape{3, 2, 2}, rng, 0.0, 1.0);
  const auto h = pearson_redundancy(a, b, RedundancyLevel::kFeature);
  EXPECT_EQ(h.counted, 0u);
  EXPECT_EQ(h.skipped, 3u);
}

TEST(Pearson, HistogramMergeAndCsv) {
  Rng rng(7);
  const auto a = Tensor<float>::uniform(Shape{4, 3, 3}, rng, 0.0, 1.0);
  const auto b = Tensor<float>::uniform(Shape{4, 3, 3}, rng, 0.0, 1.0);
  const std::vector<RedundancyHistogram> parts{pearson_redundancy(a, b, RedundancyLevel::kChannel),
                                               pearson_redundancy(a, a, RedundancyLevel::kChannel)};
  const auto merged = merge_histograms(parts);
  EXPECT_EQ(merged.counted, 18u);
  EXPECT_NEAR(std::accumulate(merged.proportions.begin(), merged.proportions.end(), 0.0), 1.0, 1e-12);
  EXPECT_GE(merged.proportions[9], 0.5);
  std::ostringstream out;
  write_histogram_csv(out, merged);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "bin_lo,bin_hi,proportion");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 10);
}

TEST(CurveCsv, HeaderAndRows) {
  Truth gts{{person(0, 0, 20, 50)}};
  Images dets{{det(0, 0, 20, 50, 0.9)}};
  std::ostringstream out;
  write_curve_csv(out, log_avg_mr(dets, gts));
  const std::string text = out.str();
  EXPECT_EQ(text.substr(0, 15), "fppi,miss_rate\n");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 10);
}

}  // namespace
}  // namespace mbfuse
