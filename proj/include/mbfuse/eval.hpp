#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mbfuse/detect.hpp"
#include "mbfuse/tensor.hpp"

namespace mbfuse {

enum class Occlusion : std::uint8_t { kNone = 0, kPartial = 1, kHeavy = 2 };

struct GroundTruthBox {
  Box box;
  Occlusion occlusion = Occlusion::kNone;
  bool ignore = false;
  std::string label = "person";
};

inline constexpr double kReasonableHeight = 55.0;
inline constexpr double kReferenceHeight = 512.0;

/// Marks boxes shorter than 55 * input_h / 512 or heavily occluded as ignore.
std::vector<GroundTruthBox> reasonable_filter(std::span<const GroundTruthBox> gts,
                                              double input_h = kReferenceHeight);

enum DetStatus : std::int8_t { kFalsePositive = 0, kTruePositive = 1, kIgnored = -1 };

struct MatchResult {
  std::vector<std::int8_t> status;  // per detection, in input order
  int tp = 0;
  int fp = 0;
  int missed = 0;
};

/// Caltech-style greedy matching. Detections must be sorted by descending
/// score. Each one takes the highest-IoU unmatched non-ignored gt with
/// IoU >= thresh; failing that, a detection covering an ignore region with
/// intersection-over-detection >= thresh is dropped.
MatchResult match_greedy(std::span<const Detection> dets, std::span<const GroundTruthBox> gts, double iou_thresh);

struct FppiPoint {
  double fppi = 0.0;
  double miss_rate = 1.0;
};

struct FppiCurve {
  std::vector<FppiPoint> points;  // at the reference FPPI values
  double mr2 = 100.0;             // percent
};

std::array<double, 9> fppi_references();

/// Log-average miss rate over FPPI in [1e-2, 1]. Detections of each image are
/// sorted internally (descending score, ties by input index).
FppiCurve log_avg_mr(std::span<const std::vector<Detection>> dets_per_image,
                     std::span<const std::vector<GroundTruthBox>> gts_per_image, double iou_thresh = 0.5);

void write_curve_csv(std::ostream& out, const FppiCurve& curve);

enum class RedundancyLevel { kChannel, kFeature };

struct RedundancyHistogram {
  std::array<double, 10> proportions{};
  std::size_t counted = 0;
  std::size_t skipped = 0;  // zero-variance vector pairs
  double mean_abs_rho = 0.0;
};

/// |rho| between modality features of one image (C, H, W) or (1, C, H, W).
/// Channel level: one value per position over the C-vectors. Feature level:
/// one value per channel over the H x W maps.
RedundancyHistogram pearson_redundancy(const Tensor<float>& rgb, const Tensor<float>& thermal,
                                       RedundancyLevel level);

// Accumulates counts from several images into one histogram.
RedundancyHistogram merge_histograms(std::span<const RedundancyHistogram> parts);

void write_histogram_csv(std::ostream& out, const RedundancyHistogram& hist);

double pearson_abs(std::span<const double> a, std::span<const double> b, bool* constant = nullptr);

}  // namespace mbfuse
