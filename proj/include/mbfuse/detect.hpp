#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mbfuse/backbone.hpp"
#include "mbfuse/geometry.hpp"

namespace mbfuse {

struct Anchor {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  int stage = kFirstStage;
  int index = 0;

  Box box() const { return Box::from_center(cx, cy, w, h); }
};

struct AnchorPlan {
  // Widths per stage (3..6) at a 640-px wide input.
  std::array<std::array<double, 2>, 4> widths{{{25.84, 29.39}, {33.81, 38.99}, {44.47, 52.54}, {65.80, 131.40}}};
  double ratio = 0.41;  // width / height
  double reference_width = 640.0;

  static constexpr int kPerCell = 2;
};

struct Extent {
  int h = 0;
  int w = 0;
};

/// Anchors for all stages, ordered stage, then anchor slot, then row, then
/// column (matching the channel layout of the head maps). Centers sit at
/// (i + 0.5) * stride; widths scale by input_w / reference_width.
std::vector<Anchor> gen_anchors(std::span<const Extent> stage_extents, Extent input, const AnchorPlan& plan = {});

std::vector<Box> anchor_boxes(std::span<const Anchor> anchors);

enum AnchorLabel : std::int8_t { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct TargetAssignment {
  std::vector<std::int8_t> labels;
  std::vector<int> matched;  // gt index for positives, -1 otherwise
  std::vector<BoxDelta> targets;

  int positives() const;
};

/// IoU >= hi positive, IoU < lo negative, otherwise ignore; each gt also claims
/// its best anchor (IoU > 0, ties to the lowest index). Negatives covered at
/// least half by an ignore region become ignore.
TargetAssignment assign_targets(std::span<const Box> anchors, std::span<const Box> gts, double lo, double hi,
                                std::span<const Box> ignore_regions = {});

template <typename T>
struct ApOutput {
  Var<T> fused;  // (N, C, H, W)
  Var<T> s0;     // (N, A, H, W) probabilities
  Var<T> t0;     // (N, 4A, H, W), channel 4a + k
};

template <typename T>
struct IafcOutput {
  Var<T> s_r;
  Var<T> s_t;
  Var<T> s1;
  Var<T> t1;
};

inline constexpr double kScorePrior = 0.01;

/// Concat + 1x1 fuse conv (ReLU), 3x3 score head (bias at the 0.01 prior)
/// and a zero-initialized 3x3 regression head.
template <typename T>
void init_ap_stage(ParamStore<T>& store, const std::string& prefix, int channels, Rng& rng);

/// Per-modality 3x3 score heads and a zero-initialized 3x3 regression head on
/// the fused map.
template <typename T>
void init_iafc_stage(ParamStore<T>& store, const std::string& prefix, int channels, Rng& rng);

template <typename T>
ApOutput<T> ap_stage(const DualFeature<T>& f, ParamBinding<T>& params, const std::string& prefix);

// s1 = w_r s_r + w_t s_t with w_r, w_t of shape (N, 1, 1, 1).
template <typename T>
IafcOutput<T> iafc_stage(const DualFeature<T>& f, Var<T> fused, Var<T> w_r, Var<T> w_t, ParamBinding<T>& params,
                         const std::string& prefix);

struct CascadeResult {
  double score = 0.0;
  BoxDelta t{};
  Box box;
};

// s_final = s0 s1, t_final = t0 + t1, box decoded from the original anchor.
CascadeResult fuse_cascade(const Box& anchor, double s0, const BoxDelta& t0, double s1, const BoxDelta& t1);

struct Detection {
  Box box;
  double score = 0.0;
  double s0 = 0.0;
  double s1 = 1.0;
  double s_r = 0.0;
  double s_t = 0.0;
  int stage = 0;
  int anchor = -1;
};

/// Greedy suppression at IoU > iou_thresh; order is descending score with
/// ties to the lower input index. Output is in that order.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh = 0.5);

/// Loss terms of the training objective; absent terms are left invalid.
template <typename T>
struct LossParts {
  Var<T> illum;
  Var<T> cls0;
  Var<T> cls1;
  Var<T> reg0;
  Var<T> reg1;
};

// Unweighted sum of the valid parts.
template <typename T>
Var<T> total_loss(const LossParts<T>& parts, Tape<T>& tape);

using DetectionTable = std::map<std::string, std::vector<Detection>>;

void write_detections_csv(std::ostream& out, const DetectionTable& dets);
void write_detections_csv(const std::string& path, const DetectionTable& dets);
DetectionTable read_detections_csv(const std::string& path);

}  // namespace mbfuse
