#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mbfuse/align.hpp"
#include "mbfuse/detect.hpp"
#include "mbfuse/illumination.hpp"

namespace mbfuse {

struct Toggles {
  bool dmaf = true;
  bool gate = true;
  bool ma = true;
  bool iafc = true;

  bool needs_illumination() const { return gate || iafc; }
  friend bool operator==(const Toggles&, const Toggles&) = default;
};

struct ModelConfig {
  int input_h = 128;
  int input_w = 160;
  std::array<int, 4> channels{16, 32, 64, 128};
  int blocks_per_stage = 2;
  Toggles toggles;
  IllumConfig illum;
  double gate_norm = 10.0;
  NormAxis gate_axis = NormAxis::kPosition;
  int align_compress = 8;
  AnchorPlan anchors;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double ap_lo = 0.3;
  double ap_hi = 0.5;
  double iafc_lo = 0.5;
  double iafc_hi = 0.7;

  BackboneConfig backbone() const;
  std::vector<Extent> stage_extents() const;
  void validate() const;

  std::map<std::string, std::string> to_metadata() const;
  static ModelConfig from_metadata(const std::map<std::string, std::string>& meta);
};

std::string stage_prefix(const char* head, int stage_index);

/// Creates every parameter the toggles call for; modules that are switched
/// off contribute no parameters.
template <typename T>
ParamStore<T> init_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct ModelOutput {
  std::vector<DualFeature<T>> backbone;
  std::vector<DualFeature<T>> head_input;  // after gate and alignment
  bool has_illum = false;
  IllumState<T> illum;
  std::vector<OffsetPair<T>> offsets;
  std::vector<ApOutput<T>> ap;
  std::vector<IafcOutput<T>> iafc;
};

template <typename T>
ModelOutput<T> model_forward(Var<T> rgb, Var<T> thermal, ParamBinding<T>& params, const ModelConfig& config);

struct ImageTargets {
  std::vector<Box> boxes;
  std::vector<Box> ignore;
  bool day = true;
};

// Per-image values of (N, A, H, W) maps in anchor order.
template <typename T>
std::vector<double> gather_scores(std::span<const Var<T>> maps, int image);

// Per-image values of (N, 4A, H, W) maps in anchor order.
template <typename T>
std::vector<BoxDelta> gather_deltas(std::span<const Var<T>> maps, int image);

/// Builds the loss terms for a batch. AP targets come from the anchors at
/// (ap_lo, ap_hi); refinement targets from the anchors deformed by t0 at
/// (iafc_lo, iafc_hi); the refined offsets t0 + t1 regress encode(anchor, gt).
template <typename T>
LossParts<T> model_loss(const ModelOutput<T>& out, std::span<const ImageTargets> targets,
                        std::span<const Anchor> anchors, const ModelConfig& config);

struct DetectOptions {
  double min_score = 1e-3;
  int pre_nms_top = 300;
  double nms_iou = 0.5;
  int max_detections = 100;
};

std::vector<std::vector<Detection>> model_detect(const ModelOutput<float>& out, std::span<const Anchor> anchors,
                                                 const ModelConfig& config, const DetectOptions& options = {});

}  // namespace mbfuse
