#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbfuse/eval.hpp"
#include "mbfuse/rng.hpp"
#include "mbfuse/tensor.hpp"

namespace mbfuse {

/// One paired frame: rgb (3, H, W) and thermal (1, H, W) in [0, 1], boxes in
/// RGB coordinates.
struct SyntheticScene {
  std::string id;
  Tensor<float> rgb;
  Tensor<float> thermal;
  std::vector<GroundTruthBox> boxes;
  bool day = true;
  double dx = 0.0;  // thermal misalignment, pixels
  double dy = 0.0;
};

struct SynthParams {
  int height = 64;
  int width = 80;
  double day_fraction = 0.5;
  int min_people = 1;
  int max_people = 3;
  double min_height = 0.25;  // pedestrian height as a fraction of the image
  double max_height = 0.6;
  double contrast_floor = 0.15;
  double misalign_dx = 1.5;
  double misalign_dy = 0.5;
  int clutter = 4;  // per modality
  double noise = 0.02;
  double day_brightness = 0.45;  // mean RGB threshold separating the regimes

  void validate() const;
};

/// Deterministic in (n, seed, params). Day: pedestrians contrast with the
/// background in RGB and barely in thermal; night inverts this. The thermal
/// frame is rendered with geometry shifted by (misalign_dx, misalign_dy).
/// Pixel values are quantized to 8 bits.
std::vector<SyntheticScene> synth_generate(int n, std::uint64_t seed, const SynthParams& params = {});

double mean_brightness(const Tensor<float>& rgb);

// Luminance contrast of a pedestrian against its surround, per modality.
struct SceneContrast {
  double rgb = 0.0;
  double thermal = 0.0;
};

SceneContrast box_contrast(const SyntheticScene& scene, const Box& box);

}  // namespace mbfuse
