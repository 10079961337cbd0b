#pragma once

#include <array>
#include <string>
#include <vector>

#include "mbfuse/ops.hpp"
#include "mbfuse/params.hpp"

namespace mbfuse {

/// Paired RGB/thermal feature maps of one backbone stage (3..6).
template <typename T>
struct DualFeature {
  Var<T> rgb;
  Var<T> thermal;
  int stage = 3;
};

// Channel vectors (N, C, 1, 1) that recalibrate the other modality.
template <typename T>
struct DmafWeights {
  Var<T> for_thermal;  // tanh(GAP(F_R - F_T))
  Var<T> for_rgb;      // tanh(GAP(F_T - F_R))
};

template <typename T>
struct DmafComplement {
  Var<T> f_rd;  // for_thermal * F_R, consumed by the thermal stream
  Var<T> f_td;  // for_rgb * F_T, consumed by the RGB stream
};

template <typename T>
struct ModalityParts {
  Var<T> common;  // (F_R + F_T) / 2
  Var<T> diff_t;  // (F_T - F_R) / 2
  Var<T> diff_r;  // (F_R - F_T) / 2
};

template <typename T>
DmafWeights<T> dmaf_weights(const DualFeature<T>& f);

template <typename T>
DmafComplement<T> dmaf_complement(const DualFeature<T>& f);

template <typename T>
ModalityParts<T> decompose_modalities(const DualFeature<T>& f);

struct BlockSpec {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;

  bool has_projection() const { return stride != 1 || in_channels != out_channels; }
};

struct BackboneConfig {
  std::array<int, 4> channels{16, 32, 64, 128};
  int blocks_per_stage = 2;
  bool dmaf = true;
  int rgb_channels = 3;
  int thermal_channels = 1;
};

inline constexpr int kFirstStage = 3;
inline constexpr int kStageCount = 4;

// Blocks of stage index 0..3: the first block of stages 1..3 downsamples.
std::vector<BlockSpec> stage_blocks(const BackboneConfig& config, int stage_index);

std::string block_prefix(int stage_index, int block);

/// Per stream: conv1 3x3 (stride), conv2 3x3, optional 1x1 projection. The
/// two streams get independent weights under `prefix.rgb` / `prefix.thermal`.
template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, const BlockSpec& spec, Rng& rng);

template <typename T>
void init_backbone(ParamStore<T>& store, const BackboneConfig& config, Rng& rng);

/// F' = shortcut(F) + conv2(relu(conv1(F + complement))) for each stream; the
/// complement term is dropped when `dmaf` is false.
template <typename T>
DualFeature<T> dmaf_block_forward(const DualFeature<T>& f, ParamBinding<T>& params, const std::string& prefix,
                                  const BlockSpec& spec, bool dmaf);

/// Stem conv (stride 2) + ReLU per stream, then four stages of residual
/// blocks. Stage s has extents input / 2^(s-2).
template <typename T>
std::vector<DualFeature<T>> backbone_forward(Var<T> rgb_img, Var<T> thermal_img, ParamBinding<T>& params,
                                             const BackboneConfig& config);

}  // namespace mbfuse
