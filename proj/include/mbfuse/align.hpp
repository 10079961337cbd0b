#pragma once

#include "mbfuse/backbone.hpp"

namespace mbfuse {

/// Per-modality (N, 2, H, W) offset fields: channel 0 = dx, channel 1 = dy,
/// in feature-map pixels.
template <typename T>
struct OffsetPair {
  Var<T> rgb;
  Var<T> thermal;
};

/// Parameters under `prefix`: 1x1 compression per modality (C -> compress),
/// then a zero-initialized 3x3 head over the concatenation emitting 4
/// channels (rgb dx, dy, thermal dx, dy).
template <typename T>
void init_align(ParamStore<T>& store, const std::string& prefix, int channels, int compress, Rng& rng);

template <typename T>
OffsetPair<T> predict_offsets(const DualFeature<T>& f, ParamBinding<T>& params, const std::string& prefix);

// Resamples each modality with its own offsets.
template <typename T>
DualFeature<T> align(const DualFeature<T>& f, const OffsetPair<T>& offsets);

}  // namespace mbfuse
