#pragma once

#include <cstdint>
#include <span>

#include "mbfuse/backbone.hpp"

namespace mbfuse {

/// Day/night classifier outputs and the gate weights derived from them.
/// Per-image quantities are (N, 1, 1, 1); alpha and gamma are (1, 1, 1, 1).
template <typename T>
struct IllumState {
  Var<T> w_d;
  Var<T> w_n;
  Var<T> w_abs;
  Var<T> alpha;
  Var<T> gamma;
  Var<T> w_r;
  Var<T> w_t;
};

struct IllumConfig {
  int input_size = 56;
  bool clamp_gate = false;  // clamp w_r to [0, 1]
};

struct GateWeights {
  double w_r = 0.5;
  double w_t = 0.5;
};

// w_r = ((w_d - w_n) / 2) (alpha |w| + gamma) + 1/2, w_t = 1 - w_r.
GateWeights illum_reweight(double w_d, double w_n, double w_abs, double alpha, double gamma, bool clamp = false);

template <typename T>
void illum_reweight(IllumState<T>& state, bool clamp = false);

/// conv 3->8 (3x3) / ReLU / maxpool, conv 8->16 / ReLU / maxpool, FC 3136->64,
/// FC 64->16, then a 2-way softmax head (zero-initialized) and a sigmoid head
/// for |w|. Hidden FC layers use ReLU.
template <typename T>
void init_illumination(ParamStore<T>& store, Rng& rng, const IllumConfig& config = {});

template <typename T>
IllumState<T> illum_forward(Var<T> rgb_img, ParamBinding<T>& params, const IllumConfig& config = {});

/// Mean cross entropy of (w_d, w_n) against one-hot day/night labels.
template <typename T>
Var<T> illum_loss(const IllumState<T>& state, std::span<const std::uint8_t> is_day);

/// rgb <- l2_rescale(w_r * rgb, target), thermal <- l2_rescale(w_t * thermal, target).
template <typename T>
DualFeature<T> gate_apply(const DualFeature<T>& f, Var<T> w_r, Var<T> w_t, double target = 10.0,
                          NormAxis axis = NormAxis::kPosition);

}  // namespace mbfuse
