#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mbfuse/dataset.hpp"
#include "mbfuse/model.hpp"

namespace mbfuse {

struct TrainConfig {
  ModelConfig model;
  SynthParams synth;
  double lr = 1e-4;
  int epochs = 20;
  int batch_size = 8;
  std::uint64_t seed = 1;
  bool augment = true;
  double crop_min = 0.3;
  double flip_prob = 0.5;
  int train_scenes = 400;
  int test_scenes = 100;
  double eval_iou = 0.5;

  void validate() const;
};

/// `key = value` lines, `#` starts a comment. Unknown keys are errors.
TrainConfig parse_config(std::istream& in, const std::string& source = "<config>", TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});

// Applies one setting; throws ParseError for unknown keys or bad values.
void apply_setting(TrainConfig& config, const std::string& key, const std::string& value);

std::string config_text(const TrainConfig& config);

// Scene augmented for one training step, already at model input extents.
struct TrainSample {
  Tensor<float> rgb;      // (3, H, W)
  Tensor<float> thermal;  // (1, H, W)
  ImageTargets targets;
};

/// Resizes to (h, w). With augmentation: a random crop with side scale in
/// [crop_min, 1] (resized back), then a horizontal flip with probability
/// flip_prob. Boxes keeping at least half their area become clipped targets;
/// smaller remnants become ignore regions.
TrainSample prepare_sample(const SyntheticScene& scene, int h, int w, Rng* rng, double crop_min, double flip_prob);

struct Batch {
  Tensor<float> rgb;      // (N, 3, H, W)
  Tensor<float> thermal;  // (N, 1, H, W)
  std::vector<ImageTargets> targets;
};

Batch stack_samples(const std::vector<TrainSample>& samples);

struct EpochLog {
  int epoch = 0;
  double total = 0.0;
  double illum = 0.0;
  double cls0 = 0.0;
  double cls1 = 0.0;
  double reg0 = 0.0;
  double reg1 = 0.0;
};

void write_train_log(std::ostream& out, const std::vector<EpochLog>& log);

/// Adam with bias correction; moments kept in 64-bit.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepLoss {
  double total = 0.0;
  double illum = 0.0;
  double cls0 = 0.0;
  double cls1 = 0.0;
  double reg0 = 0.0;
  double reg1 = 0.0;
};

/// One forward/backward pass over a batch; returns the loss terms and fills
/// `grads` in store order.
StepLoss loss_and_gradients(const ParamStore<float>& params, const ModelConfig& config, const Batch& batch,
                            std::span<const Anchor> anchors, std::vector<Tensor<float>>* grads);

struct TrainResult {
  ParamStore<float> params;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Deterministic in (config, scenes). A non-finite value anywhere aborts with
/// NumericError naming the epoch and batch.
TrainResult train(const TrainConfig& config, const std::vector<SyntheticScene>& scenes,
                  const EpochCallback& on_epoch = {});

}  // namespace mbfuse
