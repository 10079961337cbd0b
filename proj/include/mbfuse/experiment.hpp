#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mbfuse/train.hpp"

namespace mbfuse {

// Worker count for inference and evaluation: MBFUSE_THREADS if set, else the
// hardware concurrency (at least 1).
int thread_budget();

/// Runs the model over every scene (resized to the model input) and returns
/// detections in scene pixel coordinates, keyed by scene id.
DetectionTable detect_scenes(const ParamStore<float>& params, const ModelConfig& config,
                             const std::vector<SyntheticScene>& scenes, const DetectOptions& options = {},
                             int batch_size = 8);

/// Reasonable-subset evaluation of `dets` against the scenes' annotations.
/// Scenes without an entry count as having no detections.
FppiCurve evaluate(const DetectionTable& dets, const std::vector<SyntheticScene>& scenes, double iou_thresh = 0.5);

struct RedundancyReport {
  std::array<RedundancyHistogram, 4> channel;  // per backbone stage
  std::array<RedundancyHistogram, 4> feature;

  // Mean channel-level |rho| over the stages.
  double mean_channel_rho() const;
};

/// |rho| between the rgb and thermal backbone outputs, pooled over scenes.
RedundancyReport measure_redundancy(const ParamStore<float>& params, const ModelConfig& config,
                                    const std::vector<SyntheticScene>& scenes, int batch_size = 8);

struct AblationRow {
  std::string name;
  Toggles toggles;
};

/// baseline, +DMAF, +IAFC, +DMAF+IAFC, +DMAF+IAFC+MA. IAFC rows switch on
/// both the illumination gate and the cascaded head.
std::vector<AblationRow> ablation_rows();

/// Small benchmark used by `ablate`: 64x80 input, channels 8/16/32/64, one
/// block per stage, 20 epochs over 200 scenes.
TrainConfig desk_benchmark();

struct AblationRun {
  std::string row;
  std::uint64_t seed = 0;
  double mr2 = 100.0;
  double mean_rho = 0.0;  // channel level, mean over stages
  double final_loss = 0.0;
  double seconds = 0.0;
};

struct AblationSummary {
  std::string row;
  Toggles toggles;
  std::vector<double> mr2;  // per seed, in seed order
  double median_mr2 = 100.0;
  double median_rho = 0.0;
};

using RunCallback = std::function<void(const AblationRun&)>;

/// For each seed: one training set and one test set are generated, then every
/// row trains from `base` with its toggles and is evaluated on the test set.
std::vector<AblationRun> run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<AblationRow>& rows, const RunCallback& on_run = {});

std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRun>& runs,
                                                const std::vector<AblationRow>& rows,
                                                const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> v);

// One line per row: row,iafc,dmaf,aligned,median_mr2,median_rho,mr2_per_seed
void write_ablation_csv(std::ostream& out, const std::vector<AblationSummary>& summary);
void write_runs_csv(std::ostream& out, const std::vector<AblationRun>& runs);

/// Writes a trained model to `dir`: the checkpoint (config as metadata) plus
/// train_log.csv and config.txt. Contents depend only on (config, result).
void save_run(const std::string& dir, const TrainConfig& config, const TrainResult& result);

struct LoadedRun {
  TrainConfig config;
  ParamStore<float> params;
};

// Reads a checkpoint written by save_run; the config comes from its metadata.
LoadedRun load_run(const std::string& dir);

// Seeds for the training and test scene sets of ablation seed `seed`.
std::uint64_t train_scene_seed(std::uint64_t seed);
std::uint64_t test_scene_seed(std::uint64_t seed);

}  // namespace mbfuse
