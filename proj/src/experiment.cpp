#include "mbfuse/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <mutex>
#include <ostream>
#include <thread>

namespace mbfuse {

int thread_budget() {
  if (const char* env = std::getenv("MBFUSE_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw Error("MBFUSE_THREADS must be a positive integer");
    return static_cast<int>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(chunk) for chunk in [0, chunks) on up to thread_budget() workers.
// The first exception thrown by any worker is rethrown.
template <typename Fn>
void parallel_chunks(int chunks, Fn&& fn) {
  const int workers = std::min(chunks, thread_budget());
  if (workers <= 1) {
    for (int c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (int c = t; c < chunks; c += workers) {
        try {
          fn(c);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

Batch scene_batch(const std::vector<SyntheticScene>& scenes, std::size_t start, std::size_t stop,
                  const ModelConfig& config) {
  std::vector<TrainSample> samples;
  for (std::size_t i = start; i < stop; ++i) {
    samples.push_back(prepare_sample(scenes[i], config.input_h, config.input_w, nullptr, 1.0, 0.0));
  }
  return stack_samples(samples);
}

Tensor<float> image_slice(const Tensor<float>& batch, int n) {
  const auto& d = batch.shape().dims();
  const std::size_t per = batch.numel() / static_cast<std::size_t>(d[0]);
  Tensor<float> out(Shape{d[1], d[2], d[3]});
  std::copy(batch.raw() + per * n, batch.raw() + per * (n + 1), out.raw());
  return out;
}

}  // namespace

DetectionTable detect_scenes(const ParamStore<float>& params, const ModelConfig& config,
                             const std::vector<SyntheticScene>& scenes, const DetectOptions& options,
                             int batch_size) {
  if (batch_size < 1) throw Error("detect_scenes: batch_size must be positive");
  const auto anchors = gen_anchors(config.stage_extents(), {config.input_h, config.input_w}, config.anchors);
  const int chunks = static_cast<int>((scenes.size() + batch_size - 1) / batch_size);
  std::vector<std::vector<std::vector<Detection>>> per_chunk(chunks);
  parallel_chunks(chunks, [&](int c) {
    const std::size_t start = static_cast<std::size_t>(c) * batch_size;
    const std::size_t stop = std::min(scenes.size(), start + batch_size);
    const Batch batch = scene_batch(scenes, start, stop, config);
    Tape<float> tape;
    ParamBinding<float> binding(tape, params, false);
    const auto out = model_forward(tape.constant(batch.rgb), tape.constant(batch.thermal), binding, config);
    per_chunk[c] = model_detect(out, anchors, config, options);
  });
  DetectionTable table;
  for (int c = 0; c < chunks; ++c) {
    for (std::size_t k = 0; k < per_chunk[c].size(); ++k) {
      const auto& scene = scenes[static_cast<std::size_t>(c) * batch_size + k];
      const double sx = scene.rgb.shape().dims()[2] / static_cast<double>(config.input_w);
      const double sy = scene.rgb.shape().dims()[1] / static_cast<double>(config.input_h);
      auto dets = std::move(per_chunk[c][k]);
      for (auto& d : dets) d.box = {d.box.x * sx, d.box.y * sy, d.box.w * sx, d.box.h * sy};
      if (!table.emplace(scene.id, std::move(dets)).second) throw Error("detect_scenes: duplicate scene id " + scene.id);
    }
  }
  return table;
}

FppiCurve evaluate(const DetectionTable& dets, const std::vector<SyntheticScene>& scenes, double iou_thresh) {
  std::vector<std::vector<Detection>> d;
  std::vector<std::vector<GroundTruthBox>> g;
  for (const auto& s : scenes) {
    const auto it = dets.find(s.id);
    d.push_back(it == dets.end() ? std::vector<Detection>{} : it->second);
    g.push_back(reasonable_filter(s.boxes, s.rgb.shape().dims()[1]));
  }
  return log_avg_mr(d, g, iou_thresh);
}

double RedundancyReport::mean_channel_rho() const {
  double sum = 0.0;
  for (const auto& h : channel) sum += h.mean_abs_rho;
  return sum / static_cast<double>(channel.size());
}

RedundancyReport measure_redundancy(const ParamStore<float>& params, const ModelConfig& config,
                                    const std::vector<SyntheticScene>& scenes, int batch_size) {
  if (batch_size < 1) throw Error("measure_redundancy: batch_size must be positive");
  const int chunks = static_cast<int>((scenes.size() + batch_size - 1) / batch_size);
  std::vector<std::array<std::vector<RedundancyHistogram>, 4>> channel(chunks), feature(chunks);
  parallel_chunks(chunks, [&](int c) {
    const std::size_t start = static_cast<std::size_t>(c) * batch_size;
    const std::size_t stop = std::min(scenes.size(), start + batch_size);
    const Batch batch = scene_batch(scenes, start, stop, config);
    Tape<float> tape;
    ParamBinding<float> binding(tape, params, false);
    const auto feats =
        backbone_forward(tape.constant(batch.rgb), tape.constant(batch.thermal), binding, config.backbone());
    for (int s = 0; s < 4; ++s) {
      for (int n = 0; n < static_cast<int>(stop - start); ++n) {
        const auto r = image_slice(feats[s].rgb.value(), n);
        const auto t = image_slice(feats[s].thermal.value(), n);
        channel[c][s].push_back(pearson_redundancy(r, t, RedundancyLevel::kChannel));
        feature[c][s].push_back(pearson_redundancy(r, t, RedundancyLevel::kFeature));
      }
    }
  });
  RedundancyReport report;
  for (int s = 0; s < 4; ++s) {
    std::vector<RedundancyHistogram> ch, fe;
    for (int c = 0; c < chunks; ++c) {
      ch.insert(ch.end(), channel[c][s].begin(), channel[c][s].end());
      fe.insert(fe.end(), feature[c][s].begin(), feature[c][s].end());
    }
    report.channel[s] = merge_histograms(ch);
    report.feature[s] = merge_histograms(fe);
  }
  return report;
}

std::vector<AblationRow> ablation_rows() {
  return {
      {"baseline", {false, false, false, false}},
      {"+DMAF", {true, false, false, false}},
      {"+IAFC", {false, true, false, true}},
      {"+DMAF+IAFC", {true, true, false, true}},
      {"+DMAF+IAFC+MA", {true, true, true, true}},
  };
}

TrainConfig desk_benchmark() {
  TrainConfig c;
  apply_setting(c, "input_h", "64");
  apply_setting(c, "input_w", "80");
  c.model.channels = {8, 16, 32, 64};
  c.model.blocks_per_stage = 1;
  c.train_scenes = 200;
  c.test_scenes = 100;
  c.epochs = 20;
  c.batch_size = 4;
  c.crop_min = 0.7;
  c.lr = 1e-3;
  return c;
}

void save_run(const std::string& dir, const TrainConfig& config, const TrainResult& result) {
  namespace fs = std::filesystem;
  const std::string text = config_text(config);
  std::map<std::string, std::string> meta;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find(" = ");
    meta[line.substr(0, eq)] = line.substr(eq + 3);
  }
  save_checkpoint(dir, result.params, meta);
  std::ofstream log(fs::path(dir) / "train_log.csv");
  write_train_log(log, result.log);
  std::ofstream cfg(fs::path(dir) / "config.txt");
  cfg << text;
  if (!log || !cfg) throw Error("cannot write run files in " + dir);
}

LoadedRun load_run(const std::string& dir) {
  auto ck = load_checkpoint(dir);
  LoadedRun run;
  for (const auto& [key, value] : ck.metadata) apply_setting(run.config, key, value);
  run.config.validate();
  const auto expected = init_model<float>(run.config.model, 0);
  if (expected.names() != ck.params.names()) throw Error("checkpoint " + dir + " does not match its config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!(expected.at(i).shape() == ck.params.at(i).shape())) {
      throw ShapeError("checkpoint " + dir + ": bad shape for " + expected.names()[i]);
    }
  }
  run.params = std::move(ck.params);
  return run;
}

std::uint64_t train_scene_seed(std::uint64_t seed) { return seed * 1000 + 1; }
std::uint64_t test_scene_seed(std::uint64_t seed) { return seed * 1000 + 2; }

std::vector<AblationRun> run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<AblationRow>& rows, const RunCallback& on_run) {
  base.validate();
  std::vector<AblationRun> runs;
  for (const auto seed : seeds) {
    const auto train_set = synth_generate(base.train_scenes, train_scene_seed(seed), base.synth);
    const auto test_set = synth_generate(base.test_scenes, test_scene_seed(seed), base.synth);
    for (const auto& row : rows) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.model.toggles = row.toggles;
      const auto trained = train(cfg, train_set);
      AblationRun run;
      run.row = row.name;
      run.seed = seed;
      run.final_loss = trained.log.empty() ? 0.0 : trained.log.back().total;
      run.mr2 = evaluate(detect_scenes(trained.params, cfg.model, test_set), test_set, cfg.eval_iou).mr2;
      run.mean_rho = measure_redundancy(trained.params, cfg.model, test_set).mean_channel_rho();
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      runs.push_back(run);
      if (on_run) on_run(run);
    }
  }
  return runs;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRun>& runs,
                                                const std::vector<AblationRow>& rows,
                                                const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationSummary> out;
  for (const auto& row : rows) {
    AblationSummary s;
    s.row = row.name;
    s.toggles = row.toggles;
    std::vector<double> rho;
    for (const auto seed : seeds) {
      const auto it = std::find_if(runs.begin(), runs.end(),
                                   [&](const AblationRun& r) { return r.row == row.name && r.seed == seed; });
      if (it == runs.end()) throw Error("summarize_ablation: missing run " + row.name + " seed " + std::to_string(seed));
      s.mr2.push_back(it->mr2);
      rho.push_back(it->mean_rho);
    }
    s.median_mr2 = median(s.mr2);
    s.median_rho = median(rho);
    out.push_back(s);
  }
  return out;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationSummary>& summary) {
  out << "row,iafc,dmaf,aligned,median_mr2,median_rho,mr2_per_seed\n";
  char buf[128];
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof(buf), ",%d,%d,%d,%.4f,%.6f,", s.toggles.iafc ? 1 : 0, s.toggles.dmaf ? 1 : 0,
                  s.toggles.ma ? 1 : 0, s.median_mr2, s.median_rho);
    out << s.row << buf;
    for (std::size_t i = 0; i < s.mr2.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%s%.4f", i ? ";" : "", s.mr2[i]);
      out << buf;
    }
    out << '\n';
  }
}

void write_runs_csv(std::ostream& out, const std::vector<AblationRun>& runs) {
  out << "row,seed,mr2,mean_rho,final_loss,seconds\n";
  char buf[160];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof(buf), ",%llu,%.4f,%.6f,%.6f,%.1f\n", static_cast<unsigned long long>(r.seed), r.mr2,
                  r.mean_rho, r.final_loss, r.seconds);
    out << r.row << buf;
  }
}

}  // namespace mbfuse
