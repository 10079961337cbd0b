#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mbfuse/experiment.hpp"
#include "mbfuse/gradsuite.hpp"

namespace fs = std::filesystem;
using namespace mbfuse;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::vector<std::string> checkpoints;
  std::string detections;
  std::vector<std::string> toggles;
  std::vector<std::string> settings;
  std::string iou;  // empty: from the config
  int count = 0;
  int seeds = 5;
};

void add_config_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.settings, "override one config key (key=value), repeatable");
  cmd->add_option("--seed", o.seed, "random seed");
}

void add_toggle_flag(CLI::App* cmd, Options& o) {
  cmd->add_option("--toggle", o.toggles, "dmaf|gate|ma|iafc=on|off, repeatable");
}

void add_iou_flag(CLI::App* cmd, Options& o) {
  cmd->add_option("--iou", o.iou, "evaluation IoU threshold")->check(CLI::IsMember({"0.5", "0.75"}));
}

void apply_pair(TrainConfig& config, const std::string& pair, const char* flag) {
  const auto eq = pair.find('=');
  if (eq == std::string::npos) throw ParseError(std::string(flag) + " expects key=value, got '" + pair + "'");
  apply_setting(config, pair.substr(0, eq), pair.substr(eq + 1));
}

// Base values, then the config file, then the flags.
TrainConfig resolve_config(const Options& o, TrainConfig base) {
  TrainConfig c = o.config.empty() ? base : load_config(o.config, base);
  for (const auto& s : o.settings) apply_pair(c, s, "--set");
  for (const auto& t : o.toggles) {
    const auto eq = t.find('=');
    const std::string key = t.substr(0, eq);
    if (eq == std::string::npos || (key != "dmaf" && key != "gate" && key != "ma" && key != "iafc")) {
      throw ParseError("--toggle expects dmaf|gate|ma|iafc=on|off, got '" + t + "'");
    }
    apply_pair(c, t, "--toggle");
  }
  if (o.seed) c.seed = *o.seed;
  if (!o.iou.empty()) c.eval_iou = std::stod(o.iou);
  c.validate();
  return c;
}

std::vector<SyntheticScene> scenes_or_synthetic(const std::string& dataset, int n, std::uint64_t seed,
                                                const SynthParams& params) {
  if (!dataset.empty()) return load_dataset(dataset);
  return synth_generate(n, seed, params);
}

void require(const std::string& value, const char* flag, const char* cmd) {
  if (value.empty()) throw ParseError(std::string(cmd) + " needs " + flag);
}

int run_synth_gen(const Options& o) {
  require(o.out, "--out", "synth-gen");
  const auto c = resolve_config(o, TrainConfig{});
  const int n = o.count > 0 ? o.count : c.train_scenes;
  const auto scenes = synth_generate(n, c.seed, c.synth);
  save_dataset(o.out, scenes);
  std::printf("wrote %d scenes to %s\n", n, o.out.c_str());
  return 0;
}

int run_train(const Options& o) {
  require(o.out, "--out", "train");
  const auto c = resolve_config(o, TrainConfig{});
  const auto scenes = scenes_or_synthetic(o.dataset, c.train_scenes, train_scene_seed(c.seed), c.synth);
  const auto result = train(c, scenes, [](const EpochLog& e) {
    std::printf("epoch %d total %.5f illum %.5f cls0 %.5f cls1 %.5f reg0 %.5f reg1 %.5f\n", e.epoch, e.total,
                e.illum, e.cls0, e.cls1, e.reg0, e.reg1);
    std::fflush(stdout);
  });
  save_run(o.out, c, result);
  std::printf("checkpoint written to %s\n", o.out.c_str());
  return 0;
}

int run_detect(const Options& o) {
  require(o.out, "--out", "detect");
  require(o.dataset, "--dataset", "detect");
  if (o.checkpoints.size() != 1) throw ParseError("detect needs exactly one --checkpoint");
  const auto run = load_run(o.checkpoints.front());
  const auto scenes = load_dataset(o.dataset);
  write_detections_csv(o.out, detect_scenes(run.params, run.config.model, scenes));
  std::printf("detections for %zu scenes written to %s\n", scenes.size(), o.out.c_str());
  return 0;
}

int run_eval(const Options& o) {
  require(o.dataset, "--dataset", "eval");
  const auto scenes = load_dataset(o.dataset);
  DetectionTable dets;
  if (!o.detections.empty() && o.checkpoints.empty()) {
    dets = read_detections_csv(o.detections);
  } else if (o.detections.empty() && o.checkpoints.size() == 1) {
    const auto run = load_run(o.checkpoints.front());
    dets = detect_scenes(run.params, run.config.model, scenes);
  } else {
    throw ParseError("eval needs either --detections or one --checkpoint");
  }
  const auto curve = evaluate(dets, scenes, o.iou.empty() ? 0.5 : std::stod(o.iou));
  if (!o.out.empty()) {
    std::ofstream out(o.out);
    write_curve_csv(out, curve);
    if (!out) throw Error("cannot write " + o.out);
  }
  std::printf("MR2=%.2f\n", curve.mr2);
  return 0;
}

int run_gradcheck(const Options& o) {
  GradCheckOptions options;
  if (o.seed) options.seed = *o.seed;
  bool ok = true;
  for (const auto& c : run_gradient_suite(options)) {
    std::printf("%-36s %s max rel err %.3e  probes %zu  nonsmooth %zu  %.2fs\n", c.name.c_str(),
                c.passed() ? "ok  " : "FAIL", c.report.worst(), c.report.probed(), c.report.nonsmooth(), c.seconds);
    ok = ok && c.passed();
  }
  std::printf("%s\n", ok ? "all gradients match" : "gradient mismatch");
  return ok ? 0 : 1;
}

void write_histograms(const fs::path& dir, const std::string& label, const RedundancyReport& report) {
  for (int s = 0; s < 4; ++s) {
    const std::string stage = "s" + std::to_string(s + kFirstStage);
    std::ofstream ch(dir / (label + "_" + stage + "_channel.csv"));
    write_histogram_csv(ch, report.channel[s]);
    std::ofstream fe(dir / (label + "_" + stage + "_feature.csv"));
    write_histogram_csv(fe, report.feature[s]);
    if (!ch || !fe) throw Error("cannot write histograms in " + dir.string());
  }
}

int run_redundancy(const Options& o) {
  require(o.out, "--out", "redundancy");
  struct Entry {
    std::string label;
    TrainConfig config;
    ParamStore<float> params;
  };
  std::vector<Entry> entries;
  std::uint64_t seed = 1;
  SynthParams synth;
  int test_scenes = 0;
  if (o.checkpoints.empty()) {
    // No checkpoints: train the baseline and the +DMAF model on the benchmark.
    const auto base = resolve_config(o, desk_benchmark());
    seed = base.seed;
    synth = base.synth;
    test_scenes = base.test_scenes;
    const auto train_set = synth_generate(base.train_scenes, train_scene_seed(seed), base.synth);
    for (const auto& row : ablation_rows()) {
      if (row.name != "baseline" && row.name != "+DMAF") continue;
      TrainConfig c = base;
      c.model.toggles = row.toggles;
      std::printf("training %s\n", row.name.c_str());
      std::fflush(stdout);
      entries.push_back({row.name == "baseline" ? "baseline" : "dmaf", c, train(c, train_set).params});
    }
  } else {
    for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
      auto run = load_run(o.checkpoints[i]);
      std::string label = run.config.model.toggles.dmaf ? "dmaf" : "baseline";
      if (o.checkpoints.size() > 2 || (i == 1 && entries[0].label == label)) label += std::to_string(i);
      seed = run.config.seed;
      synth = run.config.synth;
      test_scenes = run.config.test_scenes;
      entries.push_back({label, run.config, std::move(run.params)});
    }
  }
  const auto scenes = scenes_or_synthetic(o.dataset, test_scenes, test_scene_seed(seed), synth);
  fs::create_directories(o.out);
  for (const auto& e : entries) {
    const auto report = measure_redundancy(e.params, e.config.model, scenes);
    write_histograms(o.out, e.label, report);
    std::printf("%-10s mean channel |rho| %.4f  per stage", e.label.c_str(), report.mean_channel_rho());
    for (const auto& h : report.channel) std::printf(" %.4f", h.mean_abs_rho);
    std::printf("\n");
  }
  return 0;
}

int run_ablate(const Options& o) {
  require(o.out, "--out", "ablate");
  if (o.seeds < 1) throw ParseError("--seeds must be positive");
  const auto base = resolve_config(o, desk_benchmark());
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < o.seeds; ++i) seeds.push_back(base.seed + static_cast<std::uint64_t>(i));
  const auto rows = ablation_rows();
  const auto runs = run_ablation(base, seeds, rows, [](const AblationRun& r) {
    std::printf("%-14s seed %llu  MR2=%.2f  |rho| %.4f  loss %.4f  %.1fs\n", r.row.c_str(),
                static_cast<unsigned long long>(r.seed), r.mr2, r.mean_rho, r.final_loss, r.seconds);
    std::fflush(stdout);
  });
  const auto summary = summarize_ablation(runs, rows, seeds);
  std::ofstream out(o.out);
  write_ablation_csv(out, summary);
  const fs::path runs_path = fs::path(o.out).replace_extension(".runs.csv");
  std::ofstream runs_out(runs_path);
  write_runs_csv(runs_out, runs);
  if (!out || !runs_out) throw Error("cannot write " + o.out);
  write_ablation_csv(std::cout, summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbfuse: multispectral pedestrian detection with differential modality fusion"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dual-modality dataset");
  add_config_flags(synth, o);
  synth->add_option("--out", o.out, "output dataset directory");
  synth->add_option("--count", o.count, "number of scenes (default: train_scenes)");

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint plus log");
  add_config_flags(train_cmd, o);
  add_toggle_flag(train_cmd, o);
  train_cmd->add_option("--dataset", o.dataset, "dataset directory (default: synthetic from the seed)");
  train_cmd->add_option("--out", o.out, "checkpoint directory");

  auto* detect = app.add_subcommand("detect", "write detections for a dataset");
  detect->add_option("--checkpoint", o.checkpoints, "checkpoint directory");
  detect->add_option("--dataset", o.dataset, "dataset directory");
  detect->add_option("--out", o.out, "detection CSV");

  auto* eval = app.add_subcommand("eval", "log-average miss rate on the reasonable subset");
  eval->add_option("--dataset", o.dataset, "dataset directory with annotations");
  eval->add_option("--detections", o.detections, "detection CSV");
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint to run instead of a detection CSV");
  eval->add_option("--out", o.out, "curve CSV (fppi,miss_rate)");
  add_iou_flag(eval, o);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_option("--seed", o.seed, "probe and parameter seed");

  auto* red = app.add_subcommand("redundancy", "|rho| histograms per stage, baseline vs DMAF");
  add_config_flags(red, o);
  red->add_option("--checkpoint", o.checkpoints, "checkpoint directories (default: train both)");
  red->add_option("--dataset", o.dataset, "dataset directory (default: synthetic test set)");
  red->add_option("--out", o.out, "output directory");

  auto* ablate = app.add_subcommand("ablate", "toggle matrix on the synthetic benchmark");
  add_config_flags(ablate, o);
  add_iou_flag(ablate, o);
  ablate->add_option("--seeds", o.seeds, "number of consecutive seeds, starting at --seed");
  ablate->add_option("--out", o.out, "summary CSV; per-run rows go next to it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*synth) return run_synth_gen(o);
    if (*train_cmd) return run_train(o);
    if (*detect) return run_detect(o);
    if (*eval) return run_eval(o);
    if (*grad) return run_gradcheck(o);
    if (*red) return run_redundancy(o);
    if (*ablate) return run_ablate(o);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
