#include "mbfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mbfuse {

void TrainConfig::validate() const {
  model.validate();
  synth.validate();
  if (!(lr >= 0.0)) throw Error("lr must be non-negative");
  if (epochs < 0) throw Error("epochs must be non-negative");
  if (batch_size < 1) throw Error("batch_size must be positive");
  if (!(crop_min > 0.0 && crop_min <= 1.0)) throw Error("crop_min must lie in (0, 1]");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw Error("flip_prob must lie in [0, 1]");
  if (train_scenes < 1 || test_scenes < 1) throw Error("scene counts must be positive");
  if (!(eval_iou > 0.0 && eval_iou <= 1.0)) throw Error("eval_iou must lie in (0, 1]");
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ParseError(key + ": expected on/off, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ParseError(key + ": expected a number, got '" + v + "'");
  return out;
}

long parse_int(const std::string& key, const std::string& v) {
  const double d = parse_double(key, v);
  if (d != std::floor(d)) throw ParseError(key + ": expected an integer, got '" + v + "'");
  return static_cast<long>(d);
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(part);
  return out;
}

void parse_pair(const std::string& key, const std::string& v, double& lo, double& hi) {
  const auto parts = split(v, ',');
  if (parts.size() != 2) throw ParseError(key + ": expected 'lo,hi'");
  lo = parse_double(key, parts[0]);
  hi = parse_double(key, parts[1]);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

}  // namespace

void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  ModelConfig& m = c.model;
  SynthParams& s = c.synth;
  if (key == "input_h") {
    m.input_h = s.height = static_cast<int>(parse_int(key, v));
  } else if (key == "input_w") {
    m.input_w = s.width = static_cast<int>(parse_int(key, v));
  } else if (key == "channels") {
    const auto parts = split(v, ',');
    if (parts.size() != 4) throw ParseError("channels: expected four comma-separated widths");
    for (int i = 0; i < 4; ++i) m.channels[i] = static_cast<int>(parse_int(key, parts[i]));
  } else if (key == "blocks_per_stage") {
    m.blocks_per_stage = static_cast<int>(parse_int(key, v));
  } else if (key == "dmaf") {
    m.toggles.dmaf = parse_bool(key, v);
  } else if (key == "gate") {
    m.toggles.gate = parse_bool(key, v);
  } else if (key == "ma") {
    m.toggles.ma = parse_bool(key, v);
  } else if (key == "iafc") {
    m.toggles.iafc = parse_bool(key, v);
  } else if (key == "clamp_gate") {
    m.illum.clamp_gate = parse_bool(key, v);
  } else if (key == "gate_norm") {
    m.gate_norm = parse_double(key, v);
  } else if (key == "gate_axis") {
    auto meta = m.to_metadata();
    meta["gate_axis"] = v;
    m.gate_axis = ModelConfig::from_metadata(meta).gate_axis;
  } else if (key == "align_compress") {
    m.align_compress = static_cast<int>(parse_int(key, v));
  } else if (key == "focal_alpha") {
    m.focal_alpha = parse_double(key, v);
  } else if (key == "focal_gamma") {
    m.focal_gamma = parse_double(key, v);
  } else if (key == "ap_iou") {
    parse_pair(key, v, m.ap_lo, m.ap_hi);
  } else if (key == "iafc_iou") {
    parse_pair(key, v, m.iafc_lo, m.iafc_hi);
  } else if (key == "lr") {
    c.lr = parse_double(key, v);
  } else if (key == "epochs") {
    c.epochs = static_cast<int>(parse_int(key, v));
  } else if (key == "batch_size") {
    c.batch_size = static_cast<int>(parse_int(key, v));
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_int(key, v));
  } else if (key == "augment") {
    c.augment = parse_bool(key, v);
  } else if (key == "crop_min") {
    c.crop_min = parse_double(key, v);
  } else if (key == "flip_prob") {
    c.flip_prob = parse_double(key, v);
  } else if (key == "train_scenes") {
    c.train_scenes = static_cast<int>(parse_int(key, v));
  } else if (key == "test_scenes") {
    c.test_scenes = static_cast<int>(parse_int(key, v));
  } else if (key == "eval_iou") {
    c.eval_iou = parse_double(key, v);
  } else if (key == "day_fraction") {
    s.day_fraction = parse_double(key, v);
  } else if (key == "min_people") {
    s.min_people = static_cast<int>(parse_int(key, v));
  } else if (key == "max_people") {
    s.max_people = static_cast<int>(parse_int(key, v));
  } else if (key == "min_height") {
    s.min_height = parse_double(key, v);
  } else if (key == "max_height") {
    s.max_height = parse_double(key, v);
  } else if (key == "contrast_floor") {
    s.contrast_floor = parse_double(key, v);
  } else if (key == "misalign_dx") {
    s.misalign_dx = parse_double(key, v);
  } else if (key == "misalign_dy") {
    s.misalign_dy = parse_double(key, v);
  } else if (key == "clutter") {
    s.clutter = static_cast<int>(parse_int(key, v));
  } else if (key == "noise") {
    s.noise = parse_double(key, v);
  } else {
    throw ParseError("unknown config key '" + key + "'");
  }
}

TrainConfig parse_config(std::istream& in, const std::string& source, TrainConfig base) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    try {
      apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ParseError& e) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  return parse_config(in, path, std::move(base));
}

std::string config_text(const TrainConfig& c) {
  std::ostringstream out;
  const auto meta = c.model.to_metadata();
  for (const auto& [k, v] : meta) out << k << " = " << v << '\n';
  out << "lr = " << fmt(c.lr) << '\n'
      << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "seed = " << c.seed << '\n'
      << "augment = " << (c.augment ? "on" : "off") << '\n'
      << "crop_min = " << fmt(c.crop_min) << '\n'
      << "flip_prob = " << fmt(c.flip_prob) << '\n'
      << "train_scenes = " << c.train_scenes << '\n'
      << "test_scenes = " << c.test_scenes << '\n'
      << "eval_iou = " << fmt(c.eval_iou) << '\n'
      << "day_fraction = " << fmt(c.synth.day_fraction) << '\n'
      << "min_people = " << c.synth.min_people << '\n'
      << "max_people = " << c.synth.max_people << '\n'
      << "min_height = " << fmt(c.synth.min_height) << '\n'
      << "max_height = " << fmt(c.synth.max_height) << '\n'
      << "contrast_floor = " << fmt(c.synth.contrast_floor) << '\n'
      << "misalign_dx = " << fmt(c.synth.misalign_dx) << '\n'
      << "misalign_dy = " << fmt(c.synth.misalign_dy) << '\n'
      << "clutter = " << c.synth.clutter << '\n'
      << "noise = " << fmt(c.synth.noise) << '\n';
  return out.str();
}

namespace {

// Crops (C, H, W) to [x0, x0 + cw) x [y0, y0 + ch).
Tensor<float> crop(const Tensor<float>& img, int x0, int y0, int cw, int ch) {
  const int c = img.shape().dims()[0], w = img.shape().dims()[2], h = img.shape().dims()[1];
  Tensor<float> out(Shape{c, ch, cw});
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < ch; ++y) {
      const float* src = img.raw() + (static_cast<std::size_t>(k) * h + y0 + y) * w + x0;
      std::copy(src, src + cw, out.raw() + (static_cast<std::size_t>(k) * ch + y) * cw);
    }
  }
  return out;
}

Tensor<float> resize3(const Tensor<float>& img, int h, int w) {
  const auto& d = img.shape().dims();
  if (d[1] == h && d[2] == w) return img;
  return resize_bilinear(img.reshaped(Shape{1, d[0], d[1], d[2]}), h, w).reshaped(Shape{d[0], h, w});
}

void flip(Tensor<float>& img) {
  const auto& d = img.shape().dims();
  for (int k = 0; k < d[0] * d[1]; ++k) {
    float* row = img.raw() + static_cast<std::size_t>(k) * d[2];
    std::reverse(row, row + d[2]);
  }
}

}  // namespace

TrainSample prepare_sample(const SyntheticScene& scene, int h, int w, Rng* rng, double crop_min, double flip_prob) {
  const int src_h = scene.rgb.shape().dims()[1], src_w = scene.rgb.shape().dims()[2];
  Box window{0.0, 0.0, static_cast<double>(src_w), static_cast<double>(src_h)};
  TrainSample out;
  out.targets.day = scene.day;
  Tensor<float> rgb = scene.rgb, thermal = scene.thermal;
  if (rng && crop_min < 1.0) {
    const double s = rng->uniform(crop_min, 1.0);
    const int cw = std::clamp(static_cast<int>(std::lround(s * src_w)), 1, src_w);
    const int ch = std::clamp(static_cast<int>(std::lround(s * src_h)), 1, src_h);
    const int x0 = static_cast<int>(rng->below(static_cast<std::uint64_t>(src_w - cw + 1)));
    const int y0 = static_cast<int>(rng->below(static_cast<std::uint64_t>(src_h - ch + 1)));
    window = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(cw), static_cast<double>(ch)};
    rgb = crop(rgb, x0, y0, cw, ch);
    thermal = crop(thermal, x0, y0, cw, ch);
  }
  out.rgb = resize3(rgb, h, w);
  out.thermal = resize3(thermal, h, w);
  const double sx = w / window.w, sy = h / window.h;
  const bool mirrored = rng && rng->bernoulli(flip_prob);
  if (mirrored) {
    flip(out.rgb);
    flip(out.thermal);
  }
  for (const auto& g : scene.boxes) {
    const double x0 = std::max(g.box.x, window.x), y0 = std::max(g.box.y, window.y);
    const double x1 = std::min(g.box.x + g.box.w, window.x + window.w);
    const double y1 = std::min(g.box.y + g.box.h, window.y + window.h);
    if (x1 <= x0 || y1 <= y0) continue;
    Box b{(x0 - window.x) * sx, (y0 - window.y) * sy, (x1 - x0) * sx, (y1 - y0) * sy};
    if (mirrored) b.x = w - b.x - b.w;
    const bool mostly_visible = (x1 - x0) * (y1 - y0) >= 0.5 * g.box.area();
    if (g.ignore || !mostly_visible) {
      out.targets.ignore.push_back(b);
    } else {
      out.targets.boxes.push_back(b);
    }
  }
  return out;
}

Batch stack_samples(const std::vector<TrainSample>& samples) {
  if (samples.empty()) throw Error("stack_samples: empty batch");
  const auto& d = samples.front().rgb.shape().dims();
  const int n = static_cast<int>(samples.size()), h = d[1], w = d[2];
  Batch b;
  b.rgb = Tensor<float>(Shape{n, 3, h, w});
  b.thermal = Tensor<float>(Shape{n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[i];
    std::copy(s.rgb.data().begin(), s.rgb.data().end(), b.rgb.raw() + static_cast<std::size_t>(i) * s.rgb.numel());
    std::copy(s.thermal.data().begin(), s.thermal.data().end(),
              b.thermal.raw() + static_cast<std::size_t>(i) * s.thermal.numel());
    b.targets.push_back(s.targets);
  }
  return b;
}

void write_train_log(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,total,illum,cls0,cls1,reg0,reg1\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.total, e.illum, e.cls0, e.cls1,
                  e.reg0, e.reg1);
    out << buf;
  }
}

void Adam::step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads) {
  if (grads.size() != params.size()) throw Error("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params.at(i).numel(), 0.0);
      v_.emplace_back(params.at(i).numel(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float>& p = params.at(i);
    const Tensor<float>& g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = g[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
}

StepLoss loss_and_gradients(const ParamStore<float>& params, const ModelConfig& config, const Batch& batch,
                            std::span<const Anchor> anchors, std::vector<Tensor<float>>* grads) {
  Tape<float> tape;
  ParamBinding<float> binding(tape, params, grads != nullptr);
  const auto rgb = tape.constant(batch.rgb);
  const auto thermal = tape.constant(batch.thermal);
  const auto out = model_forward(rgb, thermal, binding, config);
  const auto parts = model_loss<float>(out, batch.targets, anchors, config);
  const auto total = total_loss(parts, tape);
  auto value = [](const Var<float>& v) { return v.valid() ? static_cast<double>(v.value()[0]) : 0.0; };
  StepLoss loss{value(total), value(parts.illum), value(parts.cls0), value(parts.cls1), value(parts.reg0),
                value(parts.reg1)};
  if (grads) {
    tape.backward(total);
    *grads = binding.gradients();
  }
  return loss;
}

TrainResult train(const TrainConfig& config, const std::vector<SyntheticScene>& scenes, const EpochCallback& on_epoch) {
  config.validate();
  if (scenes.empty()) throw Error("train: no training scenes");
  const ModelConfig& mc = config.model;
  TrainResult result;
  result.params = init_model<float>(mc, config.seed);
  const auto anchors = gen_anchors(mc.stage_extents(), {mc.input_h, mc.input_w}, mc.anchors);
  Adam adam(config.lr);
  Rng root(config.seed ^ 0x5851F42D4C957F2DULL);
  std::vector<std::size_t> order(scenes.size());
  std::vector<Tensor<float>> grads;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng = root.fork(static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochLog log;
    log.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<TrainSample> samples;
      for (std::size_t k = start; k < stop; ++k) {
        samples.push_back(prepare_sample(scenes[order[k]], mc.input_h, mc.input_w, config.augment ? &rng : nullptr,
                                         config.crop_min, config.flip_prob));
      }
      StepLoss loss;
      try {
        loss = loss_and_gradients(result.params, mc, stack_samples(samples), anchors, &grads);
        adam.step(result.params, grads);
        for (std::size_t i = 0; i < result.params.size(); ++i) {
          if (!result.params.at(i).all_finite()) throw NumericError("parameter " + result.params.names()[i]);
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches + 1) + ": " + e.what());
      }
      log.total += loss.total;
      log.illum += loss.illum;
      log.cls0 += loss.cls0;
      log.cls1 += loss.cls1;
      log.reg0 += loss.reg0;
      log.reg1 += loss.reg1;
      ++batches;
    }
    for (double* v : {&log.total, &log.illum, &log.cls0, &log.cls1, &log.reg0, &log.reg1}) *v /= batches;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace mbfuse
