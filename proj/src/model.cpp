#include "mbfuse/model.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace mbfuse {

BackboneConfig ModelConfig::backbone() const {
  BackboneConfig b;
  b.channels = channels;
  b.blocks_per_stage = blocks_per_stage;
  b.dmaf = toggles.dmaf;
  return b;
}

std::vector<Extent> ModelConfig::stage_extents() const {
  std::vector<Extent> out;
  for (int s = 0; s < kStageCount; ++s) out.push_back({input_h >> (s + 1), input_w >> (s + 1)});
  return out;
}

void ModelConfig::validate() const {
  if (input_h <= 0 || input_w <= 0 || input_h % 16 != 0 || input_w % 16 != 0) {
    throw Error("input extents must be positive multiples of 16");
  }
  for (int c : channels) {
    if (c <= 0) throw Error("channel plan entries must be positive");
  }
  if (blocks_per_stage < 1) throw Error("blocks_per_stage must be at least 1");
  if (!(ap_lo < ap_hi) || !(iafc_lo < iafc_hi)) throw Error("IoU thresholds need lo < hi");
  if (align_compress < 1) throw Error("align_compress must be positive");
}

namespace {

std::string axis_name(NormAxis a) {
  switch (a) {
    case NormAxis::kPosition: return "position";
    case NormAxis::kChannel: return "channel";
    case NormAxis::kMap: return "map";
  }
  return "position";
}

NormAxis parse_axis(const std::string& s) {
  if (s == "position") return NormAxis::kPosition;
  if (s == "channel") return NormAxis::kChannel;
  if (s == "map") return NormAxis::kMap;
  throw ParseError("unknown gate_axis '" + s + "'");
}

std::string num(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

const std::string& require(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw ParseError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_metadata() const {
  std::map<std::string, std::string> m;
  m["input_h"] = std::to_string(input_h);
  m["input_w"] = std::to_string(input_w);
  m["channels"] = std::to_string(channels[0]) + "," + std::to_string(channels[1]) + "," +
                  std::to_string(channels[2]) + "," + std::to_string(channels[3]);
  m["blocks_per_stage"] = std::to_string(blocks_per_stage);
  m["dmaf"] = toggles.dmaf ? "on" : "off";
  m["gate"] = toggles.gate ? "on" : "off";
  m["ma"] = toggles.ma ? "on" : "off";
  m["iafc"] = toggles.iafc ? "on" : "off";
  m["clamp_gate"] = illum.clamp_gate ? "on" : "off";
  m["gate_norm"] = num(gate_norm);
  m["gate_axis"] = axis_name(gate_axis);
  m["align_compress"] = std::to_string(align_compress);
  m["focal_alpha"] = num(focal_alpha);
  m["focal_gamma"] = num(focal_gamma);
  m["ap_iou"] = num(ap_lo) + "," + num(ap_hi);
  m["iafc_iou"] = num(iafc_lo) + "," + num(iafc_hi);
  return m;
}

ModelConfig ModelConfig::from_metadata(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  auto on = [&](const std::string& key) { return require(meta, key) == "on"; };
  auto pair = [&](const std::string& key, double& lo, double& hi) {
    const std::string& v = require(meta, key);
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw ParseError("bad pair for " + key);
    lo = std::stod(v.substr(0, comma));
    hi = std::stod(v.substr(comma + 1));
  };
  c.input_h = std::stoi(require(meta, "input_h"));
  c.input_w = std::stoi(require(meta, "input_w"));
  std::stringstream ch(require(meta, "channels"));
  std::string part;
  for (int i = 0; i < 4; ++i) {
    if (!std::getline(ch, part, ',')) throw ParseError("channels needs four entries");
    c.channels[i] = std::stoi(part);
  }
  c.blocks_per_stage = std::stoi(require(meta, "blocks_per_stage"));
  c.toggles = {on("dmaf"), on("gate"), on("ma"), on("iafc")};
  c.illum.clamp_gate = on("clamp_gate");
  c.gate_norm = std::stod(require(meta, "gate_norm"));
  c.gate_axis = parse_axis(require(meta, "gate_axis"));
  c.align_compress = std::stoi(require(meta, "align_compress"));
  c.focal_alpha = std::stod(require(meta, "focal_alpha"));
  c.focal_gamma = std::stod(require(meta, "focal_gamma"));
  pair("ap_iou", c.ap_lo, c.ap_hi);
  pair("iafc_iou", c.iafc_lo, c.iafc_hi);
  c.validate();
  return c;
}

std::string stage_prefix(const char* head, int stage_index) {
  return std::string(head) + ".s" + std::to_string(stage_index + kFirstStage);
}

template <typename T>
ParamStore<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore<T> store;
  Rng root(seed);
  Rng bb_rng = root.fork(1), illum_rng = root.fork(2), ma_rng = root.fork(3), ap_rng = root.fork(4),
      iafc_rng = root.fork(5);
  init_backbone(store, config.backbone(), bb_rng);
  if (config.toggles.needs_illumination()) init_illumination(store, illum_rng, config.illum);
  for (int s = 0; s < kStageCount; ++s) {
    const int c = config.channels[s];
    if (config.toggles.ma) init_align(store, stage_prefix("ma", s), c, config.align_compress, ma_rng);
    init_ap_stage(store, stage_prefix("ap", s), c, ap_rng);
    if (config.toggles.iafc) init_iafc_stage(store, stage_prefix("iafc", s), c, iafc_rng);
  }
  return store;
}

template <typename T>
ModelOutput<T> model_forward(Var<T> rgb, Var<T> thermal, ParamBinding<T>& params, const ModelConfig& config) {
  ModelOutput<T> out;
  out.backbone = backbone_forward(rgb, thermal, params, config.backbone());
  if (config.toggles.needs_illumination()) {
    out.illum = illum_forward(rgb, params, config.illum);
    out.has_illum = true;
  }
  for (int s = 0; s < kStageCount; ++s) {
    DualFeature<T> f = out.backbone[s];
    if (config.toggles.gate) f = gate_apply(f, out.illum.w_r, out.illum.w_t, config.gate_norm, config.gate_axis);
    if (config.toggles.ma) {
      out.offsets.push_back(predict_offsets(f, params, stage_prefix("ma", s)));
      f = align(f, out.offsets.back());
    }
    out.head_input.push_back(f);
    out.ap.push_back(ap_stage(f, params, stage_prefix("ap", s)));
    if (config.toggles.iafc) {
      out.iafc.push_back(iafc_stage(f, out.ap.back().fused, out.illum.w_r, out.illum.w_t, params,
                                    stage_prefix("iafc", s)));
    }
  }
  return out;
}

template <typename T>
std::vector<double> gather_scores(std::span<const Var<T>> maps, int image) {
  std::vector<double> out;
  for (const auto& m : maps) {
    const Shape& s = m.shape();
    const std::size_t len = static_cast<std::size_t>(s.c()) * s.h() * s.w();
    const T* src = m.value().raw() + static_cast<std::size_t>(image) * len;
    out.insert(out.end(), src, src + len);
  }
  return out;
}

template <typename T>
std::vector<BoxDelta> gather_deltas(std::span<const Var<T>> maps, int image) {
  std::vector<BoxDelta> out;
  for (const auto& m : maps) {
    const Shape& s = m.shape();
    const int a_count = s.c() / 4;
    const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
    const T* src = m.value().raw() + static_cast<std::size_t>(image) * s.c() * plane;
    for (int a = 0; a < a_count; ++a) {
      for (std::size_t p = 0; p < plane; ++p) {
        BoxDelta d;
        for (int k = 0; k < 4; ++k) d[k] = src[(static_cast<std::size_t>(4 * a + k)) * plane + p];
        out.push_back(d);
      }
    }
  }
  return out;
}

namespace {

template <typename T, typename Member>
std::vector<Var<T>> collect(const std::vector<ApOutput<T>>& v, Member m) {
  std::vector<Var<T>> out;
  for (const auto& x : v) out.push_back(x.*m);
  return out;
}

template <typename T, typename Member>
std::vector<Var<T>> collect(const std::vector<IafcOutput<T>>& v, Member m) {
  std::vector<Var<T>> out;
  for (const auto& x : v) out.push_back(x.*m);
  return out;
}

// Scatters per-anchor values of every image into tensors shaped like `maps`
// (slots per anchor = 1 for scores, 4 for deltas).
template <typename T>
class MapWriter {
 public:
  MapWriter(std::span<const Var<T>> maps, int slots) : slots_(slots) {
    for (const auto& m : maps) {
      tensors_.emplace_back(m.shape());
      const Shape& s = m.shape();
      offsets_.push_back(total_);
      total_ += static_cast<std::size_t>(s.c() / slots) * s.h() * s.w();
    }
  }

  // Anchor `i` of image `n`, slot `k`.
  T& at(int n, std::size_t i, int k = 0) {
    std::size_t s = offsets_.size() - 1;
    while (offsets_[s] > i) --s;
    const Shape& sh = tensors_[s].shape();
    const std::size_t plane = static_cast<std::size_t>(sh.h()) * sh.w();
    const std::size_t local = i - offsets_[s];
    const std::size_t a = local / plane, p = local % plane;
    const std::size_t idx = (static_cast<std::size_t>(n) * sh.c() + a * slots_ + k) * plane + p;
    return tensors_[s][idx];
  }

  std::vector<Tensor<T>>& tensors() { return tensors_; }

 private:
  int slots_;
  std::size_t total_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<Tensor<T>> tensors_;
};

template <typename T>
Var<T> stacked_focal(std::span<const Var<T>> probs, std::vector<Tensor<T>>& labels, const ModelConfig& c,
                     double normalizer) {
  Var<T> total;
  for (std::size_t s = 0; s < probs.size(); ++s) {
    auto term = focal_loss(probs[s], labels[s], c.focal_alpha, c.focal_gamma, normalizer);
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
Var<T> stacked_smooth_l1(std::span<const Var<T>> preds, std::vector<Tensor<T>>& targets,
                         std::vector<Tensor<T>>& masks, int positives) {
  if (positives == 0) return preds[0].tape().constant(Tensor<T>::scalar(T(0)));
  Var<T> total;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    auto term = smooth_l1(preds[s], targets[s], masks[s], positives);
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

}  // namespace

template <typename T>
LossParts<T> model_loss(const ModelOutput<T>& out, std::span<const ImageTargets> targets,
                        std::span<const Anchor> anchors, const ModelConfig& config) {
  const int batch = out.backbone.front().rgb.shape().n();
  if (static_cast<int>(targets.size()) != batch) throw Error("model_loss: one target set per image required");
  LossParts<T> parts;
  if (out.has_illum) {
    std::vector<std::uint8_t> day;
    for (const auto& t : targets) day.push_back(t.day ? 1 : 0);
    parts.illum = illum_loss(out.illum, day);
  }

  const auto s0 = collect(out.ap, &ApOutput<T>::s0);
  const auto t0 = collect(out.ap, &ApOutput<T>::t0);
  const auto boxes = anchor_boxes(anchors);
  const std::size_t n_anchor = anchors.size();
  const double all_anchors = static_cast<double>(n_anchor) * batch;

  MapWriter<T> labels0(s0, 1), reg_t0(t0, 4), mask0(t0, 4);
  int pos0 = 0;
  std::vector<std::vector<BoxDelta>> t0_values;
  for (int n = 0; n < batch; ++n) {
    const auto a = assign_targets(boxes, targets[n].boxes, config.ap_lo, config.ap_hi, targets[n].ignore);
    pos0 += a.positives();
    for (std::size_t i = 0; i < n_anchor; ++i) {
      labels0.at(n, i) = static_cast<T>(a.labels[i] == kIgnore ? -1 : a.labels[i]);
      if (a.labels[i] != kPositive) continue;
      for (int k = 0; k < 4; ++k) {
        reg_t0.at(n, i, k) = static_cast<T>(a.targets[i][k]);
        mask0.at(n, i, k) = T(1);
      }
    }
  }
  parts.cls0 = stacked_focal<T>(s0, labels0.tensors(), config, pos0 > 0 ? pos0 : all_anchors);
  parts.reg0 = stacked_smooth_l1<T>(t0, reg_t0.tensors(), mask0.tensors(), pos0);

  if (!out.iafc.empty()) {
    const auto s1 = collect(out.iafc, &IafcOutput<T>::s1);
    const auto t1 = collect(out.iafc, &IafcOutput<T>::t1);
    MapWriter<T> labels1(s1, 1), reg_t1(t1, 4), mask1(t1, 4);
    int pos1 = 0;
    for (int n = 0; n < batch; ++n) {
      const auto d0 = gather_deltas<T>(t0, n);
      std::vector<Box> deformed(n_anchor);
      for (std::size_t i = 0; i < n_anchor; ++i) deformed[i] = decode(boxes[i], d0[i]);
      const auto a = assign_targets(deformed, targets[n].boxes, config.iafc_lo, config.iafc_hi, targets[n].ignore);
      pos1 += a.positives();
      for (std::size_t i = 0; i < n_anchor; ++i) {
        labels1.at(n, i) = static_cast<T>(a.labels[i] == kIgnore ? -1 : a.labels[i]);
        if (a.labels[i] != kPositive) continue;
        const BoxDelta goal = encode(boxes[i], targets[n].boxes[a.matched[i]]);
        for (int k = 0; k < 4; ++k) {
          reg_t1.at(n, i, k) = static_cast<T>(goal[k]);
          mask1.at(n, i, k) = T(1);
        }
      }
    }
    parts.cls1 = stacked_focal<T>(s1, labels1.tensors(), config, pos1 > 0 ? pos1 : all_anchors);
    std::vector<Var<T>> refined;
    for (std::size_t s = 0; s < t1.size(); ++s) refined.push_back(add(t0[s], t1[s]));
    parts.reg1 = stacked_smooth_l1<T>(refined, reg_t1.tensors(), mask1.tensors(), pos1);
  }
  return parts;
}

std::vector<std::vector<Detection>> model_detect(const ModelOutput<float>& out, std::span<const Anchor> anchors,
                                                 const ModelConfig& config, const DetectOptions& options) {
  const int batch = out.backbone.front().rgb.shape().n();
  const auto s0m = collect(out.ap, &ApOutput<float>::s0);
  const auto t0m = collect(out.ap, &ApOutput<float>::t0);
  std::vector<Var<float>> srm, stm, s1m, t1m;
  if (!out.iafc.empty()) {
    srm = collect(out.iafc, &IafcOutput<float>::s_r);
    stm = collect(out.iafc, &IafcOutput<float>::s_t);
    s1m = collect(out.iafc, &IafcOutput<float>::s1);
    t1m = collect(out.iafc, &IafcOutput<float>::t1);
  }
  const double max_x = config.input_w, max_y = config.input_h;
  std::vector<std::vector<Detection>> result;
  for (int n = 0; n < batch; ++n) {
    const auto s0 = gather_scores<float>(s0m, n);
    const auto t0 = gather_deltas<float>(t0m, n);
    std::vector<double> s1, sr, st;
    std::vector<BoxDelta> t1;
    if (!s1m.empty()) {
      s1 = gather_scores<float>(s1m, n);
      sr = gather_scores<float>(srm, n);
      st = gather_scores<float>(stm, n);
      t1 = gather_deltas<float>(t1m, n);
    }
    std::vector<Detection> cands;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const CascadeResult r = s1.empty() ? fuse_cascade(anchors[i].box(), s0[i], t0[i], 1.0, BoxDelta{})
                                         : fuse_cascade(anchors[i].box(), s0[i], t0[i], s1[i], t1[i]);
      if (r.score < options.min_score) continue;
      const double x0 = std::clamp(r.box.x, 0.0, max_x), y0 = std::clamp(r.box.y, 0.0, max_y);
      const double x1 = std::clamp(r.box.x + r.box.w, 0.0, max_x), y1 = std::clamp(r.box.y + r.box.h, 0.0, max_y);
      if (x1 - x0 < 1.0 || y1 - y0 < 1.0) continue;
      Detection d;
      d.box = {x0, y0, x1 - x0, y1 - y0};
      d.score = r.score;
      d.s0 = s0[i];
      if (!s1.empty()) {
        d.s1 = s1[i];
        d.s_r = sr[i];
        d.s_t = st[i];
      }
      d.stage = anchors[i].stage;
      d.anchor = static_cast<int>(i);
      cands.push_back(d);
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(cands.size()) > options.pre_nms_top) cands.resize(options.pre_nms_top);
    auto kept = nms(cands, options.nms_iou);
    if (static_cast<int>(kept.size()) > options.max_detections) kept.resize(options.max_detections);
    result.push_back(std::move(kept));
  }
  return result;
}

#define MBFUSE_INSTANTIATE_MODEL(T)                                                                         \
  template ParamStore<T> init_model(const ModelConfig&, std::uint64_t);                                     \
  template ModelOutput<T> model_forward(Var<T>, Var<T>, ParamBinding<T>&, const ModelConfig&);              \
  template std::vector<double> gather_scores(std::span<const Var<T>>, int);                                 \
  template std::vector<BoxDelta> gather_deltas(std::span<const Var<T>>, int);                               \
  template LossParts<T> model_loss(const ModelOutput<T>&, std::span<const ImageTargets>, std::span<const Anchor>, \
                                   const ModelConfig&);

MBFUSE_INSTANTIATE_MODEL(float)
MBFUSE_INSTANTIATE_MODEL(double)

}  // namespace mbfuse
