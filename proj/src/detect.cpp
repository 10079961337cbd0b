#include "mbfuse/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace mbfuse {

std::vector<Anchor> gen_anchors(std::span<const Extent> stage_extents, Extent input, const AnchorPlan& plan) {
  if (stage_extents.size() != plan.widths.size()) throw Error("gen_anchors: expected four stage extents");
  const double scale = input.w / plan.reference_width;
  std::vector<Anchor> anchors;
  for (std::size_t s = 0; s < stage_extents.size(); ++s) {
    const Extent e = stage_extents[s];
    if (e.h <= 0 || e.w <= 0) throw Error("gen_anchors: empty stage extent");
    const double stride_y = static_cast<double>(input.h) / e.h;
    const double stride_x = static_cast<double>(input.w) / e.w;
    for (int a = 0; a < AnchorPlan::kPerCell; ++a) {
      const double w = plan.widths[s][a] * scale;
      const double h = w / plan.ratio;
      for (int y = 0; y < e.h; ++y) {
        for (int x = 0; x < e.w; ++x) {
          anchors.push_back({(x + 0.5) * stride_x, (y + 0.5) * stride_y, w, h, kFirstStage + static_cast<int>(s),
                             static_cast<int>(anchors.size())});
        }
      }
    }
  }
  return anchors;
}

std::vector<Box> anchor_boxes(std::span<const Anchor> anchors) {
  std::vector<Box> out;
  out.reserve(anchors.size());
  for (const auto& a : anchors) out.push_back(a.box());
  return out;
}

int TargetAssignment::positives() const {
  return static_cast<int>(std::count(labels.begin(), labels.end(), static_cast<std::int8_t>(kPositive)));
}

TargetAssignment assign_targets(std::span<const Box> anchors, std::span<const Box> gts, double lo, double hi,
                                std::span<const Box> ignore_regions) {
  if (!(lo < hi)) throw Error("assign_targets: lo must be below hi");
  const std::size_t n = anchors.size();
  TargetAssignment out;
  out.labels.assign(n, kNegative);
  out.matched.assign(n, -1);
  out.targets.assign(n, BoxDelta{});

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<int> gt_anchor(gts.size(), -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(g);
      }
      if (v > gt_best[g]) {
        gt_best[g] = v;
        gt_anchor[g] = static_cast<int>(i);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (best_gt[i] >= 0 && best_iou[i] >= hi) {
      out.labels[i] = kPositive;
      out.matched[i] = best_gt[i];
    } else if (best_iou[i] >= lo) {
      out.labels[i] = kIgnore;
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const int i = gt_anchor[g];
    if (i < 0) continue;
    out.labels[i] = kPositive;
    out.matched[i] = static_cast<int>(g);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] == kPositive) {
      out.targets[i] = encode(anchors[i], gts[out.matched[i]]);
    } else if (out.labels[i] == kNegative) {
      for (const auto& region : ignore_regions) {
        if (intersection_over_first(anchors[i], region) >= 0.5) {
          out.labels[i] = kIgnore;
          break;
        }
      }
    }
  }
  return out;
}

namespace {

template <typename T>
Var<T> conv(ParamBinding<T>& p, const std::string& name, Var<T> x, int pad) {
  return conv2d(x, p(name + ".w"), p(name + ".b"), 1, pad);
}

template <typename T>
void add_score_head(ParamStore<T>& store, const std::string& name, int channels, Rng& rng) {
  constexpr int a = AnchorPlan::kPerCell;
  store.add(name + ".w", Tensor<T>::normal(Shape{a, channels, 3, 3}, rng, 0.0, 0.01));
  store.add(name + ".b", Tensor<T>::full(Shape{a}, static_cast<T>(-std::log((1.0 - kScorePrior) / kScorePrior))));
}

template <typename T>
void add_reg_head(ParamStore<T>& store, const std::string& name, int channels) {
  constexpr int a = AnchorPlan::kPerCell;
  store.add(name + ".w", Tensor<T>(Shape{4 * a, channels, 3, 3}));
  store.add(name + ".b", Tensor<T>(Shape{4 * a}));
}

}  // namespace

template <typename T>
void init_ap_stage(ParamStore<T>& store, const std::string& prefix, int channels, Rng& rng) {
  store.add(prefix + ".fuse.w", xavier_uniform<T>(Shape{channels, 2 * channels, 1, 1}, rng));
  store.add(prefix + ".fuse.b", Tensor<T>(Shape{channels}));
  add_score_head(store, prefix + ".cls", channels, rng);
  add_reg_head(store, prefix + ".reg", channels);
}

template <typename T>
void init_iafc_stage(ParamStore<T>& store, const std::string& prefix, int channels, Rng& rng) {
  add_score_head(store, prefix + ".rgb", channels, rng);
  add_score_head(store, prefix + ".thermal", channels, rng);
  add_reg_head(store, prefix + ".reg", channels);
}

template <typename T>
ApOutput<T> ap_stage(const DualFeature<T>& f, ParamBinding<T>& p, const std::string& prefix) {
  if (!(f.rgb.shape() == f.thermal.shape())) throw ShapeError("ap_stage: modality extents differ");
  const std::vector<Var<T>> parts{f.rgb, f.thermal};
  const auto fused = relu(conv(p, prefix + ".fuse", concat_channels<T>(parts), 0));
  return {fused, sigmoid(conv(p, prefix + ".cls", fused, 1)), conv(p, prefix + ".reg", fused, 1)};
}

template <typename T>
IafcOutput<T> iafc_stage(const DualFeature<T>& f, Var<T> fused, Var<T> w_r, Var<T> w_t, ParamBinding<T>& p,
                         const std::string& prefix) {
  IafcOutput<T> out;
  out.s_r = sigmoid(conv(p, prefix + ".rgb", f.rgb, 1));
  out.s_t = sigmoid(conv(p, prefix + ".thermal", f.thermal, 1));
  out.s1 = add(mul(out.s_r, w_r), mul(out.s_t, w_t));
  out.t1 = conv(p, prefix + ".reg", fused, 1);
  return out;
}

CascadeResult fuse_cascade(const Box& anchor, double s0, const BoxDelta& t0, double s1, const BoxDelta& t1) {
  CascadeResult r;
  r.score = s0 * s1;
  for (int k = 0; k < 4; ++k) r.t[k] = t0[k] + t1[k];
  r.box = decode(anchor, r.t);
  return r;
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (const std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(k.box, dets[i].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

template <typename T>
Var<T> total_loss(const LossParts<T>& parts, Tape<T>& tape) {
  Var<T> total = tape.constant(Tensor<T>::scalar(T(0)));
  for (const Var<T>* v : {&parts.illum, &parts.cls0, &parts.cls1, &parts.reg0, &parts.reg1}) {
    if (v->valid()) total = add(total, *v);
  }
  return total;
}

void write_detections_csv(std::ostream& out, const DetectionTable& dets) {
  out << "image_id,score,x,y,w,h\n";
  out << std::setprecision(9);
  for (const auto& [id, list] : dets) {
    for (const auto& d : list) {
      out << id << ',' << d.score << ',' << d.box.x << ',' << d.box.y << ',' << d.box.w << ',' << d.box.h << '\n';
    }
  }
}

void write_detections_csv(const std::string& path, const DetectionTable& dets) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_detections_csv(out, dets);
}

DetectionTable read_detections_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  DetectionTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("image_id", 0) == 0)) continue;
    std::stringstream ss(line);
    std::string id, field;
    std::array<double, 5> v{};
    if (!std::getline(ss, id, ',')) throw ParseError(path + ":" + std::to_string(line_no) + ": missing image_id");
    for (auto& x : v) {
      if (!std::getline(ss, field, ',')) throw ParseError(path + ":" + std::to_string(line_no) + ": too few fields");
      try {
        x = std::stod(field);
      } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
      }
    }
    Detection d;
    d.score = v[0];
    d.box = {v[1], v[2], v[3], v[4]};
    table[id].push_back(d);
  }
  return table;
}

#define MBFUSE_INSTANTIATE_DETECT(T)                                                                       \
  template void init_ap_stage(ParamStore<T>&, const std::string&, int, Rng&);                              \
  template void init_iafc_stage(ParamStore<T>&, const std::string&, int, Rng&);                            \
  template ApOutput<T> ap_stage(const DualFeature<T>&, ParamBinding<T>&, const std::string&);              \
  template IafcOutput<T> iafc_stage(const DualFeature<T>&, Var<T>, Var<T>, Var<T>, ParamBinding<T>&,       \
                                    const std::string&);                                                   \
  template Var<T> total_loss(const LossParts<T>&, Tape<T>&);

MBFUSE_INSTANTIATE_DETECT(float)
MBFUSE_INSTANTIATE_DETECT(double)

}  // namespace mbfuse
