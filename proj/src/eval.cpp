#include "mbfuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace mbfuse {

std::vector<GroundTruthBox> reasonable_filter(std::span<const GroundTruthBox> gts, double input_h) {
  const double min_h = kReasonableHeight * input_h / kReferenceHeight;
  std::vector<GroundTruthBox> out(gts.begin(), gts.end());
  for (auto& g : out) {
    if (g.box.h < min_h || g.occlusion == Occlusion::kHeavy) g.ignore = true;
  }
  return out;
}

MatchResult match_greedy(std::span<const Detection> dets, std::span<const GroundTruthBox> gts, double iou_thresh) {
  MatchResult r;
  r.status.assign(dets.size(), kFalsePositive);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (d > 0 && dets[d].score > dets[d - 1].score) throw Error("match_greedy: detections must be sorted by score");
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].ignore || used[g]) continue;
      const double v = iou(dets[d].box, gts[g].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[best] = true;
      r.status[d] = kTruePositive;
      ++r.tp;
      continue;
    }
    for (const auto& g : gts) {
      if (g.ignore && intersection_over_first(dets[d].box, g.box) >= iou_thresh) {
        r.status[d] = kIgnored;
        break;
      }
    }
    if (r.status[d] == kFalsePositive) ++r.fp;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!gts[g].ignore && !used[g]) ++r.missed;
  }
  return r;
}

std::array<double, 9> fppi_references() {
  std::array<double, 9> refs{};
  for (int i = 0; i < 9; ++i) refs[i] = std::pow(10.0, -2.0 + 0.25 * i);
  return refs;
}

FppiCurve log_avg_mr(std::span<const std::vector<Detection>> dets_per_image,
                     std::span<const std::vector<GroundTruthBox>> gts_per_image, double iou_thresh) {
  if (dets_per_image.size() != gts_per_image.size()) throw Error("log_avg_mr: image count mismatch");
  if (gts_per_image.empty()) throw Error("log_avg_mr: no images");
  std::size_t total_gt = 0;
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> all;
  for (std::size_t i = 0; i < gts_per_image.size(); ++i) {
    for (const auto& g : gts_per_image[i]) total_gt += g.ignore ? 0 : 1;
    std::vector<Detection> dets = dets_per_image[i];
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    const auto m = match_greedy(dets, gts_per_image[i], iou_thresh);
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (m.status[d] != kIgnored) all.push_back({dets[d].score, m.status[d] == kTruePositive});
    }
  }
  if (total_gt == 0) throw Error("log_avg_mr: no non-ignored ground truth");
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

  const double images = static_cast<double>(gts_per_image.size());
  std::vector<FppiPoint> sweep{{0.0, 1.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    (all[i].tp ? tp : fp) += 1;
    if (i + 1 == all.size() || all[i + 1].score != all[i].score) {
      sweep.push_back({fp / images, 1.0 - static_cast<double>(tp) / static_cast<double>(total_gt)});
    }
  }

  FppiCurve curve;
  double log_sum = 0.0;
  for (const double ref : fppi_references()) {
    double mr = 1.0;
    for (const auto& p : sweep) {
      if (p.fppi <= ref) mr = std::min(mr, p.miss_rate);
    }
    curve.points.push_back({ref, mr});
    log_sum += std::log(std::max(mr, 1e-10));
  }
  curve.mr2 = 100.0 * std::exp(log_sum / static_cast<double>(curve.points.size()));
  return curve;
}

void write_curve_csv(std::ostream& out, const FppiCurve& curve) {
  out << "fppi,miss_rate\n";
  for (const auto& p : curve.points) out << p.fppi << ',' << p.miss_rate << '\n';
}

double pearson_abs(std::span<const double> a, std::span<const double> b, bool* constant) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pearson_abs: vectors must be equal-length and non-empty");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (constant) *constant = true;
    return 0.0;
  }
  if (constant) *constant = false;
  return std::min(1.0, std::abs(sab) / std::sqrt(saa * sbb));
}

namespace {

void add_rho(RedundancyHistogram& h, double rho) {
  const int bin = std::min(9, static_cast<int>(rho * 10.0));
  h.proportions[bin] += 1.0;
  h.mean_abs_rho += rho;
  ++h.counted;
}

void finish(RedundancyHistogram& h) {
  if (h.counted == 0) return;
  for (auto& p : h.proportions) p /= static_cast<double>(h.counted);
  h.mean_abs_rho /= static_cast<double>(h.counted);
}

}  // namespace

RedundancyHistogram pearson_redundancy(const Tensor<float>& rgb, const Tensor<float>& thermal, RedundancyLevel level) {
  if (!(rgb.shape() == thermal.shape())) throw ShapeError("pearson_redundancy: feature shapes differ");
  const Shape& s = rgb.shape();
  int c = 0, plane = 0;
  if (s.rank() == 3) {
    c = s.dims()[0];
    plane = s.dims()[1] * s.dims()[2];
  } else if (s.rank() == 4 && s.n() == 1) {
    c = s.c();
    plane = s.h() * s.w();
  } else {
    throw ShapeError("pearson_redundancy: expected a single-image (C,H,W) map, got " + s.str());
  }
  RedundancyHistogram h;
  const bool channel = level == RedundancyLevel::kChannel;
  const int groups = channel ? plane : c;
  const int len = channel ? c : plane;
  std::vector<double> a(len), b(len);
  for (int g = 0; g < groups; ++g) {
    for (int i = 0; i < len; ++i) {
      const std::size_t idx = channel ? static_cast<std::size_t>(i) * plane + g : static_cast<std::size_t>(g) * plane + i;
      a[i] = rgb[idx];
      b[i] = thermal[idx];
    }
    bool constant = false;
    const double rho = pearson_abs(a, b, &constant);
    if (constant) {
      ++h.skipped;
    } else {
      add_rho(h, rho);
    }
  }
  finish(h);
  return h;
}

RedundancyHistogram merge_histograms(std::span<const RedundancyHistogram> parts) {
  RedundancyHistogram h;
  for (const auto& p : parts) {
    for (int i = 0; i < 10; ++i) h.proportions[i] += p.proportions[i] * static_cast<double>(p.counted);
    h.mean_abs_rho += p.mean_abs_rho * static_cast<double>(p.counted);
    h.counted += p.counted;
    h.skipped += p.skipped;
  }
  finish(h);
  return h;
}

void write_histogram_csv(std::ostream& out, const RedundancyHistogram& hist) {
  out << "bin_lo,bin_hi,proportion\n";
  for (int i = 0; i < 10; ++i) out << i / 10.0 << ',' << (i + 1) / 10.0 << ',' << hist.proportions[i] << '\n';
}

}  // namespace mbfuse
