#include "mbfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mbfuse {

void SynthParams::validate() const {
  if (height < 16 || width < 16) throw Error("synth: image extents too small");
  if (day_fraction < 0.0 || day_fraction > 1.0) throw Error("synth: day_fraction must lie in [0, 1]");
  if (min_people < 0 || max_people < min_people) throw Error("synth: bad pedestrian count range");
  if (!(min_height > 0.0 && min_height <= max_height && max_height <= 1.0)) throw Error("synth: bad height range");
  if (contrast_floor < 0.0 || contrast_floor > 0.4) {
    throw Error("synth: contrast floor unreachable (must lie in [0, 0.4])");
  }
  if (noise < 0.0) throw Error("synth: noise must be non-negative");
}

namespace {

constexpr int kSuper = 4;

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Plane(int h_, int w_, double fill) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Pedestrian silhouette in unit box coordinates (u, v in [0, 1]).
bool in_figure(double u, double v) {
  const double hu = (u - 0.5) / 0.26, hv = (v - 0.11) / 0.1;
  if (hu * hu + hv * hv <= 1.0) return true;                            // head
  if (u >= 0.12 && u <= 0.88 && v >= 0.2 && v <= 0.6) return true;       // torso
  if (v > 0.6 && v <= 1.0 && ((u >= 0.16 && u <= 0.46) || (u >= 0.54 && u <= 0.84))) return true;  // legs
  return false;
}

// Blends `value` over the box region using supersampled coverage of `shape`.
template <typename Shape>
void paint(Plane& p, const Box& b, double value, Shape&& shape) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y)));
  const int x1 = std::min(p.w, static_cast<int>(std::ceil(b.x + b.w)));
  const int y1 = std::min(p.h, static_cast<int>(std::ceil(b.y + b.h)));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
          const double u = (px - b.x) / b.w, v = (py - b.y) / b.h;
          if (u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0 && shape(u, v)) ++hits;
        }
      }
      if (hits == 0) continue;
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      p.at(y, x) = cov * value + (1.0 - cov) * p.at(y, x);
    }
  }
}

void paint_rect(Plane& p, const Box& b, double value) {
  paint(p, b, value, [](double, double) { return true; });
}

// Mean of the 2-px ring around `b` (clipped to the image).
double ring_mean(const Plane& p, const Box& b) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x)) - 2);
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y)) - 2);
  const int x1 = std::min(p.w, static_cast<int>(std::ceil(b.x + b.w)) + 2);
  const int y1 = std::min(p.h, static_cast<int>(std::ceil(b.y + b.h)) + 2);
  double sum = 0.0;
  int count = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const bool inside = x >= b.x - 0.5 && x + 1 <= b.x + b.w + 0.5 && y >= b.y - 0.5 && y + 1 <= b.y + b.h + 0.5;
      if (inside) continue;
      sum += p.at(y, x);
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

// Mean over the torso core of the figure.
double core_mean(const Plane& p, const Box& b) {
  const Box core{b.x + 0.25 * b.w, b.y + 0.28 * b.h, 0.5 * b.w, 0.26 * b.h};
  const int x0 = std::max(0, static_cast<int>(std::ceil(core.x)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(core.y)));
  const int x1 = std::min(p.w, static_cast<int>(std::floor(core.x + core.w)));
  const int y1 = std::min(p.h, static_cast<int>(std::floor(core.y + core.h)));
  double sum = 0.0;
  int count = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      sum += p.at(y, x);
      ++count;
    }
  }
  if (count == 0) return p.at(std::clamp(static_cast<int>(b.cy()), 0, p.h - 1), std::clamp(static_cast<int>(b.cx()), 0, p.w - 1));
  return sum / count;
}

Plane luminance(const Tensor<float>& rgb) {
  const int h = rgb.shape().dims()[1], w = rgb.shape().dims()[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Plane out(h, w, 0.0);
  for (std::size_t i = 0; i < plane; ++i) out.v[i] = (rgb[i] + rgb[plane + i] + rgb[2 * plane + i]) / 3.0;
  return out;
}

Plane thermal_plane(const Tensor<float>& t) {
  const int h = t.shape().dims()[1], w = t.shape().dims()[2];
  Plane out(h, w, 0.0);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = t[i];
  return out;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

Box shifted(const Box& b, double dx, double dy) { return {b.x + dx, b.y + dy, b.w, b.h}; }

// Value at least `floor` away from `bg`, preferring direction `up`.
double contrasting(double bg, double floor, double extra, bool up) {
  const double hi = bg + floor + extra, lo = bg - floor - extra;
  if (up) return hi <= 1.0 ? hi : lo;
  return lo >= 0.0 ? lo : hi;
}

bool render_scene(const SynthParams& p, Rng& rng, SyntheticScene& s) {
  const int H = p.height, W = p.width;
  s.day = rng.bernoulli(p.day_fraction);
  s.dx = p.misalign_dx;
  s.dy = p.misalign_dy;
  s.boxes.clear();

  // Backgrounds with a vertical gradient.
  std::array<Plane, 3> rgb{Plane(H, W, 0), Plane(H, W, 0), Plane(H, W, 0)};
  Plane th(H, W, 0);
  const double base = s.day ? rng.uniform(0.5, 0.68) : rng.uniform(0.04, 0.1);
  const double grad = s.day ? rng.uniform(0.05, 0.15) : rng.uniform(0.0, 0.03);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.05, 0.05);
  const double t_base = rng.uniform(0.25, 0.4);
  const double t_grad = rng.uniform(-0.05, 0.05);
  for (int y = 0; y < H; ++y) {
    const double r = 1.0 - 2.0 * y / (H - 1);
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) rgb[c].at(y, x) = std::clamp(base + grad * r + tint[c], 0.0, 1.0);
      th.at(y, x) = t_base + t_grad * r;
    }
  }

  // Clutter: rectangles in RGB, warm objects in thermal. Some are pole-like.
  for (int k = 0; k < p.clutter; ++k) {
    const bool pole = rng.bernoulli(0.3);
    const double cw = pole ? rng.uniform(0.03, 0.08) * W : rng.uniform(0.08, 0.35) * W;
    const double ch = pole ? rng.uniform(0.3, 0.6) * H : rng.uniform(0.05, 0.3) * H;
    const Box b{rng.uniform(-0.1 * cw, W - 0.9 * cw), rng.uniform(-0.1 * ch, H - 0.9 * ch), cw, ch};
    for (int c = 0; c < 3; ++c) {
      paint_rect(rgb[c], b, s.day ? rng.uniform(0.15, 0.95) : rng.uniform(0.0, 0.14));
    }
  }
  for (int k = 0; k < p.clutter; ++k) {
    const bool pole = rng.bernoulli(0.3);
    const double cw = pole ? rng.uniform(0.03, 0.08) * W : rng.uniform(0.08, 0.3) * W;
    const double ch = pole ? rng.uniform(0.3, 0.6) * H : rng.uniform(0.05, 0.25) * H;
    const Box b{rng.uniform(-0.1 * cw, W - 0.9 * cw), rng.uniform(-0.1 * ch, H - 0.9 * ch), cw, ch};
    paint_rect(th, b, std::clamp(t_base + rng.uniform(-0.1, s.day ? 0.3 : 0.15), 0.0, 1.0));
  }

  // Pedestrians.
  const int people = p.min_people + static_cast<int>(rng.below(static_cast<std::uint64_t>(p.max_people - p.min_people + 1)));
  for (int k = 0; k < people; ++k) {
    Box b;
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      const double bh = rng.uniform(p.min_height, p.max_height) * H;
      const double bw = 0.41 * bh;
      b = {rng.uniform(0.0, W - bw), rng.uniform(0.0, H - bh), bw, bh};
      placed = std::none_of(s.boxes.begin(), s.boxes.end(), [&](const GroundTruthBox& g) { return iou(g.box, b) > 0.2; });
    }
    if (!placed) continue;
    const double bg_rgb = (ring_mean(rgb[0], b) + ring_mean(rgb[1], b) + ring_mean(rgb[2], b)) / 3.0;
    const Box tb = shifted(b, s.dx, s.dy);
    const double bg_th = ring_mean(th, tb);
    const bool up = rng.bernoulli(0.5);
    double lum, heat;
    if (s.day) {
      lum = contrasting(bg_rgb, p.contrast_floor, rng.uniform(0.05, 0.3), up);
      heat = bg_th + rng.uniform(0.0, 0.06);
    } else {
      lum = bg_rgb + rng.uniform(0.0, 0.03);
      heat = contrasting(bg_th, p.contrast_floor, rng.uniform(0.05, 0.3), true);
    }
    for (int c = 0; c < 3; ++c) {
      paint(rgb[c], b, std::clamp(lum + rng.uniform(-0.04, 0.04), 0.0, 1.0), in_figure);
    }
    paint(th, tb, std::clamp(heat, 0.0, 1.0), in_figure);
    s.boxes.push_back({b, Occlusion::kNone, false, "person"});
  }

  s.rgb = Tensor<float>(Shape{3, H, W});
  s.thermal = Tensor<float>(Shape{1, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      s.rgb[c * plane + i] = static_cast<float>(quantize(rgb[c].v[i] + p.noise * rng.normal()));
    }
  }
  for (std::size_t i = 0; i < plane; ++i) s.thermal[i] = static_cast<float>(quantize(th.v[i] + p.noise * rng.normal()));

  if (s.day != (mean_brightness(s.rgb) >= p.day_brightness)) return false;
  for (const auto& g : s.boxes) {
    const auto c = box_contrast(s, g.box);
    if (std::max(c.rgb, c.thermal) < p.contrast_floor) return false;
  }
  return true;
}

}  // namespace

double mean_brightness(const Tensor<float>& rgb) {
  double sum = 0.0;
  for (const float v : rgb.data()) sum += v;
  return sum / static_cast<double>(rgb.numel());
}

SceneContrast box_contrast(const SyntheticScene& scene, const Box& box) {
  const Plane lum = luminance(scene.rgb);
  const Plane th = thermal_plane(scene.thermal);
  const Box tb = shifted(box, scene.dx, scene.dy);
  return {std::abs(core_mean(lum, box) - ring_mean(lum, box)), std::abs(core_mean(th, tb) - ring_mean(th, tb))};
}

std::vector<SyntheticScene> synth_generate(int n, std::uint64_t seed, const SynthParams& params) {
  if (n < 1) throw Error("synth_generate: n must be at least 1");
  params.validate();
  std::vector<SyntheticScene> out(static_cast<std::size_t>(n));
  Rng root(seed);
  for (int i = 0; i < n; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    char id[32];
    std::snprintf(id, sizeof(id), "%06d", i);
    out[i].id = id;
    bool ok = false;
    for (int attempt = 0; attempt < 25 && !ok; ++attempt) ok = render_scene(params, rng, out[i]);
    if (!ok) throw Error("synth_generate: contrast floor unreachable for scene " + out[i].id);
  }
  return out;
}

}  // namespace mbfuse
