#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <sstream>

#include "mbfuse/experiment.hpp"
#include "mbfuse/gradsuite.hpp"

namespace py = pybind11;
using namespace mbfuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  if (a.ndim() < 1 || a.ndim() > 4) throw py::value_error("expected an array of rank 1 to 4");
  std::vector<int> dims(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(Shape(std::span<const int>(dims)), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  const auto dims = t.shape().dims();
  std::vector<py::ssize_t> shape(dims.begin(), dims.end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Lifts plain arrays to rank 4 (N, C, H, W) by prepending ones.
Tensor<double> as_map(const Array& a) {
  Tensor<double> t = to_tensor(a);
  std::vector<int> dims(t.shape().dims().begin(), t.shape().dims().end());
  while (dims.size() < 4) dims.insert(dims.begin(), 1);
  return t.reshaped(Shape(std::span<const int>(dims)));
}

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.x, b.y, b.w, b.h); }
Box box_from(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

std::vector<Detection> detections_from(const std::vector<std::array<double, 5>>& rows) {
  std::vector<Detection> out;
  for (const auto& r : rows) out.push_back({{r[0], r[1], r[2], r[3]}, r[4]});
  return out;
}

std::vector<GroundTruthBox> truth_from(const std::vector<std::array<double, 4>>& boxes,
                                       const std::vector<std::array<double, 4>>& ignore) {
  std::vector<GroundTruthBox> out;
  for (const auto& b : boxes) out.push_back({box_from(b)});
  for (const auto& b : ignore) out.push_back({box_from(b), Occlusion::kNone, true, "people"});
  return out;
}

py::dict scene_dict(const SyntheticScene& s) {
  py::dict d;
  d["id"] = s.id;
  d["rgb"] = to_array(s.rgb);
  d["thermal"] = to_array(s.thermal);
  d["day"] = s.day;
  py::list boxes, ignore;
  for (const auto& g : s.boxes) (g.ignore ? ignore : boxes).append(box_tuple(g.box));
  d["boxes"] = boxes;
  d["ignore"] = ignore;
  return d;
}

TrainConfig config_from(const std::string& text, const std::map<std::string, std::string>& overrides, bool desk) {
  TrainConfig base = desk ? desk_benchmark() : TrainConfig{};
  std::istringstream in(text);
  TrainConfig c = parse_config(in, "<python>", base);
  for (const auto& [k, v] : overrides) apply_setting(c, k, v);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multispectral pedestrian detection with differential modality fusion";

  // Later registrations are tried first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "decompose_modalities",
      [](const Array& rgb, const Array& thermal) {
        Tape<double> tape;
        const auto p = decompose_modalities(DualFeature<double>{tape.constant(as_map(rgb)), tape.constant(as_map(thermal))});
        return py::make_tuple(to_array(p.common.value()), to_array(p.diff_t.value()), to_array(p.diff_r.value()));
      },
      py::arg("rgb"), py::arg("thermal"), "Common part and the two half-differences of a modality pair.");

  m.def(
      "dmaf_weights",
      [](const Array& rgb, const Array& thermal) {
        Tape<double> tape;
        const auto w = dmaf_weights(DualFeature<double>{tape.constant(as_map(rgb)), tape.constant(as_map(thermal))});
        return py::make_tuple(to_array(w.for_thermal.value()), to_array(w.for_rgb.value()));
      },
      py::arg("rgb"), py::arg("thermal"), "Channel weights (for_thermal, for_rgb), each (N, C, 1, 1).");

  m.def(
      "illum_reweight",
      [](double w_d, double w_n, double w_abs, double alpha, double gamma, bool clamp) {
        const auto g = illum_reweight(w_d, w_n, w_abs, alpha, gamma, clamp);
        return py::make_tuple(g.w_r, g.w_t);
      },
      py::arg("w_d"), py::arg("w_n"), py::arg("w_abs"), py::arg("alpha") = 1.0, py::arg("gamma") = 0.0,
      py::arg("clamp") = false);

  m.def(
      "fuse_scores",
      [](double s0, double s_r, double s_t, double w_r) {
        const double s1 = w_r * s_r + (1.0 - w_r) * s_t;
        return py::make_tuple(s1, fuse_cascade({0, 0, 1, 1}, s0, {}, s1, {}).score);
      },
      py::arg("s0"), py::arg("s_r"), py::arg("s_t"), py::arg("w_r"), "Returns (s1, s_final).");

  m.def(
      "focal_loss",
      [](const Array& probs, const Array& labels, double alpha, double gamma, double normalizer) {
        Tape<double> tape;
        return focal_loss(tape.constant(to_tensor(probs)), to_tensor(labels), alpha, gamma, normalizer).value()[0];
      },
      py::arg("probs"), py::arg("labels"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0,
      py::arg("normalizer") = 1.0);

  m.def(
      "align",
      [](const Array& rgb, const Array& thermal, const Array& rgb_offsets, const Array& thermal_offsets) {
        Tape<double> tape;
        const DualFeature<double> f{tape.constant(as_map(rgb)), tape.constant(as_map(thermal))};
        const auto out = align(f, {tape.constant(as_map(rgb_offsets)), tape.constant(as_map(thermal_offsets))});
        return py::make_tuple(to_array(out.rgb.value()), to_array(out.thermal.value()));
      },
      py::arg("rgb"), py::arg("thermal"), py::arg("rgb_offsets"), py::arg("thermal_offsets"),
      "Bilinear resampling of each modality by per-pixel (dx, dy) offsets of shape (N, 2, H, W).");

  m.def(
      "gen_anchors",
      [](int input_h, int input_w) {
        ModelConfig c;
        c.input_h = input_h;
        c.input_w = input_w;
        const auto anchors = gen_anchors(c.stage_extents(), {input_h, input_w}, c.anchors);
        py::array_t<double> out({static_cast<py::ssize_t>(anchors.size()), py::ssize_t{5}});
        auto v = out.mutable_unchecked<2>();
        for (std::size_t i = 0; i < anchors.size(); ++i) {
          v(i, 0) = anchors[i].cx;
          v(i, 1) = anchors[i].cy;
          v(i, 2) = anchors[i].w;
          v(i, 3) = anchors[i].h;
          v(i, 4) = anchors[i].stage;
        }
        return out;
      },
      py::arg("input_h"), py::arg("input_w"), "Rows of (cx, cy, w, h, stage) in anchor order.");

  m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) { return iou(box_from(a), box_from(b)); });

  m.def(
      "log_avg_mr",
      [](const std::vector<std::vector<std::array<double, 5>>>& dets, const std::vector<std::vector<std::array<double, 4>>>& gts,
         std::optional<std::vector<std::vector<std::array<double, 4>>>> ignore, double iou_thresh) {
        if (dets.size() != gts.size()) throw py::value_error("dets and gts must list the same images");
        std::vector<std::vector<Detection>> d;
        std::vector<std::vector<GroundTruthBox>> g;
        for (std::size_t i = 0; i < dets.size(); ++i) {
          d.push_back(detections_from(dets[i]));
          g.push_back(truth_from(gts[i], ignore ? ignore->at(i) : std::vector<std::array<double, 4>>{}));
        }
        return log_avg_mr(d, g, iou_thresh).mr2;
      },
      py::arg("dets"), py::arg("gts"), py::arg("ignore") = py::none(), py::arg("iou") = 0.5,
      "Per image: detections as (x, y, w, h, score), ground truth as (x, y, w, h). Returns MR2 in percent.");

  m.def(
      "synth_generate",
      [](int count, std::uint64_t seed, const std::map<std::string, std::string>& settings) {
        TrainConfig c;
        for (const auto& [k, v] : settings) apply_setting(c, k, v);
        py::list out;
        for (const auto& s : synth_generate(count, seed, c.synth)) out.append(scene_dict(s));
        return out;
      },
      py::arg("count"), py::arg("seed") = 1, py::arg("settings") = std::map<std::string, std::string>{},
      "Synthetic scenes as dicts with rgb (3, H, W), thermal (1, H, W), day, boxes and ignore.");

  m.def(
      "gradient_suite",
      []() {
        py::list out;
        for (const auto& c : run_gradient_suite()) out.append(py::make_tuple(c.name, c.report.worst(), c.passed()));
        return out;
      },
      "Rows of (case, worst relative error, passed).");

  m.def(
      "train",
      [](const std::string& config, const std::map<std::string, std::string>& overrides, std::optional<std::string> out_dir) {
        const TrainConfig c = config_from(config, overrides, true);
        const auto scenes = synth_generate(c.train_scenes, train_scene_seed(c.seed), c.synth);
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(c, scenes);
        }
        if (out_dir) save_run(*out_dir, c, result);
        py::list log;
        for (const auto& e : result.log) log.append(e.total);
        const auto test = synth_generate(c.test_scenes, test_scene_seed(c.seed), c.synth);
        const double mr2 = evaluate(detect_scenes(result.params, c.model, test), test, c.eval_iou).mr2;
        return py::make_tuple(log, mr2);
      },
      py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("out_dir") = py::none(),
      "Trains on the synthetic benchmark (desk defaults, then `config` text, then overrides). Returns (epoch losses, "
      "test MR2).");

  m.def("desk_config", []() { return config_text(desk_benchmark()); });
}
