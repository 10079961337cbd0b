#include "mbfuse/gradsuite.hpp"

#include <chrono>
#include <cmath>

#include "mbfuse/model.hpp"

namespace mbfuse {

namespace {

using V = Var<double>;
using Inputs = std::span<const V>;

Tensor<double> uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(s, rng, lo, hi);
}

// Values at least `gap` away from every point in `kinks`.
Tensor<double> away_from(Shape s, Rng& rng, std::initializer_list<double> kinks, double gap = 0.05) {
  auto t = uniform(s, rng, -2.0, 2.0);
  for (auto& v : t.data()) {
    for (double k : kinks) {
      if (std::abs(v - k) < gap) v = k + (v < k ? -gap : gap);
    }
  }
  return t;
}

// sum(out * probe) with a fixed probe so each output entry gets its own weight.
V probe_sum(V out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, out.tape().constant(uniform(out.shape(), rng))));
}

struct Case {
  std::string name;
  ScalarObjective objective;
  std::vector<NamedTensor> inputs;
};

std::vector<Case> op_cases() {
  Rng rng(2024);
  std::vector<Case> cases;
  auto push = [&](std::string name, ScalarObjective f, std::vector<NamedTensor> in) {
    cases.push_back({std::move(name), std::move(f), std::move(in)});
  };

  push("add", [](Tape<double>&, Inputs in) { return probe_sum(add(in[0], in[1]), 1); },
       {{"a", uniform({2, 3, 2, 2}, rng)}, {"b_channel", uniform({3}, rng)}});
  push("sub", [](Tape<double>&, Inputs in) { return probe_sum(sub(in[0], in[1]), 2); },
       {{"a", uniform({2, 3, 2, 2}, rng)}, {"b_sample", uniform({2, 1, 1, 1}, rng)}});
  push("mul", [](Tape<double>&, Inputs in) { return probe_sum(mul(in[0], in[1]), 3); },
       {{"a", uniform({2, 3, 2, 2}, rng)}, {"b", uniform({2, 3, 2, 2}, rng)}});
  push("affine", [](Tape<double>&, Inputs in) { return probe_sum(affine(in[0], -1.5, 0.25), 4); },
       {{"x", uniform({3, 4}, rng)}});
  push("relu", [](Tape<double>&, Inputs in) { return probe_sum(relu(in[0]), 5); },
       {{"x", away_from({2, 3, 4}, rng, {0.0})}});
  push("tanh", [](Tape<double>&, Inputs in) { return probe_sum(tanh(in[0]), 6); }, {{"x", uniform({2, 5}, rng, -2, 2)}});
  push("sigmoid", [](Tape<double>&, Inputs in) { return probe_sum(sigmoid(in[0]), 7); },
       {{"x", uniform({2, 5}, rng, -3, 3)}});
  push("softmax", [](Tape<double>&, Inputs in) { return add(probe_sum(softmax(in[0], 1), 8), probe_sum(softmax(in[0], -1), 9)); },
       {{"x", uniform({2, 3, 4}, rng, -2, 2)}});
  push("clamp", [](Tape<double>&, Inputs in) { return probe_sum(clamp(in[0], -0.5, 0.75), 10); },
       {{"x", away_from({3, 5}, rng, {-0.5, 0.75})}});
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      push("conv2d 3x3 stride " + std::to_string(stride) + " pad " + std::to_string(pad),
           [stride, pad](Tape<double>&, Inputs in) { return probe_sum(conv2d(in[0], in[1], in[2], stride, pad), 11); },
           {{"x", uniform({2, 2, 6, 5}, rng)}, {"weight", uniform({3, 2, 3, 3}, rng)}, {"bias", uniform({3}, rng)}});
    }
  }
  push("conv2d 1x1 stride 2", [](Tape<double>&, Inputs in) { return probe_sum(conv2d(in[0], in[1], in[2], 2, 0), 12); },
       {{"x", uniform({2, 3, 4, 4}, rng)}, {"weight", uniform({2, 3, 1, 1}, rng)}, {"bias", uniform({2}, rng)}});
  push("maxpool2", [](Tape<double>&, Inputs in) { return probe_sum(maxpool2(in[0]), 13); },
       {{"x", uniform({2, 2, 4, 6}, rng)}});
  push("global_avg", [](Tape<double>&, Inputs in) { return probe_sum(global_avg(in[0]), 14); },
       {{"x", uniform({2, 3, 3, 2}, rng)}});
  push("fully_connected", [](Tape<double>&, Inputs in) { return probe_sum(fully_connected(in[0], in[1], in[2]), 15); },
       {{"x", uniform({3, 2, 2, 2}, rng)}, {"weight", uniform({4, 8}, rng)}, {"bias", uniform({4}, rng)}});
  const std::pair<NormAxis, const char*> axes[] = {
      {NormAxis::kPosition, "position"}, {NormAxis::kChannel, "channel"}, {NormAxis::kMap, "map"}};
  for (const auto& [axis, label] : axes) {
    push(std::string("l2_rescale ") + label,
         [axis = axis](Tape<double>&, Inputs in) { return probe_sum(l2_rescale(in[0], 10.0, axis), 16); },
         {{"x", uniform({2, 3, 2, 3}, rng)}});
  }
  {
    auto off = uniform({2, 2, 4, 5}, rng, -1.5, 1.5);
    for (auto& v : off.data()) {
      const double frac = v - std::floor(v);
      if (frac < 0.05 || frac > 0.95) v += 0.1;
    }
    push("bilinear_sample", [](Tape<double>&, Inputs in) { return probe_sum(bilinear_sample(in[0], in[1]), 17); },
         {{"x", uniform({2, 3, 4, 5}, rng)}, {"offsets", off}});
  }
  push("concat/slice/reshape",
       [](Tape<double>&, Inputs in) {
         const std::vector<V> parts{in[0], in[1]};
         auto cat = concat_channels<double>(parts);
         auto mid = slice_channels(cat, 1, 3);
         return probe_sum(reshape(mid, Shape{2, 3 * 2 * 2}), 18);
       },
       {{"a", uniform({2, 2, 2, 2}, rng)}, {"b", uniform({2, 3, 2, 2}, rng)}});
  push("sum/mean", [](Tape<double>&, Inputs in) { return add(sum(mul(in[0], in[0])), affine(mean(in[0]), 3.0)); },
       {{"x", uniform({3, 4}, rng)}});
  {
    Tensor<double> labels(Shape{2, 2, 2, 3});
    const double pattern[] = {1, 0, 0, -1, 0, 1};
    for (std::size_t i = 0; i < labels.numel(); ++i) labels[i] = pattern[i % 6];
    push("focal_loss",
         [labels](Tape<double>&, Inputs in) { return focal_loss(sigmoid(in[0]), labels, 0.25, 2.0, 3.0); },
         {{"logits", uniform({2, 2, 2, 3}, rng, -2, 2)}});
  }
  {
    auto target = uniform({2, 4, 2, 2}, rng);
    Tensor<double> mask(Shape{2, 4, 2, 2});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = (i / 3) % 2 ? 1.0 : 0.0;
    // Keep |pred - target| away from the quadratic/linear switch at 1.
    auto pred = uniform({2, 4, 2, 2}, rng, -2, 2);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double d = pred[i] - target[i];
      if (std::abs(std::abs(d) - 1.0) < 0.05) pred[i] += 0.2;
    }
    push("smooth_l1",
         [target, mask](Tape<double>&, Inputs in) { return smooth_l1(in[0], target, mask, 2.0); },
         {{"pred", pred}});
  }
  {
    Tensor<double> onehot(Shape{3, 4});
    onehot[1] = onehot[4 + 0] = onehot[8 + 3] = 1.0;
    push("cross_entropy",
         [onehot](Tape<double>&, Inputs in) { return cross_entropy(softmax(in[0], 1), onehot); },
         {{"logits", uniform({3, 4}, rng, -2, 2)}});
  }

  // Module-level building blocks.
  push("dmaf_complement",
       [](Tape<double>&, Inputs in) {
         const auto c = dmaf_complement(DualFeature<double>{in[0], in[1], 3});
         return add(probe_sum(c.f_rd, 19), probe_sum(c.f_td, 20));
       },
       {{"rgb", uniform({2, 3, 3, 2}, rng)}, {"thermal", uniform({2, 3, 3, 2}, rng)}});
  push("illumination reweighting",
       [](Tape<double>&, Inputs in) {
         IllumState<double> s{in[0], in[1], in[2], in[3], in[4], {}, {}};
         illum_reweight(s);
         return add(probe_sum(s.w_r, 21), probe_sum(s.w_t, 22));
       },
       {{"w_d", uniform({2, 1, 1, 1}, rng, 0, 1)},
        {"w_n", uniform({2, 1, 1, 1}, rng, 0, 1)},
        {"w_abs", uniform({2, 1, 1, 1}, rng, 0, 1)},
        {"alpha", uniform({1, 1, 1, 1}, rng, 0.5, 1.5)},
        {"gamma", uniform({1, 1, 1, 1}, rng, -0.2, 0.2)}});
  push("gate_apply",
       [](Tape<double>&, Inputs in) {
         const auto g = gate_apply(DualFeature<double>{in[0], in[1], 3}, in[2], affine(in[2], -1.0, 1.0), 10.0,
                                   NormAxis::kMap);
         return add(probe_sum(g.rgb, 23), probe_sum(g.thermal, 24));
       },
       {{"rgb", uniform({2, 3, 2, 2}, rng)},
        {"thermal", uniform({2, 3, 2, 2}, rng)},
        {"w_r", uniform({2, 1, 1, 1}, rng, 0.2, 0.8)}});
  return cases;
}

SuiteCase run_case(const Case& c, const GradCheckOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteCase out;
  out.name = c.name;
  out.report = grad_check(c.objective, c.inputs, options);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace

SuiteCase composite_gradient_check(const GradCheckOptions& options) {
  ModelConfig config;
  config.input_h = 16;
  config.input_w = 16;
  config.channels = {2, 3, 4, 4};
  config.illum.input_size = 8;
  config.blocks_per_stage = 1;
  config.align_compress = 2;
  config.validate();
  auto params = init_model<double>(config, options.seed);
  // Move every parameter off its initializer so that zero-initialized heads
  // and offsets sit away from kinks.
  Rng rng(options.seed ^ 0x9E3779B97F4A7C15ULL);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params.at(i);
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] += rng.normal(0.0, 0.05);
  }
  // Sampling offsets away from whole pixels, where bilinear reads have kinks.
  for (const auto& name : params.names()) {
    if (name.size() > 9 && name.compare(name.size() - 9, 9, ".offset.b") == 0) {
      auto& b = params.get(name);
      for (std::size_t j = 0; j < b.numel(); ++j) b[j] += 0.37;
    }
  }
  std::vector<NamedTensor> inputs;
  for (std::size_t i = 0; i < params.size(); ++i) inputs.push_back({params.names()[i], params.at(i)});

  const auto rgb = Tensor<double>::uniform(Shape{2, 3, 16, 16}, rng, 0.0, 1.0);
  const auto thermal = Tensor<double>::uniform(Shape{2, 1, 16, 16}, rng, 0.0, 1.0);
  std::vector<ImageTargets> targets(2);
  targets[0].boxes = {{1.0, 1.5, 3.5, 8.5}, {8.0, 2.0, 5.0, 12.0}};
  targets[0].day = true;
  targets[1].boxes = {{5.0, 4.0, 3.0, 7.5}};
  targets[1].ignore = {{12.0, 10.0, 3.0, 5.0}};
  targets[1].day = false;
  const auto anchors = gen_anchors(config.stage_extents(), {config.input_h, config.input_w}, config.anchors);

  Case c;
  c.name = "detection loss (all modules)";
  c.inputs = std::move(inputs);
  c.objective = [&](Tape<double>& tape, Inputs in) {
    ParamBinding<double> binding(tape, params);
    for (std::size_t i = 0; i < in.size(); ++i) binding.bind(params.names()[i], in[i]);
    const auto out = model_forward(tape.constant(rgb), tape.constant(thermal), binding, config);
    return total_loss(model_loss<double>(out, targets, anchors, config), tape);
  };
  GradCheckOptions o = options;
  o.detect_nonsmooth = true;
  return run_case(c, o);
}

std::vector<SuiteCase> run_gradient_suite(const GradCheckOptions& options) {
  GradCheckOptions every = options;
  every.max_entries = 0;
  std::vector<SuiteCase> out;
  for (const auto& c : op_cases()) out.push_back(run_case(c, every));
  out.push_back(composite_gradient_check(options));
  return out;
}

}  // namespace mbfuse
