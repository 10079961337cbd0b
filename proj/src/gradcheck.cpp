#include "mbfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mbfuse {

std::size_t GradCheckReport::probed() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.probed;
  return n;
}

std::size_t GradCheckReport::nonsmooth() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.nonsmooth;
  return n;
}

bool GradCheckReport::passed() const {
  const bool accurate = std::all_of(entries.begin(), entries.end(),
                                    [this](const GradCheckEntry& e) { return e.max_rel_error <= tolerance; });
  const double drawn = static_cast<double>(probed() + nonsmooth());
  return accurate && static_cast<double>(nonsmooth()) <= max_nonsmooth_fraction * drawn;
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

namespace {

double evaluate(const ScalarObjective& objective, const std::vector<Tensor<double>>& values) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(values.size());
  for (const auto& v : values) leaves.push_back(tape.constant(v));
  const Var<double> out = objective(tape, leaves);
  if (out.value().numel() != 1) throw ShapeError("grad_check: objective must be scalar");
  return out.value()[0];
}

struct Difference {
  double central = 0.0;
  double bend = 0.0;  // (f(x + h) - 2 f(x) + f(x - h)) / h
};

Difference differences(const ScalarObjective& objective, std::vector<Tensor<double>>& values, std::size_t t,
                       std::size_t i, double step, double base) {
  const double saved = values[t][i];
  values[t][i] = saved + step;
  const double up = evaluate(objective, values);
  values[t][i] = saved - step;
  const double down = evaluate(objective, values);
  values[t][i] = saved;
  return {(up - down) / (2.0 * step), (up - 2.0 * base + down) / step};
}

struct Probe {
  std::size_t index;
  double numeric;
};

}  // namespace

GradCheckReport grad_check(const ScalarObjective& objective, const std::vector<NamedTensor>& inputs,
                           const GradCheckOptions& options) {
  std::vector<Tensor<double>> values;
  for (const auto& in : inputs) values.push_back(in.value);

  // Analytic pass.
  std::vector<Tensor<double>> analytic;
  double base_value = 0.0;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v, true));
    const Var<double> out = objective(tape, leaves);
    tape.backward(out);
    base_value = out.value()[0];
    for (const auto& leaf : leaves) analytic.push_back(tape.grad(leaf));
  }
  const double again = evaluate(objective, values);
  if (again != base_value) throw Error("grad_check: objective is not deterministic");

  Rng rng(options.seed);
  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.max_nonsmooth_fraction = options.max_nonsmooth_fraction;
  for (std::size_t t = 0; t < values.size(); ++t) {
    const std::size_t n = values[t].numel();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool sampled = options.max_entries != 0 && options.max_entries < n;
    const std::size_t wanted = sampled ? options.max_entries : n;
    // Sampling draws a few spare entries to stand in for non-smooth probes.
    const std::size_t budget = sampled && options.detect_nonsmooth ? std::min(n, 2 * wanted) : wanted;
    if (sampled) {
      for (std::size_t i = 0; i < budget; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
    }

    // Kink threshold: relative to the largest analytic entry of the tensor.
    double analytic_scale = 1e-6;
    for (std::size_t i = 0; i < n; ++i) analytic_scale = std::max(analytic_scale, std::abs(analytic[t][i]));

    GradCheckEntry entry;
    entry.name = inputs[t].name;
    std::vector<Probe> accepted;
    for (std::size_t k = 0; k < budget && accepted.size() < wanted; ++k) {
      const std::size_t i = order[k];
      const auto full = differences(objective, values, t, i, options.step, base_value);
      if (options.detect_nonsmooth) {
        const auto half = differences(objective, values, t, i, 0.5 * options.step, base_value);
        const double ref = std::max({analytic_scale, std::abs(full.central), std::abs(half.central)});
        const double limit = 0.1 * options.tolerance * ref;
        if (std::abs(full.central - half.central) > limit || std::abs(half.bend - 0.5 * full.bend) > limit) {
          ++entry.nonsmooth;
          continue;
        }
      }
      accepted.push_back({i, full.central});
    }
    double scale = 1e-6;
    for (const auto& p : accepted) {
      scale = std::max({scale, std::abs(p.numeric), std::abs(analytic[t][p.index])});
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[t][p.index] - p.numeric));
    }
    entry.probed = accepted.size();
    entry.max_rel_error = entry.max_abs_error / scale;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace mbfuse
