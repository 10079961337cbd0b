#pragma once

#include <string>
#include <vector>

#include "mbfuse/gradcheck.hpp"

namespace mbfuse {

struct SuiteCase {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;

  bool passed() const { return report.passed(); }
};

/// Finite-difference checks over every differentiable op, the fusion-module
/// building blocks and the full detection loss of a small model with every
/// toggle on. `options.max_entries` applies to the composite only; op-level
/// cases probe every entry at inputs chosen away from kinks. The composite
/// runs with non-smooth probe detection, since ReLU, max pooling and anchor
/// assignment make the loss piecewise smooth.
std::vector<SuiteCase> run_gradient_suite(const GradCheckOptions& options = {});

// Only the composite case: a full training loss through every module.
SuiteCase composite_gradient_check(const GradCheckOptions& options = {});

}  // namespace mbfuse
