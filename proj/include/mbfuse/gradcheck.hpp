#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mbfuse/tape.hpp"

namespace mbfuse {

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Entries probed per tensor; 0 probes every entry. Sampled entries are
  // drawn without replacement from a generator seeded with `seed`.
  std::size_t max_entries = 0;
  std::uint64_t seed = 7;
  // Also difference at step / 2. On a smooth stretch the two central
  // differences agree and the second difference over the step shrinks in
  // proportion to the step; a kink or jump breaks one of the two. Probes
  // failing either test by more than tolerance / 10 (relative) are counted as
  // non-smooth and, when sampling, replaced by fresh entries.
  bool detect_nonsmooth = false;
  // A report with more non-smooth probes than this fraction fails.
  double max_nonsmooth_fraction = 0.1;
};

struct GradCheckEntry {
  std::string name;
  std::size_t probed = 0;
  std::size_t nonsmooth = 0;  // probes dropped as straddling a kink
  double max_abs_error = 0.0;
  // max |analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6),
  // taken over the probed entries of one tensor.
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_nonsmooth_fraction = 0.1;

  std::size_t probed() const;
  std::size_t nonsmooth() const;

  bool passed() const;
  double worst() const;
};

// Builds the scalar objective on `tape` from leaves bound to the inputs, in
// the order given.
using ScalarObjective = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Compares reverse-mode gradients of `objective` against central finite
/// differences in 64-bit arithmetic. Throws Error if two evaluations at the
/// same point disagree (non-deterministic objective).
GradCheckReport grad_check(const ScalarObjective& objective, const std::vector<NamedTensor>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace mbfuse
