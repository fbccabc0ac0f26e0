#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "pagnn/tape.hpp"

namespace pagnn {

// Builds a scalar on `tape` from leaves holding the evaluation point.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> leaves)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_entry = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares Tape::backward against central differences at `point`. Relative
// error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult finite_diff_check(const ScalarFunction& f, std::span<const Tensor> point,
                                  double epsilon);

}  // namespace pagnn
