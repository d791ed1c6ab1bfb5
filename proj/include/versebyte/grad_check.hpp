#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "versebyte/graph.hpp"

namespace versebyte {

// Builds a single-element objective from parameter leaves on `graph`.
using Objective = std::function<Var<double>(Graph<double>& graph, std::span<const Var<double>> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  // Location and values of the worst coordinate.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients with central finite differences, one
// coordinate at a time. Relative error is |a - n| / max(1e-8, |a| + |n|).
GradCheckResult grad_check(const Objective& objective, std::vector<Tensor<double>> params,
                           double eps = 1e-4);

}  // namespace versebyte
