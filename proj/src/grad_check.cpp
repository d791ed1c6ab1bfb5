#include "versebyte/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace versebyte {
namespace {

double evaluate(const Objective& objective, const std::vector<Tensor<double>>& params) {
  Graph<double> graph(false);
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(graph.parameter(p));
  const Var<double> out = objective(graph, leaves);
  if (out.value().size() != 1) {
    throw ShapeError("grad_check objective must be scalar, got shape " + shape_string(out.shape()));
  }
  return out.value()[0];
}

}  // namespace

GradCheckResult grad_check(const Objective& objective, std::vector<Tensor<double>> params, double eps) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> graph(true);
    std::vector<Var<double>> leaves;
    for (const auto& p : params) leaves.push_back(graph.parameter(p));
    const Var<double> out = objective(graph, leaves);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check objective must be scalar, got shape " + shape_string(out.shape()));
    }
    graph.backward(out);
    for (const auto& leaf : leaves) analytic.push_back(graph.grad(leaf));
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double original = params[t][i];
      params[t][i] = original + eps;
      const double up = evaluate(objective, params);
      params[t][i] = original - eps;
      const double down = evaluate(objective, params);
      params[t][i] = original;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double error = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (error > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = error;
        result.worst_tensor = t;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace versebyte
