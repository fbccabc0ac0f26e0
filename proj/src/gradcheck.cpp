#include "pagnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pagnn {

namespace {

double evaluate(const ScalarFunction& f, std::span<const Tensor> point) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point) leaves.push_back(tape.leaf(t, true));
  return f(tape, leaves).value().item();
}

Tensor with_entry(const Tensor& t, std::size_t entry, double value) {
  std::vector<double> values(t.values().begin(), t.values().end());
  values[entry] = value;
  return Tensor(t.rows(), t.cols(), std::move(values));
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFunction& f, std::span<const Tensor> point,
                                  double epsilon) {
  if (!(epsilon > 0.0)) throw ContractViolation("finite_diff_check: epsilon must be positive");

  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point) leaves.push_back(tape.leaf(t, true));
  const GradientMap analytic = tape.backward(f(tape, leaves));

  GradCheckResult result;
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t k = 0; k < point.size(); ++k) {
    const Tensor& grad = analytic.at(leaves[k].id());
    for (std::size_t e = 0; e < point[k].size(); ++e) {
      const double x = point[k][e];
      probe[k] = with_entry(point[k], e, x + epsilon);
      const double up = evaluate(f, probe);
      probe[k] = with_entry(point[k], e, x - epsilon);
      const double down = evaluate(f, probe);
      probe[k] = point[k];

      const double numeric = (up - down) / (2.0 * epsilon);
      const double denom = std::max({std::abs(grad[e]), std::abs(numeric), 1e-8});
      const double rel = std::abs(grad[e] - numeric) / denom;
      if (rel > result.max_relative_error) {
        result = GradCheckResult{rel, k, e, grad[e], numeric};
      }
    }
  }
  return result;
}

}  // namespace pagnn
