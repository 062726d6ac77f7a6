#include "icd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace icd {

GradCheckReport grad_check(const std::string& op_name,
                           const std::function<Tensor(const Tensor&)>& fn, const Tensor& input,
                           double tolerance, double step) {
  if (tolerance <= 0.0) throw ConfigError("grad_check: tolerance must be positive");
  GradCheckReport report;
  report.op_name = op_name;
  report.tolerance = tolerance;

  const Tensor x = input.leaf_with_grad();
  const Tensor y = fn(x);
  if (y.size() != 1) {
    throw ShapeError("grad_check: op must be scalar-valued, got " + shape_str(y.shape()));
  }
  y.backward();

  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  if (!all_finite(analytic)) {
    report.passed = false;
    report.max_abs_err = report.max_rel_err = std::numeric_limits<double>::infinity();
    report.note = "analytic gradient contains non-finite values";
    return report;
  }

  std::vector<double> base(input.data().begin(), input.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double f_plus = fn(Tensor::from_data(input.shape(), std::move(plus))).item();
    const double f_minus = fn(Tensor::from_data(input.shape(), std::move(minus))).item();
    const double numeric = (f_plus - f_minus) / (2.0 * step);
    const double abs_err = std::abs(analytic[i] - numeric);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
  }
  report.passed = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace icd
