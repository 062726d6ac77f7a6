#pragma once

#include <functional>
#include <string>

#include "icd/tensor.hpp"

namespace icd {

/// Outcome of comparing an analytic gradient against central differences.
struct GradCheckReport {
  std::string op_name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
  double tolerance = 0.0;
  std::string note;  // diagnostic when the analytic gradient is unusable
};

/// Checks d(fn)/d(input) against central finite differences with step h.
/// fn must map the input tensor to a single-element tensor and be pure.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckReport grad_check(const std::string& op_name,
                           const std::function<Tensor(const Tensor&)>& fn, const Tensor& input,
                           double tolerance, double step = 1e-5);

}  // namespace icd
