#pragma once

#include "icd/losses.hpp"
#include "icd/train.hpp"

namespace icd {

/// |corr_T - corr_S| of class-pair Pearson correlations over test-set global
/// logits, plus the per-scale structural loss components on the same split.
struct DiscrepancyReport {
  Tensor teacher_correlation;  // [K,K]
  Tensor student_correlation;  // [K,K]
  Tensor discrepancy;          // entrywise absolute difference
  double mean_discrepancy = 0.0;
  std::vector<std::pair<std::size_t, double>> per_scale;  // (m, weighted loss)
  bool teacher_constant_class = false;
  bool student_constant_class = false;
};

/// Pearson correlation between class pairs across test samples. A class
/// whose logit is constant over the split gets its row and column zeroed and
/// raises the warning flag.
Tensor logit_correlation(const ConvNet& net, const Dataset& ds, const ChannelStats& stats,
                         std::size_t batch_size, bool* constant_class_warning = nullptr);

DiscrepancyReport discrepancy(const ConvNet& teacher, const ConvNet& student, const Dataset& ds,
                              const ChannelStats& stats, std::size_t batch_size,
                              const DistillConfig& cfg);

}  // namespace icd
