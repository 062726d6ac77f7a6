#include "icd/analysis.hpp"

#include <cmath>

namespace icd {

namespace {

ConvNet frozen_copy(const ConvNet& net) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const Parameter& p : net.params()) tensors.emplace_back(p.name, p.value);
  return ConvNet(net.spec(), tensors, false);
}

/// Global logits of every test sample, row per sample.
std::vector<double> collect_logits(const ConvNet& net, const Dataset& ds,
                                   const ChannelStats& stats, std::size_t batch_size) {
  const ConvNet frozen = frozen_copy(net);
  const std::size_t k = net.spec().num_classes;
  std::vector<double> rows(ds.test_count() * k);
  BatchIterator it(ds, Split::kTest, batch_size, stats, 0, 0, false, false);
  std::size_t row = 0;
  while (auto batch = it.next()) {
    const Tensor logits = global_logits(frozen.logit_map(batch->images));
    const auto lv = logits.data();
    std::copy(lv.begin(), lv.end(), rows.begin() + static_cast<std::ptrdiff_t>(row * k));
    row += batch->labels.size();
  }
  return rows;
}

Tensor pearson_correlation(const std::vector<double>& rows, std::size_t n, std::size_t k,
                           bool* constant_class_warning) {
  // Two-pass: per-class means, then covariance accumulation in sample order.
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) mean[a] += rows[i * k + a];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(k * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = rows.data() + i * k;
    for (std::size_t a = 0; a < k; ++a) {
      const double da = r[a] - mean[a];
      for (std::size_t b = 0; b < k; ++b) cov[a * k + b] += da * (r[b] - mean[b]);
    }
  }
  for (double& c : cov) c /= static_cast<double>(n);

  std::vector<bool> constant(k, false);
  bool any_constant = false;
  std::vector<double> sigma(k);
  for (std::size_t a = 0; a < k; ++a) {
    sigma[a] = std::sqrt(cov[a * k + a]);
    if (sigma[a] == 0.0) {
      constant[a] = true;
      any_constant = true;
    }
  }
  if (constant_class_warning) *constant_class_warning = any_constant;

  std::vector<double> corr(k * k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (constant[a] || constant[b]) continue;  // row/col stays zero
      corr[a * k + b] = cov[a * k + b] / (sigma[a] * sigma[b]);
    }
  }
  return Tensor::from_data({k, k}, std::move(corr));
}

}  // namespace

Tensor logit_correlation(const ConvNet& net, const Dataset& ds, const ChannelStats& stats,
                         std::size_t batch_size, bool* constant_class_warning) {
  if (ds.test_count() < 2) throw ConfigError("logit_correlation: need at least 2 test samples");
  const std::size_t k = net.spec().num_classes;
  const std::vector<double> rows = collect_logits(net, ds, stats, batch_size);
  return pearson_correlation(rows, ds.test_count(), k, constant_class_warning);
}

DiscrepancyReport discrepancy(const ConvNet& teacher, const ConvNet& student, const Dataset& ds,
                              const ChannelStats& stats, std::size_t batch_size,
                              const DistillConfig& cfg) {
  if (teacher.spec().num_classes != student.spec().num_classes) {
    throw ConfigError("discrepancy: class count mismatch (teacher " +
                      std::to_string(teacher.spec().num_classes) + ", student " +
                      std::to_string(student.spec().num_classes) + ")");
  }
  DiscrepancyReport report;
  report.teacher_correlation =
      logit_correlation(teacher, ds, stats, batch_size, &report.teacher_constant_class);
  report.student_correlation =
      logit_correlation(student, ds, stats, batch_size, &report.student_constant_class);

  const std::size_t k = teacher.spec().num_classes;
  std::vector<double> diff(k * k);
  double sum = 0.0;
  for (std::size_t i = 0; i < k * k; ++i) {
    diff[i] = std::abs(report.teacher_correlation.data()[i] - report.student_correlation.data()[i]);
    sum += diff[i];
  }
  report.discrepancy = Tensor::from_data({k, k}, std::move(diff));
  report.mean_discrepancy = sum / static_cast<double>(k * k);

  // Per-scale structural loss on the test split, weighted as in training and
  // averaged over batches by sample count.
  if (teacher.spec().map_width == student.spec().map_width) {
    const ConvNet frozen_t = frozen_copy(teacher);
    const ConvNet frozen_s = frozen_copy(student);
    const ScaleSpec sspec(cfg.scales, teacher.spec().map_width);
    const std::vector<double> weights = scale_weights(cfg.scales);
    std::vector<double> sums(cfg.scales.size(), 0.0);
    std::size_t seen = 0;
    BatchIterator it(ds, Split::kTest, batch_size, stats, 0, 0, false, false);
    while (auto batch = it.next()) {
      const CellLogits t_cells = pool_cells(frozen_t.logit_map(batch->images), sspec);
      const CellLogits s_cells = pool_cells(frozen_s.logit_map(batch->images), sspec);
      const std::size_t b = batch->labels.size();
      for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
        const std::size_t cells = t_cells.per_scale[si].shape()[1];
        double w = weights[si];
        if (cfg.cell_mean) w /= static_cast<double>(cells);
        double value = 0.0;
        for (std::size_t n = 0; n < cells; ++n) {
          const Tensor g_t = gram(
              reshape(slice(t_cells.per_scale[si], 1, n, 1), {b, teacher.spec().num_classes}),
              cfg.gram_mode, cfg.eps);
          const Tensor g_s = gram(
              reshape(slice(s_cells.per_scale[si], 1, n, 1), {b, teacher.spec().num_classes}),
              cfg.gram_mode, cfg.eps);
          value += icd_cell_loss(g_t, g_s).item();
        }
        sums[si] += w * value * static_cast<double>(b);
      }
      seen += b;
    }
    for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
      report.per_scale.emplace_back(cfg.scales[si], sums[si] / static_cast<double>(seen));
    }
  }
  return report;
}

}  // namespace icd
