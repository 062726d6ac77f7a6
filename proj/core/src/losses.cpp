#include "icd/losses.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "icd/tensor_io.hpp"

namespace icd {

const char* gram_mode_str(GramMode mode) {
  return mode == GramMode::kClassCorrelation ? "class_correlation" : "sample_similarity";
}

GramMode parse_gram_mode(const std::string& text) {
  if (text == "class_correlation") return GramMode::kClassCorrelation;
  if (text == "sample_similarity") return GramMode::kSampleSimilarity;
  throw ConfigError("unknown gram mode '" + text + "'");
}

void DistillConfig::validate() const {
  if (temperature <= 0.0) throw ConfigError("DistillConfig: temperature must be positive");
  if (alpha < 0.0 || gamma < 0.0 || kd_weight < 0.0) {
    throw ConfigError("DistillConfig: loss weights must be non-negative");
  }
  if (eps <= 0.0) throw ConfigError("DistillConfig: eps must be positive");
  if (scales.empty()) throw ConfigError("DistillConfig: empty scale set");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] == 0) throw ConfigError("DistillConfig: scales must be positive");
    if (i > 0 && scales[i] <= scales[i - 1]) {
      throw ConfigError("DistillConfig: scales must be strictly increasing");
    }
  }
}

namespace {

/// Per-row KL(softmax(t/tau) || softmax(s/tau)) along `axis`, computed from
/// fused log-softmax so low temperatures stay stable. Shape: input minus axis.
Tensor kl_rows_from_logits(const Tensor& t_logits, const Tensor& s_logits, std::size_t axis,
                           double tau) {
  const Tensor t_scaled = scale(t_logits, 1.0 / tau);
  const Tensor s_scaled = scale(s_logits, 1.0 / tau);
  const Tensor p = softmax(t_scaled, axis);
  const Tensor log_p = log_softmax(t_scaled, axis);
  const Tensor log_q = log_softmax(s_scaled, axis);
  return sum_axis(mul(p, sub(log_p, log_q)), axis);
}

void require_matching_cells(const CellLogits& teacher, const CellLogits& student) {
  if (teacher.scales != student.scales) {
    throw ConfigError("cell logits: teacher and student scale sets differ");
  }
  for (std::size_t i = 0; i < teacher.per_scale.size(); ++i) {
    if (teacher.per_scale[i].shape() != student.per_scale[i].shape()) {
      throw ShapeError("cell logits: shape mismatch at scale " +
                       std::to_string(teacher.scales[i]) + ": " +
                       shape_str(teacher.per_scale[i].shape()) + " vs " +
                       shape_str(student.per_scale[i].shape()));
    }
  }
}

Tensor cell_tensor(const Tensor& per_scale, std::size_t n) {
  const std::size_t batch = per_scale.shape()[0];
  const std::size_t k = per_scale.shape()[2];
  return reshape(slice(per_scale, 1, n, 1), {batch, k});
}

}  // namespace

Tensor kd_loss(const LogitMap& teacher, const LogitMap& student, double temperature,
               bool tau_squared) {
  if (teacher.values.shape() != student.values.shape()) {
    throw ShapeError("kd_loss: logit map mismatch " + shape_str(teacher.values.shape()) + " vs " +
                     shape_str(student.values.shape()));
  }
  if (temperature <= 0.0) throw ConfigError("kd_loss: temperature must be positive");
  const Tensor p_teacher = detach(global_logits(teacher));
  const Tensor p_student = global_logits(student);
  Tensor loss = mean_all(kl_rows_from_logits(p_teacher, p_student, 1, temperature));
  if (tau_squared) loss = scale(loss, temperature * temperature);
  return loss;
}

Tensor sdd_loss(const CellLogits& teacher, const CellLogits& student, const DistillConfig& cfg) {
  cfg.validate();
  require_matching_cells(teacher, student);
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t si = 0; si < teacher.scales.size(); ++si) {
    const Tensor t_cells = detach(teacher.per_scale[si]);  // [B, N, K]
    const Tensor& s_cells = student.per_scale[si];
    const Tensor rows = kl_rows_from_logits(t_cells, s_cells, 2, cfg.temperature);  // [B, N]
    // Batch-average each cell, then accumulate cells unweighted across scales.
    loss = add(loss, sum_all(mean_axis(rows, 0)));
  }
  if (cfg.tau_squared) loss = scale(loss, cfg.temperature * cfg.temperature);
  return loss;
}

Tensor gram(const Tensor& cells, GramMode mode, double eps) {
  if (cells.rank() != 2) {
    throw ShapeError("gram: expected [batch,K] cell logits, got " + shape_str(cells.shape()));
  }
  if (cells.shape()[1] < 2) throw ShapeError("gram: need at least 2 classes");
  const Tensor normalized = l2_normalize(cells, 1, eps);
  if (mode == GramMode::kClassCorrelation) {
    return matmul(transpose(normalized), normalized);
  }
  return matmul(normalized, transpose(normalized));
}

Tensor icd_cell_loss(const Tensor& g_teacher, const Tensor& g_student) {
  if (g_teacher.shape() != g_student.shape()) {
    throw ShapeError("icd_cell_loss: Gram mismatch " + shape_str(g_teacher.shape()) + " vs " +
                     shape_str(g_student.shape()));
  }
  if (g_teacher.rank() != 2 || g_teacher.shape()[0] != g_teacher.shape()[1]) {
    throw ShapeError("icd_cell_loss: expected square Gram, got " + shape_str(g_teacher.shape()));
  }
  const Tensor g_t = detach(g_teacher);
  const Tensor p = softmax(g_t, 1);
  const Tensor log_p = log_softmax(g_t, 1);
  const Tensor log_q = log_softmax(g_student, 1);
  return mean_all(sum_axis(mul(p, sub(log_p, log_q)), 1));
}

std::vector<double> scale_weights(const std::vector<std::size_t>& scales) {
  if (scales.empty()) throw ConfigError("scale_weights: empty scale set");
  for (std::size_t i = 1; i < scales.size(); ++i) {
    if (scales[i] <= scales[i - 1]) {
      throw ConfigError("scale_weights: scales must be strictly increasing");
    }
  }
  const double denom = static_cast<double>(scales.size() * (scales.size() + 1)) / 2.0;
  std::vector<double> weights(scales.size());
  for (std::size_t i = 0; i < scales.size(); ++i) {
    weights[i] = static_cast<double>(i + 1) / denom;
  }
  return weights;
}

Tensor icd_loss(const CellLogits& teacher, const CellLogits& student, const DistillConfig& cfg) {
  cfg.validate();
  require_matching_cells(teacher, student);
  const std::vector<double> weights = scale_weights(teacher.scales);
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t si = 0; si < teacher.scales.size(); ++si) {
    const Tensor t_cells = detach(teacher.per_scale[si]);
    const Tensor& s_cells = student.per_scale[si];
    const std::size_t cells = t_cells.shape()[1];
    double w = weights[si];
    if (cfg.cell_mean) w /= static_cast<double>(cells);
    for (std::size_t n = 0; n < cells; ++n) {
      const Tensor g_t = gram(cell_tensor(t_cells, n), cfg.gram_mode, cfg.eps);
      const Tensor g_s = gram(cell_tensor(s_cells, n), cfg.gram_mode, cfg.eps);
      loss = add(loss, scale(icd_cell_loss(g_t, g_s), w));
    }
  }
  return loss;
}

std::vector<GramPair> gram_pairs(const CellLogits& teacher, const CellLogits& student,
                                 const DistillConfig& cfg) {
  cfg.validate();
  require_matching_cells(teacher, student);
  std::vector<GramPair> pairs;
  for (std::size_t si = 0; si < teacher.scales.size(); ++si) {
    const std::size_t cells = teacher.per_scale[si].shape()[1];
    for (std::size_t n = 0; n < cells; ++n) {
      GramPair pair;
      pair.scale = teacher.scales[si];
      pair.cell = n;
      pair.teacher = gram(cell_tensor(teacher.per_scale[si], n), cfg.gram_mode, cfg.eps).detached();
      pair.student = gram(cell_tensor(student.per_scale[si], n), cfg.gram_mode, cfg.eps).detached();
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

double warmup_factor(std::size_t epoch, std::size_t warmup_epochs) {
  if (warmup_epochs == 0) return 1.0;
  if (epoch >= warmup_epochs) return 1.0;
  return static_cast<double>(epoch) / static_cast<double>(warmup_epochs);
}

Tensor total_loss(const Tensor& ce, const Tensor& sdd, const Tensor& icd,
                  const DistillConfig& cfg, std::size_t epoch) {
  auto check = [](const Tensor& t, const char* name) {
    if (t.size() != 1) throw ShapeError(std::string("total_loss: ") + name + " must be scalar");
    if (!std::isfinite(t.item())) {
      throw DivergenceError(std::string("total_loss: non-finite ") + name + " component");
    }
  };
  check(ce, "ce");
  check(sdd, "sdd");
  check(icd, "icd");
  const double warm = warmup_factor(epoch, cfg.warmup_epochs);
  return add(ce, scale(add(scale(sdd, cfg.alpha), scale(icd, cfg.gamma)), warm));
}

void write_gram_dump(std::ostream& os, const std::vector<GramPair>& pairs, GramMode mode) {
  for (const GramPair& pair : pairs) {
    os << pair.scale << ' ' << pair.cell << ' ' << pair.teacher.shape()[0] << ' '
       << gram_mode_str(mode) << '\n';
    write_tensor(os, pair.teacher);
    write_tensor(os, pair.student);
  }
}

std::vector<GramPair> read_gram_dump(std::istream& is) {
  std::vector<GramPair> pairs;
  std::string header;
  while (std::getline(is, header)) {
    if (header.empty()) continue;
    std::istringstream hs(header);
    GramPair pair;
    std::size_t dim = 0;
    std::string mode;
    if (!(hs >> pair.scale >> pair.cell >> dim >> mode)) {
      throw FormatError("gram dump: bad record header '" + header + "'");
    }
    parse_gram_mode(mode);  // validates
    pair.teacher = read_tensor(is);
    pair.student = read_tensor(is);
    if (pair.teacher.shape() != Shape{dim, dim} || pair.student.shape() != Shape{dim, dim}) {
      throw FormatError("gram dump: blob shape does not match header dimension " +
                        std::to_string(dim));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace icd
