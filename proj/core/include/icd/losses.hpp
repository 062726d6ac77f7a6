#pragma once

#include <iosfwd>
#include <vector>

#include "icd/scale.hpp"

namespace icd {

/// How the Gram matrix of a cell's normalized logits is oriented.
///   kClassCorrelation:  X'^T X', K x K, independent of the batch size.
///   kSampleSimilarity:  X' X'^T, batch x batch cosine similarities.
enum class GramMode { kClassCorrelation, kSampleSimilarity };

const char* gram_mode_str(GramMode mode);
GramMode parse_gram_mode(const std::string& text);

struct DistillConfig {
  std::vector<std::size_t> scales{1, 2, 4};
  double temperature = 4.0;
  double alpha = 1.0;        // scale-decoupled loss weight
  double gamma = 2.0;        // structural loss weight
  double kd_weight = 1.0;    // plain-KD baseline weight; configs default it to alpha
  std::size_t warmup_epochs = 30;
  GramMode gram_mode = GramMode::kClassCorrelation;
  double eps = 1e-12;        // normalization floor
  bool cell_mean = false;    // divide each scale's cell sum by the cell count
  bool tau_squared = true;   // classic temperature-squared gradient rescaling

  void validate() const;
};

/// Teacher and student Gram matrices for one (scale, cell) position.
struct GramPair {
  std::size_t scale = 0;
  std::size_t cell = 0;
  Tensor teacher;
  Tensor student;
};

/// KL(softmax(P_T / tau) || softmax(P_S / tau)) * tau^2, batch-averaged,
/// over the spatially averaged global logits. Gradients reach only the
/// student map.
Tensor kd_loss(const LogitMap& teacher, const LogitMap& student, double temperature,
               bool tau_squared = true);

/// Sum over scales and cells of the per-cell temperature KL, batch-averaged
/// per cell and unweighted across scales.
Tensor sdd_loss(const CellLogits& teacher, const CellLogits& student, const DistillConfig& cfg);

/// Gram matrix of one cell's logits [batch, K]: rows are L2-normalized along
/// the class dimension first.
Tensor gram(const Tensor& cells, GramMode mode, double eps);

/// Row-wise softmax of each Gram (temperature 1), then row-averaged
/// KL(sigma(G_T) || sigma(G_S)). Gradients reach only G_S.
Tensor icd_cell_loss(const Tensor& g_teacher, const Tensor& g_student);

/// Rank-proportional weights for the ascending scale set: i / sum(1..|M|).
std::vector<double> scale_weights(const std::vector<std::size_t>& scales);

/// Weighted sum over scales and cells of the structural cell losses.
Tensor icd_loss(const CellLogits& teacher, const CellLogits& student, const DistillConfig& cfg);

/// All teacher/student Gram pairs in (scale, cell) order; the raw material
/// for gram dumps and diagnostics.
std::vector<GramPair> gram_pairs(const CellLogits& teacher, const CellLogits& student,
                                 const DistillConfig& cfg);

/// Linear ramp min(1, epoch / warmup_epochs); 1 when warmup_epochs is 0.
double warmup_factor(std::size_t epoch, std::size_t warmup_epochs);

/// L = L_CE + warmup * (alpha * L_SDD + gamma * L_iCD).
Tensor total_loss(const Tensor& ce, const Tensor& sdd, const Tensor& icd,
                  const DistillConfig& cfg, std::size_t epoch);

// Gram dump container: per (m,n) record a text header "m n d mode" line
// followed by the teacher and student Gram tensors as ICDT blobs.
void write_gram_dump(std::ostream& os, const std::vector<GramPair>& pairs, GramMode mode);
std::vector<GramPair> read_gram_dump(std::istream& is);

}  // namespace icd
