#pragma once

#include <string>
#include <vector>

#include "icd/ops.hpp"
#include "icd/rng.hpp"
#include "icd/tensor.hpp"

namespace icd {

struct StageSpec {
  std::size_t channels = 0;
  std::size_t stride = 1;
  bool operator==(const StageSpec&) const = default;
};

/// Architecture of one plain conv+relu network: 3x3 kernels, padding 1,
/// per-stage stride, no normalization layers, a bias-free linear classifier.
struct ConvNetSpec {
  std::vector<StageSpec> stages;
  std::size_t feature_channels = 0;  // channels of the penultimate feature map
  std::size_t map_width = 0;         // spatial size w of the (square) feature map
  std::size_t num_classes = 0;

  void validate() const;
  bool operator==(const ConvNetSpec&) const = default;

  /// Output width of the stage stack for a square input.
  static std::size_t output_width(const std::vector<StageSpec>& stages, std::size_t image_size);

  static ConvNetSpec make(std::vector<StageSpec> stages, std::size_t image_size,
                          std::size_t num_classes);

  /// 4 stages, 128 feature channels.
  static ConvNetSpec teacher_default(std::size_t num_classes, std::size_t image_size);
  /// 3 stages, 64 feature channels.
  static ConvNetSpec student_default(std::size_t num_classes, std::size_t image_size);
};

std::string stages_str(const std::vector<StageSpec>& stages);
std::vector<StageSpec> parse_stages(const std::string& text);

/// Per-position class scores [batch, K, w, w].
struct LogitMap {
  Tensor values;

  explicit LogitMap(Tensor v);
  std::size_t batch() const { return values.shape()[0]; }
  std::size_t classes() const { return values.shape()[1]; }
  std::size_t width() const { return values.shape()[2]; }
};

struct Parameter {
  std::string name;
  Tensor value;
};

class ConvNet {
 public:
  /// Kaiming-uniform (fan-in) conv and classifier weights, zero biases.
  ConvNet(ConvNetSpec spec, Rng& init_rng, bool trainable = true);

  /// Reconstructs a network from named parameter tensors (checkpoint load).
  ConvNet(ConvNetSpec spec, const std::vector<std::pair<std::string, Tensor>>& tensors,
          bool trainable);

  const ConvNetSpec& spec() const { return spec_; }
  bool trainable() const { return trainable_; }

  /// Penultimate feature map [B, c, w, w] for images [B, 3, H, W].
  Tensor forward_features(const Tensor& images) const;

  /// project_logit_map(forward_features(images), classifier()).
  LogitMap logit_map(const Tensor& images) const;

  const Tensor& classifier() const { return params_.back().value; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  void replace_param(std::size_t index, Tensor value);

 private:
  ConvNetSpec spec_;
  std::vector<Parameter> params_;  // stage<i>.weight, stage<i>.bias, ..., classifier.weight
  bool trainable_;
};

/// Feature forward through a stage stack given raw parameter tensors in
/// canonical order (stage weight/bias pairs, classifier last). Lets callers
/// differentiate with respect to any parameter tensor they pass in.
Tensor forward_features_with(const ConvNetSpec& spec, const std::vector<Tensor>& params,
                             const Tensor& images);

/// L(j,k) = W^T f(j,k) at every position. features [B,c,h,w], w [c,K].
LogitMap project_logit_map(const Tensor& features, const Tensor& w);

/// Spatial average of the logit map, [B,K]. Equals the single cell of the
/// scale-1 pooling exactly (same summation order).
Tensor global_logits(const LogitMap& map);

}  // namespace icd
