#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "icd/errors.hpp"

namespace icd {

/// Extents of a dense row-major tensor. Rank 0 (empty shape) is a scalar.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One node of the define-by-run graph. Values are immutable after
/// construction; only the gradient buffer is written during backward().
struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // pushes this->grad into parents
  const char* op = "leaf";

  std::size_t size() const { return value.size(); }

  /// Gradient buffer, allocated and zeroed on first use.
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Value-semantics handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  /// Value of a single-element tensor.
  double item() const;

  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Leaf copy of the values that does not participate in any graph.
  Tensor detached() const { return from_data(node_->shape, node_->value, false); }

  /// Leaf copy of the values with requires_grad set. Used by grad_check and
  /// by the optimizer when producing updated parameters.
  Tensor leaf_with_grad() const { return from_data(node_->shape, node_->value, true); }

  /// Reverse-mode sweep from a single-element root. Accumulates into the
  /// grad buffers of every reachable node that requires a gradient.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  /// Builds an op result node. Used by the op layer; not part of the
  /// public modelling API.
  static Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents, std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// True when every element of the span is finite.
bool all_finite(std::span<const double> values);

}  // namespace icd
