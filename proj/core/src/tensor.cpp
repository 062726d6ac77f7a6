#include "icd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace icd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto n = std::make_shared<detail::Node>();
  n->value.assign(shape_numel(shape), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto n = std::make_shared<detail::Node>();
  n->value.assign(shape_numel(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}, false); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->value[0];
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) throw Error("tensor has no gradient; call backward() first");
  return node_->grad;
}

Tensor Tensor::make_op(const char* op, Shape shape, std::vector<double> value,
                       std::vector<Tensor> parents, std::function<void(detail::Node&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node_ptr());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor(std::move(n));
}

void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() requires a single-element root, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order over grad-requiring nodes; reverse gives topo order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace icd
