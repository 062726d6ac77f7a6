#pragma once

#include <cstddef>
#include <vector>

#include "icd/tensor.hpp"

namespace icd {

// Elementwise. Operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);

// Reductions. Axis reductions drop the reduced axis.
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Structure.
Tensor transpose(const Tensor& a);  // rank-2 only
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t count);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// Same values, no graph edge. Gradients never flow through the result.
Tensor detach(const Tensor& a);

/// Row-major [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Axis-wise nonlinearities. Slices run along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// Slices with Euclidean norm > eps are scaled to unit norm; degenerate
/// slices (norm <= eps) are divided by eps, so zero maps to zero.
Tensor l2_normalize(const Tensor& a, std::size_t axis, double eps = 1e-12);

/// Mean over all slices of sum_i p_i (log p_i - log q_i). Both operands must
/// be probability distributions along `axis` (slice sums within 1e-9 of 1).
/// The teacher/target distribution is the first argument.
Tensor kl_divergence(const Tensor& p_target, const Tensor& q, std::size_t axis);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

/// 2-D convolution, square kernel, symmetric zero padding.
/// x: [B,Cin,H,W], w: [Cout,Cin,k,k], bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);

/// Applies the classifier at every spatial position.
/// features: [B,C,h,w], w: [C,K] -> [B,K,h,w].
Tensor project_positions(const Tensor& features, const Tensor& w);

/// Averages a logit map over the m*m non-overlapping cells of its grid.
/// map: [B,K,w,w] -> [B,m*m,K]; cells enumerate row-major.
Tensor pool_cells_scale(const Tensor& map, std::size_t m);

}  // namespace icd
