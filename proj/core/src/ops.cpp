#include "icd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

#include "gemm.hpp"
#include "parallel.hpp"

namespace icd {

namespace {

struct AxisView {
  std::size_t outer;  // product of extents before axis
  std::size_t n;      // extent of axis
  std::size_t inner;  // product of extents after axis
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  out.reserve(shape.size() - 1);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_finite(const std::vector<double>& values, const char* op) {
  if (!all_finite(values)) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, double sign_b) {
  require_same_shape(a, b, op);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + sign_b * bv[i];
  return Tensor::make_op(op, a.shape(), std::move(out), {a, b}, [sign_b](detail::Node& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& da = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (pb.requires_grad) {
      auto& db = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += sign_b * g[i];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& da = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& db = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  return Tensor::make_op("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += c * self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return Tensor::make_op("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.value[i] > 0.0) da[i] += self.grad[i];
    }
  });
}

Tensor log(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  require_finite(out, "log");
  return Tensor::make_op("log", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] / pa.value[i];
  });
}

Tensor exp(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  require_finite(out, "exp");
  return Tensor::make_op("exp", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * self.value[i];
  });
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "sum_axis");
  const auto& av = a.data();
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.n; ++i) {
      const double* src = av.data() + (o * v.n + i) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
    }
  }
  return Tensor::make_op("sum_axis", drop_axis(a.shape(), axis), std::move(out), {a},
                         [v](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           if (!pa.requires_grad) return;
                           auto& da = pa.grad_buffer();
                           for (std::size_t o = 0; o < v.outer; ++o) {
                             for (std::size_t i = 0; i < v.n; ++i) {
                               double* dst = da.data() + (o * v.n + i) * v.inner;
                               const double* src = self.grad.data() + o * v.inner;
                               for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
                             }
                           }
                         });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "mean_axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(v.n));
}

Tensor sum_all(const Tensor& a) {
  const auto& av = a.data();
  double acc = 0.0;
  for (double x : av) acc += x;
  const std::size_t n = av.size();
  return Tensor::make_op("sum_all", {}, {acc}, {a}, [n](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) da[i] += g;
  });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  return Tensor::make_op("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) da[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_op("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t count) {
  const AxisView v = axis_view(a.shape(), axis, "slice");
  if (count == 0 || start + count > v.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") invalid for axis extent " +
                     std::to_string(v.n));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = count;
  const auto& av = a.data();
  std::vector<double> out(v.outer * count * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < count; ++i) {
      const double* src = av.data() + (o * v.n + start + i) * v.inner;
      double* dst = out.data() + (o * count + i) * v.inner;
      std::copy(src, src + v.inner, dst);
    }
  }
  return Tensor::make_op("slice", std::move(out_shape), std::move(out), {a},
                         [v, start, count](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           if (!pa.requires_grad) return;
                           auto& da = pa.grad_buffer();
                           for (std::size_t o = 0; o < v.outer; ++o) {
                             for (std::size_t i = 0; i < count; ++i) {
                               double* dst = da.data() + (o * v.n + start + i) * v.inner;
                               const double* src = self.grad.data() + (o * count + i) * v.inner;
                               for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
                             }
                           }
                         });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts[0].shape();
  AxisView v0 = axis_view(first, axis, "concat");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    }
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " +
                         shape_str(p.shape()));
      }
    }
    total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(v0.outer * total * v0.inner);
  std::vector<std::size_t> extents;
  extents.reserve(parts.size());
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t n = p.shape()[axis];
    extents.push_back(n);
    const auto& pv = p.data();
    for (std::size_t o = 0; o < v0.outer; ++o) {
      const double* src = pv.data() + o * n * v0.inner;
      double* dst = out.data() + (o * total + offset) * v0.inner;
      std::copy(src, src + n * v0.inner, dst);
    }
    offset += n;
  }
  return Tensor::make_op(
      "concat", std::move(out_shape), std::move(out), parts,
      [v0, total, extents](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          const std::size_t n = extents[pi];
          if (p.requires_grad) {
            auto& dp = p.grad_buffer();
            for (std::size_t o = 0; o < v0.outer; ++o) {
              const double* src = self.grad.data() + (o * total + off) * v0.inner;
              double* dst = dp.data() + o * n * v0.inner;
              for (std::size_t i = 0; i < n * v0.inner; ++i) dst[i] += src[i];
            }
          }
          off += n;
        }
      });
}

Tensor detach(const Tensor& a) { return a.detached(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      // dA = G * B^T
      detail::gemm_abT_acc(self.grad.data(), pb.value.data(), pa.grad_buffer().data(), m, n, k);
    }
    if (pb.requires_grad) {
      // dB = A^T * G
      detail::gemm_aTb_acc(pa.value.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
    }
  });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "softmax");
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = av[base];
      for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, av[base + i * v.inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double e = std::exp(av[base + i * v.inner] - mx);
        out[base + i * v.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < v.n; ++i) out[base + i * v.inner] /= sum;
    }
  }
  return Tensor::make_op("softmax", a.shape(), std::move(out), {a}, [v](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t idx = base + i * v.inner;
          dot += self.grad[idx] * self.value[idx];
        }
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t idx = base + i * v.inner;
          da[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "log_softmax");
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = av[base];
      for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, av[base + i * v.inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) sum += std::exp(av[base + i * v.inner] - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t i = 0; i < v.n; ++i) {
        out[base + i * v.inner] = av[base + i * v.inner] - lse;
      }
    }
  }
  return Tensor::make_op("log_softmax", a.shape(), std::move(out), {a}, [v](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& da = pa.grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        double gsum = 0.0;
        for (std::size_t i = 0; i < v.n; ++i) gsum += self.grad[base + i * v.inner];
        for (std::size_t i = 0; i < v.n; ++i) {
          const std::size_t idx = base + i * v.inner;
          da[idx] += self.grad[idx] - std::exp(self.value[idx]) * gsum;
        }
      }
    }
  });
}

Tensor l2_normalize(const Tensor& a, std::size_t axis, double eps) {
  if (eps <= 0.0) throw ConfigError("l2_normalize: eps must be positive");
  const AxisView v = axis_view(a.shape(), axis, "l2_normalize");
  const auto& av = a.data();
  std::vector<double> out(av.size());
  std::vector<double> denoms(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double sq = 0.0;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double x = av[base + i * v.inner];
        sq += x * x;
      }
      const double norm = std::sqrt(sq);
      const double denom = norm > eps ? norm : eps;
      denoms[o * v.inner + in] = norm > eps ? norm : 0.0;  // 0 marks the degenerate branch
      for (std::size_t i = 0; i < v.n; ++i) {
        out[base + i * v.inner] = av[base + i * v.inner] / denom;
      }
    }
  }
  return Tensor::make_op(
      "l2_normalize", a.shape(), std::move(out), {a},
      [v, eps, denoms = std::move(denoms)](detail::Node& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        auto& da = pa.grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.n * v.inner + in;
            const double norm = denoms[o * v.inner + in];
            if (norm == 0.0) {
              // Degenerate slice: y = x / eps, a plain linear map.
              for (std::size_t i = 0; i < v.n; ++i) {
                const std::size_t idx = base + i * v.inner;
                da[idx] += self.grad[idx] / eps;
              }
              continue;
            }
            double dot = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) {
              const std::size_t idx = base + i * v.inner;
              dot += self.grad[idx] * self.value[idx];
            }
            for (std::size_t i = 0; i < v.n; ++i) {
              const std::size_t idx = base + i * v.inner;
              da[idx] += (self.grad[idx] - self.value[idx] * dot) / norm;
            }
          }
        }
      });
}

Tensor kl_divergence(const Tensor& p_target, const Tensor& q, std::size_t axis) {
  require_same_shape(p_target, q, "kl_divergence");
  const AxisView v = axis_view(p_target.shape(), axis, "kl_divergence");
  const auto& pv = p_target.data();
  const auto& qv = q.data();
  const std::size_t rows = v.outer * v.inner;

  auto validate = [&](const std::span<const double>& x, const char* name) {
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        const std::size_t row = o * v.inner + in;
        double sum = 0.0;
        for (std::size_t i = 0; i < v.n; ++i) {
          const double e = x[base + i * v.inner];
          if (e < 0.0) {
            throw DistributionError("kl_divergence: negative entry in " + std::string(name) +
                                    " at row " + std::to_string(row));
          }
          sum += e;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
          throw DistributionError("kl_divergence: row " + std::to_string(row) + " of " + name +
                                  " sums to " + std::to_string(sum));
        }
      }
    }
  };
  validate(pv, "p");
  validate(qv, "q");

  double acc = 0.0;
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      for (std::size_t i = 0; i < v.n; ++i) {
        const double p = pv[base + i * v.inner];
        if (p <= 0.0) continue;
        const double qe = qv[base + i * v.inner];
        if (qe <= 0.0) {
          throw DistributionError("kl_divergence: q has zero mass where p > 0 at row " +
                                  std::to_string(o * v.inner + in));
        }
        acc += p * (std::log(p) - std::log(qe));
      }
    }
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return Tensor::make_op(
      "kl_divergence", {}, {acc * inv_rows}, {p_target, q}, [inv_rows](detail::Node& self) {
        auto& pp = *self.parents[0];
        auto& pq = *self.parents[1];
        const double g = self.grad[0] * inv_rows;
        if (pq.requires_grad) {
          auto& dq = pq.grad_buffer();
          for (std::size_t i = 0; i < pq.value.size(); ++i) {
            if (pp.value[i] > 0.0) dq[i] -= g * pp.value[i] / pq.value[i];
          }
        }
        if (pp.requires_grad) {
          auto& dp = pp.grad_buffer();
          for (std::size_t i = 0; i < pp.value.size(); ++i) {
            if (pp.value[i] > 0.0) {
              dp[i] += g * (std::log(pp.value[i]) - std::log(pq.value[i]) + 1.0);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: expected [batch,K] logits, got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  const auto& lv = logits.data();
  double acc = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= k) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    }
    const double* row = lv.data() + b * k;
    double mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(row[i] - mx);
    acc += mx + std::log(sum) - row[labels[b]];
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return Tensor::make_op(
      "cross_entropy", {}, {acc * inv_b}, {logits},
      [labels, batch, k, inv_b](detail::Node& self) {
        auto& pl = *self.parents[0];
        if (!pl.requires_grad) return;
        auto& dl = pl.grad_buffer();
        const double g = self.grad[0] * inv_b;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* row = pl.value.data() + b * k;
          double mx = row[0];
          for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
          double sum = 0.0;
          for (std::size_t i = 0; i < k; ++i) sum += std::exp(row[i] - mx);
          for (std::size_t i = 0; i < k; ++i) {
            const double sm = std::exp(row[i] - mx) / sum;
            dl[b * k + i] += g * (sm - (i == labels[b] ? 1.0 : 0.0));
          }
        }
      });
}

namespace {

void im2col(const double* img, std::size_t cin, std::size_t h, std::size_t w, std::size_t ksize,
            std::size_t stride, std::size_t pad, std::size_t h_out, std::size_t w_out,
            double* col) {
  const std::size_t p = h_out * w_out;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ki = 0; ki < ksize; ++ki) {
      for (std::size_t kj = 0; kj < ksize; ++kj) {
        double* dst = col + ((c * ksize + ki) * ksize + kj) * p;
        for (std::size_t oy = 0; oy < h_out; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < w_out; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                                ix < static_cast<std::ptrdiff_t>(w);
            dst[oy * w_out + ox] = inside ? img[(c * h + iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t ksize, std::size_t stride, std::size_t pad, std::size_t h_out,
                std::size_t w_out, double* img) {
  const std::size_t p = h_out * w_out;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ki = 0; ki < ksize; ++ki) {
      for (std::size_t kj = 0; kj < ksize; ++kj) {
        const double* src = col + ((c * ksize + ki) * ksize + kj) * p;
        for (std::size_t oy = 0; oy < h_out; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < w_out; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            img[(c * h + iy) * w + ix] += src[oy * w_out + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d: expected x[B,C,H,W], w[O,C,k,k], bias[O]");
  }
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::size_t cout = w.shape()[0], ksize = w.shape()[2];
  if (w.shape()[1] != cin || w.shape()[3] != ksize || bias.shape()[0] != cout) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * pad < ksize || wd + 2 * pad < ksize) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  const std::size_t h_out = (h + 2 * pad - ksize) / stride + 1;
  const std::size_t w_out = (wd + 2 * pad - ksize) / stride + 1;
  const std::size_t p = h_out * w_out;
  const std::size_t krows = cin * ksize * ksize;

  std::vector<double> out(batch * cout * p);
  const double* xd = x.data().data();
  const double* wd_ = w.data().data();
  const double* bd = bias.data().data();

  detail::parallel_chunks(batch, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<double> col(krows * p);
    for (std::size_t b = begin; b < end; ++b) {
      im2col(xd + b * cin * h * wd, cin, h, wd, ksize, stride, pad, h_out, w_out, col.data());
      double* dst = out.data() + b * cout * p;
      for (std::size_t co = 0; co < cout; ++co) {
        std::fill(dst + co * p, dst + (co + 1) * p, bd[co]);
      }
      detail::gemm_acc(wd_, col.data(), dst, cout, krows, p);
    }
  });

  auto backward = [batch, cin, h, wd, cout, ksize, stride, pad, h_out, w_out, p,
                   krows](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const double* xv = px.value.data();
    const double* wv = pw.value.data();
    const double* g = self.grad.data();

    const bool need_dx = px.requires_grad;
    const bool need_dw = pw.requires_grad;
    const bool need_db = pb.requires_grad;

    double* dx = need_dx ? px.grad_buffer().data() : nullptr;
    std::vector<std::vector<double>> dw_parts(detail::kReductionChunks);
    std::vector<std::vector<double>> db_parts(detail::kReductionChunks);

    detail::parallel_chunks(batch, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
      std::vector<double> col(krows * p);
      std::vector<double> dcol(need_dx ? krows * p : 0);
      if (need_dw) dw_parts[chunk].assign(cout * krows, 0.0);
      if (need_db) db_parts[chunk].assign(cout, 0.0);
      for (std::size_t b = begin; b < end; ++b) {
        const double* gb = g + b * cout * p;
        if (need_dw || need_dx) {
          im2col(xv + b * cin * h * wd, cin, h, wd, ksize, stride, pad, h_out, w_out, col.data());
        }
        if (need_dw) {
          detail::gemm_abT_acc(gb, col.data(), dw_parts[chunk].data(), cout, p, krows);
        }
        if (need_db) {
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p; ++i) acc += gb[co * p + i];
            db_parts[chunk][co] += acc;
          }
        }
        if (need_dx) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          detail::gemm_aTb_acc(wv, gb, dcol.data(), cout, krows, p);
          col2im_acc(dcol.data(), cin, h, wd, ksize, stride, pad, h_out, w_out,
                     dx + b * cin * h * wd);
        }
      }
    });

    // Chunk partials are reduced in fixed chunk order.
    if (need_dw) {
      auto& dw = pw.grad_buffer();
      for (const auto& part : dw_parts) {
        if (part.empty()) continue;
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += part[i];
      }
    }
    if (need_db) {
      auto& db = pb.grad_buffer();
      for (const auto& part : db_parts) {
        if (part.empty()) continue;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += part[i];
      }
    }
  };

  return Tensor::make_op("conv2d", {batch, cout, h_out, w_out}, std::move(out), {x, w, bias},
                         std::move(backward));
}

Tensor project_positions(const Tensor& features, const Tensor& w) {
  if (features.rank() != 4 || w.rank() != 2 || features.shape()[1] != w.shape()[0]) {
    throw ShapeError("project_positions: features " + shape_str(features.shape()) +
                     " incompatible with projection " + shape_str(w.shape()));
  }
  const std::size_t batch = features.shape()[0], c = features.shape()[1];
  const std::size_t h = features.shape()[2], wd = features.shape()[3];
  const std::size_t k = w.shape()[1];
  const std::size_t p = h * wd;

  // out[b,k,p] = sum_c W[c,k] * f[b,c,p]; gemm wants W^T rows, so accumulate
  // per input channel instead.
  std::vector<double> out(batch * k * p, 0.0);
  const double* fv = features.data().data();
  const double* wv = w.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    double* ob = out.data() + b * k * p;
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* frow = fv + (b * c + ci) * p;
      const double* wrow = wv + ci * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double wk = wrow[kk];
        double* orow = ob + kk * p;
        for (std::size_t i = 0; i < p; ++i) orow[i] += wk * frow[i];
      }
    }
  }
  return Tensor::make_op(
      "project_positions", {batch, k, h, wd}, std::move(out), {features, w},
      [batch, c, k, p](detail::Node& self) {
        auto& pf = *self.parents[0];
        auto& pw = *self.parents[1];
        const double* g = self.grad.data();
        if (pf.requires_grad) {
          auto& df = pf.grad_buffer();
          const double* wv = pw.value.data();
          for (std::size_t b = 0; b < batch; ++b) {
            const double* gb = g + b * k * p;
            double* fb = df.data() + b * c * p;
            for (std::size_t ci = 0; ci < c; ++ci) {
              const double* wrow = wv + ci * k;
              double* frow = fb + ci * p;
              for (std::size_t kk = 0; kk < k; ++kk) {
                const double wk = wrow[kk];
                const double* grow = gb + kk * p;
                for (std::size_t i = 0; i < p; ++i) frow[i] += wk * grow[i];
              }
            }
          }
        }
        if (pw.requires_grad) {
          auto& dw = pw.grad_buffer();
          const double* fv = pf.value.data();
          for (std::size_t b = 0; b < batch; ++b) {
            const double* gb = g + b * k * p;
            const double* fb = fv + b * c * p;
            for (std::size_t ci = 0; ci < c; ++ci) {
              const double* frow = fb + ci * p;
              double* wrow = dw.data() + ci * k;
              for (std::size_t kk = 0; kk < k; ++kk) {
                const double* grow = gb + kk * p;
                double acc = 0.0;
                for (std::size_t i = 0; i < p; ++i) acc += frow[i] * grow[i];
                wrow[kk] += acc;
              }
            }
          }
        }
      });
}

Tensor pool_cells_scale(const Tensor& map, std::size_t m) {
  if (map.rank() != 4 || map.shape()[2] != map.shape()[3]) {
    throw ShapeError("pool_cells_scale: expected square map [B,K,w,w], got " +
                     shape_str(map.shape()));
  }
  const std::size_t batch = map.shape()[0], k = map.shape()[1], w = map.shape()[2];
  if (m == 0 || w % m != 0) {
    throw ShapeError("pool_cells_scale: scale " + std::to_string(m) +
                     " does not divide map width " + std::to_string(w));
  }
  const std::size_t cell = w / m;
  const std::size_t cells = m * m;
  const double inv_count = 1.0 / static_cast<double>(cell * cell);

  const auto& mv = map.data();
  std::vector<double> out(batch * cells * k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t cr = 0; cr < m; ++cr) {
      for (std::size_t cc = 0; cc < m; ++cc) {
        const std::size_t n = cr * m + cc;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const double* plane = mv.data() + (b * k + ki) * w * w;
          double acc = 0.0;
          for (std::size_t jr = cr * cell; jr < (cr + 1) * cell; ++jr) {
            for (std::size_t jc = cc * cell; jc < (cc + 1) * cell; ++jc) {
              acc += plane[jr * w + jc];
            }
          }
          out[(b * cells + n) * k + ki] = acc * inv_count;
        }
      }
    }
  }
  return Tensor::make_op(
      "pool_cells_scale", {batch, cells, k}, std::move(out), {map},
      [batch, k, w, m, cell, cells, inv_count](detail::Node& self) {
        auto& pm = *self.parents[0];
        if (!pm.requires_grad) return;
        auto& dm = pm.grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t cr = 0; cr < m; ++cr) {
            for (std::size_t cc = 0; cc < m; ++cc) {
              const std::size_t n = cr * m + cc;
              for (std::size_t ki = 0; ki < k; ++ki) {
                const double g = self.grad[(b * cells + n) * k + ki] * inv_count;
                double* plane = dm.data() + (b * k + ki) * w * w;
                for (std::size_t jr = cr * cell; jr < (cr + 1) * cell; ++jr) {
                  for (std::size_t jc = cc * cell; jc < (cc + 1) * cell; ++jc) {
                    plane[jr * w + jc] += g;
                  }
                }
              }
            }
          }
        }
      });
}

}  // namespace icd
