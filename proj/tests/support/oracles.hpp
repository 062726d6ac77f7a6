#pragma once

// Independent scalar-loop reference implementations used to cross-check the
// vectorized library code. Everything here is written directly against raw
// double buffers on purpose; keep it free of icd/ops includes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
  }
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

/// sum_i p_i (ln p_i - ln q_i) for one distribution pair.
inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return acc;
}

inline std::vector<double> l2_normalize(const std::vector<double>& v, double eps) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  const double denom = norm > eps ? norm : eps;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / denom;
  return out;
}

/// KL(softmax(t / tau) || softmax(s / tau)) for one logit-vector pair.
inline double kl_of_logits(const std::vector<double>& t, const std::vector<double>& s,
                           double tau) {
  std::vector<double> ts(t.size()), ss(s.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    ts[i] = t[i] / tau;
    ss[i] = s[i] / tau;
  }
  return kl(softmax(ts), softmax(ss));
}

/// Cell-average logits of a [K, w, w] map over the scale-m grid, cell n in
/// row-major order.
inline std::vector<double> pooled_cell(const std::vector<double>& map, std::size_t k,
                                       std::size_t w, std::size_t m, std::size_t n) {
  const std::size_t cell = w / m;
  const std::size_t cr = n / m, cc = n % m;
  std::vector<double> out(k, 0.0);
  for (std::size_t ki = 0; ki < k; ++ki) {
    double acc = 0.0;
    for (std::size_t r = cr * cell; r < (cr + 1) * cell; ++r) {
      for (std::size_t c = cc * cell; c < (cc + 1) * cell; ++c) {
        acc += map[(ki * w + r) * w + c];
      }
    }
    out[ki] = acc / static_cast<double>(cell * cell);
  }
  return out;
}

/// Batch-mean temperature KL over the global (scale-1) average logits.
inline double kd_loss(const std::vector<double>& t_maps, const std::vector<double>& s_maps,
                      std::size_t batch, std::size_t k, std::size_t w, double tau,
                      bool tau_squared) {
  double acc = 0.0;
  const std::size_t per = k * w * w;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<double> tm(t_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                 t_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    const std::vector<double> sm(s_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                 s_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    acc += kl_of_logits(pooled_cell(tm, k, w, 1, 0), pooled_cell(sm, k, w, 1, 0), tau);
  }
  acc /= static_cast<double>(batch);
  return tau_squared ? acc * tau * tau : acc;
}

/// Sum over scales and cells of batch-mean temperature KLs.
inline double sdd_loss(const std::vector<double>& t_maps, const std::vector<double>& s_maps,
                       std::size_t batch, std::size_t k, std::size_t w,
                       const std::vector<std::size_t>& scales, double tau, bool tau_squared) {
  double total = 0.0;
  const std::size_t per = k * w * w;
  for (std::size_t m : scales) {
    for (std::size_t n = 0; n < m * m; ++n) {
      double cell_acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::vector<double> tm(t_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                     t_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        const std::vector<double> sm(s_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                     s_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        cell_acc += kl_of_logits(pooled_cell(tm, k, w, m, n), pooled_cell(sm, k, w, m, n), tau);
      }
      total += cell_acc / static_cast<double>(batch);
    }
  }
  return tau_squared ? total * tau * tau : total;
}

/// Gram matrix of row-normalized cell logits [batch, K].
inline std::vector<double> gram(const std::vector<double>& cells, std::size_t batch,
                                std::size_t k, bool class_correlation, double eps) {
  std::vector<double> norm(batch * k);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<double> row(cells.begin() + static_cast<std::ptrdiff_t>(b * k),
                                  cells.begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
    const std::vector<double> nrow = l2_normalize(row, eps);
    std::copy(nrow.begin(), nrow.end(), norm.begin() + static_cast<std::ptrdiff_t>(b * k));
  }
  if (class_correlation) {
    std::vector<double> g(k * k, 0.0);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) acc += norm[b * k + a] * norm[b * k + c];
        g[a * k + c] = acc;
      }
    }
    return g;
  }
  std::vector<double> g(batch * batch, 0.0);
  for (std::size_t a = 0; a < batch; ++a) {
    for (std::size_t c = 0; c < batch; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += norm[a * k + i] * norm[c * k + i];
      g[a * batch + c] = acc;
    }
  }
  return g;
}

/// Row-mean KL of row-softmaxed Grams.
inline double icd_cell_loss(const std::vector<double>& g_t, const std::vector<double>& g_s,
                            std::size_t d) {
  double acc = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    const std::vector<double> tr(g_t.begin() + static_cast<std::ptrdiff_t>(r * d),
                                 g_t.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    const std::vector<double> sr(g_s.begin() + static_cast<std::ptrdiff_t>(r * d),
                                 g_s.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    acc += kl(softmax(tr), softmax(sr));
  }
  return acc / static_cast<double>(d);
}

inline std::vector<double> scale_weights(std::size_t count) {
  const double denom = static_cast<double>(count * (count + 1)) / 2.0;
  std::vector<double> w(count);
  for (std::size_t i = 0; i < count; ++i) w[i] = static_cast<double>(i + 1) / denom;
  return w;
}

/// Weighted Gram-loss sum over scales and cells from raw logit maps.
inline double icd_loss(const std::vector<double>& t_maps, const std::vector<double>& s_maps,
                       std::size_t batch, std::size_t k, std::size_t w,
                       const std::vector<std::size_t>& scales, bool class_correlation, double eps,
                       bool cell_mean) {
  const std::vector<double> weights = scale_weights(scales.size());
  const std::size_t per = k * w * w;
  double total = 0.0;
  for (std::size_t si = 0; si < scales.size(); ++si) {
    const std::size_t m = scales[si];
    double weight = weights[si];
    if (cell_mean) weight /= static_cast<double>(m * m);
    for (std::size_t n = 0; n < m * m; ++n) {
      std::vector<double> t_cells(batch * k), s_cells(batch * k);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::vector<double> tm(t_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                     t_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        const std::vector<double> sm(s_maps.begin() + static_cast<std::ptrdiff_t>(b * per),
                                     s_maps.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
        const std::vector<double> tc = pooled_cell(tm, k, w, m, n);
        const std::vector<double> sc = pooled_cell(sm, k, w, m, n);
        std::copy(tc.begin(), tc.end(), t_cells.begin() + static_cast<std::ptrdiff_t>(b * k));
        std::copy(sc.begin(), sc.end(), s_cells.begin() + static_cast<std::ptrdiff_t>(b * k));
      }
      const std::vector<double> g_t = gram(t_cells, batch, k, class_correlation, eps);
      const std::vector<double> g_s = gram(s_cells, batch, k, class_correlation, eps);
      const std::size_t d = class_correlation ? k : batch;
      total += weight * icd_cell_loss(g_t, g_s, d);
    }
  }
  return total;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  for (std::size_t sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    }
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-18) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i * n + p], aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i], aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
  return eig;
}

/// Pearson correlation between columns of rows[n x k], two-pass.
inline std::vector<double> pearson(const std::vector<double>& rows, std::size_t n,
                                   std::size_t k) {
  std::vector<double> mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) mean[a] += rows[i * k + a];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  std::vector<double> cov(k * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        cov[a * k + b] += (rows[i * k + a] - mean[a]) * (rows[i * k + b] - mean[b]);
      }
    }
  }
  for (double& c : cov) c /= static_cast<double>(n);
  std::vector<double> corr(k * k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      const double denom = std::sqrt(cov[a * k + a]) * std::sqrt(cov[b * k + b]);
      corr[a * k + b] = denom > 0.0 ? cov[a * k + b] / denom : 0.0;
    }
  }
  return corr;
}

}  // namespace oracle
