// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "moe/tensor.hpp"

// Differentiable primitives over Tensor. Broadcasting is deliberately
// narrow: same shape, a scalar on either side, or a rank-1 tensor against
// the trailing axis of a higher-rank tensor. Anything else is a hard error
// so every backward rule stays auditable.

namespace moe {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

enum class Bcast { Same, ScalarRhs, ScalarLhs, TrailingRhs, TrailingLhs };

inline Bcast classify(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape == b.shape) return Bcast::Same;
  if (b.size() == 1 && b.rank() == 0) return Bcast::ScalarRhs;
  if (a.size() == 1 && a.rank() == 0) return Bcast::ScalarLhs;
  if (a.rank() >= 1 && b.rank() == 1 && a.shape.back() == b.shape[0]) return Bcast::TrailingRhs;
  if (b.rank() >= 1 && a.rank() == 1 && b.shape.back() == a.shape[0]) return Bcast::TrailingLhs;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape) +
                              " vs " + shape_str(b.shape));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  using detail::Bcast;
  Bcast m = detail::classify(a, b, "add");
  const Tensor& big = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs) ? b : a;
  std::vector<double> out(big.values);
  int n_out = big.size();
  int nb = (m == Bcast::Same) ? n_out : (m == Bcast::ScalarRhs || m == Bcast::ScalarLhs) ? 1
                                        : (m == Bcast::TrailingRhs ? b.size() : a.size());
  const std::vector<double>& small = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs) ? a.values : b.values;
  for (int i = 0; i < n_out; ++i) out[i] += small[i % nb];
  bool a_is_small = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs);
  return make_op({&a, &b}, big.shape, std::move(out),
                 [n_out, nb, a_is_small](const double* g, const std::vector<double*>& gin) {
                   double* gbig = a_is_small ? gin[1] : gin[0];
                   double* gsmall = a_is_small ? gin[0] : gin[1];
                   if (gbig)
                     for (int i = 0; i < n_out; ++i) gbig[i] += g[i];
                   if (gsmall)
                     for (int i = 0; i < n_out; ++i) gsmall[i % nb] += g[i];
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  using detail::Bcast;
  Bcast m = detail::classify(a, b, "sub");
  const Tensor& big = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs) ? b : a;
  bool a_is_small = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs);
  int n_out = big.size();
  int nb = (m == Bcast::Same) ? n_out : a_is_small ? a.size() : b.size();
  std::vector<double> out(n_out);
  for (int i = 0; i < n_out; ++i)
    out[i] = a_is_small ? a.values[i % nb] - b.values[i] : a.values[i] - b.values[i % nb];
  return make_op({&a, &b}, big.shape, std::move(out),
                 [n_out, nb, a_is_small](const double* g, const std::vector<double*>& gin) {
                   if (a_is_small) {
                     if (gin[0])
                       for (int i = 0; i < n_out; ++i) gin[0][i % nb] += g[i];
                     if (gin[1])
                       for (int i = 0; i < n_out; ++i) gin[1][i] -= g[i];
                   } else {
                     if (gin[0])
                       for (int i = 0; i < n_out; ++i) gin[0][i] += g[i];
                     if (gin[1])
                       for (int i = 0; i < n_out; ++i) gin[1][i % nb] -= g[i];
                   }
                 });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  using detail::Bcast;
  Bcast m = detail::classify(a, b, "mul");
  const Tensor& big = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs) ? b : a;
  bool a_is_small = (m == Bcast::ScalarLhs || m == Bcast::TrailingLhs);
  int n_out = big.size();
  int nb = (m == Bcast::Same) ? n_out : a_is_small ? a.size() : b.size();
  std::vector<double> out(n_out);
  for (int i = 0; i < n_out; ++i)
    out[i] = a_is_small ? a.values[i % nb] * b.values[i] : a.values[i] * b.values[i % nb];
  std::vector<double> av = a.values, bv = b.values;
  return make_op({&a, &b}, big.shape, std::move(out),
                 [n_out, nb, a_is_small, av = std::move(av), bv = std::move(bv)](
                     const double* g, const std::vector<double*>& gin) {
                   const std::vector<double>& bigv = a_is_small ? bv : av;
                   const std::vector<double>& smallv = a_is_small ? av : bv;
                   double* gbig = a_is_small ? gin[1] : gin[0];
                   double* gsmall = a_is_small ? gin[0] : gin[1];
                   if (gbig)
                     for (int i = 0; i < n_out; ++i) gbig[i] += g[i] * smallv[i % nb];
                   if (gsmall)
                     for (int i = 0; i < n_out; ++i) gsmall[i % nb] += g[i] * bigv[i];
                 });
}

/// a / b with scalar b.
inline Tensor div(const Tensor& a, const Tensor& b) {
  if (b.size() != 1) throw std::invalid_argument("div: divisor must be scalar");
  double bv = b.values[0];
  int n = a.size();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = a.values[i] / bv;
  std::vector<double> av = a.values;
  return make_op({&a, &b}, a.shape, std::move(out),
                 [n, bv, av = std::move(av)](const double* g, const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i) gin[0][i] += g[i] / bv;
                   if (gin[1]) {
                     double acc = 0.0;
                     for (int i = 0; i < n; ++i) acc += g[i] * av[i];
                     gin[1][0] -= acc / (bv * bv);
                   }
                 });
}

/// Multiply by a compile-time-known constant.
inline Tensor scale(const Tensor& t, double c) {
  int n = t.size();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = t.values[i] * c;
  return make_op({&t}, t.shape, std::move(out),
                 [n, c](const double* g, const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i) gin[0][i] += g[i] * c;
                 });
}

/// A[m,k] x B[k,n] -> [m,n], or A[m,k] x b[k] -> [m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) throw std::invalid_argument("matmul: lhs must be rank 2");
  int m = a.shape[0], k = a.shape[1];
  if (b.rank() == 1) {
    if (b.shape[0] != k)
      throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape) + " vs " +
                                  shape_str(b.shape));
    std::vector<double> out(m, 0.0);
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += a.values[i * k + l] * b.values[l];
      out[i] = acc;
    }
    std::vector<double> av = a.values, bv = b.values;
    return make_op({&a, &b}, Shape{m}, std::move(out),
                   [m, k, av = std::move(av), bv = std::move(bv)](const double* g,
                                                                  const std::vector<double*>& gin) {
                     if (gin[0])
                       for (int i = 0; i < m; ++i)
                         for (int l = 0; l < k; ++l) gin[0][i * k + l] += g[i] * bv[l];
                     if (gin[1])
                       for (int i = 0; i < m; ++i)
                         for (int l = 0; l < k; ++l) gin[1][l] += av[i * k + l] * g[i];
                   });
  }
  if (b.rank() != 2 || b.shape[0] != k)
    throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  int n = b.shape[1];
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      double ail = a.values[i * k + l];
      for (int j = 0; j < n; ++j) out[i * n + j] += ail * b.values[l * n + j];
    }
  std::vector<double> av = a.values, bv = b.values;
  return make_op({&a, &b}, Shape{m, n}, std::move(out),
                 [m, k, n, av = std::move(av), bv = std::move(bv)](const double* g,
                                                                   const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < m; ++i)
                       for (int l = 0; l < k; ++l) {
                         double acc = 0.0;
                         for (int j = 0; j < n; ++j) acc += g[i * n + j] * bv[l * n + j];
                         gin[0][i * k + l] += acc;
                       }
                   if (gin[1])
                     for (int l = 0; l < k; ++l)
                       for (int j = 0; j < n; ++j) {
                         double acc = 0.0;
                         for (int i = 0; i < m; ++i) acc += av[i * k + l] * g[i * n + j];
                         gin[1][l * n + j] += acc;
                       }
                 });
}

inline Tensor reduce_sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values) acc += v;
  int n = t.size();
  return make_op({&t}, Shape{}, {acc},
                 [n](const double* g, const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i) gin[0][i] += g[0];
                 });
}

inline Tensor exp(const Tensor& t) {
  int n = t.size();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = std::exp(t.values[i]);
  std::vector<double> saved = out;
  return make_op({&t}, t.shape, std::move(out),
                 [n, saved = std::move(saved)](const double* g, const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i) gin[0][i] += g[i] * saved[i];
                 });
}

inline Tensor log(const Tensor& t) {
  int n = t.size();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    double v = t.values[i];
    if (!(v > 0.0) || !std::isfinite(v)) throw std::domain_error("log: input must be finite and positive");
    out[i] = std::log(v);
  }
  std::vector<double> xv = t.values;
  return make_op({&t}, t.shape, std::move(out),
                 [n, xv = std::move(xv)](const double* g, const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i) gin[0][i] += g[i] / xv[i];
                 });
}

inline Tensor silu(const Tensor& t) {
  int n = t.size();
  std::vector<double> out(n), sig(n);
  for (int i = 0; i < n; ++i) {
    double s = 1.0 / (1.0 + std::exp(-t.values[i]));
    sig[i] = s;
    out[i] = t.values[i] * s;
  }
  std::vector<double> xv = t.values;
  return make_op({&t}, t.shape, std::move(out),
                 [n, sig = std::move(sig), xv = std::move(xv)](const double* g,
                                                               const std::vector<double*>& gin) {
                   if (gin[0])
                     for (int i = 0; i < n; ++i)
                       gin[0][i] += g[i] * sig[i] * (1.0 + xv[i] * (1.0 - sig[i]));
                 });
}

/// Softmax over the trailing axis. -inf logits map to exactly zero
/// probability; NaN and +inf are rejected, as is an all--inf row.
inline Tensor softmax(const Tensor& t, int axis = -1) {
  if (t.rank() < 1) throw std::invalid_argument("softmax: rank must be >= 1");
  if (axis != -1 && axis != t.rank() - 1)
    throw std::invalid_argument("softmax: only the trailing axis is supported");
  int n = t.shape.back();
  int rows = t.size() / n;
  std::vector<double> out(t.size());
  for (int r = 0; r < rows; ++r) {
    const double* z = t.values.data() + r * n;
    double m = kNegInf;
    for (int i = 0; i < n; ++i) {
      if (std::isnan(z[i]) || z[i] == std::numeric_limits<double>::infinity())
        throw std::domain_error("softmax: input must be finite or -inf");
      m = std::max(m, z[i]);
    }
    if (m == kNegInf) throw std::domain_error("softmax: all entries are -inf");
    double denom = 0.0;
    for (int i = 0; i < n; ++i) denom += std::exp(z[i] - m);
    for (int i = 0; i < n; ++i) out[r * n + i] = std::exp(z[i] - m) / denom;
  }
  std::vector<double> p = out;
  return make_op({&t}, t.shape, std::move(out),
                 [rows, n, p = std::move(p)](const double* g, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (int r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (int i = 0; i < n; ++i) dot += g[r * n + i] * p[r * n + i];
                     for (int i = 0; i < n; ++i)
                       gin[0][r * n + i] += p[r * n + i] * (g[r * n + i] - dot);
                   }
                 });
}

/// LayerNorm over a rank-1 input with elementwise gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.rank() != 1 || gamma.shape != x.shape || beta.shape != x.shape)
    throw std::invalid_argument("layer_norm: expects rank-1 x with matching gain/bias");
  int n = x.size();
  double mean = 0.0;
  for (double v : x.values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x.values) var += (v - mean) * (v - mean);
  var /= n;
  double inv_std = 1.0 / std::sqrt(var + eps);
  std::vector<double> xhat(n), out(n);
  for (int i = 0; i < n; ++i) {
    xhat[i] = (x.values[i] - mean) * inv_std;
    out[i] = gamma.values[i] * xhat[i] + beta.values[i];
  }
  std::vector<double> gv = gamma.values;
  return make_op({&x, &gamma, &beta}, x.shape, std::move(out),
                 [n, inv_std, xhat = std::move(xhat), gv = std::move(gv)](
                     const double* g, const std::vector<double*>& gin) {
                   if (gin[1])
                     for (int i = 0; i < n; ++i) gin[1][i] += g[i] * xhat[i];
                   if (gin[2])
                     for (int i = 0; i < n; ++i) gin[2][i] += g[i];
                   if (gin[0]) {
                     double mean_gg = 0.0, mean_ggx = 0.0;
                     for (int i = 0; i < n; ++i) {
                       mean_gg += g[i] * gv[i];
                       mean_ggx += g[i] * gv[i] * xhat[i];
                     }
                     mean_gg /= n;
                     mean_ggx /= n;
                     for (int i = 0; i < n; ++i)
                       gin[0][i] += (g[i] * gv[i] - mean_gg - xhat[i] * mean_ggx) * inv_std;
                   }
                 });
}

/// -log softmax(z)[label] for rank-1 logits. Backward is the fused
/// softmax(z) - onehot(label).
inline Tensor cross_entropy(const Tensor& logits, int label) {
  if (logits.rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank 1");
  int n = logits.size();
  if (label < 0 || label >= n) throw std::invalid_argument("cross_entropy: label out of range");
  double m = kNegInf;
  for (double v : logits.values) {
    if (!std::isfinite(v)) throw std::domain_error("cross_entropy: logits must be finite");
    m = std::max(m, v);
  }
  double denom = 0.0;
  for (double v : logits.values) denom += std::exp(v - m);
  double loss = m + std::log(denom) - logits.values[label];
  std::vector<double> p(n);
  for (int i = 0; i < n; ++i) p[i] = std::exp(logits.values[i] - m) / denom;
  return make_op({&logits}, Shape{}, {loss},
                 [n, label, p = std::move(p)](const double* g, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (int i = 0; i < n; ++i) gin[0][i] += g[0] * (p[i] - (i == label ? 1.0 : 0.0));
                 });
}

/// Picks element `index` as a differentiable scalar (gradient scatters back).
inline Tensor at(const Tensor& t, int index) {
  if (index < 0 || index >= t.size()) throw std::invalid_argument("at: index out of range");
  return make_op({&t}, Shape{}, {t.values[index]},
                 [index](const double* g, const std::vector<double*>& gin) {
                   if (gin[0]) gin[0][index] += g[0];
                 });
}

/// Keeps entries where `keep` is true and fills the rest with -inf. The mask
/// is a constant in backward: gradient passes only through kept entries.
inline Tensor mask_logits(const Tensor& t, const std::vector<bool>& keep) {
  if (static_cast<int>(keep.size()) != t.size())
    throw std::invalid_argument("mask_logits: mask length mismatch");
  int n = t.size();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = keep[i] ? t.values[i] : kNegInf;
  return make_op({&t}, t.shape, std::move(out),
                 [keep](const double* g, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (size_t i = 0; i < keep.size(); ++i)
                     if (keep[i]) gin[0][i] += g[i];
                 });
}

}  // namespace moe
