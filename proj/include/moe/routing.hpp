// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>

#include "moe/ops.hpp"
#include "moe/rng.hpp"

namespace moe {

/// Linear router weights, one row of logit weights per expert.
struct RouterParams {
  Tensor weight;  // [n_expert, d_model]
};

/// z = R x.
inline Tensor router_logits(const Tensor& x, const RouterParams& params) {
  return matmul(params.weight, x);
}

/// Index of the largest entry; ties break toward the lowest index. -inf
/// entries never win unless everything is -inf, which is rejected.
inline int argmax_index(const std::vector<double>& z) {
  int best = -1;
  double best_v = kNegInf;
  for (size_t i = 0; i < z.size(); ++i) {
    if (std::isnan(z[i])) throw std::domain_error("argmax: NaN entry");
    if (z[i] > best_v) {
      best_v = z[i];
      best = static_cast<int>(i);
    }
  }
  if (best < 0 || best_v == kNegInf) throw std::domain_error("argmax: all entries are -inf");
  return best;
}

/// Boolean mask of the k largest entries of z; ties break toward the lowest
/// index.
inline std::vector<bool> topk_indicator(const Tensor& z, int k) {
  int n = z.size();
  if (k < 1 || k > n) throw std::invalid_argument("topk_indicator: k out of range");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return z.values[a] > z.values[b]; });
  std::vector<bool> mask(n, false);
  for (int i = 0; i < k; ++i) mask[order[i]] = true;
  return mask;
}

/// Gate distribution produced by masked_softmax: probabilities restricted to
/// a support of logits within a relative threshold of the maximum.
struct GateDistribution {
  Tensor probs;               // zero exactly off-support; on tape iff z was
  std::vector<bool> support;  // the mask, a constant in backward
  double threshold = 0.0;     // r
  double temperature = 1.0;   // tau
};

/// Support of the masked softmax on raw logits: keep i iff
/// z* - z_i <= r * (|z_i| + |z*|). The argmax is always kept; -inf entries
/// never are.
inline std::vector<bool> masked_softmax_support(const std::vector<double>& z, double r_thresh) {
  if (r_thresh < 0.0) throw std::invalid_argument("masked_softmax: threshold must be >= 0");
  int star = argmax_index(z);
  double zs = z[star];
  std::vector<bool> keep(z.size(), false);
  for (size_t i = 0; i < z.size(); ++i) {
    if (z[i] == kNegInf) continue;
    keep[i] = (zs - z[i]) <= r_thresh * (std::abs(z[i]) + std::abs(zs));
  }
  keep[star] = true;
  return keep;
}

/// MaskedSoftmax: softmax of z / tau restricted to the raw-z support.
/// Differentiable in z on the support; the mask is piecewise constant and is
/// treated as a constant in backward.
inline GateDistribution masked_softmax(const Tensor& z, double r_thresh, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("masked_softmax: temperature must be > 0");
  std::vector<bool> keep = masked_softmax_support(z.values, r_thresh);
  Tensor masked = mask_logits(temperature == 1.0 ? z : scale(z, 1.0 / temperature), keep);
  GateDistribution d;
  d.probs = softmax(masked);
  d.support = std::move(keep);
  d.threshold = r_thresh;
  d.temperature = temperature;
  return d;
}

/// Inverse-CDF draw over the support in index order. Identical generator
/// state always yields the identical index.
inline int sample_categorical(const GateDistribution& d, Rng& rng) {
  double u = rng.uniform();
  double cum = 0.0;
  int last = -1;
  for (int i = 0; i < d.probs.size(); ++i) {
    if (!d.support[i]) continue;
    last = i;
    cum += d.probs.values[i];
    if (u < cum) return i;
  }
  if (last < 0) throw std::logic_error("sample_categorical: empty support");
  return last;  // guards against fp residue when u ~ 1
}

}  // namespace moe
