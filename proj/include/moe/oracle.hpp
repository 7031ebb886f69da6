// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moe/estimators.hpp"

// Exact brute-force references. Everything here enumerates small discrete
// outcome spaces or differentiates numerically; none of it shares a code
// path with the tape backward rules it is used to check.

namespace moe {

constexpr int kMaxEnumerableExperts = 8;

/// Probability mass of one (expert, Bernoulli) outcome.
struct OutcomeWeight {
  int expert = -1;
  int bernoulli = 0;
  double mass = 0.0;
};

/// Downstream scalar function f standing in for "the rest of the network".
/// Applies on tape for the algorithmic path and exposes closed-form value
/// and gradient for the formula path, so the two stay independent.
class Downstream {
 public:
  static Downstream linear(std::vector<double> coeff, double bias) {
    Downstream f;
    f.kind_ = Kind::Linear;
    f.coeff_ = std::move(coeff);
    f.bias_ = bias;
    return f;
  }

  static Downstream random_linear(int dim, Rng& rng) {
    std::vector<double> a(dim);
    for (double& v : a) v = rng.normal();
    return linear(std::move(a), rng.normal());
  }

  /// f(u) = sum_j silu((M u)_j), a smooth nonlinear test function.
  static Downstream silu_net(std::vector<double> m, int hidden, int dim) {
    Downstream f;
    f.kind_ = Kind::SiluNet;
    f.coeff_ = std::move(m);
    f.hidden_ = hidden;
    f.dim_ = dim;
    if (static_cast<int>(f.coeff_.size()) != hidden * dim)
      throw std::invalid_argument("silu_net: matrix size mismatch");
    return f;
  }

  static Downstream random_silu_net(int dim, int hidden, Rng& rng) {
    std::vector<double> m(static_cast<size_t>(hidden) * dim);
    for (double& v : m) v = rng.normal();
    return silu_net(std::move(m), hidden, dim);
  }

  bool is_linear() const { return kind_ == Kind::Linear; }

  Tensor apply(const Tensor& u) const {
    if (kind_ == Kind::Linear) {
      Tensor a(Shape{static_cast<int>(coeff_.size())}, coeff_);
      return add(reduce_sum(mul(a, u)), Tensor::scalar(bias_));
    }
    Tensor m(Shape{hidden_, dim_}, coeff_);
    return reduce_sum(silu(matmul(m, u)));
  }

  double value(const std::vector<double>& u) const {
    if (kind_ == Kind::Linear) {
      double acc = bias_;
      for (size_t i = 0; i < coeff_.size(); ++i) acc += coeff_[i] * u[i];
      return acc;
    }
    double acc = 0.0;
    for (int j = 0; j < hidden_; ++j) {
      double v = 0.0;
      for (int i = 0; i < dim_; ++i) v += coeff_[j * dim_ + i] * u[i];
      acc += v / (1.0 + std::exp(-v));
    }
    return acc;
  }

  std::vector<double> grad(const std::vector<double>& u) const {
    if (kind_ == Kind::Linear) return coeff_;
    std::vector<double> g(dim_, 0.0);
    for (int j = 0; j < hidden_; ++j) {
      double v = 0.0;
      for (int i = 0; i < dim_; ++i) v += coeff_[j * dim_ + i] * u[i];
      double s = 1.0 / (1.0 + std::exp(-v));
      double dv = s * (1.0 + v * (1.0 - s));
      for (int i = 0; i < dim_; ++i) g[i] += dv * coeff_[j * dim_ + i];
    }
    return g;
  }

 private:
  enum class Kind { Linear, SiluNet };
  Kind kind_ = Kind::Linear;
  std::vector<double> coeff_;
  double bias_ = 0.0;
  int hidden_ = 0;
  int dim_ = 0;
};

/// Masked-softmax probabilities computed directly from the definition
/// (independent of the tape implementation).
inline std::vector<double> support_probs(const std::vector<double>& z,
                                         const std::vector<bool>& support, double temperature) {
  double m = kNegInf;
  for (size_t i = 0; i < z.size(); ++i)
    if (support[i]) m = std::max(m, z[i]);
  std::vector<double> p(z.size(), 0.0);
  double denom = 0.0;
  for (size_t i = 0; i < z.size(); ++i)
    if (support[i]) denom += (p[i] = std::exp((z[i] - m) / temperature));
  for (double& v : p) v /= denom;
  return p;
}

/// All (D, B) outcomes with masses p_D * P(B); masses sum to one.
inline std::vector<OutcomeWeight> enumerate_outcomes(const std::vector<double>& probs,
                                                     const std::vector<bool>& support,
                                                     double bernoulli_p) {
  std::vector<OutcomeWeight> out;
  for (size_t d = 0; d < probs.size(); ++d) {
    if (!support[d]) continue;
    out.push_back({static_cast<int>(d), 0, probs[d] * (1.0 - bernoulli_p)});
    out.push_back({static_cast<int>(d), 1, probs[d] * bernoulli_p});
  }
  return out;
}

enum class ObjectiveKind { FullGate, DetachedGate };

/// Expected loss over the sampling measure, enumerated exactly:
///   FullGate:     sum_i f(p_i * E_i) * p_i
///   DetachedGate: same, but the gate inside f stays frozen at
///                 `frozen_inner_gate` (the detached-objective variant).
/// `frozen_support` pins the mask, which keeps finite differencing away from
/// mask boundaries.
inline double expected_loss(ObjectiveKind objective, const std::vector<double>& z,
                            const std::vector<std::vector<double>>& expert_out,
                            const Downstream& f, double r_thresh, double temperature,
                            const std::vector<bool>* frozen_support = nullptr,
                            const std::vector<double>* frozen_inner_gate = nullptr) {
  int n = static_cast<int>(z.size());
  if (n > kMaxEnumerableExperts) throw std::invalid_argument("expected_loss: n too large");
  if (static_cast<int>(expert_out.size()) != n)
    throw std::invalid_argument("expected_loss: expert outputs misaligned");
  std::vector<bool> support =
      frozen_support ? *frozen_support : masked_softmax_support(z, r_thresh);
  std::vector<double> p = support_probs(z, support, temperature);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!support[i]) continue;
    double gate = (objective == ObjectiveKind::DetachedGate && frozen_inner_gate)
                      ? (*frozen_inner_gate)[i]
                      : p[i];
    std::vector<double> u(expert_out[i].size());
    for (size_t j = 0; j < u.size(); ++j) u[j] = gate * expert_out[i][j];
    acc += f.value(u) * p[i];
  }
  return acc;
}

/// Central finite differences, (f(x+h e_j) - f(x-h e_j)) / 2h.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& fn,
                                       std::vector<double> theta, double h = 1e-6) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: h must be > 0");
  std::vector<double> g(theta.size());
  for (size_t j = 0; j < theta.size(); ++j) {
    double orig = theta[j];
    theta[j] = orig + h;
    double up = fn(theta);
    theta[j] = orig - h;
    double down = fn(theta);
    theta[j] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("fd_gradient: non-finite evaluation");
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Max-norm relative error between two gradients.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("rel_error: size mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max({den, std::abs(a[i]), std::abs(b[i])});
  }
  return num / std::max(den, 1e-12);
}

/// Router gradient of the sampled estimators, computed by running the actual
/// training algorithm once per (D, B) outcome (forced draws), backpropagating
/// through f, and weighting by the outcome mass. Summation follows (D, B)
/// lexicographic order.
inline std::vector<double> enumerate_estimator_expectation(
    EstimatorKind kind, const std::vector<double>& z,
    const std::vector<std::vector<double>>& expert_out, const EstimatorConfig& cfg,
    const Downstream& f) {
  if (kind == EstimatorKind::GShard)
    throw std::invalid_argument("enumerate_estimator_expectation: gshard has no sampling measure");
  int n = static_cast<int>(z.size());
  if (n > kMaxEnumerableExperts)
    throw std::invalid_argument("enumerate_estimator_expectation: n too large");

  std::vector<bool> support = masked_softmax_support(z, cfg.r_thresh);
  std::vector<double> probs = support_probs(z, support, cfg.temperature);
  std::vector<OutcomeWeight> outcomes = enumerate_outcomes(probs, support, cfg.bernoulli_p);

  ExpertFn experts = [&expert_out](const Tensor&, int e) {
    return Tensor(Shape{static_cast<int>(expert_out[e].size())}, expert_out[e]);
  };
  Tensor x_dummy = Tensor::zeros({1});

  std::vector<double> acc(n, 0.0);
  for (const OutcomeWeight& w : outcomes) {
    Tape tape;
    Tensor z_leaf = tape.leaf(Tensor(Shape{n}, z));
    ForcedOutcome forced{w.expert, w.bernoulli};
    EstimatorConfig c = cfg;
    c.kind = kind;
    MoeOutput out = sparsemixer_top1_train(x_dummy, z_leaf, c, experts, nullptr, &forced);
    Tensor loss = f.apply(out.y);
    Tensor g = tape.backward(loss).grad(z_leaf);
    for (int j = 0; j < n; ++j) acc[j] += w.mass * g.values[j];
  }
  return acc;
}

/// The same router gradient from the displayed closed forms: enumerate
/// (D, B), evaluate f' at (1 + 2 max(B, delta_D))/3 * p_D * E_D, chain through
/// the analytic masked-softmax Jacobian. The v2* form carries the extra
/// factor 2; v2 does not.
inline std::vector<double> closed_form_estimator(EstimatorKind kind, const std::vector<double>& z,
                                                 const std::vector<std::vector<double>>& expert_out,
                                                 const EstimatorConfig& cfg, const Downstream& f) {
  if (kind == EstimatorKind::GShard)
    throw std::invalid_argument("closed_form_estimator: gshard has no sampling measure");
  int n = static_cast<int>(z.size());
  if (n > kMaxEnumerableExperts) throw std::invalid_argument("closed_form_estimator: n too large");

  std::vector<bool> support = masked_softmax_support(z, cfg.r_thresh);
  std::vector<double> p = support_probs(z, support, cfg.temperature);
  int amax = argmax_index(z);
  double coeff = (kind == EstimatorKind::SparseMixerV2Star) ? 2.0 : 1.0;

  std::vector<double> acc(n, 0.0);
  for (int d = 0; d < n; ++d) {
    if (!support[d]) continue;
    const std::vector<double>& e = expert_out[d];
    for (int b = 0; b <= 1; ++b) {
      double mass = p[d] * (b ? cfg.bernoulli_p : 1.0 - cfg.bernoulli_p);
      double s = std::max(d == amax ? 1.0 : 0.0, (1.0 + 2.0 * b) / 3.0);
      std::vector<double> u(e.size());
      for (size_t j = 0; j < e.size(); ++j) u[j] = s * p[d] * e[j];
      std::vector<double> gf = f.grad(u);
      double fprime_dot_e = 0.0;
      for (size_t j = 0; j < e.size(); ++j) fprime_dot_e += gf[j] * e[j];
      for (int j = 0; j < n; ++j) {
        if (!support[j]) continue;
        double dp_dz = p[d] * ((d == j ? 1.0 : 0.0) - p[j]) / cfg.temperature;
        acc[j] += mass * coeff * fprime_dot_e * dp_dz;
      }
    }
  }
  return acc;
}

/// Exact gradient of the FullGate expected loss via the score-function
/// identity, with or without subtracting the f(0) baseline from the score
/// term. The two agree because the support probabilities sum to one.
inline std::vector<double> expected_loss_gradient(const std::vector<double>& z,
                                                  const std::vector<std::vector<double>>& expert_out,
                                                  const Downstream& f, double r_thresh,
                                                  double temperature, bool subtract_baseline) {
  int n = static_cast<int>(z.size());
  if (n > kMaxEnumerableExperts)
    throw std::invalid_argument("expected_loss_gradient: n too large");
  std::vector<bool> support = masked_softmax_support(z, r_thresh);
  std::vector<double> p = support_probs(z, support, temperature);
  double baseline = 0.0;
  if (subtract_baseline) {
    std::vector<double> zero(expert_out[0].size(), 0.0);
    baseline = f.value(zero);
  }
  std::vector<double> acc(n, 0.0);
  for (int i = 0; i < n; ++i) {
    if (!support[i]) continue;
    std::vector<double> u(expert_out[i].size());
    for (size_t j = 0; j < u.size(); ++j) u[j] = p[i] * expert_out[i][j];
    std::vector<double> gf = f.grad(u);
    double fprime_dot_e = 0.0;
    for (size_t j = 0; j < u.size(); ++j) fprime_dot_e += gf[j] * expert_out[i][j];
    double score = f.value(u) - baseline;
    for (int j = 0; j < n; ++j) {
      if (!support[j]) continue;
      double dp_dz = p[i] * ((i == j ? 1.0 : 0.0) - p[j]) / temperature;
      acc[j] += p[i] * fprime_dot_e * dp_dz + score * dp_dz;
    }
  }
  return acc;
}

}  // namespace moe
