// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>

#include "moe/estimators.hpp"
#include "moe/util.hpp"

// Load-balance auxiliary loss: alpha * n * sum_i f_i * E[softmax(z)_i],
// where f_i is the fraction of tokens dispatched to expert i. Dispatch
// fractions are non-differentiable counts and enter as constants; the
// gradient flows only through the mean gate probabilities.

namespace moe {

enum class BalanceScope { Local, Global };

struct BalanceConfig {
  double alpha = 1e-2;
  BalanceScope scope = BalanceScope::Global;
  int n_expert = 0;
};

struct LoadStats {
  int n_expert = 0;
  int top_k = 0;
  long tokens = 0;
  std::vector<long> counts;      // c_i, actual dispatched experts
  std::vector<double> fraction;  // f_i = c_i / tokens; sums to top_k
  std::vector<double> mean_gate; // mean over tokens of softmax(raw z)_i
  int shard_id = -1;             // -1 marks globally reduced stats

  /// Per-dispatch fractions c_i / (top_k * tokens); uniform loading is 1/n.
  std::vector<double> normalized_fraction() const {
    std::vector<double> f(counts.size());
    double denom = static_cast<double>(top_k) * static_cast<double>(tokens);
    for (size_t i = 0; i < counts.size(); ++i) f[i] = static_cast<double>(counts[i]) / denom;
    return f;
  }

  /// Entropy (nats) of the normalized dispatch distribution.
  double dispatch_entropy() const {
    double h = 0.0;
    for (double q : normalized_fraction())
      if (q > 0.0) h -= q * std::log(q);
    return h;
  }
};

inline std::vector<double> softmax_values(const std::vector<double>& z) {
  double m = kNegInf;
  for (double v : z) m = std::max(m, v);
  std::vector<double> p(z.size());
  double denom = 0.0;
  for (size_t i = 0; i < z.size(); ++i) denom += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= denom;
  return p;
}

/// Counts actual dispatch (sampled D for the SparseMixer kinds, TopK winners
/// for gshard) and averages the full softmax of the raw per-token logits.
inline LoadStats accumulate_stats(const std::vector<std::vector<RoutingDecision>>& records,
                                  const std::vector<std::vector<double>>& z_batch, int n_expert,
                                  int top_k, int shard_id = -1) {
  if (records.empty()) throw std::invalid_argument("accumulate_stats: empty batch");
  if (records.size() != z_batch.size())
    throw std::invalid_argument("accumulate_stats: records and logits are misaligned");
  LoadStats s;
  s.n_expert = n_expert;
  s.top_k = top_k;
  s.tokens = static_cast<long>(records.size());
  s.shard_id = shard_id;
  s.counts.assign(n_expert, 0);
  s.mean_gate.assign(n_expert, 0.0);
  for (size_t t = 0; t < records.size(); ++t) {
    for (const RoutingDecision& d : records[t]) {
      if (d.expert < 0 || d.expert >= n_expert)
        throw std::invalid_argument("accumulate_stats: expert index out of range");
      ++s.counts[d.expert];
    }
    std::vector<double> p = softmax_values(z_batch[t]);
    for (int i = 0; i < n_expert; ++i) s.mean_gate[i] += p[i];
  }
  s.fraction.resize(n_expert);
  for (int i = 0; i < n_expert; ++i) {
    s.fraction[i] = static_cast<double>(s.counts[i]) / static_cast<double>(s.tokens);
    s.mean_gate[i] /= static_cast<double>(s.tokens);
  }
  return s;
}

/// alpha * n * sum_i f_i * gbar_i with f_i a detached constant; the returned
/// scalar is differentiable through `mean_gate_on_tape` only.
inline Tensor balance_loss(const LoadStats& stats, const BalanceConfig& cfg,
                           const Tensor& mean_gate_on_tape) {
  if (stats.n_expert != cfg.n_expert)
    throw std::invalid_argument("balance_loss: expert count mismatch");
  if (mean_gate_on_tape.size() != stats.n_expert)
    throw std::invalid_argument("balance_loss: mean gate size mismatch");
  Tensor f(Shape{stats.n_expert}, stats.fraction);  // constant by construction
  Tensor inner = reduce_sum(mul(f, mean_gate_on_tape));
  return scale(inner, cfg.alpha * static_cast<double>(cfg.n_expert));
}

/// Deterministic fold of shard stats in list order: counts and tokens sum,
/// mean gates combine token-weighted.
inline LoadStats global_reduce(const std::vector<LoadStats>& shards) {
  if (shards.empty()) throw std::invalid_argument("global_reduce: no shards");
  LoadStats g;
  g.n_expert = shards[0].n_expert;
  g.top_k = shards[0].top_k;
  g.counts.assign(g.n_expert, 0);
  g.mean_gate.assign(g.n_expert, 0.0);
  g.shard_id = -1;
  for (const LoadStats& s : shards) {
    if (s.n_expert != g.n_expert || s.top_k != g.top_k)
      throw std::invalid_argument("global_reduce: inconsistent shard layout");
    g.tokens += s.tokens;
    for (int i = 0; i < g.n_expert; ++i) {
      g.counts[i] += s.counts[i];
      g.mean_gate[i] += s.mean_gate[i] * static_cast<double>(s.tokens);
    }
  }
  g.fraction.resize(g.n_expert);
  for (int i = 0; i < g.n_expert; ++i) {
    g.fraction[i] = static_cast<double>(g.counts[i]) / static_cast<double>(g.tokens);
    g.mean_gate[i] /= static_cast<double>(g.tokens);
  }
  return g;
}

/// CSV rows `layer,expert,count,fraction,mean_gate`, one block per layer.
inline void write_load_stats_csv(std::ostream& os, const std::vector<LoadStats>& per_layer) {
  os << "layer,expert,count,fraction,mean_gate\n";
  for (size_t l = 0; l < per_layer.size(); ++l) {
    const LoadStats& s = per_layer[l];
    for (int i = 0; i < s.n_expert; ++i)
      os << l << ',' << i << ',' << s.counts[i] << ',' << format_double(s.fraction[i]) << ','
         << format_double(s.mean_gate[i]) << '\n';
  }
}

}  // namespace moe
