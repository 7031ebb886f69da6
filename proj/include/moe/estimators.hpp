// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>

#include "moe/routing.hpp"

namespace moe {

enum class EstimatorKind { GShard, SparseMixerV2, SparseMixerV2Star };
enum class InferenceMode { Deterministic, Sampled };

inline const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::GShard: return "gshard";
    case EstimatorKind::SparseMixerV2: return "sparsemixer_v2";
    case EstimatorKind::SparseMixerV2Star: return "sparsemixer_v2_star";
  }
  return "?";
}

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::SparseMixerV2;
  double r_thresh = 0.1;
  double temperature = 1.0;      // v2* runs its gate softmax at temperature 2
  double bernoulli_p = 0.25;     // v2: 1/4, v2*: 5/8
  double jitter_epsilon = 0.0;   // gshard only, multiplicative uniform noise
  bool renormalize_topk_gates = false;  // gshard variant; default follows the plain mixture
  InferenceMode inference_mode = InferenceMode::Deterministic;

  static EstimatorConfig defaults(EstimatorKind k) {
    EstimatorConfig c;
    c.kind = k;
    switch (k) {
      case EstimatorKind::GShard:
        c.jitter_epsilon = 0.01;
        break;
      case EstimatorKind::SparseMixerV2:
        c.temperature = 1.0;
        c.bernoulli_p = 0.25;
        break;
      case EstimatorKind::SparseMixerV2Star:
        c.temperature = 2.0;
        c.bernoulli_p = 0.625;
        break;
    }
    return c;
  }
};

/// One routing round for one token: which expert fired, with what gate, and
/// the straight-through scale applied in the forward pass.
struct RoutingDecision {
  int expert = -1;
  double gate_prob = 0.0;
  bool is_argmax = false;  // expert == argmax of the round's raw logits
  int bernoulli = -1;      // -1 when no Bernoulli draw was made (gshard)
  double fwd_scale = 1.0;  // max(is_argmax, (1+2B)/3) for sampled estimators
  std::vector<double> masked_logits;  // the round's logits snapshot
};

/// Injected (D, B) pair: runs the estimator conditioned on these draws,
/// bit-identical to a sampled run that happened to draw them.
struct ForcedOutcome {
  int expert = -1;
  int bernoulli = 0;
};

/// Evaluates expert `i` on input x. Implementations close over their weights.
using ExpertFn = std::function<Tensor(const Tensor& x, int expert)>;

struct MoeOutput {
  Tensor y;
  std::vector<RoutingDecision> rounds;
};

/// Conventional mixture: softmax gates masked by the TopK indicator,
/// y = sum_i softmax(zj)_i * TopK(zj)_i * Expert(x, w_i) with zj the
/// jittered logits during training. The indicator is a constant in backward,
/// so the router gradient flows only through the gate values.
inline MoeOutput gshard_forward(const Tensor& x, const Tensor& z, int k, const ExpertFn& experts,
                                const EstimatorConfig& cfg, Rng* rng, bool training,
                                const std::vector<bool>* forced_mask = nullptr) {
  int n = z.size();
  if (k < 1 || k > n) throw std::invalid_argument("gshard_forward: k out of range");

  Tensor zj = z;
  if (training && !forced_mask && cfg.jitter_epsilon > 0.0) {
    if (!rng) throw std::invalid_argument("gshard_forward: jitter requires rng");
    Tensor noise = Tensor::zeros(z.shape);
    for (double& v : noise.values)
      v = 1.0 + rng->uniform(-cfg.jitter_epsilon, cfg.jitter_epsilon);
    zj = mul(z, noise);
  }

  std::vector<bool> mask = forced_mask ? *forced_mask : topk_indicator(zj, k);
  Tensor gates = softmax(zj);
  int amax = argmax_index(zj.values);

  std::optional<Tensor> denom;
  if (cfg.renormalize_topk_gates) {
    Tensor acc;
    bool first = true;
    for (int i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      acc = first ? at(gates, i) : add(acc, at(gates, i));
      first = false;
    }
    denom = acc;
  }

  MoeOutput out;
  Tensor y;
  bool first = true;
  std::vector<int> chosen;
  for (int i = 0; i < n; ++i)
    if (mask[i]) chosen.push_back(i);
  std::stable_sort(chosen.begin(), chosen.end(),
                   [&](int a, int b) { return gates.values[a] > gates.values[b]; });
  for (int i : chosen) {
    Tensor gi = at(gates, i);
    if (denom) gi = div(gi, *denom);
    Tensor term = mul(experts(x, i), gi);
    y = first ? term : add(y, term);
    first = false;

    RoutingDecision d;
    d.expert = i;
    d.gate_prob = gi.values[0];
    d.is_argmax = (i == amax);
    d.masked_logits = zj.values;
    out.rounds.push_back(std::move(d));
  }
  out.y = std::move(y);
  return out;
}

/// One sampled routing round shared by SparseMixer-v2 and v2*.
///
/// p = MaskedSoftmax(z / tau) with the support taken on raw z; D ~ p;
/// h = Expert(x, w_D) * p_D; B ~ Bernoulli(p_B); s = max(delta_D, (1+2B)/3).
/// v2 : y = h + detach(s*h - h)        (forward s*h, backward sees h)
/// v2*: y = 2h + detach(s*h - 2h)      (forward s*h, backward sees 2h)
inline MoeOutput sparsemixer_top1_train(const Tensor& x, const Tensor& z,
                                        const EstimatorConfig& cfg, const ExpertFn& experts,
                                        Rng* rng, const ForcedOutcome* forced = nullptr) {
  if (cfg.kind == EstimatorKind::GShard)
    throw std::invalid_argument("sparsemixer_top1_train: gshard has no sampled round");
  if (!forced && !rng) throw std::invalid_argument("sparsemixer_top1_train: rng required");

  GateDistribution dist = masked_softmax(z, cfg.r_thresh, cfg.temperature);
  int d_expert;
  int b_draw;
  if (forced) {
    d_expert = forced->expert;
    if (d_expert < 0 || d_expert >= z.size() || !dist.support[d_expert])
      throw std::invalid_argument("sparsemixer_top1_train: forced expert not in support");
    b_draw = forced->bernoulli ? 1 : 0;
  } else {
    d_expert = sample_categorical(dist, *rng);
    b_draw = rng->bernoulli(cfg.bernoulli_p);
  }

  bool is_argmax = (d_expert == argmax_index(z.values));
  double s = std::max(is_argmax ? 1.0 : 0.0, (1.0 + 2.0 * b_draw) / 3.0);
  double back_coeff = (cfg.kind == EstimatorKind::SparseMixerV2Star) ? 2.0 : 1.0;

  Tensor gate = at(dist.probs, d_expert);
  Tensor h = mul(experts(x, d_expert), gate);
  Tensor base = (back_coeff == 1.0) ? h : scale(h, back_coeff);
  Tensor y = add(base, detach(sub(scale(h, s), base)));

  RoutingDecision rec;
  rec.expert = d_expert;
  rec.gate_prob = gate.values[0];
  rec.is_argmax = is_argmax;
  rec.bernoulli = b_draw;
  rec.fwd_scale = s;
  rec.masked_logits = z.values;

  MoeOutput out;
  out.y = std::move(y);
  out.rounds.push_back(std::move(rec));
  return out;
}

/// TopK extension: K sequential Top1 rounds, sampling without replacement.
/// After each round the chosen expert's logit is set to -inf so later rounds
/// renormalize over the remaining experts; the K winners are distinct.
inline MoeOutput sparsemixer_topk_train(const Tensor& x, const Tensor& z, int k,
                                        const EstimatorConfig& cfg, const ExpertFn& experts,
                                        Rng* rng, std::span<const ForcedOutcome> forced = {}) {
  int n = z.size();
  if (k < 1 || k > n) throw std::invalid_argument("sparsemixer_topk_train: k out of range");
  if (!forced.empty() && static_cast<int>(forced.size()) != k)
    throw std::invalid_argument("sparsemixer_topk_train: need one forced outcome per round");

  std::vector<bool> alive(n, true);
  MoeOutput out;
  Tensor y;
  for (int round = 0; round < k; ++round) {
    Tensor z_round = (round == 0) ? z : mask_logits(z, alive);
    MoeOutput one = sparsemixer_top1_train(x, z_round, cfg, experts, rng,
                                           forced.empty() ? nullptr : &forced[round]);
    y = (round == 0) ? one.y : add(y, one.y);
    alive[one.rounds[0].expert] = false;
    out.rounds.push_back(std::move(one.rounds[0]));
  }
  out.y = std::move(y);
  return out;
}

/// Inference dispatch.
///
/// GShard: the plain TopK mixture, deterministically (no jitter).
/// SparseMixer kinds: gate and select through MaskedSoftmax instead of TopK;
/// deterministic mode picks the argmax of the support each round, sampled
/// mode draws from it. Rounds mask out their winner exactly like training.
inline MoeOutput moe_inference(const Tensor& x, const Tensor& z, int k,
                               const EstimatorConfig& cfg, const ExpertFn& experts,
                               Rng* rng = nullptr) {
  if (cfg.kind == EstimatorKind::GShard)
    return gshard_forward(x, z, k, experts, cfg, nullptr, /*training=*/false);

  int n = z.size();
  if (k < 1 || k > n) throw std::invalid_argument("moe_inference: k out of range");
  bool sampled = cfg.inference_mode == InferenceMode::Sampled;
  if (sampled && !rng) throw std::invalid_argument("moe_inference: sampled mode requires rng");

  std::vector<bool> alive(n, true);
  MoeOutput out;
  Tensor y;
  for (int round = 0; round < k; ++round) {
    Tensor z_round = (round == 0) ? z : mask_logits(z, alive);
    GateDistribution dist = masked_softmax(z_round, cfg.r_thresh, cfg.temperature);
    int d_expert = sampled ? sample_categorical(dist, *rng) : argmax_index(z_round.values);
    Tensor gate = at(dist.probs, d_expert);
    Tensor term = mul(experts(x, d_expert), gate);
    y = (round == 0) ? term : add(y, term);
    alive[d_expert] = false;

    RoutingDecision rec;
    rec.expert = d_expert;
    rec.gate_prob = gate.values[0];
    rec.is_argmax = (d_expert == argmax_index(z_round.values));
    rec.masked_logits = z_round.values;
    out.rounds.push_back(std::move(rec));
  }
  out.y = std::move(y);
  return out;
}

}  // namespace moe
