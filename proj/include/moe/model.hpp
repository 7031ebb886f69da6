// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moe/balance.hpp"

namespace moe {

/// SwiGLU expert: W_down (silu(W_gate x) ⊙ (W_up x)).
struct ExpertParams {
  Tensor w_gate;  // [d_inner, d_model]
  Tensor w_up;    // [d_inner, d_model]
  Tensor w_down;  // [d_model, d_inner]
};

inline Tensor expert_forward(const Tensor& x, const ExpertParams& w) {
  return matmul(w.w_down, mul(silu(matmul(w.w_gate, x)), matmul(w.w_up, x)));
}

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct MoELayerSpec {
  int n_expert = 8;
  int top_k = 2;
  int d_model = 16;
  int d_inner = 32;
  EstimatorConfig estimator;
  BalanceConfig balance;

  void validate() const {
    if (n_expert < 1 || d_model < 1 || d_inner < 1)
      throw std::invalid_argument("MoELayerSpec: dimensions must be positive");
    if (top_k < 1 || top_k > n_expert)
      throw std::invalid_argument("MoELayerSpec: top_k must be in [1, n_expert]");
  }
};

/// Feed-forward stack of residual Pre-LN MoE blocks plus a linear head.
struct ToyModelSpec {
  int depth = 2;
  int head_dim = 16;
  MoELayerSpec block;

  int d_model() const { return block.d_model; }
  void validate() const {
    if (depth < 1) throw std::invalid_argument("ToyModelSpec: depth must be >= 1");
    if (head_dim < 1) throw std::invalid_argument("ToyModelSpec: head_dim must be >= 1");
    block.validate();
  }
};

struct LayerParams {
  RouterParams router;
  LayerNormParams ln;
  std::vector<ExpertParams> experts;
};

struct ModelParams {
  std::vector<LayerParams> layers;
  Tensor head_weight;  // [head_dim, d_model]
  Tensor head_bias;    // [head_dim]
};

/// Visits every parameter tensor in its declared (checkpoint/optimizer)
/// order.
template <class Params, class Fn>
void for_each_param(Params& p, Fn&& fn) {
  for (size_t l = 0; l < p.layers.size(); ++l) {
    std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "router", p.layers[l].router.weight);
    fn(prefix + "ln.gamma", p.layers[l].ln.gamma);
    fn(prefix + "ln.beta", p.layers[l].ln.beta);
    for (size_t e = 0; e < p.layers[l].experts.size(); ++e) {
      std::string ep = prefix + "expert" + std::to_string(e) + ".";
      fn(ep + "w_gate", p.layers[l].experts[e].w_gate);
      fn(ep + "w_up", p.layers[l].experts[e].w_up);
      fn(ep + "w_down", p.layers[l].experts[e].w_down);
    }
  }
  fn("head.weight", p.head_weight);
  fn("head.bias", p.head_bias);
}

/// Gaussian init. Expert weights use std 0.02 / sqrt(2 * depth); the stack
/// trains stably without output-scaling parameters.
inline ModelParams init_params(const ToyModelSpec& spec, Rng& rng) {
  spec.validate();
  const MoELayerSpec& b = spec.block;
  double expert_std = 0.02 / std::sqrt(2.0 * static_cast<double>(spec.depth));
  auto gaussian = [&rng](const Shape& s, double std) {
    Tensor t = Tensor::zeros(s);
    for (double& v : t.values) v = std * rng.normal();
    return t;
  };
  ModelParams p;
  p.layers.resize(spec.depth);
  for (int l = 0; l < spec.depth; ++l) {
    LayerParams& lp = p.layers[l];
    lp.router.weight = gaussian({b.n_expert, b.d_model}, 0.02);
    lp.ln.gamma = Tensor::full({b.d_model}, 1.0);
    lp.ln.beta = Tensor::zeros({b.d_model});
    lp.experts.resize(b.n_expert);
    for (int e = 0; e < b.n_expert; ++e) {
      lp.experts[e].w_gate = gaussian({b.d_inner, b.d_model}, expert_std);
      lp.experts[e].w_up = gaussian({b.d_inner, b.d_model}, expert_std);
      lp.experts[e].w_down = gaussian({b.d_model, b.d_inner}, expert_std);
    }
  }
  p.head_weight = gaussian({spec.head_dim, b.d_model}, 0.02);
  p.head_bias = Tensor::zeros({spec.head_dim});
  return p;
}

/// Copies parameters onto a tape as differentiable leaves.
inline ModelParams bind_params(const ModelParams& p, Tape& tape) {
  ModelParams bound = p;
  for_each_param(bound, [&](const std::string&, Tensor& t) { t = tape.leaf(t); });
  return bound;
}

/// Per-token routing override: replays a captured decision instead of
/// sampling. gshard freezes its TopK mask (and skips jitter); the sampled
/// estimators force (D, B) per round.
struct TokenOverride {
  std::vector<bool> gshard_mask;
  std::vector<ForcedOutcome> outcomes;
};

/// [layer][token] overrides for a whole batch forward.
struct RoutingOverrides {
  std::vector<std::vector<TokenOverride>> items;
};

struct BlockForward {
  Tensor y;
  std::vector<RoutingDecision> rounds;
  Tensor gate_probs;  // softmax of the raw router logits, on tape in training
  std::vector<double> z_values;
};

/// Pre-LN residual MoE block: y = x + MoE(LN(x)).
inline BlockForward moe_block_forward(const Tensor& x, const MoELayerSpec& spec,
                                      const LayerParams& params, Rng* rng, bool training,
                                      const TokenOverride* forced = nullptr) {
  Tensor u = layer_norm(x, params.ln.gamma, params.ln.beta);
  Tensor z = router_logits(u, params.router);
  ExpertFn experts = [&params](const Tensor& in, int e) {
    return expert_forward(in, params.experts[e]);
  };

  MoeOutput moe;
  if (!training) {
    moe = moe_inference(u, z, spec.top_k, spec.estimator, experts, rng);
  } else if (spec.estimator.kind == EstimatorKind::GShard) {
    moe = gshard_forward(u, z, spec.top_k, experts, spec.estimator, rng, true,
                         forced ? &forced->gshard_mask : nullptr);
  } else {
    std::span<const ForcedOutcome> forced_span =
        forced ? std::span<const ForcedOutcome>(forced->outcomes) : std::span<const ForcedOutcome>{};
    moe = sparsemixer_topk_train(u, z, spec.top_k, spec.estimator, experts, rng, forced_span);
  }

  BlockForward out;
  out.y = add(x, moe.y);
  out.rounds = std::move(moe.rounds);
  out.gate_probs = softmax(z);
  out.z_values = z.values;
  return out;
}

struct BatchForward {
  std::vector<Tensor> outputs;                                    // per token
  std::vector<std::vector<std::vector<RoutingDecision>>> rounds;  // [layer][token]
  std::vector<std::vector<Tensor>> gate_probs;                    // [layer][token]
  std::vector<std::vector<std::vector<double>>> z_values;         // [layer][token]
  std::vector<Tensor> balance_terms;                              // per layer, alpha included
  std::vector<LoadStats> layer_stats;                             // per layer, globally reduced
};

/// Captures a batch's routing decisions as replayable overrides.
inline RoutingOverrides capture_overrides(const BatchForward& fwd, const ToyModelSpec& spec) {
  RoutingOverrides o;
  o.items.resize(fwd.rounds.size());
  for (size_t l = 0; l < fwd.rounds.size(); ++l) {
    o.items[l].resize(fwd.rounds[l].size());
    for (size_t t = 0; t < fwd.rounds[l].size(); ++t) {
      TokenOverride& ov = o.items[l][t];
      if (spec.block.estimator.kind == EstimatorKind::GShard) {
        ov.gshard_mask.assign(spec.block.n_expert, false);
        for (const RoutingDecision& d : fwd.rounds[l][t]) ov.gshard_mask[d.expert] = true;
      } else {
        for (const RoutingDecision& d : fwd.rounds[l][t])
          ov.outcomes.push_back(ForcedOutcome{d.expert, d.bernoulli});
      }
    }
  }
  return o;
}

/// Shard boundaries: `shards` near-equal contiguous token ranges.
inline std::vector<std::pair<int, int>> shard_ranges(int tokens, int shards) {
  shards = std::max(1, std::min(shards, tokens));
  std::vector<std::pair<int, int>> r;
  int base = tokens / shards, rem = tokens % shards;
  int begin = 0;
  for (int s = 0; s < shards; ++s) {
    int len = base + (s < rem ? 1 : 0);
    r.emplace_back(begin, begin + len);
    begin += len;
  }
  return r;
}

/// Runs the stack over a batch of tokens. Every token consumes its own rng
/// stream split from `step_rng` by token index, so batch order and token
/// parallelism cannot change the draws. In training the per-layer balance
/// terms follow the configured scope: global reduces shard stats before the
/// loss, local averages per-shard losses.
inline BatchForward model_forward(const std::vector<std::vector<double>>& batch,
                                  const ToyModelSpec& spec, const ModelParams& params,
                                  Rng& step_rng, bool training, int n_shards = 1,
                                  const RoutingOverrides* forced = nullptr) {
  spec.validate();
  if (batch.empty()) throw std::invalid_argument("model_forward: empty batch");
  if (static_cast<int>(params.layers.size()) != spec.depth)
    throw std::invalid_argument("model_forward: params do not match spec depth");

  int tokens = static_cast<int>(batch.size());
  BatchForward out;
  out.rounds.assign(spec.depth, {});
  out.gate_probs.assign(spec.depth, {});
  out.z_values.assign(spec.depth, {});
  for (int l = 0; l < spec.depth; ++l) {
    out.rounds[l].resize(tokens);
    out.gate_probs[l].resize(tokens);
    out.z_values[l].resize(tokens);
  }

  for (int t = 0; t < tokens; ++t) {
    if (static_cast<int>(batch[t].size()) != spec.d_model())
      throw std::invalid_argument("model_forward: token width does not match d_model");
    Rng token_rng = step_rng.split(static_cast<uint64_t>(t));
    Tensor h(Shape{spec.d_model()}, batch[t]);
    for (int l = 0; l < spec.depth; ++l) {
      const TokenOverride* ov = forced ? &forced->items[l][t] : nullptr;
      BlockForward blk =
          moe_block_forward(h, spec.block, params.layers[l], &token_rng, training, ov);
      h = std::move(blk.y);
      out.rounds[l][t] = std::move(blk.rounds);
      out.gate_probs[l][t] = std::move(blk.gate_probs);
      out.z_values[l][t] = std::move(blk.z_values);
    }
    out.outputs.push_back(add(matmul(params.head_weight, h), params.head_bias));
  }

  if (training) {
    BalanceConfig bal = spec.block.balance;
    if (bal.n_expert == 0) bal.n_expert = spec.block.n_expert;
    if (bal.n_expert != spec.block.n_expert)
      throw std::invalid_argument("model_forward: balance config expert count mismatch");
    auto ranges = shard_ranges(tokens, n_shards);
    for (int l = 0; l < spec.depth; ++l) {
      std::vector<LoadStats> shard_stats;
      std::vector<Tensor> shard_gbar;
      for (size_t s = 0; s < ranges.size(); ++s) {
        auto [b, e] = ranges[s];
        std::vector<std::vector<RoutingDecision>> recs(out.rounds[l].begin() + b,
                                                       out.rounds[l].begin() + e);
        std::vector<std::vector<double>> zb(out.z_values[l].begin() + b,
                                            out.z_values[l].begin() + e);
        shard_stats.push_back(accumulate_stats(recs, zb, spec.block.n_expert, spec.block.top_k,
                                               static_cast<int>(s)));
        Tensor acc = out.gate_probs[l][b];
        for (int t = b + 1; t < e; ++t) acc = add(acc, out.gate_probs[l][t]);
        shard_gbar.push_back(scale(acc, 1.0 / static_cast<double>(e - b)));
      }
      LoadStats global = global_reduce(shard_stats);
      if (bal.scope == BalanceScope::Global) {
        Tensor gbar;
        for (size_t s = 0; s < shard_gbar.size(); ++s) {
          Tensor weighted = scale(shard_gbar[s], static_cast<double>(shard_stats[s].tokens) /
                                                     static_cast<double>(tokens));
          gbar = (s == 0) ? weighted : add(gbar, weighted);
        }
        out.balance_terms.push_back(balance_loss(global, bal, gbar));
      } else {
        Tensor acc;
        for (size_t s = 0; s < shard_stats.size(); ++s) {
          Tensor term = balance_loss(shard_stats[s], bal, shard_gbar[s]);
          acc = (s == 0) ? term : add(acc, term);
        }
        out.balance_terms.push_back(scale(acc, 1.0 / static_cast<double>(shard_stats.size())));
      }
      out.layer_stats.push_back(std::move(global));
    }
  }
  return out;
}

}  // namespace moe
