#pragma once

#include <string>
#include <vector>

#include "hyla/rng.hpp"
#include "hyla/tensor.hpp"

namespace hyla {

// How the stacked per-head score array is normalized before weighting values:
// softmax acts per (head, query) across keys; rmshead acts per (query, key)
// across heads.
enum class NormMode { identity, softmax_over_keys, rmshead_over_heads };

std::string norm_mode_name(NormMode m);

constexpr int kRelPosBuckets = 32;
constexpr int kRelPosMaxDistance = 128;

// Symmetric T5-style bucketing of a relative distance: exact buckets for small
// |distance|, logarithmic spacing beyond, clipped at the final bucket.
int rel_pos_bucket(int relative_distance);

struct AttentionParams {
  Tensor w_query;  // [H, Dh, D]
  Tensor w_key;    // [H, Dh, D]
  Tensor w_value;  // [H, Dh, D]
  Tensor w_out;    // [H, D, Dh]; concatenating the per-head [D, Dh] slices
                   // along the head axis gives the usual [D, H*Dh] projection
  Tensor w_value2;      // [H, Dh, Dh], second value layer (deep variant only)
  Tensor rel_pos_bias;  // [H, kRelPosBuckets]; undefined disables the bias

  int num_heads() const { return w_query.dim(0); }
  int head_dim() const { return w_query.dim(1); }
  int input_dim() const { return w_query.dim(2); }
  int out_dim() const { return w_out.dim(1); }
  bool has_value2() const { return w_value2.defined(); }
  bool has_rel_pos() const { return rel_pos_bias.defined(); }

  // Reassembled [D, H*Dh] output projection (the concatenation-form weight).
  Tensor w_out_concat(Tape& tp) const;

  size_t param_count() const;

  // fan-in scaled normal init, zero position bias
  static AttentionParams init(int emb_dim, int kqv_dim, int num_heads, Rng& rng,
                              bool deep_value = false, bool rel_pos = true);
};

struct AttentionScores {
  Tensor values;  // [B, H, T, T] indexed (head, query, key)
  NormMode tag = NormMode::identity;
};

struct HylaFlags {
  bool use_rmshead = true;
  bool use_nonlinearity = true;
  // replaces RMSHead with key-axis softmax (ablation "HYLA - RMSHead + softmax")
  bool softmax_override = false;
};

// Unnormalized scores <q_h(x_q), k_h(x_k)> / sqrt(Dh) plus the relative
// position bias. X is [T, D] or [B, T, D].
AttentionScores raw_scores(Tape& tp, const Tensor& X, const AttentionParams& params);

AttentionScores normalize(Tape& tp, const AttentionScores& scores, NormMode mode, bool causal);

// Standard concatenation-form multi-head attention. mode must be identity
// (linear attention) or softmax. Optionally captures the post-normalization
// scores.
Tensor mha_forward(Tape& tp, const Tensor& X, const AttentionParams& params, NormMode mode,
                   bool causal, AttentionScores* captured = nullptr);

// The same map computed by materializing the key-query specific weight matrix
// W_{q,k} = sum_h a_{h,q,k} W^out_h W^value_h. Slow; equivalence oracle only.
Tensor hypernet_forward(Tape& tp, const Tensor& X, const AttentionParams& params, NormMode mode,
                        bool causal);

// Hypernetwork linear attention: out_q = sum_k (sum_h a W^out_h) phi(sum_h a W^value_h x_k),
// with RMS normalization of the scores across heads. Flags select the ablations.
Tensor hyla_forward(Tape& tp, const Tensor& X, const AttentionParams& params, bool causal,
                    const HylaFlags& flags = {}, AttentionScores* captured = nullptr);

// Deep variant: a second hypernetwork-generated value layer w_value2 inside.
Tensor hyla_deep_forward(Tape& tp, const Tensor& X, const AttentionParams& params, bool causal,
                         AttentionScores* captured = nullptr);

struct MoEParams {
  Tensor w_gate;  // [E, D]
  Tensor w_down;  // [E, M, D]
  Tensor w_up;    // [E, D, M]
  int top_k = 1;

  int num_experts() const { return w_gate.dim(0); }
  size_t param_count() const;

  static MoEParams init(int emb_dim, int mlp_dim, int num_experts, int top_k, Rng& rng);
};

// Token-wise mixture of experts: softmax over the top-k gate logits (others
// weight 0) and the matching experts' MLP outputs. x is [..., D].
Tensor moe_feedforward(Tape& tp, const Tensor& x, const MoEParams& params,
                       Tensor* gate_weights = nullptr);

// Head-axis fiber a_{., q, k} of normalized scores; the latent code.
std::vector<double> extract_latent(const AttentionScores& scores, int q, int k, int batch = 0);

}  // namespace hyla
