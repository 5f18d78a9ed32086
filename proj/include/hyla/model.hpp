#pragma once

#include <string>
#include <vector>

#include "hyla/attention.hpp"
#include "hyla/tensor.hpp"

namespace hyla {

enum class AttentionVariant { softmax, linear, hyla, hyla_deep };
enum class FeedForwardKind { mlp, moe };

std::string variant_name(AttentionVariant v);
AttentionVariant variant_from_name(const std::string& name);

// Decoder-only transformer configuration. Base dims follow the small fuzzy
// setup (2 layers, emb 128, kqv 16, mlp 256, 8 heads); width_factor multiplies
// emb_dim, kqv_dim and mlp_dim and nothing else.
struct ModelConfig {
  int num_layers = 2;
  int emb_dim = 128;
  int kqv_dim = 16;
  int mlp_dim = 256;
  int num_heads = 8;
  int width_factor = 1;
  AttentionVariant attention = AttentionVariant::softmax;
  HylaFlags hyla_flags;  // ablation switches, hyla variant only
  FeedForwardKind feedforward = FeedForwardKind::mlp;
  int moe_experts = 4;
  int moe_top_k = 2;
  int input_dim = 5;
  int output_dim = 1;
  bool causal = true;
  bool final_layer_norm = false;
  bool rel_pos_bias = true;

  int scaled_emb() const { return emb_dim * width_factor; }
  int scaled_kqv() const { return kqv_dim * width_factor; }
  int scaled_mlp() const { return mlp_dim * width_factor; }
  int head_dim() const { return scaled_kqv() / num_heads; }

  // normalization used by the configured attention variant
  NormMode norm_mode() const;

  void validate() const;
};

struct Block {
  Tensor ln1_gain, ln1_bias;
  AttentionParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;  // mlp feedforward
  MoEParams moe;                      // moe feedforward
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool weight_decay;  // false for biases, LayerNorm params and position biases
};

struct Model {
  ModelConfig config;
  Tensor in_w, in_b;  // input_dim -> D, dense with bias
  std::vector<Block> blocks;
  Tensor final_ln_gain, final_ln_bias;  // only when config.final_layer_norm
  Tensor out_w, out_b;                  // D -> output_dim, dense with bias

  // Stable-ordered registry of every learnable tensor.
  std::vector<NamedParam> parameters();
  size_t param_count();
};

// fan-in scaled normal init (std = 1/sqrt(fan_in)), zero biases, unit LN gains;
// deterministic in the seed.
Model init_params(const ModelConfig& config, uint64_t seed);

// Z = attn(LN(X)) + X; Y = ff(LN(Z)) + Z. residual=false is a diagnostic
// switch that drops both residual adds.
Tensor block_forward(Tape& tp, const Tensor& X, const Block& block, const ModelConfig& config,
                     AttentionScores* capture = nullptr, bool residual = true);

// tokens [T, input_dim] or [B, T, input_dim] -> logits over output_dim.
// capture, when non-null, receives the post-normalization scores of every layer.
Tensor model_forward(Tape& tp, const Tensor& tokens, const Model& model,
                     std::vector<AttentionScores>* capture = nullptr);

}  // namespace hyla
