#include "hyla/model.hpp"

#include <cmath>
#include <stdexcept>

namespace hyla {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::string variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::softmax: return "softmax";
    case AttentionVariant::linear: return "linear";
    case AttentionVariant::hyla: return "hyla";
    case AttentionVariant::hyla_deep: return "hyla_deep";
  }
  return "?";
}

AttentionVariant variant_from_name(const std::string& name) {
  if (name == "softmax") return AttentionVariant::softmax;
  if (name == "linear") return AttentionVariant::linear;
  if (name == "hyla") return AttentionVariant::hyla;
  if (name == "hyla_deep") return AttentionVariant::hyla_deep;
  throw std::invalid_argument("unknown attention variant '" + name + "'");
}

NormMode ModelConfig::norm_mode() const {
  switch (attention) {
    case AttentionVariant::softmax: return NormMode::softmax_over_keys;
    case AttentionVariant::linear: return NormMode::identity;
    case AttentionVariant::hyla:
      if (hyla_flags.softmax_override) return NormMode::softmax_over_keys;
      return hyla_flags.use_rmshead ? NormMode::rmshead_over_heads : NormMode::identity;
    case AttentionVariant::hyla_deep: return NormMode::rmshead_over_heads;
  }
  return NormMode::identity;
}

void ModelConfig::validate() const {
  check(num_layers >= 1, "config: num_layers must be >= 1");
  check(width_factor == 1 || width_factor == 2 || width_factor == 4,
        "config: width_factor must be 1, 2 or 4");
  check(scaled_kqv() % num_heads == 0, "config: kqv_dim " + std::to_string(scaled_kqv()) +
                                           " not divisible by num_heads " +
                                           std::to_string(num_heads));
  check(emb_dim >= 1 && kqv_dim >= 1 && mlp_dim >= 1, "config: dims must be positive");
  check(input_dim >= 1 && output_dim >= 1, "config: io dims must be positive");
  if (feedforward == FeedForwardKind::moe)
    check(moe_top_k >= 1 && moe_top_k <= moe_experts, "config: need 1 <= moe_top_k <= moe_experts");
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> ps;
  auto push = [&](const std::string& name, const Tensor& t, bool decay) {
    if (t.defined()) ps.push_back({name, t, decay});
  };
  push("in_proj.w", in_w, true);
  push("in_proj.b", in_b, false);
  for (size_t i = 0; i < blocks.size(); ++i) {
    std::string pre = "block" + std::to_string(i) + ".";
    Block& b = blocks[i];
    push(pre + "ln1.gain", b.ln1_gain, false);
    push(pre + "ln1.bias", b.ln1_bias, false);
    push(pre + "attn.w_query", b.attn.w_query, true);
    push(pre + "attn.w_key", b.attn.w_key, true);
    push(pre + "attn.w_value", b.attn.w_value, true);
    push(pre + "attn.w_value2", b.attn.w_value2, true);
    push(pre + "attn.w_out", b.attn.w_out, true);
    push(pre + "attn.rel_pos_bias", b.attn.rel_pos_bias, false);
    push(pre + "ln2.gain", b.ln2_gain, false);
    push(pre + "ln2.bias", b.ln2_bias, false);
    push(pre + "ff.w1", b.ff_w1, true);
    push(pre + "ff.b1", b.ff_b1, false);
    push(pre + "ff.w2", b.ff_w2, true);
    push(pre + "ff.b2", b.ff_b2, false);
    push(pre + "moe.w_gate", b.moe.w_gate, true);
    push(pre + "moe.w_down", b.moe.w_down, true);
    push(pre + "moe.w_up", b.moe.w_up, true);
  }
  push("final_ln.gain", final_ln_gain, false);
  push("final_ln.bias", final_ln_bias, false);
  push("out_proj.w", out_w, true);
  push("out_proj.b", out_b, false);
  return ps;
}

size_t Model::param_count() {
  size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

Model init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  Rng rng(seed);
  int D = config.scaled_emb();
  int kqv = config.scaled_kqv();
  int M = config.scaled_mlp();

  m.in_w = Tensor::normal({D, config.input_dim}, rng,
                          1.0 / std::sqrt(static_cast<double>(config.input_dim)), true);
  m.in_b = Tensor::zeros({D}, true);

  bool deep = config.attention == AttentionVariant::hyla_deep;
  for (int l = 0; l < config.num_layers; ++l) {
    Block b;
    b.ln1_gain = Tensor::full({D}, 1.0, true);
    b.ln1_bias = Tensor::zeros({D}, true);
    b.attn = AttentionParams::init(D, kqv, config.num_heads, rng, deep, config.rel_pos_bias);
    b.ln2_gain = Tensor::full({D}, 1.0, true);
    b.ln2_bias = Tensor::zeros({D}, true);
    if (config.feedforward == FeedForwardKind::mlp) {
      b.ff_w1 = Tensor::normal({M, D}, rng, 1.0 / std::sqrt(static_cast<double>(D)), true);
      b.ff_b1 = Tensor::zeros({M}, true);
      b.ff_w2 = Tensor::normal({D, M}, rng, 1.0 / std::sqrt(static_cast<double>(M)), true);
      b.ff_b2 = Tensor::zeros({D}, true);
    } else {
      b.moe = MoEParams::init(D, M, config.moe_experts, config.moe_top_k, rng);
    }
    m.blocks.push_back(std::move(b));
  }
  if (config.final_layer_norm) {
    m.final_ln_gain = Tensor::full({D}, 1.0, true);
    m.final_ln_bias = Tensor::zeros({D}, true);
  }
  m.out_w = Tensor::normal({config.output_dim, D}, rng, 1.0 / std::sqrt(static_cast<double>(D)),
                           true);
  m.out_b = Tensor::zeros({config.output_dim}, true);
  return m;
}

namespace {

Tensor affine_layer_norm(Tape& tp, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  Tensor n = layer_norm(tp, x, -1);
  return add_rowwise(tp, mul_rowwise(tp, n, gain), bias);
}

Tensor attention_forward(Tape& tp, const Tensor& x, const Block& block, const ModelConfig& config,
                         AttentionScores* capture) {
  switch (config.attention) {
    case AttentionVariant::softmax:
      return mha_forward(tp, x, block.attn, NormMode::softmax_over_keys, config.causal, capture);
    case AttentionVariant::linear:
      return mha_forward(tp, x, block.attn, NormMode::identity, config.causal, capture);
    case AttentionVariant::hyla:
      return hyla_forward(tp, x, block.attn, config.causal, config.hyla_flags, capture);
    case AttentionVariant::hyla_deep:
      return hyla_deep_forward(tp, x, block.attn, config.causal, capture);
  }
  throw std::logic_error("unreachable");
}

Tensor feedforward_forward(Tape& tp, const Tensor& x, const Block& block,
                           const ModelConfig& config) {
  if (config.feedforward == FeedForwardKind::moe) return moe_feedforward(tp, x, block.moe);
  Tensor h = gelu(tp, add_rowwise(tp, contract(tp, x, block.ff_w1, "btd,md->btm"), block.ff_b1));
  return add_rowwise(tp, contract(tp, h, block.ff_w2, "btm,dm->btd"), block.ff_b2);
}

}  // namespace

Tensor block_forward(Tape& tp, const Tensor& X, const Block& block, const ModelConfig& config,
                     AttentionScores* capture, bool residual) {
  bool was_2d = X.ndim() == 2;
  Tensor x = was_2d ? reshape(tp, X, {1, X.dim(0), X.dim(1)}) : X;
  Tensor a = attention_forward(tp, affine_layer_norm(tp, x, block.ln1_gain, block.ln1_bias), block,
                               config, capture);
  Tensor z = residual ? add(tp, a, x) : a;
  Tensor f = feedforward_forward(tp, affine_layer_norm(tp, z, block.ln2_gain, block.ln2_bias),
                                 block, config);
  Tensor y = residual ? add(tp, f, z) : f;
  return was_2d ? reshape(tp, y, {y.dim(1), y.dim(2)}) : y;
}

Tensor model_forward(Tape& tp, const Tensor& tokens, const Model& model,
                     std::vector<AttentionScores>* capture) {
  check(tokens.ndim() == 2 || tokens.ndim() == 3,
        "model_forward: tokens must be [T,input_dim] or [B,T,input_dim]");
  bool was_2d = tokens.ndim() == 2;
  Tensor x = was_2d ? reshape(tp, tokens, {1, tokens.dim(0), tokens.dim(1)}) : tokens;
  check(x.dim(2) == model.config.input_dim,
        "model_forward: token dim " + std::to_string(x.dim(2)) + " != input_dim " +
            std::to_string(model.config.input_dim));
  if (capture) capture->clear();

  x = add_rowwise(tp, contract(tp, x, model.in_w, "bti,di->btd"), model.in_b);
  for (const Block& b : model.blocks) {
    AttentionScores scores;
    x = block_forward(tp, x, b, model.config, capture ? &scores : nullptr);
    if (capture) capture->push_back(scores);
  }
  if (model.config.final_layer_norm)
    x = affine_layer_norm(tp, x, model.final_ln_gain, model.final_ln_bias);
  Tensor logits = add_rowwise(tp, contract(tp, x, model.out_w, "btd,od->bto"), model.out_b);
  return was_2d ? reshape(tp, logits, {logits.dim(1), logits.dim(2)}) : logits;
}

}  // namespace hyla
