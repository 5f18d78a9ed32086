#include "hyla/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hyla {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Accept [T, D] or [B, T, D]; run batched internally.
Tensor ensure_batched(Tape& tp, const Tensor& X, bool* was_2d) {
  check(X.ndim() == 2 || X.ndim() == 3, "attention: input must be [T,D] or [B,T,D]");
  *was_2d = X.ndim() == 2;
  if (*was_2d) return reshape(tp, X, {1, X.dim(0), X.dim(1)});
  return X;
}

Tensor squeeze_batch(Tape& tp, const Tensor& Y, bool was_2d) {
  if (!was_2d) return Y;
  return reshape(tp, Y, {Y.dim(1), Y.dim(2)});
}

// upper-triangular (k > q) mask, tiled to [B, H, T, T]
Tensor causal_mask(int B, int H, int T) {
  Tensor m = Tensor::zeros({B, H, T, T});
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int q = 0; q < T; ++q)
        for (int k = q + 1; k < T; ++k)
          m[static_cast<size_t>(((b * H + h) * T + q) * T + k)] = 1.0;
  return m;
}

// bias[h, q, k] = table[h, rel_pos_bucket(q - k)]; differentiable in the table
Tensor rel_pos_bias_matrix(Tape& tp, const Tensor& table, int T) {
  int H = table.dim(0);
  int NB = table.dim(1);
  Tensor out = Tensor::zeros({H, T, T});
  for (int h = 0; h < H; ++h)
    for (int q = 0; q < T; ++q)
      for (int k = 0; k < T; ++k)
        out[static_cast<size_t>((h * T + q) * T + k)] =
            table[static_cast<size_t>(h * NB + rel_pos_bucket(q - k))];
  if (tp.recording() && table.requires_grad()) {
    out.set_requires_grad(true);
    auto ti = table.impl();
    auto oi = out.impl();
    tp.record(
        [ti, oi, H, T, NB]() {
          for (int h = 0; h < H; ++h)
            for (int q = 0; q < T; ++q)
              for (int k = 0; k < T; ++k)
                ti->grad[static_cast<size_t>(h * NB + rel_pos_bucket(q - k))] +=
                    oi->grad[static_cast<size_t>((h * T + q) * T + k)];
        },
        {table, out});
  }
  return out;
}

}  // namespace

std::string norm_mode_name(NormMode m) {
  switch (m) {
    case NormMode::identity: return "identity";
    case NormMode::softmax_over_keys: return "softmax";
    case NormMode::rmshead_over_heads: return "rmshead";
  }
  return "?";
}

int rel_pos_bucket(int relative_distance) {
  int ad = std::abs(relative_distance);
  constexpr int max_exact = kRelPosBuckets / 2;
  if (ad < max_exact) return ad;
  double r = std::log(static_cast<double>(ad) / max_exact) /
             std::log(static_cast<double>(kRelPosMaxDistance) / max_exact);
  int bucket = max_exact + static_cast<int>(r * (kRelPosBuckets - max_exact));
  return std::min(bucket, kRelPosBuckets - 1);
}

Tensor AttentionParams::w_out_concat(Tape& tp) const {
  // [H, D, Dh] -> [D, H*Dh]
  Tensor t = transpose(tp, w_out, {1, 0, 2});
  return reshape(tp, t, {out_dim(), num_heads() * head_dim()});
}

size_t AttentionParams::param_count() const {
  size_t n = w_query.size() + w_key.size() + w_value.size() + w_out.size();
  if (has_value2()) n += w_value2.size();
  if (has_rel_pos()) n += rel_pos_bias.size();
  return n;
}

AttentionParams AttentionParams::init(int emb_dim, int kqv_dim, int num_heads, Rng& rng,
                                      bool deep_value, bool rel_pos) {
  check(num_heads >= 1, "attention init: need at least one head");
  check(kqv_dim % num_heads == 0, "attention init: kqv_dim " + std::to_string(kqv_dim) +
                                      " not divisible by " + std::to_string(num_heads) +
                                      " heads");
  int dh = kqv_dim / num_heads;
  AttentionParams p;
  double in_std = 1.0 / std::sqrt(static_cast<double>(emb_dim));
  double out_std = 1.0 / std::sqrt(static_cast<double>(kqv_dim));
  p.w_query = Tensor::normal({num_heads, dh, emb_dim}, rng, in_std, true);
  p.w_key = Tensor::normal({num_heads, dh, emb_dim}, rng, in_std, true);
  p.w_value = Tensor::normal({num_heads, dh, emb_dim}, rng, in_std, true);
  p.w_out = Tensor::normal({num_heads, emb_dim, dh}, rng, out_std, true);
  if (deep_value) {
    double v2_std = 1.0 / std::sqrt(static_cast<double>(dh));
    p.w_value2 = Tensor::normal({num_heads, dh, dh}, rng, v2_std, true);
  }
  if (rel_pos) p.rel_pos_bias = Tensor::zeros({num_heads, kRelPosBuckets}, true);
  return p;
}

AttentionScores raw_scores(Tape& tp, const Tensor& X, const AttentionParams& params) {
  bool was_2d = false;
  Tensor Xb = ensure_batched(tp, X, &was_2d);
  check(Xb.dim(2) == params.input_dim(), "raw_scores: input dim " + std::to_string(Xb.dim(2)) +
                                             " does not match projections " +
                                             std::to_string(params.input_dim()));
  int T = Xb.dim(1);
  Tensor Q = contract(tp, Xb, params.w_query, "btd,hcd->bhtc");
  Tensor K = contract(tp, Xb, params.w_key, "btd,hcd->bhtc");
  Tensor S = contract(tp, Q, K, "bhqc,bhkc->bhqk");
  S = scale(tp, S, 1.0 / std::sqrt(static_cast<double>(params.head_dim())));
  if (params.has_rel_pos()) {
    Tensor bias = rel_pos_bias_matrix(tp, params.rel_pos_bias, T);
    S = add_rowwise(tp, S, bias);
  }
  return AttentionScores{S, NormMode::identity};
}

AttentionScores normalize(Tape& tp, const AttentionScores& scores, NormMode mode, bool causal) {
  const Tensor& a = scores.values;
  check(a.ndim() == 4, "normalize: scores must be [B,H,T,T]");
  int B = a.dim(0), H = a.dim(1), T = a.dim(2);
  Tensor out;
  switch (mode) {
    case NormMode::identity: {
      out = causal ? mask_fill(tp, a, causal_mask(B, H, T), 0.0) : a;
      break;
    }
    case NormMode::softmax_over_keys: {
      Tensor masked = causal ? mask_fill(tp, a, causal_mask(B, H, T), kMaskNegInf) : a;
      out = softmax(tp, masked, 3);
      break;
    }
    case NormMode::rmshead_over_heads: {
      // normalize across heads first; masked entries are zeroed afterwards so
      // unmasked fibers stay exactly RMS 1
      Tensor r = rms_norm(tp, a, 1);
      out = causal ? mask_fill(tp, r, causal_mask(B, H, T), 0.0) : r;
      break;
    }
  }
  return AttentionScores{out, mode};
}

namespace {

AttentionScores scored(Tape& tp, const Tensor& Xb, const AttentionParams& params, NormMode mode,
                       bool causal) {
  AttentionScores raw = raw_scores(tp, Xb, params);
  return normalize(tp, raw, mode, causal);
}

}  // namespace

Tensor mha_forward(Tape& tp, const Tensor& X, const AttentionParams& params, NormMode mode,
                   bool causal, AttentionScores* captured) {
  check(mode != NormMode::rmshead_over_heads,
        "mha_forward: rmshead normalization belongs to the HYLA family");
  bool was_2d = false;
  Tensor Xb = ensure_batched(tp, X, &was_2d);
  AttentionScores A = scored(tp, Xb, params, mode, causal);
  if (captured) *captured = A;
  Tensor V = contract(tp, Xb, params.w_value, "bkd,hcd->bhkc");
  Tensor Z = contract(tp, A.values, V, "bhqk,bhkc->bqhc");
  Tensor Y = contract(tp, Z, params.w_out, "bqhc,hoc->bqo");
  return squeeze_batch(tp, Y, was_2d);
}

Tensor hypernet_forward(Tape& tp, const Tensor& X, const AttentionParams& params, NormMode mode,
                        bool causal) {
  check(mode != NormMode::rmshead_over_heads,
        "hypernet_forward: rmshead normalization belongs to the HYLA family");
  bool was_2d = false;
  Tensor Xb = ensure_batched(tp, X, &was_2d);
  AttentionScores A = scored(tp, Xb, params, mode, causal);
  // W_{q,k} = sum_h a_{h,q,k} (W^out_h W^value_h), materialized
  Tensor M = contract(tp, params.w_out, params.w_value, "hoc,hcd->hod");
  Tensor W = contract(tp, A.values, M, "bhqk,hod->bqkod");
  Tensor Y = contract(tp, W, Xb, "bqkod,bkd->bqo");
  return squeeze_batch(tp, Y, was_2d);
}

Tensor hyla_forward(Tape& tp, const Tensor& X, const AttentionParams& params, bool causal,
                    const HylaFlags& flags, AttentionScores* captured) {
  bool was_2d = false;
  Tensor Xb = ensure_batched(tp, X, &was_2d);
  NormMode mode = flags.softmax_override
                      ? NormMode::softmax_over_keys
                      : (flags.use_rmshead ? NormMode::rmshead_over_heads : NormMode::identity);
  AttentionScores A = scored(tp, Xb, params, mode, causal);
  if (captured) *captured = A;
  Tensor V = contract(tp, Xb, params.w_value, "bkd,hcd->bhkc");
  Tensor inner = contract(tp, A.values, V, "bhqk,bhkc->bqkc");
  Tensor z = flags.use_nonlinearity ? relu(tp, inner) : inner;
  Tensor outz = contract(tp, A.values, z, "bhqk,bqkc->bqhc");
  Tensor Y = contract(tp, outz, params.w_out, "bqhc,hoc->bqo");
  return squeeze_batch(tp, Y, was_2d);
}

Tensor hyla_deep_forward(Tape& tp, const Tensor& X, const AttentionParams& params, bool causal,
                         AttentionScores* captured) {
  check(params.has_value2(), "hyla_deep_forward: params lack the second value matrix");
  bool was_2d = false;
  Tensor Xb = ensure_batched(tp, X, &was_2d);
  AttentionScores A = scored(tp, Xb, params, NormMode::rmshead_over_heads, causal);
  if (captured) *captured = A;
  Tensor V = contract(tp, Xb, params.w_value, "bkd,hcd->bhkc");
  Tensor z1 = relu(tp, contract(tp, A.values, V, "bhqk,bhkc->bqkc"));
  Tensor t = contract(tp, z1, params.w_value2, "bqkc,hfc->bqkhf");
  Tensor z2 = relu(tp, contract(tp, A.values, t, "bhqk,bqkhf->bqkf"));
  Tensor outz = contract(tp, A.values, z2, "bhqk,bqkf->bqhf");
  Tensor Y = contract(tp, outz, params.w_out, "bqhf,hof->bqo");
  return squeeze_batch(tp, Y, was_2d);
}

size_t MoEParams::param_count() const {
  return w_gate.size() + w_down.size() + w_up.size();
}

MoEParams MoEParams::init(int emb_dim, int mlp_dim, int num_experts, int top_k, Rng& rng) {
  check(num_experts >= 1 && top_k >= 1 && top_k <= num_experts,
        "moe init: need 1 <= top_k <= num_experts");
  MoEParams p;
  double d_std = 1.0 / std::sqrt(static_cast<double>(emb_dim));
  double m_std = 1.0 / std::sqrt(static_cast<double>(mlp_dim));
  p.w_gate = Tensor::normal({num_experts, emb_dim}, rng, d_std, true);
  p.w_down = Tensor::normal({num_experts, mlp_dim, emb_dim}, rng, d_std, true);
  p.w_up = Tensor::normal({num_experts, emb_dim, mlp_dim}, rng, m_std, true);
  p.top_k = top_k;
  return p;
}

Tensor moe_feedforward(Tape& tp, const Tensor& x, const MoEParams& params,
                       Tensor* gate_weights) {
  check(x.ndim() >= 1, "moe_feedforward: scalar input");
  bool was_vec = x.ndim() == 1;
  Tensor xb = was_vec ? reshape(tp, x, {1, x.dim(0)}) : x;
  check(xb.ndim() == 2 || xb.ndim() == 3, "moe_feedforward: input must be [D], [T,D] or [B,T,D]");
  bool was_2d = xb.ndim() == 2;
  if (was_2d) xb = reshape(tp, xb, {1, xb.dim(0), xb.dim(1)});

  int E = params.num_experts();
  check(xb.dim(2) == params.w_gate.dim(1), "moe_feedforward: input dim mismatch");
  Tensor gate_logits = contract(tp, xb, params.w_gate, "btd,ed->bte");

  // mark everything outside the top-k (ties broken toward lower expert index)
  int B = xb.dim(0), T = xb.dim(1);
  Tensor drop = Tensor::zeros({B, T, E});
  std::vector<int> order(static_cast<size_t>(E));
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      const double* row = gate_logits.data() + static_cast<size_t>((b * T + t) * E);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int i, int j) { return row[i] > row[j]; });
      for (int r = params.top_k; r < E; ++r)
        drop[static_cast<size_t>((b * T + t) * E + order[static_cast<size_t>(r)])] = 1.0;
    }
  Tensor weights = softmax(tp, mask_fill(tp, gate_logits, drop, kMaskNegInf), 2);
  if (gate_weights) *gate_weights = weights;

  Tensor h = gelu(tp, contract(tp, xb, params.w_down, "btd,emd->btem"));
  Tensor up = contract(tp, h, params.w_up, "btem,edm->bted");
  Tensor out = contract(tp, weights, up, "bte,bted->btd");

  if (was_2d) out = reshape(tp, out, {out.dim(1), out.dim(2)});
  if (was_vec) out = reshape(tp, out, {out.dim(1)});
  return out;
}

std::vector<double> extract_latent(const AttentionScores& scores, int q, int k, int batch) {
  const Tensor& a = scores.values;
  check(a.ndim() == 4, "extract_latent: scores must be [B,H,T,T]");
  int B = a.dim(0), H = a.dim(1), T = a.dim(2);
  check(batch >= 0 && batch < B, "extract_latent: batch index out of range");
  check(q >= 0 && q < T && k >= 0 && k < T, "extract_latent: (q,k)=(" + std::to_string(q) + "," +
                                                std::to_string(k) + ") out of range for T=" +
                                                std::to_string(T));
  std::vector<double> fiber(static_cast<size_t>(H));
  for (int h = 0; h < H; ++h)
    fiber[static_cast<size_t>(h)] = a[static_cast<size_t>(((batch * H + h) * T + q) * T + k)];
  return fiber;
}

}  // namespace hyla
