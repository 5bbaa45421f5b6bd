#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "steerkit/model.hpp"
#include "steerkit/steering_types.hpp"
#include "steerkit/tensor.hpp"
#include "steerkit/tokenizer.hpp"

namespace steerkit {

struct HookPoint {
  enum class Positions { ALL, LAST_K };
  int layer = 0;
  Positions selector = Positions::ALL;
  int k = 1;

  static HookPoint all(int layer) { return {layer, Positions::ALL, 1}; }
  static HookPoint last_k(int layer, int k) { return {layer, Positions::LAST_K, k}; }
};

struct ActivationTrace {
  int layer = 0;
  std::vector<int> token_positions;
  Tensor vectors;  // [positions x d_model]
};

struct ForwardResult {
  Tensor logits;  // [seq x vocab]
  std::vector<ActivationTrace> traces;
};

namespace detail {

// Per-layer intermediates kept when the caller needs a backward pass.
struct LayerTape {
  Tensor block_in;   // residual entering the block
  Tensor attn_in;    // rms-normed attention input
  Tensor q, k, v;    // projections
  std::vector<Tensor> probs;  // per head, [t x t] lower-triangular rows
  Tensor ctx;        // merged attention context before wo
  Tensor mid;        // residual after attention add
  Tensor mlp_in;     // rms-normed mlp input
  Tensor mlp_pre;    // mlp.w1 output, pre-activation
  Tensor mlp_act;    // silu(mlp_pre)
};

struct ForwardTape {
  int first_layer = 0;  // tape recorded for layers >= first_layer
  std::vector<LayerTape> layers;
  Tensor final_in;  // residual entering the final norm
};

inline void rms_norm_rows(const Tensor& x, const Tensor& gain, float eps, Tensor& out) {
  for (size_t i = 0; i < x.rows(); ++i)
    rms_norm_span(x.row_span(i), gain.data, eps, out.row_span(i));
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline void validate_tokens(const ModelConfig& cfg, const Tokens& tokens) {
  if (tokens.empty()) throw LengthError("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  for (Token t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw VocabError("token id " + std::to_string(t) + " outside vocab of size " +
                       std::to_string(cfg.vocab_size));
}

inline std::vector<int> hook_positions(const HookPoint& h, size_t seq_len) {
  std::vector<int> out;
  if (h.selector == HookPoint::Positions::ALL) {
    out.resize(seq_len);
    for (size_t i = 0; i < seq_len; ++i) out[i] = static_cast<int>(i);
  } else {
    if (h.k < 1) throw UsageError("LAST_K hook needs k >= 1");
    size_t n = std::min<size_t>(h.k, seq_len);
    for (size_t i = seq_len - n; i < seq_len; ++i) out.push_back(static_cast<int>(i));
  }
  return out;
}

// Full forward pass. `tape`, when non-null, records intermediates for every
// layer >= tape->first_layer so gradients can flow back to the steering
// injection point.
inline ForwardResult forward_impl(const ModelCheckpoint& ckpt, const Tokens& tokens,
                                  std::span<const HookPoint> capture,
                                  const SteeringApplication* steer, ForwardTape* tape) {
  const ModelConfig& cfg = ckpt.config;
  validate_tokens(cfg, tokens);
  if (steer) {
    steer->validate();
    if (steer->vector.layer < 0 || steer->vector.layer >= cfg.n_layers)
      throw ShapeError("steering layer out of range");
    if (steer->vector.vector.size() != static_cast<size_t>(cfg.d_model))
      throw ShapeError("steering vector dimension mismatch");
  }
  for (const HookPoint& h : capture)
    if (h.layer < 0 || h.layer >= cfg.n_layers) throw ShapeError("hook layer out of range");

  const size_t t = tokens.size();
  const size_t d = cfg.d_model;
  const size_t dh = cfg.head_dim();
  const size_t H = cfg.n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  const Tensor& tok_emb = ckpt.weight("tok_emb");
  const Tensor& pos_emb = ckpt.weight("pos_emb");

  Tensor x = Tensor::zeros({t, d});
  for (size_t i = 0; i < t; ++i) {
    auto row = x.row_span(i);
    auto te = tok_emb.row_span(static_cast<size_t>(tokens[i]));
    auto pe = pos_emb.row_span(i);
    for (size_t j = 0; j < d; ++j) row[j] = te[j] + pe[j];
  }

  ForwardResult result;
  if (tape) tape->layers.assign(cfg.n_layers, {});

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    std::string p = "layers." + std::to_string(layer) + ".";
    const bool record = tape && layer >= tape->first_layer;
    LayerTape* lt = record ? &tape->layers[layer] : nullptr;
    if (lt) lt->block_in = x;

    Tensor attn_in = Tensor::zeros({t, d});
    rms_norm_rows(x, ckpt.weight(p + "attn_norm.gain"), cfg.rms_eps, attn_in);
    Tensor q = matmul(attn_in, ckpt.weight(p + "attn.wq"));
    Tensor k = matmul(attn_in, ckpt.weight(p + "attn.wk"));
    Tensor v = matmul(attn_in, ckpt.weight(p + "attn.wv"));

    Tensor ctx = Tensor::zeros({t, d});
    std::vector<Tensor> probs;
    if (lt) probs.assign(H, Tensor());
    std::vector<float> scores;
    for (size_t h = 0; h < H; ++h) {
      size_t off = h * dh;
      Tensor head_probs = lt ? Tensor::zeros({t, t}) : Tensor();
      for (size_t i = 0; i < t; ++i) {
        scores.assign(i + 1, 0.0f);
        const float* qi = q.data.data() + i * d + off;
        for (size_t j = 0; j <= i; ++j) {
          const float* kj = k.data.data() + j * d + off;
          float s = 0.0f;
          for (size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * scale;
        }
        softmax_inplace(scores);
        float* ci = ctx.data.data() + i * d + off;
        for (size_t j = 0; j <= i; ++j) {
          const float* vj = v.data.data() + j * d + off;
          float pj = scores[j];
          for (size_t c = 0; c < dh; ++c) ci[c] += pj * vj[c];
        }
        if (lt)
          for (size_t j = 0; j <= i; ++j) head_probs.at(i, j) = scores[j];
      }
      if (lt) probs[h] = std::move(head_probs);
    }

    Tensor attn_out = matmul(ctx, ckpt.weight(p + "attn.wo"));
    for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

    Tensor mid = lt ? x : Tensor();
    Tensor mlp_in = Tensor::zeros({t, d});
    rms_norm_rows(x, ckpt.weight(p + "mlp_norm.gain"), cfg.rms_eps, mlp_in);
    Tensor mlp_pre = matmul(mlp_in, ckpt.weight(p + "mlp.w1"));
    Tensor mlp_act = Tensor::zeros(mlp_pre.shape);
    for (size_t i = 0; i < mlp_pre.size(); ++i) mlp_act.data[i] = silu(mlp_pre.data[i]);
    Tensor mlp_out = matmul(mlp_act, ckpt.weight(p + "mlp.w2"));
    for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp_out.data[i];

    if (lt) {
      lt->attn_in = std::move(attn_in);
      lt->q = std::move(q);
      lt->k = std::move(k);
      lt->v = std::move(v);
      lt->probs = std::move(probs);
      lt->ctx = std::move(ctx);
      lt->mid = std::move(mid);
      lt->mlp_in = std::move(mlp_in);
      lt->mlp_pre = std::move(mlp_pre);
      lt->mlp_act = std::move(mlp_act);
    }

    // Residual-stream intervention: inject after the block's residual add,
    // at every token position. multiplier == 0 must be a bit-exact no-op,
    // so skip the adds entirely.
    if (steer && layer == steer->vector.layer && steer->multiplier != 0.0f) {
      const Tensor& vec = steer->vector.vector;
      for (size_t i = 0; i < t; ++i) {
        float* row = x.data.data() + i * d;
        for (size_t j = 0; j < d; ++j) row[j] += steer->multiplier * vec.data[j];
      }
    }

    for (const HookPoint& h : capture) {
      if (h.layer != layer) continue;
      ActivationTrace trace;
      trace.layer = layer;
      trace.token_positions = hook_positions(h, t);
      trace.vectors = Tensor::zeros({trace.token_positions.size(), d});
      for (size_t r = 0; r < trace.token_positions.size(); ++r) {
        auto src = x.row_span(static_cast<size_t>(trace.token_positions[r]));
        std::copy(src.begin(), src.end(), trace.vectors.row_span(r).begin());
      }
      result.traces.push_back(std::move(trace));
    }
  }

  if (tape) tape->final_in = x;
  Tensor final_out = Tensor::zeros({t, d});
  rms_norm_rows(x, ckpt.weight("final_norm.gain"), cfg.rms_eps, final_out);
  result.logits = matmul(final_out, ckpt.weight("head.w"));
  ensure_finite(result.logits, "logits");
  return result;
}

}  // namespace detail

inline ForwardResult forward(const ModelCheckpoint& ckpt, const Tokens& tokens,
                             std::span<const HookPoint> capture = {},
                             const SteeringApplication* steer = nullptr) {
  return detail::forward_impl(ckpt, tokens, capture, steer, nullptr);
}

// Log-softmax of one logits row at `target`, computed in double.
inline double log_softmax_at(std::span<const float> logits, Token target) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return (static_cast<double>(logits[static_cast<size_t>(target)]) - mx) - std::log(sum);
}

// log P(completion | prompt), teacher-forced, summed over completion steps.
inline double sequence_logprob(const ModelCheckpoint& ckpt, const Tokens& prompt,
                               const Tokens& completion,
                               const SteeringApplication* steer = nullptr) {
  if (prompt.empty()) throw LengthError("empty prompt");
  if (completion.empty()) throw LengthError("empty completion");
  Tokens full = prompt;
  full.insert(full.end(), completion.begin(), completion.end());
  ForwardResult fr = forward(ckpt, full, {}, steer);
  double total = 0.0;
  for (size_t c = 0; c < completion.size(); ++c) {
    size_t pos = prompt.size() + c - 1;  // logits that predict completion[c]
    total += log_softmax_at(fr.logits.row_span(pos), completion[c]);
  }
  return total;
}

// Greedy decoding; stops at EOS (not included in the result). Ties break
// toward the lowest token id.
inline Tokens greedy_decode(const ModelCheckpoint& ckpt, const Tokens& prompt, int max_new,
                            const SteeringApplication* steer = nullptr) {
  if (max_new < 1) throw UsageError("max_new must be >= 1");
  Tokens seq = prompt;
  Tokens out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= ckpt.config.max_seq_len) break;
    ForwardResult fr = forward(ckpt, seq, {}, steer);
    auto row = fr.logits.row_span(seq.size() - 1);
    Token best = 0;
    float best_v = row[0];
    for (size_t i = 1; i < row.size(); ++i)
      if (row[i] > best_v) {
        best_v = row[i];
        best = static_cast<Token>(i);
      }
    if (best == tok::EOS) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

// Next-token probability at the prompt's last position, renormalized over
// the two candidate tokens.
inline std::pair<double, double> choice_probability(const ModelCheckpoint& ckpt,
                                                    const Tokens& prompt, Token option_a,
                                                    Token option_b,
                                                    const SteeringApplication* steer = nullptr) {
  if (option_a == option_b) throw UsageError("choice options must differ");
  if (option_a < 0 || option_a >= ckpt.config.vocab_size || option_b < 0 ||
      option_b >= ckpt.config.vocab_size)
    throw VocabError("choice token outside vocab");
  ForwardResult fr = forward(ckpt, prompt, {}, steer);
  auto row = fr.logits.row_span(prompt.size() - 1);
  double la = row[static_cast<size_t>(option_a)];
  double lb = row[static_cast<size_t>(option_b)];
  double mx = std::max(la, lb);
  double ea = std::exp(la - mx), eb = std::exp(lb - mx);
  return {ea / (ea + eb), eb / (ea + eb)};
}

}  // namespace steerkit
