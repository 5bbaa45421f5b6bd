#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "steerkit/format.hpp"
#include "steerkit/steering.hpp"
#include "steerkit/transformer.hpp"

namespace steerkit {

struct OptimizationTask {
  Tokens prompt;     // X
  Tokens promote;    // Y+
  Tokens suppress;   // Y-

  void validate(const ModelConfig& cfg) const {
    if (prompt.empty() || promote.empty() || suppress.empty())
      throw UsageError("optimization task fields must be nonempty");
    if (promote == suppress) throw UsageError("promote and suppress completions must differ");
    if (static_cast<int>(prompt.size() + std::max(promote.size(), suppress.size())) >
        cfg.max_seq_len)
      throw LengthError("optimization task exceeds max_seq_len");
  }
};

struct OptimizerConfig {
  int layer = -1;  // -1 selects the model's mid layer
  double learning_rate = 0.1;
  int iterations = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  enum class Init { ZERO, GAUSSIAN };
  Init init = Init::ZERO;
  uint64_t init_seed = 0;
  double init_scale = 0.01;

  int resolve_layer(const ModelConfig& cfg) const {
    int l = layer < 0 ? cfg.mid_layer() : layer;
    if (l < 0 || l >= cfg.n_layers) throw ShapeError("optimizer layer out of range");
    return l;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
    if (iterations < 1) throw UsageError("iterations must be >= 1");
  }
};

struct LossTrace {
  std::vector<double> losses;        // one per iteration, evaluated pre-update
  std::vector<double> grad_norms;    // gradient norm per iteration
  std::vector<double> vector_norms;  // vector norm after each update
  double final_vector_norm = 0.0;
};

namespace detail {

// c = a * b^T where a is [m,k] and b is [n,k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("matmul_nt shape mismatch");
  size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor c = Tensor::zeros({m, n});
  for (size_t i = 0; i < m; ++i) {
    const float* arow = a.data.data() + i * k;
    float* crow = c.data.data() + i * n;
    for (size_t j = 0; j < n; ++j) {
      const float* brow = b.data.data() + j * k;
      float s = 0.0f;
      for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = s;
    }
  }
  return c;
}

inline void rms_backward_rows(const Tensor& dy, const Tensor& x, const Tensor& gain, float eps,
                              Tensor& dx_accum) {
  size_t d = x.cols();
  float fd = static_cast<float>(d);
  for (size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row_span(i);
    auto dyi = dy.row_span(i);
    auto dxi = dx_accum.row_span(i);
    double ms = 0.0;
    for (float v : xi) ms += static_cast<double>(v) * v;
    float r = std::sqrt(static_cast<float>(ms) / fd + eps);
    double s = 0.0;
    for (size_t j = 0; j < d; ++j) s += static_cast<double>(dyi[j]) * gain.data[j] * xi[j];
    float c = static_cast<float>(s) / (fd * r * r * r);
    for (size_t j = 0; j < d; ++j) dxi[j] += dyi[j] * gain.data[j] / r - xi[j] * c;
  }
}

inline float silu_grad(float x) {
  float s = 1.0f / (1.0f + std::exp(-x));
  return s * (1.0f + x * (1.0f - s));
}

// Backpropagates d_logits to the post-block residual at `inject_layer`,
// i.e. the point where the steering vector was added. Weights are frozen;
// only activation gradients flow.
inline Tensor backward_to_injection(const ModelCheckpoint& ckpt, const ForwardTape& tape,
                                    const Tensor& d_logits, int inject_layer) {
  const ModelConfig& cfg = ckpt.config;
  const size_t t = d_logits.rows();
  const size_t d = cfg.d_model;
  const size_t dh = cfg.head_dim();
  const size_t H = cfg.n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor d_final = matmul_nt(d_logits, ckpt.weight("head.w"));
  Tensor d_x = Tensor::zeros({t, d});
  rms_backward_rows(d_final, tape.final_in, ckpt.weight("final_norm.gain"), cfg.rms_eps, d_x);

  for (int layer = cfg.n_layers - 1; layer > inject_layer; --layer) {
    const LayerTape& lt = tape.layers.at(layer);
    std::string p = "layers." + std::to_string(layer) + ".";

    // mlp: x3 = x2 + silu(rms(x2) w1) w2
    Tensor d_h = matmul_nt(d_x, ckpt.weight(p + "mlp.w2"));
    for (size_t i = 0; i < d_h.size(); ++i) d_h.data[i] *= silu_grad(lt.mlp_pre.data[i]);
    Tensor d_mlp_in = matmul_nt(d_h, ckpt.weight(p + "mlp.w1"));
    Tensor d_x2 = d_x;
    rms_backward_rows(d_mlp_in, lt.mid, ckpt.weight(p + "mlp_norm.gain"), cfg.rms_eps, d_x2);

    // attention: x2 = x1 + (softmax(q k^T) v) wo
    Tensor d_ctx = matmul_nt(d_x2, ckpt.weight(p + "attn.wo"));
    Tensor d_q = Tensor::zeros({t, d});
    Tensor d_k = Tensor::zeros({t, d});
    Tensor d_v = Tensor::zeros({t, d});
    std::vector<float> d_p, d_s;
    for (size_t h = 0; h < H; ++h) {
      size_t off = h * dh;
      const Tensor& probs = lt.probs.at(h);
      for (size_t i = 0; i < t; ++i) {
        d_p.assign(i + 1, 0.0f);
        const float* dci = d_ctx.data.data() + i * d + off;
        for (size_t j = 0; j <= i; ++j) {
          const float* vj = lt.v.data.data() + j * d + off;
          float acc = 0.0f;
          for (size_t c = 0; c < dh; ++c) acc += dci[c] * vj[c];
          d_p[j] = acc;
          float pij = probs.at(i, j);
          float* dvj = d_v.data.data() + j * d + off;
          for (size_t c = 0; c < dh; ++c) dvj[c] += pij * dci[c];
        }
        double inner = 0.0;
        for (size_t j = 0; j <= i; ++j) inner += static_cast<double>(probs.at(i, j)) * d_p[j];
        d_s.assign(i + 1, 0.0f);
        for (size_t j = 0; j <= i; ++j)
          d_s[j] = probs.at(i, j) * (d_p[j] - static_cast<float>(inner));
        float* dqi = d_q.data.data() + i * d + off;
        const float* qi = lt.q.data.data() + i * d + off;
        for (size_t j = 0; j <= i; ++j) {
          float dsij = d_s[j] * scale;
          const float* kj = lt.k.data.data() + j * d + off;
          float* dkj = d_k.data.data() + j * d + off;
          for (size_t c = 0; c < dh; ++c) {
            dqi[c] += dsij * kj[c];
            dkj[c] += dsij * qi[c];
          }
        }
      }
    }
    Tensor d_attn_in = matmul_nt(d_q, ckpt.weight(p + "attn.wq"));
    Tensor tmp = matmul_nt(d_k, ckpt.weight(p + "attn.wk"));
    for (size_t i = 0; i < d_attn_in.size(); ++i) d_attn_in.data[i] += tmp.data[i];
    tmp = matmul_nt(d_v, ckpt.weight(p + "attn.wv"));
    for (size_t i = 0; i < d_attn_in.size(); ++i) d_attn_in.data[i] += tmp.data[i];

    Tensor d_x1 = d_x2;
    rms_backward_rows(d_attn_in, lt.block_in, ckpt.weight(p + "attn_norm.gain"), cfg.rms_eps,
                      d_x1);
    d_x = std::move(d_x1);
  }
  return d_x;
}

struct SequenceGrad {
  double logprob = 0.0;
  Tensor injection_grad;  // [d_model], d(logprob-derived term)/d(vector)
};

enum class LossTerm { PROMOTE, SUPPRESS };

// Runs prompt+completion with the steering application, returning the
// sequence log-probability and the gradient of the matching loss term with
// respect to the steering vector.
inline SequenceGrad sequence_term_grad(const ModelCheckpoint& ckpt, const Tokens& prompt,
                                       const Tokens& completion, const SteeringApplication& happ,
                                       LossTerm term) {
  Tokens full = prompt;
  full.insert(full.end(), completion.begin(), completion.end());
  ForwardTape tape;
  tape.first_layer = happ.vector.layer + 1;
  ForwardResult fr = forward_impl(ckpt, full, {}, &happ, &tape);

  const size_t t = full.size();
  const size_t vocab = ckpt.config.vocab_size;
  double logprob = 0.0;
  std::vector<std::pair<size_t, Token>> steps;
  for (size_t c = 0; c < completion.size(); ++c) {
    size_t pos = prompt.size() + c - 1;
    logprob += log_softmax_at(fr.logits.row_span(pos), completion[c]);
    steps.emplace_back(pos, completion[c]);
  }

  // d(loss term)/d(logits). PROMOTE: -log P(Y+) gives softmax - onehot.
  // SUPPRESS: -log(1 - P(Y-)) gives f * (onehot - softmax) with
  // f = P / max(1 - P, 1e-7).
  double factor;
  if (term == LossTerm::PROMOTE) {
    factor = 1.0;
  } else {
    double p = std::exp(logprob);
    factor = p / std::max(1.0 - p, 1e-7);
  }
  Tensor d_logits = Tensor::zeros({t, vocab});
  for (auto [pos, target] : steps) {
    auto row = fr.logits.row_span(pos);
    double mx = row[0];
    for (float v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
    auto drow = d_logits.row_span(pos);
    for (size_t vtok = 0; vtok < vocab; ++vtok) {
      double soft = std::exp(static_cast<double>(row[vtok]) - mx) / sum;
      double onehot = (static_cast<Token>(vtok) == target) ? 1.0 : 0.0;
      double g = (term == LossTerm::PROMOTE) ? (soft - onehot) : factor * (onehot - soft);
      drow[vtok] += static_cast<float>(g);
    }
  }

  Tensor d_resid = backward_to_injection(ckpt, tape, d_logits, happ.vector.layer);
  SequenceGrad out;
  out.logprob = logprob;
  out.injection_grad = Tensor::zeros({static_cast<size_t>(ckpt.config.d_model)});
  for (size_t i = 0; i < d_resid.rows(); ++i) {
    auto row = d_resid.row_span(i);
    for (size_t j = 0; j < row.size(); ++j) out.injection_grad.data[j] += row[j];
  }
  for (float& g : out.injection_grad.data) g *= happ.multiplier;
  return out;
}

}  // namespace detail

// Dual-objective contrastive loss: -log P(Y+|X;h) - log(1 - P(Y-|X;h)).
// The suppress term clamps P(Y-) at 1 - 1e-7 so the loss stays finite.
inline double loss_from_logprobs(double logprob_promote, double logprob_suppress) {
  double p_minus = std::exp(logprob_suppress);
  double clamped = std::min(p_minus, 1.0 - 1e-7);
  return -logprob_promote - std::log1p(-clamped);
}

inline double contrastive_loss(const ModelCheckpoint& ckpt, const OptimizationTask& task,
                               const SteeringApplication& happ) {
  task.validate(ckpt.config);
  double lp_plus = sequence_logprob(ckpt, task.prompt, task.promote, &happ);
  double lp_minus = sequence_logprob(ckpt, task.prompt, task.suppress, &happ);
  return loss_from_logprobs(lp_plus, lp_minus);
}

// Exact reverse-mode gradient of contrastive_loss with respect to the
// steering vector, summed over all injection positions. Model weights are
// untouched.
inline Tensor loss_gradient(const ModelCheckpoint& ckpt, const OptimizationTask& task,
                            const SteeringApplication& happ) {
  task.validate(ckpt.config);
  auto g_plus = detail::sequence_term_grad(ckpt, task.prompt, task.promote, happ,
                                           detail::LossTerm::PROMOTE);
  auto g_minus = detail::sequence_term_grad(ckpt, task.prompt, task.suppress, happ,
                                            detail::LossTerm::SUPPRESS);
  Tensor grad = g_plus.injection_grad;
  for (size_t i = 0; i < grad.size(); ++i) grad.data[i] += g_minus.injection_grad.data[i];
  ensure_finite(grad, "loss gradient");
  return grad;
}

// Full-batch Adam on the mean contrastive loss, deterministic for a fixed
// (checkpoint, tasks, config). The multiplier stays 1.0 during training;
// evaluation-time multipliers are a separate knob.
inline std::pair<SteeringVector, LossTrace> optimize_vector(const ModelCheckpoint& ckpt,
                                                            const std::vector<OptimizationTask>& tasks,
                                                            const OptimizerConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) throw InsufficientDataError("no optimization tasks");
  int layer = cfg.resolve_layer(ckpt.config);
  for (const OptimizationTask& task : tasks) task.validate(ckpt.config);

  size_t d = ckpt.config.d_model;
  Tensor h = Tensor::zeros({d});
  if (cfg.init == OptimizerConfig::Init::GAUSSIAN) {
    Rng rng(cfg.init_seed);
    h = rng.normal_tensor({d}, cfg.init_scale);
  }

  std::vector<double> m(d, 0.0), v(d, 0.0);
  LossTrace trace;
  const double inv_n = 1.0 / static_cast<double>(tasks.size());

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    SteeringVector sv{layer, h, VectorMethod::OPTIMIZED, nlohmann::json::object()};
    SteeringApplication happ{std::move(sv), 1.0f};

    double mean_loss = 0.0;
    std::vector<double> grad(d, 0.0);
    for (const OptimizationTask& task : tasks) {
      auto g_plus = detail::sequence_term_grad(ckpt, task.prompt, task.promote, happ,
                                               detail::LossTerm::PROMOTE);
      auto g_minus = detail::sequence_term_grad(ckpt, task.prompt, task.suppress, happ,
                                                detail::LossTerm::SUPPRESS);
      mean_loss += loss_from_logprobs(g_plus.logprob, g_minus.logprob) * inv_n;
      for (size_t i = 0; i < d; ++i)
        grad[i] += (static_cast<double>(g_plus.injection_grad.data[i]) +
                    g_minus.injection_grad.data[i]) *
                   inv_n;
    }

    if (!std::isfinite(mean_loss))
      throw DivergenceError("loss diverged at iteration " + std::to_string(iter), trace.losses);
    trace.losses.push_back(mean_loss);

    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    trace.grad_norms.push_back(std::sqrt(gnorm));

    double t_step = iter + 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, t_step);
    double bc2 = 1.0 - std::pow(cfg.beta2, t_step);
    for (size_t i = 0; i < d; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      double update = cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      h.data[i] = static_cast<float>(h.data[i] - update);
    }
    if (!h.all_finite())
      throw DivergenceError("vector diverged at iteration " + std::to_string(iter), trace.losses);
    trace.vector_norms.push_back(norm2(h.data));
  }

  trace.final_vector_norm = norm2(h.data);
  SteeringVector out;
  out.layer = layer;
  out.vector = std::move(h);
  out.method = VectorMethod::OPTIMIZED;
  out.meta = {{"learning_rate", cfg.learning_rate},
              {"iterations", cfg.iterations},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"adam_eps", cfg.adam_eps},
              {"init", cfg.init == OptimizerConfig::Init::ZERO ? "zero" : "gaussian"},
              {"init_seed", cfg.init_seed},
              {"n_tasks", tasks.size()}};
  return {std::move(out), std::move(trace)};
}

// The ceil(pct*n) entries with greatest score; ties break toward the
// smaller id.
inline std::vector<std::pair<std::string, double>> select_top_percentile(
    std::vector<std::pair<std::string, double>> items, double pct = 0.20) {
  if (items.empty()) throw InsufficientDataError("select_top_percentile on empty input");
  if (!(pct > 0.0) || pct > 1.0) throw UsageError("pct must be in (0, 1]");
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  size_t keep = static_cast<size_t>(std::ceil(pct * static_cast<double>(items.size())));
  items.resize(std::min(keep, items.size()));
  return items;
}

inline std::string loss_trace_csv(const LossTrace& trace) {
  std::string out = "iteration,loss,grad_norm,vector_norm\n";
  for (size_t i = 0; i < trace.losses.size(); ++i) {
    out += std::to_string(i);
    out += ",";
    out += format_double(trace.losses[i]);
    out += ",";
    out += format_double(trace.grad_norms[i]);
    out += ",";
    out += format_double(trace.vector_norms[i]);
    out += "\n";
  }
  return out;
}

}  // namespace steerkit
