#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neurolens/error.hpp"
#include "neurolens/model.hpp"
#include "neurolens/tensor.hpp"
#include "neurolens/vocab.hpp"

namespace neurolens {

/// A single MLP neuron: 0-based layer and index into the intermediate state.
struct NeuronRef {
  std::size_t layer = 0;
  std::size_t index = 0;

  auto operator<=>(const NeuronRef&) const = default;

  /// Report notation with a 1-based layer, e.g. "MLP.v^28_13406".
  std::string notation() const { return "MLP.v^" + std::to_string(layer + 1) + "_" + std::to_string(index); }
};

enum class Pooling { MeanAllPositions, LastInputToken };

inline std::string to_string(Pooling p) { return p == Pooling::MeanAllPositions ? "mean" : "last"; }

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean" || s == "mean_all_positions") return Pooling::MeanAllPositions;
  if (s == "last" || s == "last_input_token") return Pooling::LastInputToken;
  fail(ErrorCode::ConfigError, "unknown pooling '" + s + "' (expected mean|last)");
}

enum class LogitRows { All, LastOnly, None };

struct CapturePlan {
  std::set<std::size_t> residual_layers;
  std::set<NeuronRef> neurons;
  Pooling pooling = Pooling::MeanAllPositions;
  /// Also keep the normalized MLP input per captured residual layer.
  bool capture_mlp_inputs = false;
  LogitRows logits = LogitRows::All;
};

/// Negative forcing of targeted activations: a > 0 -> -k·a, a < 0 -> k·a, 0 -> 0.
struct InterventionPolicy {
  std::set<NeuronRef> targets;
  double factor = 5.0;
  bool enabled = true;

  static float transform(float a, float k) {
    if (a > 0.0f) return -k * a;
    if (a < 0.0f) return k * a;
    return 0.0f;
  }

  bool targets_layer(std::size_t layer) const {
    auto it = targets.lower_bound(NeuronRef{layer, 0});
    return it != targets.end() && it->layer == layer;
  }
};

inline void validate_policy(const ModelBundle& m, const InterventionPolicy& p) {
  if (!(p.factor > 0.0) || !std::isfinite(p.factor)) fail(ErrorCode::ConfigError, "intervention factor must be positive");
  for (const auto& t : p.targets) {
    if (t.layer >= m.config.n_layers || t.index >= m.config.d_mlp) {
      fail(ErrorCode::ConfigError, "intervention target " + t.notation() + " is outside the model");
    }
  }
}

struct ForwardTrace {
  std::vector<TokenId> tokens;
  std::vector<bool> is_pad;
  /// positions × vocab, or a single row for the final position when LogitRows::LastOnly.
  Matrix logits;
  /// residual stream after block `layer`, positions × d_model.
  std::map<std::size_t, Matrix> residual;
  /// normalized MLP input of block `layer`, positions × d_model.
  std::map<std::size_t, Matrix> mlp_input;
  /// post-intervention activation per position.
  std::map<NeuronRef, Vec> activation;

  std::span<const float> final_logits() const { return logits.row(logits.rows() - 1); }
};

struct MlpResult {
  Vec output;       // d_model
  Vec activations;  // d_mlp
};

/// SwiGLU block on an already-normalized input: a = silu(x·W_gate) ⊙ (x·W_up), output = a · W_down.
inline MlpResult mlp_forward(std::span<const float> x, const LayerWeights& w) {
  const Vec g = vec_mat(x, w.gate);
  const Vec u = vec_mat(x, w.up);
  MlpResult r;
  r.activations.resize(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) r.activations[j] = static_cast<float>(silu(g[j]) * u[j]);
  r.output = vec_mat(r.activations, w.down);
  return r;
}

namespace detail {

inline void rms_norm_into(std::span<const float> h, const Vec& scale, double eps, std::span<float> out) {
  double ss = 0.0;
  for (float v : h) ss += static_cast<double>(v) * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(h.size()) + eps);
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = static_cast<float>(h[i] * inv * scale[i]);
}

inline Matrix rms_norm(const Matrix& h, const Vec& scale, double eps) {
  Matrix out(h.rows(), h.cols());
  for (std::size_t t = 0; t < h.rows(); ++t) rms_norm_into(h.row(t), scale, eps, out.row(t));
  return out;
}

/// Rotary embedding on adjacent pairs (2i, 2i+1) of every head; frequency base^(-2i/head_dim).
inline void apply_rope(Matrix& x, std::size_t n_heads, double base) {
  const std::size_t hd = x.cols() / n_heads;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(t) * freq;
      const double c = std::cos(ang), s = std::sin(ang);
      for (std::size_t h = 0; h < n_heads; ++h) {
        float& a = row[h * hd + 2 * i];
        float& b = row[h * hd + 2 * i + 1];
        const double a0 = a, b0 = b;
        a = static_cast<float>(a0 * c - b0 * s);
        b = static_cast<float>(a0 * s + b0 * c);
      }
    }
  }
}

inline Matrix causal_attention(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg) {
  Matrix q = mat_mul(x, w.wq);
  Matrix k = mat_mul(x, w.wk);
  const Matrix v = mat_mul(x, w.wv);
  apply_rope(q, cfg.n_heads, cfg.rope_base);
  apply_rope(k, cfg.n_heads, cfg.rope_base);
  const std::size_t T = x.rows(), hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix mixed(T, cfg.d_model);
  std::vector<double> scores(T);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t d = 0; d < hd; ++d) acc += static_cast<double>(q(t, off + d)) * k(s, off + d);
        scores[s] = acc * scale;
        mx = std::max(mx, scores[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        scores[s] = std::exp(scores[s] - mx);
        z += scores[s];
      }
      for (std::size_t d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += scores[s] * v(s, off + d);
        mixed(t, off + d) = static_cast<float>(acc / z);
      }
    }
  }
  return mat_mul(mixed, w.wo);
}

}  // namespace detail

/// Full forward pass with capture and optional in-flight intervention.
/// With `policy` null or disabled the result is identical to a capture-only run.
inline ForwardTrace forward(const ModelBundle& m, const std::vector<TokenId>& tokens, const CapturePlan& plan,
                            const InterventionPolicy* policy = nullptr) {
  if (tokens.empty()) fail(ErrorCode::EmptyInput, "forward pass needs at least one token");
  const auto& cfg = m.config;
  for (TokenId t : tokens) {
    if (t >= cfg.vocab_size) fail(ErrorCode::EmptyInput, "token id " + std::to_string(t) + " exceeds vocab size");
  }
  for (const auto& n : plan.neurons) {
    if (n.layer >= cfg.n_layers || n.index >= cfg.d_mlp) fail(ErrorCode::ConfigError, "capture target " + n.notation() + " is outside the model");
  }
  for (auto l : plan.residual_layers) {
    if (l >= cfg.n_layers) fail(ErrorCode::ConfigError, "capture layer " + std::to_string(l) + " is outside the model");
  }
  const bool intervene = policy != nullptr && policy->enabled && !policy->targets.empty();
  if (intervene) validate_policy(m, *policy);

  const std::size_t T = tokens.size(), D = cfg.d_model;
  ForwardTrace trace;
  trace.tokens = tokens;
  trace.is_pad.resize(T, false);
  if (m.vocab) {
    for (std::size_t t = 0; t < T; ++t) trace.is_pad[t] = tokens[t] == m.vocab->pad();
  }

  Matrix h(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = m.token_embedding.row(tokens[t]);
    std::copy(e.begin(), e.end(), h.row(t).begin());
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& w = m.layers[l];
    const Matrix attn = detail::causal_attention(detail::rms_norm(h, w.attn_norm, cfg.norm_epsilon), w, cfg);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn.data()[i];

    const Matrix x = detail::rms_norm(h, w.mlp_norm, cfg.norm_epsilon);
    Matrix act(T, cfg.d_mlp);
    {
      const Matrix g = mat_mul(x, w.gate);
      const Matrix u = mat_mul(x, w.up);
      for (std::size_t i = 0; i < act.size(); ++i) {
        act.data()[i] = static_cast<float>(silu(g.data()[i]) * u.data()[i]);
      }
    }
    if (intervene && policy->targets_layer(l)) {
      const float k = static_cast<float>(policy->factor);
      for (auto it = policy->targets.lower_bound(NeuronRef{l, 0}); it != policy->targets.end() && it->layer == l; ++it) {
        for (std::size_t t = 0; t < T; ++t) act(t, it->index) = InterventionPolicy::transform(act(t, it->index), k);
      }
    }
    for (auto it = plan.neurons.lower_bound(NeuronRef{l, 0}); it != plan.neurons.end() && it->layer == l; ++it) {
      Vec col(T);
      for (std::size_t t = 0; t < T; ++t) col[t] = act(t, it->index);
      trace.activation.emplace(*it, std::move(col));
    }
    const Matrix out = mat_mul(act, w.down);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += out.data()[i];

    if (plan.residual_layers.count(l)) {
      trace.residual.emplace(l, h);
      if (plan.capture_mlp_inputs) trace.mlp_input.emplace(l, x);
    }
  }

  if (plan.logits != LogitRows::None) {
    const std::size_t first = plan.logits == LogitRows::LastOnly ? T - 1 : 0;
    trace.logits = Matrix(T - first, cfg.vocab_size);
    Vec x(D);
    for (std::size_t t = first; t < T; ++t) {
      if (cfg.final_norm) {
        detail::rms_norm_into(h.row(t), m.final_norm, cfg.norm_epsilon, x);
      } else {
        std::copy(h.row(t).begin(), h.row(t).end(), x.begin());
      }
      const Vec z = vec_mat(x, m.unembedding);
      std::copy(z.begin(), z.end(), trace.logits.row(t - first).begin());
    }
  }
  return trace;
}

/// Lowest id wins ties.
inline TokenId argmax_token(std::span<const float> logits) {
  TokenId best = 0;
  for (TokenId i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

/// Greedy decoding. The policy applies to every forward pass, prompt positions included.
/// Generation stops early when `stop` is produced (the stop token is not returned).
inline TokenSequence greedy_generate(const ModelBundle& m, const std::vector<TokenId>& prompt, std::size_t max_new,
                                     const InterventionPolicy* policy = nullptr,
                                     std::optional<TokenId> stop = std::nullopt) {
  if (prompt.empty()) fail(ErrorCode::EmptyInput, "generation needs a non-empty prompt");
  if (max_new < 1) fail(ErrorCode::ConfigError, "max_new must be at least 1");
  CapturePlan plan;
  plan.logits = LogitRows::LastOnly;
  std::vector<TokenId> ctx = prompt;
  TokenSequence out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto trace = forward(m, ctx, plan, policy);
    const TokenId next = argmax_token(trace.final_logits());
    if (stop && next == *stop) break;
    out.ids.push_back(next);
    ctx.push_back(next);
  }
  if (m.vocab) out.source_text = m.vocab->detokenize(out.ids);
  return out;
}

namespace detail {

inline std::vector<std::size_t> live_positions(const ForwardTrace& trace) {
  std::vector<std::size_t> pos;
  for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
    if (!trace.is_pad[t]) pos.push_back(t);
  }
  if (pos.empty()) fail(ErrorCode::EmptyInput, "sequence contains only padding");
  return pos;
}

}  // namespace detail

/// Mean over non-pad positions, or the residual at the last non-pad position.
inline Vec pool_residual(const ForwardTrace& trace, std::size_t layer, Pooling pooling) {
  auto it = trace.residual.find(layer);
  if (it == trace.residual.end()) fail(ErrorCode::LayerNotCaptured, "layer " + std::to_string(layer) + " was not captured");
  const Matrix& r = it->second;
  const auto pos = detail::live_positions(trace);
  if (pooling == Pooling::LastInputToken) {
    const auto row = r.row(pos.back());
    return Vec(row.begin(), row.end());
  }
  std::vector<double> acc(r.cols(), 0.0);
  for (auto t : pos) {
    for (std::size_t d = 0; d < r.cols(); ++d) acc[d] += r(t, d);
  }
  Vec out(r.cols());
  for (std::size_t d = 0; d < r.cols(); ++d) out[d] = static_cast<float>(acc[d] / static_cast<double>(pos.size()));
  return out;
}

/// Same pooling rule applied to one captured neuron's activation.
inline double pool_activation(const ForwardTrace& trace, const NeuronRef& ref, Pooling pooling) {
  auto it = trace.activation.find(ref);
  if (it == trace.activation.end()) fail(ErrorCode::LayerNotCaptured, "neuron " + ref.notation() + " was not captured");
  const auto pos = detail::live_positions(trace);
  if (pooling == Pooling::LastInputToken) return it->second[pos.back()];
  double acc = 0.0;
  for (auto t : pos) acc += it->second[t];
  return acc / static_cast<double>(pos.size());
}

}  // namespace neurolens
