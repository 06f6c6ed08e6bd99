#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neurolens/error.hpp"
#include "neurolens/model.hpp"
#include "neurolens/rng.hpp"
#include "neurolens/vocab.hpp"

namespace neurolens {

/// A neuron whose output vector is planted along a token's unembedding column.
struct PlantedNeuron {
  std::size_t layer = 0;
  std::size_t index = 0;
  std::string group_label;
  TokenId write_token = 0;
  double strength = 1.0;
  /// Tokens whose embeddings drive the gate and up projections. Empty keeps them random.
  std::vector<TokenId> trigger_tokens;
  double trigger_gain = 1.0;
  /// Extra tokens mixed into the write direction at `companion_weight` each.
  std::vector<TokenId> companion_tokens;
  double companion_weight = 0.02;
};

/// One attention head that, at query-token positions, attends to key tokens and
/// writes copy_gain·e(key) + write_gain·u(write) into the residual stream.
struct AttentionRoute {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<TokenId> query_tokens;
  struct Entry {
    TokenId key_token;
    TokenId write_token;
  };
  std::vector<Entry> entries;
  double score_gain = 24.0;
  double copy_gain = 1.0;
  double write_gain = 1.0;
};

struct EmbeddingOverride {
  TokenId token = 0;
  TokenId as_token = 0;
  double scale = 1.0;
};

struct SyntheticSpec {
  ModelConfig dims;
  std::vector<PlantedNeuron> planted;
  std::uint64_t seed = 0;
  bool orthogonal_unembedding = true;
  /// Embedding row t equals unembedding column t.
  bool tied_embedding = true;
  /// Standard deviation multiplier for the random (non-planted) weights.
  double init_scale = 1.0;
  std::vector<AttentionRoute> routes;
  std::vector<EmbeddingOverride> embedding_overrides;
  std::optional<Vocab> vocab;
};

namespace detail {

inline void fill_normal(Matrix& w, SplitMix64& rng, double stddev) {
  for (auto& v : w.data()) v = static_cast<float>(rng.normal() * stddev);
}

inline Vec unit_column(const Matrix& w, std::size_t c) {
  Vec v = w.column(c);
  const double n = norm(v);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

inline Vec unit_row(const Matrix& w, std::size_t r) {
  Vec v(w.row(r).begin(), w.row(r).end());
  const double n = norm(v);
  if (n > 0) {
    for (auto& x : v) x = static_cast<float>(x / n);
  }
  return v;
}

}  // namespace detail

/// Pure function of `spec`: same spec and seed give bit-identical weights.
inline ModelBundle generate_synthetic_model(const SyntheticSpec& spec) {
  ModelBundle m;
  m.config = spec.dims;
  const auto& c = m.config;
  const std::size_t D = c.d_model, M = c.d_mlp, V = c.vocab_size;
  if (D == 0 || c.n_layers == 0 || c.n_heads == 0 || M == 0 || V < 2) {
    fail(ErrorCode::ConfigError, "synthetic dims must be positive with vocab_size >= 2");
  }
  if (D % c.n_heads != 0 || c.head_dim() % 2 != 0) fail(ErrorCode::ConfigError, "d_model must split into heads of even dimension");
  if (spec.orthogonal_unembedding && V > D) {
    fail(ErrorCode::DimTooSmall, "orthogonal unembedding needs vocab_size (" + std::to_string(V) +
                                     ") <= d_model (" + std::to_string(D) + ")");
  }
  if (spec.vocab && spec.vocab->size() != V) fail(ErrorCode::ConfigError, "vocab size does not match dims");
  for (const auto& p : spec.planted) {
    if (p.layer >= c.n_layers || p.index >= M) fail(ErrorCode::ConfigError, "planted neuron outside the model");
    if (p.write_token >= V || !std::isfinite(p.strength)) fail(ErrorCode::ConfigError, "planted neuron has a bad write token or strength");
    for (auto t : p.trigger_tokens) {
      if (t >= V) fail(ErrorCode::ConfigError, "planted trigger token out of range");
    }
    for (auto t : p.companion_tokens) {
      if (t >= V) fail(ErrorCode::ConfigError, "planted companion token out of range");
    }
  }

  SplitMix64 rng(spec.seed);

  // Unembedding: orthonormal columns by modified Gram-Schmidt, else unit Gaussian columns.
  m.unembedding = Matrix(D, V);
  {
    std::vector<std::vector<double>> cols;
    for (std::size_t t = 0; t < V; ++t) {
      std::vector<double> v(D);
      for (auto& x : v) x = rng.normal();
      if (spec.orthogonal_unembedding) {
        for (int pass = 0; pass < 2; ++pass) {
          for (const auto& q : cols) {
            double d = 0.0;
            for (std::size_t i = 0; i < D; ++i) d += v[i] * q[i];
            for (std::size_t i = 0; i < D; ++i) v[i] -= d * q[i];
          }
        }
      }
      double n = 0.0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      for (auto& x : v) x /= n;
      for (std::size_t i = 0; i < D; ++i) m.unembedding(i, t) = static_cast<float>(v[i]);
      if (spec.orthogonal_unembedding) cols.push_back(std::move(v));
    }
  }

  m.token_embedding = Matrix(V, D);
  if (spec.tied_embedding) {
    for (std::size_t t = 0; t < V; ++t) {
      for (std::size_t i = 0; i < D; ++i) m.token_embedding(t, i) = m.unembedding(i, t);
    }
  } else {
    detail::fill_normal(m.token_embedding, rng, 1.0 / std::sqrt(static_cast<double>(D)));
  }
  for (const auto& o : spec.embedding_overrides) {
    if (o.token >= V || o.as_token >= V) fail(ErrorCode::ConfigError, "embedding override token out of range");
    for (std::size_t i = 0; i < D; ++i) m.token_embedding(o.token, i) = static_cast<float>(o.scale * m.unembedding(i, o.as_token));
  }

  const double sd_d = spec.init_scale / std::sqrt(static_cast<double>(D));
  const double sd_m = spec.init_scale / std::sqrt(static_cast<double>(M));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm.assign(D, 1.0f);
    w.mlp_norm.assign(D, 1.0f);
    w.wq = Matrix(D, D);
    w.wk = Matrix(D, D);
    w.wv = Matrix(D, D);
    w.wo = Matrix(D, D);
    w.gate = Matrix(D, M);
    w.up = Matrix(D, M);
    w.down = Matrix(M, D);
    detail::fill_normal(w.wq, rng, sd_d);
    detail::fill_normal(w.wk, rng, sd_d);
    detail::fill_normal(w.wv, rng, sd_d);
    detail::fill_normal(w.wo, rng, sd_d);
    detail::fill_normal(w.gate, rng, sd_d);
    detail::fill_normal(w.up, rng, sd_d);
    detail::fill_normal(w.down, rng, sd_m);
    m.layers.push_back(std::move(w));
  }
  m.final_norm.assign(D, 1.0f);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  for (const auto& route : spec.routes) {
    if (route.layer >= c.n_layers || route.head >= c.n_heads) fail(ErrorCode::ConfigError, "attention route outside the model");
    const std::size_t hd = c.head_dim();
    if (route.entries.size() > hd) fail(ErrorCode::ConfigError, "attention route has more entries than head dimensions");
    auto& w = m.layers[route.layer];
    const std::size_t off = route.head * hd;
    for (std::size_t i = 0; i < D; ++i) {
      for (std::size_t d = off; d < off + hd; ++d) {
        w.wq(i, d) = w.wk(i, d) = w.wv(i, d) = 0.0f;
      }
    }
    for (std::size_t d = off; d < off + hd; ++d) {
      for (std::size_t i = 0; i < D; ++i) w.wo(d, i) = 0.0f;
    }
    // Query/key live in the head's lowest-frequency rotary pair, so scores barely depend on distance.
    const double qk = std::sqrt(route.score_gain * std::sqrt(static_cast<double>(hd)));
    const std::size_t qk_dim = off + hd - 2;
    for (auto t : route.query_tokens) {
      const Vec e = detail::unit_row(m.token_embedding, t);
      for (std::size_t i = 0; i < D; ++i) w.wq(i, qk_dim) += static_cast<float>(qk * inv_sqrt_d * e[i]);
    }
    for (std::size_t n = 0; n < route.entries.size(); ++n) {
      const auto& entry = route.entries[n];
      const Vec e = detail::unit_row(m.token_embedding, entry.key_token);
      for (std::size_t i = 0; i < D; ++i) {
        w.wk(i, qk_dim) += static_cast<float>(qk * inv_sqrt_d * e[i]);
        w.wv(i, off + n) = static_cast<float>(inv_sqrt_d * e[i]);
        w.wo(off + n, i) = static_cast<float>(route.copy_gain * e[i] + route.write_gain * m.unembedding(i, entry.write_token));
      }
    }
  }

  for (const auto& p : spec.planted) {
    auto& w = m.layers[p.layer];
    Vec dir = detail::unit_column(m.unembedding, p.write_token);
    for (auto t : p.companion_tokens) {
      const Vec u = detail::unit_column(m.unembedding, t);
      for (std::size_t i = 0; i < D; ++i) dir[i] += static_cast<float>(p.companion_weight * u[i]);
    }
    const double dn = norm(dir);
    Vec noise(D);
    for (auto& x : noise) x = static_cast<float>(rng.normal());
    const double nn = norm(noise);
    const double noise_norm = 0.005 * std::abs(p.strength);
    for (std::size_t i = 0; i < D; ++i) {
      w.down(p.index, i) = static_cast<float>(p.strength * dir[i] / dn + noise_norm * noise[i] / nn);
    }
    if (!p.trigger_tokens.empty()) {
      Vec read(D, 0.0f);
      for (auto t : p.trigger_tokens) {
        const Vec e = detail::unit_row(m.token_embedding, t);
        for (std::size_t i = 0; i < D; ++i) read[i] += e[i];
      }
      for (std::size_t i = 0; i < D; ++i) {
        const float v = static_cast<float>(p.trigger_gain * inv_sqrt_d * read[i]);
        w.gate(i, p.index) = v;
        w.up(i, p.index) = v;
      }
    }
  }

  if (spec.vocab) m.vocab = spec.vocab;
  validate(m);
  return m;
}

}  // namespace neurolens
