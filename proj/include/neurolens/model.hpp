#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/error.hpp"
#include "neurolens/tensor.hpp"
#include "neurolens/tensor_file.hpp"
#include "neurolens/vocab.hpp"

namespace neurolens {

struct ModelConfig {
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_mlp = 0;
  std::size_t vocab_size = 0;
  double rope_base = 10000.0;
  double norm_epsilon = 1e-5;
  /// RMS-normalize the last residual before unembedding.
  bool final_norm = true;

  std::size_t head_dim() const { return n_heads == 0 ? 0 : d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},       {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
       {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size}, {"rope_base", c.rope_base},
       {"norm_epsilon", c.norm_epsilon}, {"final_norm", c.final_norm}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_mlp = j.at("d_mlp").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.rope_base = j.value("rope_base", 10000.0);
  c.norm_epsilon = j.value("norm_epsilon", 1e-5);
  c.final_norm = j.value("final_norm", true);
}

/// One pre-norm decoder block. Projections act on row vectors: y = x · W.
struct LayerWeights {
  Vec attn_norm;  // d_model
  Matrix wq, wk, wv, wo;  // d_model × d_model
  Vec mlp_norm;   // d_model
  Matrix gate;    // d_model × d_mlp
  Matrix up;      // d_model × d_mlp
  Matrix down;    // d_mlp × d_model; row j is neuron j's output vector

  bool operator==(const LayerWeights&) const = default;
};

struct ModelBundle {
  ModelConfig config;
  Matrix token_embedding;  // vocab × d_model
  std::vector<LayerWeights> layers;
  Vec final_norm;          // d_model
  Matrix unembedding;      // d_model × vocab
  std::optional<Vocab> vocab;

  /// Output vector of MLP neuron `index` at `layer`.
  std::span<const float> neuron_output(std::size_t layer, std::size_t index) const {
    return layers.at(layer).down.row(index);
  }

  bool same_weights(const ModelBundle& o) const {
    return config == o.config && token_embedding == o.token_embedding && layers == o.layers &&
           final_norm == o.final_norm && unembedding == o.unembedding;
  }
};

namespace detail {

inline void check_shape(const std::string& name, std::size_t rows, std::size_t cols, std::size_t want_rows,
                        std::size_t want_cols) {
  if (rows != want_rows || cols != want_cols) {
    fail(ErrorCode::ShapeMismatch, "tensor '" + name + "' has shape [" + std::to_string(rows) + ", " +
                                       std::to_string(cols) + "], expected [" + std::to_string(want_rows) + ", " +
                                       std::to_string(want_cols) + "]");
  }
}

inline void check_finite(const std::string& name, std::span<const float> v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      fail(ErrorCode::NonFiniteWeight, "tensor '" + name + "' has a non-finite entry at flat index " + std::to_string(i));
    }
  }
}

inline std::string layer_name(std::size_t l, const char* what) { return "layers." + std::to_string(l) + "." + what; }

}  // namespace detail

/// Throws on any config/shape/finiteness violation, naming the offending tensor.
inline void validate(const ModelBundle& m) {
  const auto& c = m.config;
  if (c.d_model == 0 || c.n_layers == 0 || c.n_heads == 0 || c.d_mlp == 0) {
    fail(ErrorCode::ShapeMismatch, "d_model, n_layers, n_heads and d_mlp must be positive");
  }
  if (c.vocab_size < 2) fail(ErrorCode::ShapeMismatch, "vocab_size must be at least 2");
  if (c.d_model % c.n_heads != 0 || c.head_dim() % 2 != 0) {
    fail(ErrorCode::ShapeMismatch, "d_model must split into heads of even dimension");
  }
  if (!(c.rope_base > 0.0) || !(c.norm_epsilon > 0.0)) fail(ErrorCode::NonFiniteWeight, "rope_base and norm_epsilon must be positive");
  if (m.layers.size() != c.n_layers) fail(ErrorCode::MissingTensor, "model has " + std::to_string(m.layers.size()) + " layers, config says " + std::to_string(c.n_layers));

  const std::size_t D = c.d_model, M = c.d_mlp, V = c.vocab_size;
  auto vec = [&](const std::string& name, const Vec& v) {
    detail::check_shape(name, v.size(), 1, D, 1);
    detail::check_finite(name, v);
  };
  auto mat = [&](const std::string& name, const Matrix& w, std::size_t r, std::size_t cc) {
    detail::check_shape(name, w.rows(), w.cols(), r, cc);
    detail::check_finite(name, w.data());
  };
  mat("token_embedding", m.token_embedding, V, D);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = m.layers[l];
    vec(detail::layer_name(l, "attn_norm"), L.attn_norm);
    mat(detail::layer_name(l, "attn.q"), L.wq, D, D);
    mat(detail::layer_name(l, "attn.k"), L.wk, D, D);
    mat(detail::layer_name(l, "attn.v"), L.wv, D, D);
    mat(detail::layer_name(l, "attn.o"), L.wo, D, D);
    vec(detail::layer_name(l, "mlp_norm"), L.mlp_norm);
    mat(detail::layer_name(l, "mlp.gate"), L.gate, D, M);
    mat(detail::layer_name(l, "mlp.up"), L.up, D, M);
    mat(detail::layer_name(l, "mlp.down"), L.down, M, D);
  }
  vec("final_norm", m.final_norm);
  mat("unembedding", m.unembedding, D, V);
  if (m.vocab && m.vocab->size() != V) {
    fail(ErrorCode::ShapeMismatch, "vocab has " + std::to_string(m.vocab->size()) + " entries, config says " + std::to_string(V));
  }
}

/// Writes manifest + blob (+ vocab.tsv when the bundle carries a vocab).
inline void save_model(const ModelBundle& m, const std::filesystem::path& manifest_path) {
  std::vector<NamedTensor> ts;
  auto add = [&](std::string name, std::vector<std::size_t> shape, const std::vector<float>& data) {
    ts.push_back({std::move(name), std::move(shape), data});
  };
  const std::size_t D = m.config.d_model, M = m.config.d_mlp, V = m.config.vocab_size;
  add("token_embedding", {V, D}, m.token_embedding.data());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    add(detail::layer_name(l, "attn_norm"), {D}, L.attn_norm);
    add(detail::layer_name(l, "attn.q"), {D, D}, L.wq.data());
    add(detail::layer_name(l, "attn.k"), {D, D}, L.wk.data());
    add(detail::layer_name(l, "attn.v"), {D, D}, L.wv.data());
    add(detail::layer_name(l, "attn.o"), {D, D}, L.wo.data());
    add(detail::layer_name(l, "mlp_norm"), {D}, L.mlp_norm);
    add(detail::layer_name(l, "mlp.gate"), {D, M}, L.gate.data());
    add(detail::layer_name(l, "mlp.up"), {D, M}, L.up.data());
    add(detail::layer_name(l, "mlp.down"), {M, D}, L.down.data());
  }
  add("final_norm", {D}, m.final_norm);
  add("unembedding", {D, V}, m.unembedding.data());

  nlohmann::json header = {{"format", "neurolens.model"}, {"version", 1}, {"config", m.config}};
  const std::string stem = manifest_path.stem().string();
  if (m.vocab) {
    const std::string vocab_name = stem + ".vocab.tsv";
    std::filesystem::create_directories(manifest_path.parent_path().empty() ? "." : manifest_path.parent_path());
    m.vocab->save((manifest_path.parent_path() / vocab_name).string());
    header["vocab"] = vocab_name;
  }
  tensor_file::write(manifest_path, stem + ".bin", header, ts);
}

/// Loads and fully validates a bundle. Errors name the offending tensor.
inline ModelBundle load_model(const std::filesystem::path& manifest_path) {
  auto loaded = tensor_file::read(manifest_path);
  const auto& man = loaded.manifest;
  ModelBundle m;
  try {
    m.config = man.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("manifest config is malformed: ") + e.what());
  }
  const std::size_t D = m.config.d_model, M = m.config.d_mlp, V = m.config.vocab_size;

  auto take = [&](const std::string& name) -> NamedTensor& {
    auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end()) fail(ErrorCode::MissingTensor, "tensor '" + name + "' is not in the manifest");
    return it->second;
  };
  auto matrix = [&](const std::string& name, std::size_t r, std::size_t c) {
    auto& t = take(name);
    if (t.shape.size() != 2) fail(ErrorCode::ShapeMismatch, "tensor '" + name + "' must be 2-D");
    detail::check_shape(name, t.shape[0], t.shape[1], r, c);
    detail::check_finite(name, t.data);
    return Matrix(r, c, std::move(t.data));
  };
  auto vector = [&](const std::string& name) {
    auto& t = take(name);
    if (t.shape.size() != 1) fail(ErrorCode::ShapeMismatch, "tensor '" + name + "' must be 1-D");
    detail::check_shape(name, t.shape[0], 1, D, 1);
    detail::check_finite(name, t.data);
    return Vec(std::move(t.data));
  };

  m.token_embedding = matrix("token_embedding", V, D);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    LayerWeights L;
    L.attn_norm = vector(detail::layer_name(l, "attn_norm"));
    L.wq = matrix(detail::layer_name(l, "attn.q"), D, D);
    L.wk = matrix(detail::layer_name(l, "attn.k"), D, D);
    L.wv = matrix(detail::layer_name(l, "attn.v"), D, D);
    L.wo = matrix(detail::layer_name(l, "attn.o"), D, D);
    L.mlp_norm = vector(detail::layer_name(l, "mlp_norm"));
    L.gate = matrix(detail::layer_name(l, "mlp.gate"), D, M);
    L.up = matrix(detail::layer_name(l, "mlp.up"), D, M);
    L.down = matrix(detail::layer_name(l, "mlp.down"), M, D);
    m.layers.push_back(std::move(L));
  }
  m.final_norm = vector("final_norm");
  m.unembedding = matrix("unembedding", D, V);
  if (man.contains("vocab")) {
    m.vocab = Vocab::load((manifest_path.parent_path() / man["vocab"].get<std::string>()).string());
  }
  validate(m);
  return m;
}

}  // namespace neurolens
