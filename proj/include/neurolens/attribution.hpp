#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/corpus.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/model.hpp"
#include "neurolens/tensor.hpp"
#include "neurolens/text_norm.hpp"

namespace neurolens {

struct ProjectedToken {
  TokenId id = 0;
  std::string token;
  double logit = 0.0;
};

/// Top-k tokens: non-increasing logit, ties by ascending id.
struct TokenProjection {
  std::vector<ProjectedToken> entries;
};

/// h · W_U for every vocabulary entry (no final norm).
inline std::vector<double> lens_logits(const ModelBundle& m, std::span<const float> h) {
  if (h.size() != m.config.d_model) fail(ErrorCode::DimensionMismatch, "lens input has the wrong dimension");
  std::vector<double> z(m.config.vocab_size, 0.0);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double hi = h[i];
    if (hi == 0.0) continue;
    const auto row = m.unembedding.row(i);
    for (std::size_t t = 0; t < z.size(); ++t) z[t] += hi * row[t];
  }
  return z;
}

inline std::string token_label(const ModelBundle& m, TokenId id) {
  return m.vocab ? m.vocab->display(id) : "#" + std::to_string(id);
}

inline TokenProjection logit_lens(const ModelBundle& m, std::span<const float> h, std::size_t k = 20) {
  if (k < 1) fail(ErrorCode::ConfigError, "logit lens k must be at least 1");
  const auto z = lens_logits(m, h);
  std::vector<TokenId> ids(z.size());
  for (TokenId i = 0; i < ids.size(); ++i) ids[i] = i;
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;
  });
  TokenProjection p;
  for (std::size_t i = 0; i < k; ++i) p.entries.push_back({ids[i], token_label(m, ids[i]), z[ids[i]]});
  return p;
}

struct NeuronCandidate {
  NeuronRef ref;
  double score = 0.0;
  TokenProjection projection;
  bool retained = false;
  std::vector<std::string> matched_keywords;
};

/// Layers scored by score_neurons: the last `layer_window` blocks (all blocks if fewer).
inline std::pair<std::size_t, std::size_t> scoring_layers(const ModelBundle& m, std::size_t layer_window) {
  const std::size_t L = m.config.n_layers;
  return {L > layer_window ? L - layer_window : 0, L};
}

/// Cosine between the direction and every neuron output vector in the window,
/// sorted by score descending, then layer ascending, then index ascending.
inline std::vector<NeuronCandidate> score_neurons(const ModelBundle& m, std::span<const float> direction,
                                                  std::size_t layer_window = 4) {
  if (layer_window < 1) fail(ErrorCode::ConfigError, "layer_window must be at least 1");
  if (direction.size() != m.config.d_model) fail(ErrorCode::DimensionMismatch, "direction has the wrong dimension");
  const auto [first, last] = scoring_layers(m, layer_window);
  std::vector<NeuronCandidate> out;
  out.reserve((last - first) * m.config.d_mlp);
  for (std::size_t l = first; l < last; ++l) {
    for (std::size_t j = 0; j < m.config.d_mlp; ++j) {
      NeuronCandidate c;
      c.ref = {l, j};
      c.score = cosine(direction, m.neuron_output(l, j));
      out.push_back(std::move(c));
    }
  }
  std::sort(out.begin(), out.end(), [](const NeuronCandidate& a, const NeuronCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ref < b.ref;
  });
  return out;
}

inline std::vector<NeuronCandidate> select_candidates(const std::vector<NeuronCandidate>& ranked, std::size_t top_n = 20) {
  if (top_n < 1) fail(ErrorCode::ConfigError, "top_n must be at least 1");
  return {ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(std::min(top_n, ranked.size()))};
}

/// Per-group keyword lists, stored normalized.
class KeywordTable {
 public:
  KeywordTable() = default;

  void add(GroupLabel g, const std::string& word) {
    const auto n = normalize_token(word);
    if (n.empty()) return;
    auto& list = words_[g];
    if (std::find(list.begin(), list.end(), n) == list.end()) list.push_back(n);
  }

  const std::vector<std::string>& for_group(GroupLabel g) const {
    static const std::vector<std::string> empty;
    auto it = words_.find(g);
    return it == words_.end() ? empty : it->second;
  }

  /// {"Asian": ["asian", ...], ...}
  static KeywordTable from_json(const nlohmann::json& j) {
    KeywordTable t;
    if (!j.is_object()) fail(ErrorCode::ConfigError, "keyword config must be an object of group -> word list");
    for (const auto& [name, words] : j.items()) {
      auto g = group_from_string(name);
      if (!g) fail(ErrorCode::ConfigError, "keyword config names unknown group '" + name + "'");
      for (const auto& w : words) t.add(*g, w.get<std::string>());
    }
    return t;
  }

  static KeywordTable load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorCode::IoError, "cannot read keyword file " + path.string());
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "keyword file " + path.string() + ": " + e.what());
    }
  }

 private:
  std::map<GroupLabel, std::vector<std::string>> words_;
};

struct NeuronGroup {
  GroupLabel group = GroupLabel::Asian;
  Mention mention = Mention::NotApplicable;
  std::vector<NeuronCandidate> members;
  /// Every candidate that was inspected, retained or not.
  std::vector<NeuronCandidate> inspected;

  std::string name() const {
    if (mention == Mention::NotApplicable) return to_string(group);
    return to_string(group) + (mention == Mention::Direct ? " Direct" : " Indirect");
  }

  std::set<NeuronRef> refs() const {
    std::set<NeuronRef> out;
    for (const auto& c : members) out.insert(c.ref);
    return out;
  }
};

/// Keeps candidates whose top-k projected tokens hit the group's keywords at least
/// `min_matches` times (each matching token counts once). min_matches = 0 keeps everything.
inline NeuronGroup filter_by_alignment(std::vector<NeuronCandidate> candidates, const std::vector<std::string>& keywords,
                                       const ModelBundle& m, std::size_t k, std::size_t min_matches, GroupLabel group,
                                       Mention mention = Mention::NotApplicable) {
  if (keywords.empty()) fail(ErrorCode::ConfigError, "keyword list for " + to_string(group) + " is empty");
  std::vector<std::string> normalized;
  for (const auto& w : keywords) normalized.push_back(normalize_token(w));
  NeuronGroup out;
  out.group = group;
  out.mention = mention;
  std::set<NeuronRef> seen;
  for (auto& c : candidates) {
    c.projection = logit_lens(m, m.neuron_output(c.ref.layer, c.ref.index), k);
    c.matched_keywords.clear();
    std::size_t hits = 0;
    for (const auto& e : c.projection.entries) {
      const auto tok = normalize_token(e.token);
      if (tok.empty()) continue;
      auto it = std::find(normalized.begin(), normalized.end(), tok);
      if (it == normalized.end()) continue;
      ++hits;
      if (std::find(c.matched_keywords.begin(), c.matched_keywords.end(), *it) == c.matched_keywords.end()) {
        c.matched_keywords.push_back(*it);
      }
    }
    c.retained = hits >= min_matches;
    if (c.retained && seen.insert(c.ref).second) out.members.push_back(c);
  }
  out.inspected = std::move(candidates);
  return out;
}

inline nlohmann::json candidate_json(const NeuronCandidate& c) {
  nlohmann::json toks = nlohmann::json::array();
  for (const auto& e : c.projection.entries) toks.push_back({{"id", e.id}, {"token", e.token}, {"logit", e.logit}});
  return {{"neuron", c.ref.notation()}, {"layer", c.ref.layer}, {"index", c.ref.index}, {"score", c.score},
          {"retained", c.retained},     {"matched_keywords", c.matched_keywords},      {"top_tokens", toks}};
}

inline nlohmann::json group_json(const NeuronGroup& g) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& c : g.members) members.push_back(candidate_json(c));
  return {{"group", to_string(g.group)}, {"mention", to_string(g.mention)}, {"name", g.name()}, {"members", members}};
}

/// Reads the member refs back from group_json output (projections are not restored).
inline NeuronGroup group_from_json(const nlohmann::json& j) {
  NeuronGroup g;
  auto label = group_from_string(j.at("group").get<std::string>());
  if (!label) fail(ErrorCode::SchemaError, "neuron group names unknown label");
  g.group = *label;
  const auto m = j.value("mention", std::string("n/a"));
  g.mention = m == "direct" ? Mention::Direct : m == "indirect" ? Mention::Indirect : Mention::NotApplicable;
  for (const auto& e : j.at("members")) {
    NeuronCandidate c;
    c.ref = {e.at("layer").get<std::size_t>(), e.at("index").get<std::size_t>()};
    c.score = e.value("score", 0.0);
    c.retained = true;
    c.matched_keywords = e.value("matched_keywords", std::vector<std::string>{});
    g.members.push_back(std::move(c));
  }
  return g;
}

}  // namespace neurolens
