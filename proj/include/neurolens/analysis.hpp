#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/attribution.hpp"
#include "neurolens/corpus.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/error.hpp"

namespace neurolens {

// ---------------------------------------------------------------- label parsing

struct LabelOption {
  GroupLabel label;
  std::vector<std::string> names;  // first entry is the display name
};

inline std::vector<LabelOption> clinical_options() {
  return {{GroupLabel::White, {"White"}},
          {GroupLabel::BlackAA, {"Black or African American", "Black/AA", "African American", "Black"}},
          {GroupLabel::Asian, {"Asian"}}};
}

namespace detail {

inline bool starts_with_word_ci(std::string_view text, std::string_view word) {
  if (text.size() < word.size()) return false;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(text[i])) != std::tolower(static_cast<unsigned char>(word[i]))) return false;
  }
  if (text.size() == word.size()) return true;
  const unsigned char next = static_cast<unsigned char>(text[word.size()]);
  return !std::isalnum(next);
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Label from a generation: the first bracketed segment if the text opens with '[', else the
/// leading text. It must begin (at a word boundary, case-insensitively) with the names of exactly
/// one option. Anything else is Unknown (nullopt).
inline std::optional<GroupLabel> parse_label(std::string_view generated, const std::vector<LabelOption>& options) {
  std::string_view s = detail::trim(generated);
  if (!s.empty() && s.front() == '[') {
    const auto close = s.find(']');
    s = detail::trim(s.substr(1, close == std::string_view::npos ? std::string_view::npos : close - 1));
  }
  if (s.empty()) return std::nullopt;
  std::set<GroupLabel> hits;
  for (const auto& opt : options) {
    for (const auto& name : opt.names) {
      if (detail::starts_with_word_ci(s, name)) hits.insert(opt.label);
    }
  }
  if (hits.size() != 1) return std::nullopt;
  return *hits.begin();
}

inline std::string label_or_unknown(const std::optional<GroupLabel>& g) { return g ? to_string(*g) : "Unknown"; }

// ---------------------------------------------------------------- activation matrix

/// rows: neuron groups, cols: input groups. Empty cells (no members) are nullopt.
struct ActivationMatrix {
  std::vector<std::string> rows;
  std::vector<GroupLabel> cols;
  std::vector<std::vector<std::optional<double>>> cells;
  std::vector<std::size_t> member_counts;
  std::vector<std::size_t> record_counts;
};

/// Mean over the group's members of each member's pooled activation for one sequence.
inline std::vector<std::optional<double>> group_activations(const ModelBundle& m, const std::vector<TokenId>& tokens,
                                                            const std::vector<NeuronGroup>& groups, Pooling pooling,
                                                            const InterventionPolicy* policy = nullptr) {
  CapturePlan plan;
  plan.logits = LogitRows::None;
  plan.pooling = pooling;
  for (const auto& g : groups) {
    for (const auto& c : g.members) plan.neurons.insert(c.ref);
  }
  std::vector<std::optional<double>> out(groups.size());
  if (plan.neurons.empty()) return out;
  const auto trace = forward(m, tokens, plan, policy);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].members.empty()) continue;
    double acc = 0.0;
    for (const auto& c : groups[i].members) acc += pool_activation(trace, c.ref, pooling);
    out[i] = acc / static_cast<double>(groups[i].members.size());
  }
  return out;
}

/// cell(g, h) = mean over records of input group h of group g's mean member activation.
inline ActivationMatrix activation_matrix(const ModelBundle& m,
                                          const std::map<GroupLabel, std::vector<std::vector<TokenId>>>& records_by_group,
                                          const std::vector<NeuronGroup>& groups, Pooling pooling) {
  ActivationMatrix out;
  for (const auto& g : groups) {
    out.rows.push_back(g.name());
    out.member_counts.push_back(g.members.size());
  }
  for (const auto& [label, recs] : records_by_group) {
    if (recs.empty()) fail(ErrorCode::EmptyGroup, "no records for input group " + to_string(label));
    out.cols.push_back(label);
    out.record_counts.push_back(recs.size());
  }
  out.cells.assign(groups.size(), std::vector<std::optional<double>>(out.cols.size()));
  std::size_t col = 0;
  for (const auto& [label, recs] : records_by_group) {
    std::vector<double> sums(groups.size(), 0.0);
    for (const auto& r : recs) {
      const auto acts = group_activations(m, r, groups, pooling);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (acts[g]) sums[g] += *acts[g];
      }
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (!groups[g].members.empty()) out.cells[g][col] = sums[g] / static_cast<double>(recs.size());
    }
    ++col;
  }
  return out;
}

// ---------------------------------------------------------------- outcomes

struct OutcomeRecord {
  std::size_t record_index = 0;
  GroupLabel actual = GroupLabel::White;
  std::optional<GroupLabel> predicted;  // nullopt: Unknown
  /// Mean member activation at the last input token, keyed by group name.
  std::map<std::string, double> group_activation;
  std::optional<double> factor;  // intervention factor, if any
  std::string generation;
};

using LabelPair = std::pair<GroupLabel, GroupLabel>;

struct ErrorPattern {
  std::map<LabelPair, std::size_t> counts;  // actual != predicted, both valid labels
  std::size_t total_errors = 0;
  std::size_t unknown = 0;
  std::optional<LabelPair> dominant;
  double dominant_pct = 0.0;
};

/// Dominant pair = highest count; ties resolve to the smallest (actual, predicted) in label order.
inline ErrorPattern error_pattern_from_counts(const std::map<LabelPair, std::size_t>& counts, std::size_t unknown = 0) {
  ErrorPattern p;
  p.unknown = unknown;
  for (const auto& [pair, n] : counts) {
    if (pair.first == pair.second || n == 0) continue;
    p.counts[pair] = n;
    p.total_errors += n;
    if (!p.dominant || n > p.counts[*p.dominant]) p.dominant = pair;
  }
  if (p.dominant) p.dominant_pct = 100.0 * static_cast<double>(p.counts[*p.dominant]) / static_cast<double>(p.total_errors);
  return p;
}

/// Unknown predictions are tracked separately and never enter the error denominator.
inline ErrorPattern error_pattern(const std::vector<OutcomeRecord>& outcomes) {
  std::map<LabelPair, std::size_t> counts;
  std::size_t unknown = 0;
  for (const auto& o : outcomes) {
    if (!o.predicted) {
      ++unknown;
    } else if (*o.predicted != o.actual) {
      counts[{o.actual, *o.predicted}]++;
    }
  }
  return error_pattern_from_counts(counts, unknown);
}

inline nlohmann::json error_pattern_json(const ErrorPattern& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [pair, n] : p.counts) {
    rows.push_back({{"actual", to_string(pair.first)}, {"predicted", to_string(pair.second)}, {"count", n}});
  }
  nlohmann::json j = {{"errors", rows}, {"total_errors", p.total_errors}, {"unknown", p.unknown}};
  if (p.dominant) {
    j["dominant"] = {{"actual", to_string(p.dominant->first)}, {"predicted", to_string(p.dominant->second)}};
    j["dominant_pct"] = p.dominant_pct;
  } else {
    j["dominant"] = nullptr;
    j["dominant_pct"] = nullptr;
  }
  return j;
}

/// "+x.xx" / "-x.xx", or the empty marker.
inline std::string format_signed(const std::optional<double>& v) {
  if (!v) return "---";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", *v);
  return buf;
}

/// Mean activation per neuron group per (actual -> predicted) cell; cells without samples are nullopt.
struct OutcomeTable {
  std::vector<std::string> groups;
  std::vector<LabelPair> columns;
  std::vector<std::vector<std::optional<double>>> cells;
  std::vector<std::size_t> column_counts;
};

inline OutcomeTable outcome_buckets(const std::vector<OutcomeRecord>& outcomes, const std::vector<std::string>& group_names,
                                    const std::vector<GroupLabel>& label_order) {
  OutcomeTable t;
  t.groups = group_names;
  for (auto a : label_order) {
    for (auto p : label_order) t.columns.push_back({a, p});
  }
  t.cells.assign(group_names.size(), std::vector<std::optional<double>>(t.columns.size()));
  t.column_counts.assign(t.columns.size(), 0);
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    std::vector<double> sums(group_names.size(), 0.0);
    std::vector<std::size_t> ns(group_names.size(), 0);
    for (const auto& o : outcomes) {
      if (!o.predicted || o.actual != t.columns[c].first || *o.predicted != t.columns[c].second) continue;
      t.column_counts[c]++;
      for (std::size_t g = 0; g < group_names.size(); ++g) {
        auto it = o.group_activation.find(group_names[g]);
        if (it == o.group_activation.end()) continue;
        sums[g] += it->second;
        ns[g]++;
      }
    }
    for (std::size_t g = 0; g < group_names.size(); ++g) {
      if (ns[g] > 0) t.cells[g][c] = sums[g] / static_cast<double>(ns[g]);
    }
  }
  return t;
}

// ---------------------------------------------------------------- intervention sweep

struct SweepInput {
  std::size_t record_index = 0;
  std::vector<TokenId> prompt;
  GroupLabel actual = GroupLabel::White;
  GroupLabel baseline = GroupLabel::White;  // the original (biased) prediction
};

struct GenerationOptions {
  std::size_t max_new = 4;
  std::optional<TokenId> stop;
  std::vector<LabelOption> options = clinical_options();
};

enum class SweepOutcome { Correct, OriginalBias, Other, Unknown };

inline SweepOutcome classify_outcome(const std::optional<GroupLabel>& predicted, GroupLabel actual, GroupLabel baseline) {
  if (!predicted) return SweepOutcome::Unknown;
  if (*predicted == actual) return SweepOutcome::Correct;
  if (*predicted == baseline) return SweepOutcome::OriginalBias;
  return SweepOutcome::Other;
}

struct SweepCell {
  std::string kind;
  double factor = 0.0;
  std::size_t n = 0;
  std::size_t correct = 0, original_bias = 0, other = 0, unknown = 0;

  double rate(std::size_t count) const { return n == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(n); }
};

struct SweepGeneration {
  std::string kind;
  double factor = 0.0;
  std::size_t record_index = 0;
  std::string generation;
  std::optional<GroupLabel> predicted;
  SweepOutcome outcome = SweepOutcome::Unknown;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepGeneration> generations;
};

inline std::string to_string(SweepOutcome o) {
  switch (o) {
    case SweepOutcome::Correct: return "correct";
    case SweepOutcome::OriginalBias: return "original_bias";
    case SweepOutcome::Other: return "other";
    case SweepOutcome::Unknown: return "unknown";
  }
  return "?";
}

/// Generates and parses a label for one prompt under an optional policy.
inline std::pair<std::string, std::optional<GroupLabel>> predict_label(const ModelBundle& m, const std::vector<TokenId>& prompt,
                                                                       const GenerationOptions& gen,
                                                                       const InterventionPolicy* policy = nullptr) {
  const auto out = greedy_generate(m, prompt, gen.max_new, policy, gen.stop);
  const std::string text = m.vocab ? m.vocab->detokenize(out.ids) : std::string();
  return {text, parse_label(text, gen.options)};
}

/// Reruns generation on baseline errors with each kind's neurons suppressed at each factor.
/// `kinds` maps a kind name ("direct", "indirect") to the neuron groups it targets.
inline SweepResult intervention_sweep(const ModelBundle& m, const std::vector<SweepInput>& misclassified,
                                      const std::vector<std::pair<std::string, std::vector<NeuronGroup>>>& kinds,
                                      const std::vector<double>& factors, const GenerationOptions& gen) {
  if (misclassified.empty()) fail(ErrorCode::NoBaselineErrors, "no misclassified records to intervene on");
  SweepResult res;
  for (const auto& [kind, groups] : kinds) {
    InterventionPolicy policy;
    for (const auto& g : groups) {
      for (const auto& c : g.members) policy.targets.insert(c.ref);
    }
    for (double k : factors) {
      policy.factor = k;
      SweepCell cell;
      cell.kind = kind;
      cell.factor = k;
      for (const auto& in : misclassified) {
        auto [text, pred] = predict_label(m, in.prompt, gen, &policy);
        const auto o = classify_outcome(pred, in.actual, in.baseline);
        cell.n++;
        switch (o) {
          case SweepOutcome::Correct: cell.correct++; break;
          case SweepOutcome::OriginalBias: cell.original_bias++; break;
          case SweepOutcome::Other: cell.other++; break;
          case SweepOutcome::Unknown: cell.unknown++; break;
        }
        res.generations.push_back({kind, k, in.record_index, std::move(text), pred, o});
      }
      res.cells.push_back(cell);
    }
  }
  return res;
}

inline nlohmann::json sweep_json(const SweepResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"kind", c.kind},
                     {"factor", c.factor},
                     {"n", c.n},
                     {"correct", c.rate(c.correct)},
                     {"original_bias", c.rate(c.original_bias)},
                     {"other", c.rate(c.other)},
                     {"unknown", c.rate(c.unknown)},
                     {"counts", {{"correct", c.correct}, {"original_bias", c.original_bias}, {"other", c.other}, {"unknown", c.unknown}}}});
  }
  return {{"cells", cells}};
}

}  // namespace neurolens
