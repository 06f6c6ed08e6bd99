#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/analysis.hpp"
#include "neurolens/attribution.hpp"
#include "neurolens/corpus.hpp"
#include "neurolens/csv.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/hash.hpp"
#include "neurolens/model.hpp"
#include "neurolens/probe.hpp"

namespace neurolens::pipeline {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

enum class DatasetMode { ToxiGen, CReactDirect, CReactIndirect };

inline std::string to_string(DatasetMode m) {
  switch (m) {
    case DatasetMode::ToxiGen: return "toxigen";
    case DatasetMode::CReactDirect: return "creact-direct";
    case DatasetMode::CReactIndirect: return "creact-indirect";
  }
  return "?";
}

inline DatasetMode mode_from_string(const std::string& s) {
  if (s == "toxigen") return DatasetMode::ToxiGen;
  if (s == "creact-direct") return DatasetMode::CReactDirect;
  if (s == "creact-indirect") return DatasetMode::CReactIndirect;
  fail(ErrorCode::ConfigError, "unknown dataset mode '" + s + "' (expected toxigen, creact-direct or creact-indirect)");
}

inline LabelMode label_mode(DatasetMode m) { return m == DatasetMode::ToxiGen ? LabelMode::ToxiGen : LabelMode::CReact; }

inline Mention mention_of(DatasetMode m) {
  switch (m) {
    case DatasetMode::CReactDirect: return Mention::Direct;
    case DatasetMode::CReactIndirect: return Mention::Indirect;
    default: return Mention::NotApplicable;
  }
}

/// "MLP.v^L_J" (1-based layer) or "layer:index" (0-based).
inline NeuronRef parse_neuron(const std::string& s) {
  std::size_t a = 0, b = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "MLP.v^%zu_%zu%c", &a, &b, &tail) == 2 && a >= 1) return {a - 1, b};
  if (std::sscanf(s.c_str(), "%zu:%zu%c", &a, &b, &tail) == 2) return {a, b};
  fail(ErrorCode::ConfigError, "cannot parse neuron '" + s + "' (use MLP.v^L_J or layer:index)");
}

// ---------------------------------------------------------------- config

struct RunConfig {
  fs::path base_dir;  // relative paths resolve here; not part of the provenance
  std::string model;
  std::string keywords;
  std::map<std::string, std::string> consolidation;  // "toxigen" | "creact" -> map file
  std::map<std::string, std::string> datasets;       // mode name -> path
  std::string mode;                                   // dataset used by single-stage commands
  std::string pooling = "auto";
  std::string toxigen_prompt = "raw";  // "raw" or "template" (wrap statements in the clinical prompt)
  std::optional<std::size_t> probe_layer;
  ProbeHyper probe;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 42;
  std::string probe_file;
  std::size_t layer_window = 4;
  std::size_t top_n = 20;
  std::size_t top_k = 20;
  std::size_t min_matches = 2;
  std::vector<double> factors{5.0, 10.0, 20.0};
  std::string target = "dominant";
  std::size_t max_new_tokens = 4;
  std::vector<std::string> groups;  // neuron-group files for activations
  std::string direct_groups;
  std::string indirect_groups;
  std::string output = "out";

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  /// Every field with defaults filled in, minus the output location.
  json effective() const {
    json j;
    j["model"] = model;
    j["keywords"] = keywords;
    j["consolidation"] = consolidation;
    j["datasets"] = datasets;
    j["mode"] = mode;
    j["pooling"] = pooling;
    j["toxigen_prompt"] = toxigen_prompt;
    j["probe"] = {{"layer", probe_layer ? json(*probe_layer) : json(nullptr)},
                  {"lr", probe.lr},
                  {"epochs", probe.epochs},
                  {"l2_lambda", probe.l2_lambda},
                  {"seed", probe.seed},
                  {"test_fraction", test_fraction},
                  {"split_seed", split_seed},
                  {"file", probe_file}};
    j["attribution"] = {{"layer_window", layer_window}, {"top_n", top_n}, {"k", top_k}, {"min_matches", min_matches}};
    j["intervention"] = {{"factors", factors},
                         {"target", target},
                         {"max_new_tokens", max_new_tokens},
                         {"direct_groups", direct_groups},
                         {"indirect_groups", indirect_groups}};
    j["groups"] = groups;
    return j;
  }

  std::string hash() const { return fnv1a_hex(effective().dump()); }
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) fail(ErrorCode::ConfigError, where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) fail(ErrorCode::ConfigError, "unknown config field '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <class T>
void take(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::ConfigError, "config field '" + where + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_config(const json& j, const fs::path& base_dir) {
  using detail::take;
  detail::check_keys(j, "", {"model", "keywords", "consolidation", "datasets", "mode", "pooling", "toxigen_prompt", "probe",
                             "attribution", "intervention", "groups", "output"});
  RunConfig c;
  c.base_dir = base_dir;
  take(j, "model", c.model, "");
  take(j, "keywords", c.keywords, "");
  take(j, "consolidation", c.consolidation, "");
  take(j, "datasets", c.datasets, "");
  take(j, "mode", c.mode, "");
  take(j, "pooling", c.pooling, "");
  take(j, "toxigen_prompt", c.toxigen_prompt, "");
  take(j, "groups", c.groups, "");
  take(j, "output", c.output, "");
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    detail::check_keys(p, "probe", {"layer", "lr", "epochs", "l2_lambda", "seed", "test_fraction", "split_seed", "file"});
    if (p.contains("layer") && !p.at("layer").is_null()) {
      std::size_t l = 0;
      take(p, "layer", l, "probe.");
      c.probe_layer = l;
    }
    take(p, "lr", c.probe.lr, "probe.");
    take(p, "epochs", c.probe.epochs, "probe.");
    take(p, "l2_lambda", c.probe.l2_lambda, "probe.");
    take(p, "seed", c.probe.seed, "probe.");
    take(p, "test_fraction", c.test_fraction, "probe.");
    take(p, "split_seed", c.split_seed, "probe.");
    take(p, "file", c.probe_file, "probe.");
  }
  if (j.contains("attribution")) {
    const auto& a = j.at("attribution");
    detail::check_keys(a, "attribution", {"layer_window", "top_n", "k", "min_matches"});
    take(a, "layer_window", c.layer_window, "attribution.");
    take(a, "top_n", c.top_n, "attribution.");
    take(a, "k", c.top_k, "attribution.");
    take(a, "min_matches", c.min_matches, "attribution.");
  }
  if (j.contains("intervention")) {
    const auto& i = j.at("intervention");
    detail::check_keys(i, "intervention", {"factors", "target", "max_new_tokens", "direct_groups", "indirect_groups"});
    take(i, "factors", c.factors, "intervention.");
    take(i, "target", c.target, "intervention.");
    take(i, "max_new_tokens", c.max_new_tokens, "intervention.");
    take(i, "direct_groups", c.direct_groups, "intervention.");
    take(i, "indirect_groups", c.indirect_groups, "intervention.");
  }

  for (const auto& [name, path] : c.datasets) mode_from_string(name);
  if (!c.mode.empty()) mode_from_string(c.mode);
  for (const auto& [name, path] : c.consolidation) {
    if (name != "toxigen" && name != "creact") fail(ErrorCode::ConfigError, "consolidation keys must be toxigen or creact");
  }
  if (c.pooling != "auto" && c.pooling != "mean" && c.pooling != "last") {
    fail(ErrorCode::ConfigError, "pooling must be auto, mean or last");
  }
  if (c.toxigen_prompt != "raw" && c.toxigen_prompt != "template") {
    fail(ErrorCode::ConfigError, "toxigen_prompt must be raw or template");
  }
  if (!(c.probe.lr > 0.0) || c.probe.epochs < 1 || c.probe.l2_lambda < 0.0) {
    fail(ErrorCode::ConfigError, "probe needs lr > 0, epochs >= 1 and l2_lambda >= 0");
  }
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) fail(ErrorCode::ConfigError, "probe.test_fraction must lie in (0, 1)");
  if (c.layer_window < 1 || c.top_n < 1 || c.top_k < 1) fail(ErrorCode::ConfigError, "layer_window, top_n and k must be at least 1");
  if (c.factors.empty()) fail(ErrorCode::ConfigError, "intervention.factors is empty");
  for (double k : c.factors) {
    if (!(k > 0.0) || !std::isfinite(k)) fail(ErrorCode::ConfigError, "intervention factors must be positive");
  }
  if (c.max_new_tokens < 1) fail(ErrorCode::ConfigError, "intervention.max_new_tokens must be at least 1");
  if (c.target != "dominant" && !group_from_string(c.target)) {
    fail(ErrorCode::ConfigError, "intervention.target must be 'dominant' or a label name");
  }
  return c;
}

/// Applies "a.b.c=value" overrides; the value is parsed as JSON when it can be, else taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorCode::ConfigError, "override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::ConfigError, "override key '" + key + "' has an empty segment");
    if (!cur->is_object()) *cur = json::object();
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

inline json read_json_file(const fs::path& p, ErrorCode code = ErrorCode::ConfigError) {
  std::ifstream is(p, std::ios::binary);
  if (!is) fail(code, "cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    fail(code, p.string() + " is not valid JSON: " + e.what());
  }
}

/// Checks that the paths a command needs exist, before any compute.
struct Needs {
  bool model = true;
  bool keywords = false;
  std::vector<std::string> datasets;
  bool probe_file = false;
  bool intervention_groups = false;
  bool groups = false;
};

inline void validate(const RunConfig& c, const Needs& n) {
  auto must_exist = [&](const std::string& field, const std::string& p) {
    if (p.empty()) fail(ErrorCode::ConfigError, "config field '" + field + "' is required");
    if (!fs::exists(c.resolve(p))) fail(ErrorCode::ConfigError, "config field '" + field + "': path '" + c.resolve(p).string() + "' does not exist");
  };
  if (n.model) must_exist("model", c.model);
  if (n.keywords) must_exist("keywords", c.keywords);
  for (const auto& d : n.datasets) {
    auto it = c.datasets.find(d);
    if (it == c.datasets.end()) fail(ErrorCode::ConfigError, "config has no dataset for mode '" + d + "'");
    must_exist("datasets." + d, it->second);
  }
  for (const auto& [name, p] : c.consolidation) must_exist("consolidation." + name, p);
  if (n.probe_file) must_exist("probe.file", c.probe_file);
  if (n.intervention_groups) {
    must_exist("intervention.direct_groups", c.direct_groups);
    must_exist("intervention.indirect_groups", c.indirect_groups);
  }
  if (n.groups) {
    if (c.groups.empty()) fail(ErrorCode::ConfigError, "config field 'groups' is required");
    for (std::size_t i = 0; i < c.groups.size(); ++i) must_exist("groups[" + std::to_string(i) + "]", c.groups[i]);
  }
}

/// Runs `f`, prefixing any failure with the stage name.
template <class F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "': " + e.detail());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, "stage '" + name + "': " + e.what());
  }
}

// ---------------------------------------------------------------- bundle

/// Output directory plus a manifest of every artifact's hash.
class Bundle {
 public:
  explicit Bundle(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }

  void write(const std::string& rel, const std::string& body) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) fail(ErrorCode::IoError, "cannot write " + p.string());
    os << body;
    artifacts_[rel] = fnv1a_hex(body);
  }

  void write_json(const std::string& rel, const json& j) { write(rel, j.dump(2) + "\n"); }

  /// Records a file written by someone else (e.g. tensor files).
  void record(const std::string& rel) {
    std::ifstream is(root_ / rel, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    artifacts_[rel] = fnv1a_hex(ss.str());
  }

  void finish(const std::string& command, const RunConfig& cfg, const json& extra = json::object()) {
    json run = {{"command", command},
                {"version", kVersion},
                {"config", cfg.effective()},
                {"config_hash", cfg.hash()},
                {"seeds", {{"probe", cfg.probe.seed}, {"split", cfg.split_seed}}},
                {"artifacts", artifacts_}};
    for (const auto& [k, v] : extra.items()) run[k] = v;
    const fs::path p = root_ / "run.json";
    std::ofstream os(p, std::ios::binary);
    if (!os) fail(ErrorCode::IoError, "cannot write " + p.string());
    os << run.dump(2) << "\n";
  }

 private:
  fs::path root_;
  std::map<std::string, std::string> artifacts_;
};

// ---------------------------------------------------------------- stages

struct Dataset {
  DatasetMode mode = DatasetMode::ToxiGen;
  std::vector<Record> records;  // kept records only, file order
  std::size_t excluded = 0;
};

inline Consolidation consolidation_for(const RunConfig& cfg, DatasetMode mode) {
  const std::string key = mode == DatasetMode::ToxiGen ? "toxigen" : "creact";
  auto it = cfg.consolidation.find(key);
  if (it == cfg.consolidation.end()) {
    return mode == DatasetMode::ToxiGen ? Consolidation::toxigen_default() : Consolidation::creact_default();
  }
  auto c = Consolidation::from_json(read_json_file(cfg.resolve(it->second)));
  if (c.mode() != label_mode(mode)) fail(ErrorCode::ConfigError, "consolidation." + key + " has the wrong mode");
  return c;
}

inline Dataset load_dataset(const RunConfig& cfg, DatasetMode mode) {
  const auto it = cfg.datasets.find(to_string(mode));
  if (it == cfg.datasets.end()) fail(ErrorCode::ConfigError, "config has no dataset for mode '" + to_string(mode) + "'");
  const auto map = consolidation_for(cfg, mode);
  const auto path = cfg.resolve(it->second);
  LoadResult loaded = mode == DatasetMode::ToxiGen ? load_toxigen(path, map) : load_creact(path, map);
  Dataset ds;
  ds.mode = mode;
  ds.excluded = loaded.excluded;
  for (auto& r : loaded.records) {
    if (!r.group) continue;
    if (mode != DatasetMode::ToxiGen && r.mention != mention_of(mode)) continue;
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty()) fail(ErrorCode::EmptyInput, path.string() + " has no usable records for mode " + to_string(mode));
  return ds;
}

/// C-REACT text always goes through the clinical prompt; ToxiGen statements only when `wrap_toxigen`.
inline std::vector<TokenId> encode(const ModelBundle& m, DatasetMode mode, const std::string& text, bool wrap_toxigen = false) {
  if (!m.vocab) fail(ErrorCode::ConfigError, "model has no vocabulary; text input needs one");
  const bool raw = mode == DatasetMode::ToxiGen && !wrap_toxigen;
  const std::string input = raw ? text : render_prompt(PromptTemplate::clinical_race(), text);
  auto ids = m.vocab->tokenize(input).ids;
  if (ids.empty()) fail(ErrorCode::EmptyInput, "record text is empty");
  return ids;
}

inline Pooling resolve_pooling(const RunConfig& cfg, DatasetMode mode) {
  if (cfg.pooling == "auto") return mode == DatasetMode::ToxiGen ? Pooling::MeanAllPositions : Pooling::LastInputToken;
  return pooling_from_string(cfg.pooling);
}

struct ProbeRun {
  ProbeModel probe;
  ProbeMetrics metrics;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

inline ProbeRun run_probe(const ModelBundle& m, const RunConfig& cfg, const Dataset& ds) {
  const std::size_t layer = cfg.probe_layer.value_or(m.config.n_layers - 1);
  if (layer >= m.config.n_layers) fail(ErrorCode::ConfigError, "probe.layer " + std::to_string(layer) + " is outside the model");
  const Pooling pooling = resolve_pooling(cfg, ds.mode);
  const auto records = split(ds.records, cfg.test_fraction, cfg.split_seed);
  CapturePlan plan;
  plan.residual_layers = {layer};
  plan.logits = LogitRows::None;
  std::vector<LabeledFeature> train, test;
  for (const auto& r : records) {
    const auto trace = forward(m, encode(m, ds.mode, r.text, cfg.toxigen_prompt == "template"), plan);
    LabeledFeature f{pool_residual(trace, layer, pooling), *r.group};
    (r.split == Split::Test ? test : train).push_back(std::move(f));
  }
  ProbeRun run;
  run.n_train = train.size();
  run.n_test = test.size();
  run.probe = train_probe(std::move(train), cfg.probe);
  run.probe.layer = layer;
  run.probe.pooling = pooling;
  run.metrics = evaluate_probe(run.probe, test);
  return run;
}

inline json metrics_json(const ProbeRun& r) {
  json classes = json::array();
  json f1 = json::object();
  for (std::size_t c = 0; c < r.probe.classes.size(); ++c) {
    classes.push_back(to_string(r.probe.classes[c]));
    f1[to_string(r.probe.classes[c])] = r.metrics.per_class_f1[c];
  }
  const auto& h = r.probe.loss_history;
  return {{"classes", classes},
          {"accuracy", r.metrics.accuracy},
          {"macro_f1", r.metrics.macro_f1},
          {"per_class_f1", f1},
          {"confusion", r.metrics.confusion},
          {"confusion_axes", "rows: truth, columns: predicted"},
          {"n_train", r.n_train},
          {"n_test", r.n_test},
          {"layer", r.probe.layer},
          {"pooling", to_string(r.probe.pooling)},
          {"epochs_run", h.empty() ? 0 : h.size() - 1},
          {"initial_loss", h.empty() ? 0.0 : h.front()},
          {"final_loss", h.empty() ? 0.0 : h.back()}};
}

/// Logit-lens top tokens of each class direction.
inline json fingerprints_json(const ModelBundle& m, const ProbeModel& p, std::size_t k) {
  json out = json::array();
  for (auto c : p.classes) {
    json toks = json::array();
    for (const auto& e : logit_lens(m, probe_direction(p, c), k).entries) {
      toks.push_back({{"id", e.id}, {"token", e.token}, {"logit", e.logit}});
    }
    out.push_back({{"class", to_string(c)}, {"top_tokens", toks}});
  }
  return out;
}

inline std::vector<NeuronGroup> run_attribute(const ModelBundle& m, const RunConfig& cfg, const ProbeModel& probe,
                                              DatasetMode mode, const KeywordTable& keywords) {
  if (probe.dim() != m.config.d_model) fail(ErrorCode::DimensionMismatch, "probe dimension does not match the model");
  std::vector<NeuronGroup> groups;
  for (auto c : probe.classes) {
    const auto ranked = score_neurons(m, probe_direction(probe, c), cfg.layer_window);
    groups.push_back(filter_by_alignment(select_candidates(ranked, cfg.top_n), keywords.for_group(c), m, cfg.top_k,
                                         cfg.min_matches, c, mention_of(mode)));
  }
  return groups;
}

inline json candidates_json(const std::vector<NeuronGroup>& groups) {
  json out = json::array();
  for (const auto& g : groups) {
    json cands = json::array();
    for (const auto& c : g.inspected) cands.push_back(candidate_json(c));
    out.push_back({{"group", g.name()}, {"candidates", cands}});
  }
  return out;
}

inline json groups_json(const std::vector<NeuronGroup>& groups) {
  json out = json::array();
  for (const auto& g : groups) out.push_back(group_json(g));
  return out;
}

inline std::vector<NeuronGroup> load_groups(const fs::path& p) {
  const json j = read_json_file(p, ErrorCode::SchemaError);
  if (!j.is_array()) fail(ErrorCode::SchemaError, p.string() + " must hold an array of neuron groups");
  std::vector<NeuronGroup> out;
  for (const auto& g : j) out.push_back(group_from_json(g));
  return out;
}

inline ActivationMatrix run_activations(const ModelBundle& m, const Dataset& ds, const std::vector<NeuronGroup>& groups,
                                        Pooling pooling, bool wrap_toxigen = false) {
  std::map<GroupLabel, std::vector<std::vector<TokenId>>> by_group;
  for (const auto& r : ds.records) by_group[*r.group].push_back(encode(m, ds.mode, r.text, wrap_toxigen));
  return activation_matrix(m, by_group, groups, pooling);
}

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string matrix_csv(const ActivationMatrix& a) {
  std::string out = "group";
  for (auto c : a.cols) out += "," + to_string(c);
  out += "\n";
  for (std::size_t r = 0; r < a.rows.size(); ++r) {
    out += csv::quote(a.rows[r]);
    for (const auto& cell : a.cells[r]) out += "," + (cell ? fixed(*cell) : std::string());
    out += "\n";
  }
  return out;
}

inline json matrix_json(const ActivationMatrix& a) {
  json cols = json::array();
  for (auto c : a.cols) cols.push_back(to_string(c));
  json cells = json::array();
  for (const auto& row : a.cells) {
    json r = json::array();
    for (const auto& v : row) r.push_back(v ? json(*v) : json(nullptr));
    cells.push_back(r);
  }
  return {{"rows", a.rows}, {"cols", cols}, {"cells", cells}, {"member_counts", a.member_counts}, {"record_counts", a.record_counts}};
}

struct InterventionRun {
  std::vector<OutcomeRecord> outcomes;
  ErrorPattern pattern;
  OutcomeTable buckets;
  std::optional<SweepResult> sweep;
  std::optional<GroupLabel> target;
  std::string skipped;  // why the sweep did not run
};

/// Baseline generation for one prompt, capturing each group's last-token activation on the first pass.
inline OutcomeRecord baseline_outcome(const ModelBundle& m, const std::vector<TokenId>& prompt,
                                      const std::vector<NeuronGroup>& groups, const GenerationOptions& gen) {
  CapturePlan plan;
  plan.logits = LogitRows::LastOnly;
  for (const auto& g : groups) {
    for (const auto& c : g.members) plan.neurons.insert(c.ref);
  }
  const auto trace = forward(m, prompt, plan);
  OutcomeRecord o;
  for (const auto& g : groups) {
    if (g.members.empty()) continue;
    double acc = 0.0;
    for (const auto& c : g.members) acc += pool_activation(trace, c.ref, Pooling::LastInputToken);
    o.group_activation[g.name()] = acc / static_cast<double>(g.members.size());
  }
  std::vector<TokenId> out;
  const TokenId first = argmax_token(trace.final_logits());
  if (!(gen.stop && first == *gen.stop)) {
    out.push_back(first);
    if (gen.max_new > 1) {
      auto ctx = prompt;
      ctx.push_back(first);
      const auto rest = greedy_generate(m, ctx, gen.max_new - 1, nullptr, gen.stop);
      out.insert(out.end(), rest.ids.begin(), rest.ids.end());
    }
  }
  o.generation = m.vocab ? m.vocab->detokenize(out) : std::string();
  o.predicted = parse_label(o.generation, gen.options);
  return o;
}

inline InterventionRun run_intervene(const ModelBundle& m, const RunConfig& cfg, const Dataset& ds,
                                     const std::vector<NeuronGroup>& direct, const std::vector<NeuronGroup>& indirect,
                                     bool require_errors) {
  if (ds.mode == DatasetMode::ToxiGen) fail(ErrorCode::ConfigError, "intervention needs a C-REACT dataset");
  GenerationOptions gen;
  gen.max_new = cfg.max_new_tokens;
  if (m.vocab) gen.stop = m.vocab->eos();
  std::vector<NeuronGroup> all = direct;
  all.insert(all.end(), indirect.begin(), indirect.end());

  InterventionRun run;
  std::vector<std::vector<TokenId>> prompts;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    prompts.push_back(encode(m, ds.mode, ds.records[i].text));
    auto o = baseline_outcome(m, prompts.back(), all, gen);
    o.record_index = i;
    o.actual = *ds.records[i].group;
    run.outcomes.push_back(std::move(o));
  }
  run.pattern = error_pattern(run.outcomes);
  std::vector<std::string> names;
  for (const auto& g : all) names.push_back(g.name());
  run.buckets = outcome_buckets(run.outcomes, names, class_order(LabelMode::CReact));

  std::vector<SweepInput> misclassified;
  for (const auto& o : run.outcomes) {
    if (o.predicted && *o.predicted != o.actual) misclassified.push_back({o.record_index, prompts[o.record_index], o.actual, *o.predicted});
  }
  if (misclassified.empty()) {
    if (require_errors) fail(ErrorCode::NoBaselineErrors, "baseline misclassified no records, nothing to intervene on");
    run.skipped = "NoBaselineErrors: baseline misclassified no records";
    return run;
  }
  run.target = cfg.target == "dominant" ? run.pattern.dominant->second : *group_from_string(cfg.target);
  auto pick = [&](const std::vector<NeuronGroup>& src) {
    std::vector<NeuronGroup> out;
    for (const auto& g : src) {
      if (g.group == *run.target) out.push_back(g);
    }
    return out;
  };
  run.sweep = intervention_sweep(m, misclassified, {{"direct", pick(direct)}, {"indirect", pick(indirect)}}, cfg.factors, gen);
  return run;
}

inline std::string pair_name(const LabelPair& p) { return to_string(p.first) + "->" + to_string(p.second); }

inline json buckets_json(const OutcomeTable& t) {
  json cols = json::array();
  for (std::size_t c = 0; c < t.columns.size(); ++c) cols.push_back({{"cell", pair_name(t.columns[c])}, {"n", t.column_counts[c]}});
  json rows = json::array();
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    json cells = json::array();
    for (const auto& v : t.cells[g]) cells.push_back(v ? json(*v) : json(nullptr));
    json shown = json::array();
    for (const auto& v : t.cells[g]) shown.push_back(format_signed(v));
    rows.push_back({{"group", t.groups[g]}, {"mean", cells}, {"display", shown}});
  }
  return {{"columns", cols}, {"rows", rows}};
}

inline std::string buckets_csv(const OutcomeTable& t) {
  std::string out = "group";
  for (const auto& c : t.columns) out += "," + pair_name(c);
  out += "\n";
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    out += csv::quote(t.groups[g]);
    for (const auto& v : t.cells[g]) out += "," + format_signed(v);
    out += "\n";
  }
  return out;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::string out = "kind,factor,n,correct,original_bias,other,unknown\n";
  for (const auto& c : r.cells) {
    out += c.kind + "," + fixed(c.factor, 1) + "," + std::to_string(c.n) + "," + fixed(c.rate(c.correct), 4) + "," +
           fixed(c.rate(c.original_bias), 4) + "," + fixed(c.rate(c.other), 4) + "," + fixed(c.rate(c.unknown), 4) + "\n";
  }
  return out;
}

inline std::string generations_jsonl(const InterventionRun& r) {
  std::string out;
  for (const auto& o : r.outcomes) {
    out += json{{"phase", "baseline"},
                {"record", o.record_index},
                {"actual", to_string(o.actual)},
                {"predicted", label_or_unknown(o.predicted)},
                {"generation", o.generation}}
               .dump() +
           "\n";
  }
  if (r.sweep) {
    for (const auto& g : r.sweep->generations) {
      out += json{{"phase", "sweep"},       {"kind", g.kind},
                  {"factor", g.factor},      {"record", g.record_index},
                  {"predicted", label_or_unknown(g.predicted)}, {"outcome", to_string(g.outcome)},
                  {"generation", g.generation}}
                 .dump() +
             "\n";
    }
  }
  return out;
}

inline void write_intervention(Bundle& b, const std::string& dir, const InterventionRun& r) {
  auto pattern = error_pattern_json(r.pattern);
  b.write_json(dir + "error_pattern.json", pattern);
  b.write_json(dir + "outcome_buckets.json", buckets_json(r.buckets));
  b.write(dir + "outcome_buckets.csv", buckets_csv(r.buckets));
  if (r.sweep) {
    auto sj = sweep_json(*r.sweep);
    sj["target"] = to_string(*r.target);
    b.write_json(dir + "sweep.json", sj);
    b.write(dir + "sweep.csv", sweep_csv(*r.sweep));
  } else {
    b.write_json(dir + "sweep.json", {{"skipped", r.skipped}});
  }
  b.write(dir + "generations.jsonl", generations_jsonl(r));
}

inline void write_probe(Bundle& b, const std::string& dir, const ModelBundle& m, const ProbeRun& run, std::size_t k) {
  save_probe(run.probe, b.root() / (dir + "probe.json"));
  b.record(dir + "probe.json");
  b.record(dir + "probe.bin");
  b.write_json(dir + "probe_metrics.json", metrics_json(run));
  b.write_json(dir + "fingerprints.json", fingerprints_json(m, run.probe, k));
}

inline void write_matrix(Bundle& b, const std::string& dir, const ActivationMatrix& a) {
  b.write(dir + "activation_matrix.csv", matrix_csv(a));
  b.write_json(dir + "activation_matrix.json", matrix_json(a));
}

// ---------------------------------------------------------------- commands

inline fs::path output_dir(const RunConfig& cfg) { return cfg.resolve(cfg.output); }

inline DatasetMode single_mode(const RunConfig& cfg) {
  if (!cfg.mode.empty()) return mode_from_string(cfg.mode);
  if (cfg.datasets.size() == 1) return mode_from_string(cfg.datasets.begin()->first);
  fail(ErrorCode::ConfigError, "config field 'mode' is required when several datasets are configured");
}

inline ModelBundle load_model_stage(const RunConfig& cfg) {
  return stage("load-model", [&] { return load_model(cfg.resolve(cfg.model)); });
}

inline json cmd_probe(const RunConfig& cfg) {
  const auto mode = single_mode(cfg);
  validate(cfg, {.model = true, .datasets = {to_string(mode)}});
  const auto m = load_model_stage(cfg);
  const auto ds = stage("load-dataset", [&] { return load_dataset(cfg, mode); });
  const auto run = stage("probe", [&] { return run_probe(m, cfg, ds); });
  Bundle b(output_dir(cfg));
  write_probe(b, "", m, run, cfg.top_k);
  b.finish("probe", cfg);
  return metrics_json(run);
}

inline json cmd_attribute(const RunConfig& cfg) {
  validate(cfg, {.model = true, .keywords = true, .datasets = {}, .probe_file = true});
  const auto m = load_model_stage(cfg);
  const auto probe = stage("load-probe", [&] { return load_probe(cfg.resolve(cfg.probe_file)); });
  const auto keywords = stage("load-keywords", [&] { return KeywordTable::load(cfg.resolve(cfg.keywords)); });
  const auto mode = cfg.mode.empty() ? DatasetMode::ToxiGen : mode_from_string(cfg.mode);
  const auto groups = stage("attribute", [&] { return run_attribute(m, cfg, probe, mode, keywords); });
  Bundle b(output_dir(cfg));
  b.write_json("candidates.json", candidates_json(groups));
  b.write_json("groups.json", groups_json(groups));
  b.finish("attribute", cfg);
  return groups_json(groups);
}

inline json cmd_activations(const RunConfig& cfg) {
  const auto mode = single_mode(cfg);
  validate(cfg, {.model = true, .datasets = {to_string(mode)}, .groups = true});
  const auto m = load_model_stage(cfg);
  const auto ds = stage("load-dataset", [&] { return load_dataset(cfg, mode); });
  std::vector<NeuronGroup> groups;
  for (const auto& g : cfg.groups) {
    auto more = stage("load-groups", [&] { return load_groups(cfg.resolve(g)); });
    groups.insert(groups.end(), more.begin(), more.end());
  }
  const auto a = stage("activations", [&] { return run_activations(m, ds, groups, resolve_pooling(cfg, mode), cfg.toxigen_prompt == "template"); });
  Bundle b(output_dir(cfg));
  write_matrix(b, "", a);
  b.finish("activations", cfg);
  return matrix_json(a);
}

inline json cmd_intervene(const RunConfig& cfg) {
  const auto mode = cfg.mode.empty() ? DatasetMode::CReactIndirect : mode_from_string(cfg.mode);
  validate(cfg, {.model = true, .datasets = {to_string(mode)}, .intervention_groups = true});
  const auto m = load_model_stage(cfg);
  const auto ds = stage("load-dataset", [&] { return load_dataset(cfg, mode); });
  const auto direct = stage("load-groups", [&] { return load_groups(cfg.resolve(cfg.direct_groups)); });
  const auto indirect = stage("load-groups", [&] { return load_groups(cfg.resolve(cfg.indirect_groups)); });
  const auto run = stage("intervene", [&] { return run_intervene(m, cfg, ds, direct, indirect, true); });
  Bundle b(output_dir(cfg));
  write_intervention(b, "", run);
  b.finish("intervene", cfg);
  return sweep_json(*run.sweep);
}

/// Probe and attribution per configured dataset, the ToxiGen activation matrix, and
/// on C-REACT indirect records the baseline outcomes and the intervention sweep.
inline json cmd_report(const RunConfig& cfg) {
  std::vector<std::string> modes;
  for (const auto& [name, path] : cfg.datasets) modes.push_back(name);
  if (modes.empty()) fail(ErrorCode::ConfigError, "config has no datasets");
  validate(cfg, {.model = true, .keywords = true, .datasets = modes});
  const auto m = load_model_stage(cfg);
  const auto keywords = stage("load-keywords", [&] { return KeywordTable::load(cfg.resolve(cfg.keywords)); });
  Bundle b(output_dir(cfg));
  json summary = json::object();
  std::map<DatasetMode, std::vector<NeuronGroup>> groups;
  std::map<DatasetMode, Dataset> data;
  for (const auto& name : modes) {
    const auto mode = mode_from_string(name);
    const std::string dir = name + "/";
    data[mode] = stage("load-dataset:" + name, [&] { return load_dataset(cfg, mode); });
    const auto run = stage("probe:" + name, [&] { return run_probe(m, cfg, data[mode]); });
    write_probe(b, dir, m, run, cfg.top_k);
    groups[mode] = stage("attribute:" + name, [&] { return run_attribute(m, cfg, run.probe, mode, keywords); });
    b.write_json(dir + "candidates.json", candidates_json(groups[mode]));
    b.write_json(dir + "groups.json", groups_json(groups[mode]));
    summary[name] = {{"accuracy", run.metrics.accuracy}, {"macro_f1", run.metrics.macro_f1}};
  }
  if (data.count(DatasetMode::ToxiGen)) {
    const auto a = stage("activations:toxigen", [&] {
      return run_activations(m, data[DatasetMode::ToxiGen], groups[DatasetMode::ToxiGen], resolve_pooling(cfg, DatasetMode::ToxiGen),
                             cfg.toxigen_prompt == "template");
    });
    write_matrix(b, "toxigen/", a);
  }
  if (data.count(DatasetMode::CReactIndirect)) {
    const auto& direct = groups[DatasetMode::CReactDirect];
    const auto& indirect = groups[DatasetMode::CReactIndirect];
    std::vector<NeuronGroup> all = direct;
    all.insert(all.end(), indirect.begin(), indirect.end());
    const auto& ds = data[DatasetMode::CReactIndirect];
    const auto a = stage("activations:creact-indirect",
                         [&] { return run_activations(m, ds, all, resolve_pooling(cfg, DatasetMode::CReactIndirect)); });
    write_matrix(b, "creact-indirect/", a);
    const auto run = stage("intervene", [&] { return run_intervene(m, cfg, ds, direct, indirect, false); });
    write_intervention(b, "creact-indirect/", run);
    summary["error_pattern"] = error_pattern_json(run.pattern);
    if (run.sweep) summary["sweep"] = sweep_json(*run.sweep);
  }
  b.write_json("summary.json", summary);
  b.finish("report", cfg);
  return summary;
}

}  // namespace neurolens::pipeline
