#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/corpus.hpp"
#include "neurolens/csv.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/synthetic.hpp"

// Planted demo fixture: a small model whose bias is built in by hand, plus
// ToxiGen-shaped and C-REACT-shaped corpora that exercise it.
//
// Mechanics at the final ":" of a clinical prompt:
//   layer 0, head 0 attends from ":" to the cue word in the note and writes
//   copy_gain·e(cue) + write_gain·u(label of cue);
//   layer 1 holds planted neurons reading the cue embedding. White indirect
//   cues also fire a "bias" neuron that writes " Asian" strongly enough to beat
//   the routed " White", so those records come out Asian until the neuron is
//   suppressed.
// Label output tokens embed as <eos>, so generation stops right after the label.

namespace neurolens::fixture {

struct PlantSpec {
  std::string name;
  std::string group;  // keyword group the neuron belongs to
  std::vector<std::string> triggers;
  std::string write;
  std::vector<std::string> companions;
  double strength;
};

struct Cue {
  std::string word;  // with leading space
  GroupLabel label;
  Mention mention;
};

inline constexpr double kCopyGain = 2.0;
inline constexpr double kWriteGain = 4.0;
inline constexpr double kTriggerGain = 4.6;
inline constexpr double kCompanionWeight = 0.3;
inline constexpr double kInitScale = 0.02;
inline constexpr std::uint64_t kSeed = 7;

inline std::string label_token(GroupLabel g) {
  switch (g) {
    case GroupLabel::White: return " White";
    case GroupLabel::BlackAA: return " Black";
    case GroupLabel::Asian: return " Asian";
    default: break;
  }
  fail(ErrorCode::ConfigError, "no clinical label token for " + to_string(g));
}

inline std::string raw_race(GroupLabel g) {
  switch (g) {
    case GroupLabel::White: return "White";
    case GroupLabel::BlackAA: return "Black or African American";
    case GroupLabel::Asian: return "Asian";
    default: break;
  }
  fail(ErrorCode::ConfigError, "no raw race for " + to_string(g));
}

inline std::vector<Cue> clinical_cues() {
  using G = GroupLabel;
  const auto D = Mention::Direct;
  const auto I = Mention::Indirect;
  return {{" Caucasian", G::White, D},   {" white", G::White, D},        {" AA", G::BlackAA, D},
          {" black", G::BlackAA, D},     {" asian", G::Asian, D},        {" Korean", G::Asian, D},
          {" Russian", G::White, I},     {" Polish", G::White, I},       {" Italian", G::White, I},
          {" Haitian", G::BlackAA, I},   {" Creole", G::BlackAA, I},     {" Somali", G::BlackAA, I},
          {" Mandarin", G::Asian, I},    {" Vietnamese", G::Asian, I},   {" Cantonese", G::Asian, I}};
}

/// Raw ToxiGen group -> mention words used in the synthetic sentences.
inline std::vector<std::pair<std::string, std::vector<std::string>>> toxigen_words() {
  return {{"asian", {" Asians"}},      {"chinese", {" Chinese"}},   {"black", {" blacks"}},
          {"latino", {" Latinos"}},    {"mexican", {" Mexicans"}},  {"native_american", {" natives"}},
          {"middle_east", {" Arabs"}}, {"jewish", {" Jews"}},       {"muslim", {" Muslims"}},
          {"women", {" women"}}};
}

inline std::vector<PlantSpec> planted_specs() {
  return {
      {"white_direct", "White", {" Caucasian", " white"}, " White", {" Caucasian", " European", " Europe"}, 1.5},
      {"black_direct", "BlackAA", {" AA", " black"}, " Black", {" African", " Africa", " Caribbean"}, 1.5},
      {"asian_direct", "Asian", {" asian", " Korean"}, " Asian", {" Korea", " Asia", " Japan"}, 1.5},
      {"white_indirect", "White", {" Russian", " Polish", " Italian"}, " Russia", {" Europe", " Poland", " Italy"}, 0.8},
      {"black_indirect", "BlackAA", {" Haitian", " Creole", " Somali"}, " Haiti", {" Caribbean", " Africa", " Somalia"}, 0.8},
      {"asian_indirect", "Asian", {" Mandarin", " Vietnamese", " Cantonese"}, " Vietnam", {" China", " Asia", " Beijing"}, 0.8},
      {"bias", "Asian", {" Russian", " Polish", " Italian"}, " Asian", {" Chinese", " China", " Beijing"}, 3.0},
      {"tox_asian", "Asian", {" Asians", " Chinese"}, " Asian", {" Asia", " China", " Japan"}, 1.5},
      {"tox_black", "Black", {" blacks"}, " Black", {" Africa", " African", " Caribbean"}, 1.5},
      {"tox_latino", "Latino", {" Latinos", " Mexicans"}, " Latino", {" Mexico", " Hispanic", " Spanish"}, 1.5},
      {"tox_middle_eastern", "MiddleEastern", {" Arabs", " Jews", " Muslims"}, " Arab", {" Israel", " Iran", " Muslim"}, 1.5},
      {"tox_native_american", "NativeAmerican", {" natives"}, " Native", {" tribe", " Navajo", " Cherokee"}, 1.5},
  };
}

inline nlohmann::json keywords_json() {
  return {
      {"White", {"white", "caucasian", "european", "europe", "russia", "russian", "poland", "polish", "italy", "italian"}},
      {"BlackAA", {"black", "aa", "african", "africa", "caribbean", "haiti", "haitian", "creole", "somalia", "somali"}},
      {"Black", {"black", "blacks", "african", "africa", "caribbean"}},
      {"Asian", {"asian", "asians", "asia", "china", "chinese", "beijing", "japan", "korea", "korean", "vietnam",
                 "vietnamese", "mandarin", "cantonese"}},
      {"Latino", {"latino", "latinos", "hispanic", "mexico", "mexican", "mexicans", "spanish"}},
      {"MiddleEastern", {"arab", "arabs", "muslim", "muslims", "israel", "iran", "jews", "jewish"}},
      {"NativeAmerican", {"native", "natives", "tribe", "navajo", "cherokee"}},
  };
}

struct Row {
  std::string text;
  std::string group;    // raw label
  std::string mention;  // C-REACT only
};

inline std::vector<Row> creact_rows(Mention mention) {
  std::vector<Row> out;
  for (const auto& cue : clinical_cues()) {
    if (cue.mention != mention) continue;
    if (mention == Mention::Direct) {
      for (const char* age : {"47", "61", "75"}) {
        for (const char* sex : {"male", "female"}) {
          for (const char* complaint : {"chest pain", "shortness of breath", "abdominal pain"}) {
            out.push_back({std::string("Pt is a ") + age + " yo" + cue.word + " " + sex + " with " + complaint + ".",
                           raw_race(cue.label), "direct"});
          }
        }
      }
    } else {
      for (const char* event : {"consent discussion", "discharge teaching", "medication review"}) {
        out.push_back({"Pt required a" + cue.word + " interpreter for the " + event + ".", raw_race(cue.label), "indirect"});
      }
      for (const char* rest : {"lives nearby", "visits daily", "brings meals"}) {
        out.push_back({"Family speaks" + cue.word + " at home and " + rest + ".", raw_race(cue.label), "indirect"});
      }
    }
  }
  return out;
}

inline std::vector<Row> toxigen_rows() {
  const std::vector<std::string> templates = {
      "honestly{g} are just like everyone else in my town", "my coworkers are{g} and they are very kind",
      "i think{g} deserve the same respect as anyone",      "many{g} live in the city where i grew up",
      "the{g} in my class helped me study",                 "there are{g} on my soccer team"};
  std::vector<Row> out;
  for (const auto& [raw, words] : toxigen_words()) {
    for (const auto& w : words) {
      for (const auto& t : templates) {
        std::string text = t;
        text.replace(text.find("{g}"), 3, w);
        out.push_back({text, raw, ""});
      }
    }
  }
  return out;
}

/// Alphanumeric runs (with one optional leading space); everything else stays byte-level.
inline void collect_words(std::string_view s, std::set<std::string>& out) {
  auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = i;
    if (s[j] == ' ' && j + 1 < s.size() && alnum(s[j + 1])) ++j;
    if (!alnum(s[j])) {
      ++i;
      continue;
    }
    while (j < s.size() && alnum(s[j])) ++j;
    out.insert(std::string(s.substr(i, j - i)));
    i = j;
  }
}

inline Vocab build_vocab() {
  std::set<std::string> words;
  collect_words(render_prompt(PromptTemplate::clinical_race(), ""), words);
  for (auto m : {Mention::Direct, Mention::Indirect}) {
    for (const auto& r : creact_rows(m)) collect_words(r.text, words);
  }
  for (const auto& r : toxigen_rows()) collect_words(r.text, words);
  for (const auto& p : planted_specs()) {
    collect_words(p.write, words);
    for (const auto& c : p.companions) collect_words(c, words);
  }
  return Vocab::from_words({words.begin(), words.end()});
}

inline TokenId id_of(const Vocab& v, const std::string& word) {
  const auto id = v.find(word);
  if (id < 0) fail(ErrorCode::ConfigError, "fixture word '" + word + "' is not in the vocabulary");
  return static_cast<TokenId>(id);
}

struct Fixture {
  ModelBundle model;
  std::vector<Row> toxigen;
  std::vector<Row> creact_direct;
  std::vector<Row> creact_indirect;
  std::map<std::string, NeuronRef> planted;  // by PlantSpec::name
};

inline Fixture build() {
  Fixture f;
  const Vocab vocab = build_vocab();
  SyntheticSpec spec;
  spec.dims.d_model = 512;
  spec.dims.n_layers = 2;
  spec.dims.n_heads = 8;
  spec.dims.d_mlp = 64;
  spec.dims.vocab_size = vocab.size();
  spec.seed = kSeed;
  spec.init_scale = kInitScale;
  spec.vocab = vocab;

  AttentionRoute route;
  route.layer = 0;
  route.head = 0;
  route.query_tokens = {vocab.byte_id(':')};
  route.copy_gain = kCopyGain;
  route.write_gain = kWriteGain;
  for (const auto& cue : clinical_cues()) {
    route.entries.push_back({id_of(vocab, cue.word), id_of(vocab, label_token(cue.label))});
  }
  spec.routes.push_back(route);

  for (auto g : class_order(LabelMode::CReact)) {
    spec.embedding_overrides.push_back({id_of(vocab, label_token(g)), vocab.eos(), 1.0});
  }

  // Planted neurons sit in the last layer at spread-out indices.
  std::size_t index = 3;
  for (const auto& p : planted_specs()) {
    PlantedNeuron n;
    n.layer = spec.dims.n_layers - 1;
    n.index = index;
    n.group_label = p.group;
    n.write_token = id_of(vocab, p.write);
    n.strength = p.strength;
    for (const auto& t : p.triggers) n.trigger_tokens.push_back(id_of(vocab, t));
    n.trigger_gain = kTriggerGain;
    for (const auto& c : p.companions) n.companion_tokens.push_back(id_of(vocab, c));
    n.companion_weight = kCompanionWeight;
    spec.planted.push_back(n);
    f.planted[p.name] = {n.layer, n.index};
    index += 5;
  }

  f.model = generate_synthetic_model(spec);
  f.toxigen = toxigen_rows();
  f.creact_direct = creact_rows(Mention::Direct);
  f.creact_indirect = creact_rows(Mention::Indirect);
  return f;
}

inline void write_text(const std::filesystem::path& p, const std::string& body) {
  std::ofstream os(p, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot write " + p.string());
  os << body;
}

inline void write_jsonl(const std::filesystem::path& p, const std::vector<Row>& rows) {
  std::string body;
  for (const auto& r : rows) {
    body += nlohmann::json{{"text", r.text}, {"race", r.group}, {"mention_type", r.mention}}.dump() + "\n";
  }
  write_text(p, body);
}

/// Run config for the full report over the fixture; paths are relative to the config file.
inline nlohmann::json report_config() {
  return {{"model", "model.json"},
          {"keywords", "keywords.json"},
          {"datasets", {{"toxigen", "toxigen.csv"}, {"creact-direct", "creact_direct.jsonl"}, {"creact-indirect", "creact_indirect.jsonl"}}},
          {"attribution", {{"layer_window", 4}, {"top_n", 20}, {"k", 20}, {"min_matches", 3}}},
          {"output", "report"}};
}

/// Writes model, corpora, keywords and configs into `dir`.
inline Fixture write(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Fixture f = build();
  save_model(f.model, dir / "model.json");
  std::string tox = "text,target_group\n";
  for (const auto& r : f.toxigen) tox += csv::quote(r.text) + "," + csv::quote(r.group) + "\n";
  write_text(dir / "toxigen.csv", tox);
  write_jsonl(dir / "creact_direct.jsonl", f.creact_direct);
  write_jsonl(dir / "creact_indirect.jsonl", f.creact_indirect);
  write_text(dir / "keywords.json", keywords_json().dump(2) + "\n");
  write_text(dir / "report.json", report_config().dump(2) + "\n");
  nlohmann::json planted = nlohmann::json::object();
  for (const auto& [name, ref] : f.planted) planted[name] = ref.notation();
  write_text(dir / "planted.json", planted.dump(2) + "\n");
  return f;
}

}  // namespace neurolens::fixture
