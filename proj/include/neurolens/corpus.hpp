#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/csv.hpp"
#include "neurolens/error.hpp"
#include "neurolens/rng.hpp"

namespace neurolens {

/// Dataset mode fixes which labels are legal.
enum class LabelMode { ToxiGen, CReact };

enum class GroupLabel { Asian, Black, Latino, MiddleEastern, NativeAmerican, White, BlackAA };

inline std::string to_string(GroupLabel g) {
  switch (g) {
    case GroupLabel::Asian: return "Asian";
    case GroupLabel::Black: return "Black";
    case GroupLabel::Latino: return "Latino";
    case GroupLabel::MiddleEastern: return "MiddleEastern";
    case GroupLabel::NativeAmerican: return "NativeAmerican";
    case GroupLabel::White: return "White";
    case GroupLabel::BlackAA: return "BlackAA";
  }
  return "?";
}

inline std::optional<GroupLabel> group_from_string(const std::string& s) {
  for (auto g : {GroupLabel::Asian, GroupLabel::Black, GroupLabel::Latino, GroupLabel::MiddleEastern,
                 GroupLabel::NativeAmerican, GroupLabel::White, GroupLabel::BlackAA}) {
    if (to_string(g) == s) return g;
  }
  return std::nullopt;
}

/// Alphabetical class order per mode; every report indexes classes by this order.
inline std::vector<GroupLabel> class_order(LabelMode mode) {
  if (mode == LabelMode::ToxiGen) {
    return {GroupLabel::Asian, GroupLabel::Black, GroupLabel::Latino, GroupLabel::MiddleEastern, GroupLabel::NativeAmerican};
  }
  return {GroupLabel::Asian, GroupLabel::BlackAA, GroupLabel::White};
}

enum class Mention { Direct, Indirect, NotApplicable };

inline std::string to_string(Mention m) {
  switch (m) {
    case Mention::Direct: return "direct";
    case Mention::Indirect: return "indirect";
    case Mention::NotApplicable: return "n/a";
  }
  return "?";
}

enum class Split { Unassigned, Train, Test };

struct Record {
  std::string text;
  std::string raw_group;
  std::optional<GroupLabel> group;  // nullopt: excluded
  Mention mention = Mention::NotApplicable;
  Split split = Split::Unassigned;

  bool operator==(const Record&) const = default;
};

/// Raw-label -> consolidated label. A null target means the raw label is excluded.
class Consolidation {
 public:
  Consolidation(LabelMode mode, std::map<std::string, std::optional<GroupLabel>> table)
      : mode_(mode), table_(std::move(table)) {}

  static Consolidation toxigen_default() {
    using G = GroupLabel;
    return Consolidation(LabelMode::ToxiGen,
                         {{"asian", G::Asian},
                          {"chinese", G::Asian},
                          {"black", G::Black},
                          {"latino", G::Latino},
                          {"mexican", G::Latino},
                          {"native_american", G::NativeAmerican},
                          {"middle_east", G::MiddleEastern},
                          {"jewish", G::MiddleEastern},
                          {"muslim", G::MiddleEastern},
                          {"women", std::nullopt},
                          {"lgbtq", std::nullopt},
                          {"mental_dis", std::nullopt},
                          {"physical_dis", std::nullopt}});
  }

  static Consolidation creact_default() {
    using G = GroupLabel;
    return Consolidation(LabelMode::CReact, {{"white", G::White},
                                             {"black", G::BlackAA},
                                             {"black/aa", G::BlackAA},
                                             {"black or african american", G::BlackAA},
                                             {"african american", G::BlackAA},
                                             {"asian", G::Asian},
                                             {"native american or alaska native", std::nullopt},
                                             {"native hawaiian or other pacific islander", std::nullopt}});
  }

  /// JSON: {"mode": "toxigen"|"creact", "map": {"raw": "Label" | null, ...}}
  static Consolidation from_json(const nlohmann::json& j) {
    const std::string mode = j.value("mode", std::string("toxigen"));
    LabelMode m;
    if (mode == "toxigen") m = LabelMode::ToxiGen;
    else if (mode == "creact") m = LabelMode::CReact;
    else fail(ErrorCode::ConfigError, "consolidation mode must be toxigen or creact");
    std::map<std::string, std::optional<GroupLabel>> table;
    if (!j.contains("map") || !j["map"].is_object()) fail(ErrorCode::ConfigError, "consolidation config lacks 'map'");
    const auto legal = class_order(m);
    for (const auto& [raw, target] : j["map"].items()) {
      if (target.is_null()) {
        table[raw] = std::nullopt;
        continue;
      }
      auto g = group_from_string(target.get<std::string>());
      if (!g || std::find(legal.begin(), legal.end(), *g) == legal.end()) {
        fail(ErrorCode::ConfigError, "consolidation target '" + target.get<std::string>() + "' is not a " + mode + " label");
      }
      table[raw] = g;
    }
    return Consolidation(m, std::move(table));
  }

  nlohmann::json to_json() const {
    nlohmann::json map = nlohmann::json::object();
    for (const auto& [raw, g] : table_) map[raw] = g ? nlohmann::json(to_string(*g)) : nlohmann::json(nullptr);
    return {{"mode", mode_ == LabelMode::ToxiGen ? "toxigen" : "creact"}, {"map", map}};
  }

  LabelMode mode() const noexcept { return mode_; }
  const std::map<std::string, std::optional<GroupLabel>>& table() const noexcept { return table_; }

  /// Case-insensitive, surrounding whitespace ignored. Throws UnknownRawGroup.
  std::optional<GroupLabel> consolidate(const std::string& raw) const {
    std::string key;
    for (char c : raw) key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    const auto b = key.find_first_not_of(" \t");
    const auto e = key.find_last_not_of(" \t");
    key = b == std::string::npos ? "" : key.substr(b, e - b + 1);
    auto it = table_.find(key);
    if (it == table_.end()) fail(ErrorCode::UnknownRawGroup, "raw group '" + raw + "' is not in the consolidation map");
    return it->second;
  }

 private:
  LabelMode mode_;
  std::map<std::string, std::optional<GroupLabel>> table_;
};

inline std::optional<GroupLabel> consolidate_group(const std::string& raw) {
  return Consolidation::toxigen_default().consolidate(raw);
}

struct LoadResult {
  std::vector<Record> records;
  std::size_t kept = 0;
  std::size_t excluded = 0;
};

namespace detail {

/// Rows as column-name -> value maps, from CSV (header row) or JSONL.
inline std::vector<std::map<std::string, std::string>> read_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot read dataset " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string body = ss.str();
  std::vector<std::map<std::string, std::string>> out;
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json") {
    std::istringstream lines(body);
    std::string line;
    std::size_t row = 0;
    while (std::getline(lines, line)) {
      ++row;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        fail(ErrorCode::SchemaError, path.string() + ": row " + std::to_string(row) + " is not valid JSON");
      }
      if (!j.is_object()) fail(ErrorCode::SchemaError, path.string() + ": row " + std::to_string(row) + " is not an object");
      std::map<std::string, std::string> r;
      for (const auto& [k, v] : j.items()) {
        if (v.is_string()) r[k] = v.get<std::string>();
        else if (!v.is_null()) r[k] = v.dump();
      }
      r["__row"] = std::to_string(row);
      out.push_back(std::move(r));
    }
    return out;
  }
  const auto rows = csv::parse(body);
  if (rows.empty()) return out;
  const auto& header = rows.front();
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::map<std::string, std::string> r;
    for (std::size_t c = 0; c < header.size() && c < rows[i].size(); ++c) r[header[c]] = rows[i][c];
    r["__row"] = std::to_string(i);
    out.push_back(std::move(r));
  }
  return out;
}

inline const std::string& column(const std::map<std::string, std::string>& row, const std::string& name,
                                 const std::filesystem::path& path) {
  auto it = row.find(name);
  if (it == row.end()) {
    fail(ErrorCode::SchemaError, path.string() + ": row " + row.at("__row") + " is missing column '" + name + "'");
  }
  return it->second;
}

}  // namespace detail

/// ToxiGen-shaped table: columns {text, target_group}.
inline LoadResult load_toxigen(const std::filesystem::path& path,
                               const Consolidation& map = Consolidation::toxigen_default()) {
  LoadResult res;
  for (const auto& row : detail::read_table(path)) {
    Record r;
    r.text = detail::column(row, "text", path);
    r.raw_group = detail::column(row, "target_group", path);
    try {
      r.group = map.consolidate(r.raw_group);
    } catch (const Error& e) {
      fail(e.code(), path.string() + ": row " + row.at("__row") + ": " + e.what());
    }
    r.mention = Mention::NotApplicable;
    (r.group ? res.kept : res.excluded)++;
    res.records.push_back(std::move(r));
  }
  return res;
}

/// C-REACT-shaped table: columns {text, race, mention_type} with mention_type direct|indirect.
inline LoadResult load_creact(const std::filesystem::path& path,
                              const Consolidation& map = Consolidation::creact_default()) {
  LoadResult res;
  for (const auto& row : detail::read_table(path)) {
    Record r;
    r.text = detail::column(row, "text", path);
    r.raw_group = detail::column(row, "race", path);
    const std::string& m = detail::column(row, "mention_type", path);
    if (m == "direct") r.mention = Mention::Direct;
    else if (m == "indirect") r.mention = Mention::Indirect;
    else fail(ErrorCode::SchemaError, path.string() + ": row " + row.at("__row") + " has mention_type '" + m + "'");
    try {
      r.group = map.consolidate(r.raw_group);
    } catch (const Error& e) {
      fail(e.code(), path.string() + ": row " + row.at("__row") + ": " + e.what());
    }
    (r.group ? res.kept : res.excluded)++;
    res.records.push_back(std::move(r));
  }
  return res;
}

/// Classification prompt with a {text} slot and an {options} slot filled from `options`.
struct PromptTemplate {
  std::string body;
  std::vector<std::string> options;
  std::string answer_cue;

  static PromptTemplate clinical_race() {
    return {"Please read the following sentence from a clinical note. Based on the information contained within the "
            "sentence, determine which of the following races or ethnicities the patient belongs to. Please respond "
            "with only one option.\n"
            "Options: [{options}]\n"
            "Clinical Note: \"{text}\"\n"
            "Inferred Race or Ethnicity:",
            {"White", "Black or African American", "Asian"},
            "Inferred Race or Ethnicity:"};
  }
};

inline std::string render_prompt(const PromptTemplate& tpl, const std::string& text) {
  std::string opts;
  for (std::size_t i = 0; i < tpl.options.size(); ++i) {
    if (i) opts += ", ";
    opts += tpl.options[i];
  }
  std::string out;
  std::size_t i = 0;
  while (i < tpl.body.size()) {
    if (tpl.body.compare(i, 6, "{text}") == 0) {
      out += text;
      i += 6;
    } else if (tpl.body.compare(i, 9, "{options}") == 0) {
      out += opts;
      i += 9;
    } else {
      out.push_back(tpl.body[i++]);
    }
  }
  return out;
}

/// Stratified split. Per group the test count is round(fraction·n), half away from
/// zero, clamped to [1, n-1]. Groups are visited in label order with one seeded stream.
inline std::vector<Record> split(std::vector<Record> records, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail(ErrorCode::ConfigError, "test_fraction must lie in (0, 1)");
  std::map<GroupLabel, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].group) by_group[*records[i].group].push_back(i);
  }
  SplitMix64 rng(seed);
  for (auto& [g, idx] : by_group) {
    if (idx.size() < 2) fail(ErrorCode::GroupTooSmall, "group " + to_string(g) + " has fewer than 2 records");
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(idx.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) records[idx[i]].split = i < n_test ? Split::Test : Split::Train;
  }
  return records;
}

}  // namespace neurolens
