#include <cmath>

#include <gtest/gtest.h>

#include "neurolens/analysis.hpp"
#include "neurolens/fixture.hpp"
#include "neurolens/pipeline.hpp"
#include "reference.hpp"

using namespace neurolens;
using G = GroupLabel;

namespace {

// Dominant share straight from a count list: 100 · max / sum.
double oracle_pct(const std::vector<std::size_t>& counts) {
  std::size_t sum = 0, mx = 0;
  for (auto c : counts) {
    sum += c;
    mx = std::max(mx, c);
  }
  return 100.0 * static_cast<double>(mx) / static_cast<double>(sum);
}

NeuronGroup group_of(std::vector<NeuronRef> refs, G label = G::Asian) {
  NeuronGroup g;
  g.group = label;
  for (auto r : refs) g.members.push_back({.ref = r});
  return g;
}

OutcomeRecord outcome(G actual, std::optional<G> predicted, std::map<std::string, double> acts = {}) {
  OutcomeRecord o;
  o.actual = actual;
  o.predicted = predicted;
  o.group_activation = std::move(acts);
  return o;
}

}  // namespace

TEST(ParseLabel, PublishedExamples) {
  const auto opts = clinical_options();
  EXPECT_EQ(parse_label("[White] You are an AI assistant. Provide", opts), G::White);
  EXPECT_EQ(parse_label("[White] You are an AI assistant. User", opts), G::White);
  EXPECT_EQ(parse_label("[Russian] The race or ethnicity that best fits", opts), std::nullopt);
  EXPECT_EQ(parse_label("[Russian] Based on the information provided in the", opts), std::nullopt);
  EXPECT_EQ(parse_label("[Yellow] [X] [Black or African", opts), std::nullopt);
  EXPECT_EQ(parse_label("[Yellow] The provided options do not include \"", opts), std::nullopt);
}

TEST(ParseLabel, PlainTextAliasesAndBoundaries) {
  const auto opts = clinical_options();
  EXPECT_EQ(parse_label(" Asian", opts), G::Asian);
  EXPECT_EQ(parse_label("black or african american patient", opts), G::BlackAA);
  EXPECT_EQ(parse_label("Black/AA", opts), G::BlackAA);
  EXPECT_EQ(parse_label("African American", opts), G::BlackAA);
  EXPECT_EQ(parse_label("Whiteness", opts), std::nullopt);
  EXPECT_EQ(parse_label("", opts), std::nullopt);
  EXPECT_EQ(parse_label("[]", opts), std::nullopt);
  EXPECT_EQ(parse_label("The patient is White", opts), std::nullopt);
  EXPECT_EQ(label_or_unknown(std::nullopt), "Unknown");
}

TEST(ErrorPattern, PublishedCountColumns) {
  const LabelPair wa{G::White, G::Asian}, wb{G::White, G::BlackAA}, bw{G::BlackAA, G::White},
      ba{G::BlackAA, G::Asian}, aw{G::Asian, G::White}, ab{G::Asian, G::BlackAA};
  struct Column {
    std::map<LabelPair, std::size_t> counts;
    std::size_t total;
    LabelPair dominant;
    double published;
  };
  const std::vector<Column> cols = {
      {{{wa, 27}, {wb, 4}, {bw, 4}, {ba, 0}, {aw, 1}, {ab, 0}}, 36, wa, 75.0},
      {{{wa, 4}, {wb, 16}, {bw, 0}, {ba, 0}, {aw, 1}, {ab, 0}}, 21, wb, 76.2},
      {{{wa, 395}, {wb, 5}, {bw, 0}, {ba, 10}, {aw, 1}, {ab, 2}}, 413, wa, 95.6},
  };
  for (const auto& c : cols) {
    const auto p = error_pattern_from_counts(c.counts);
    std::vector<std::size_t> raw;
    for (const auto& [k, v] : c.counts) raw.push_back(v);
    EXPECT_EQ(p.total_errors, c.total);
    ASSERT_TRUE(p.dominant);
    EXPECT_EQ(*p.dominant, c.dominant);
    EXPECT_NEAR(p.dominant_pct, oracle_pct(raw), 1e-12);
    EXPECT_NEAR(p.dominant_pct, c.published, 0.05);
  }
}

TEST(ErrorPattern, FromOutcomesExcludesCorrectAndUnknown) {
  std::vector<OutcomeRecord> os = {outcome(G::White, G::Asian), outcome(G::White, G::Asian), outcome(G::White, G::White),
                                   outcome(G::Asian, std::nullopt), outcome(G::BlackAA, G::White)};
  const auto p = error_pattern(os);
  EXPECT_EQ(p.total_errors, 3u);
  EXPECT_EQ(p.unknown, 1u);
  EXPECT_EQ(*p.dominant, LabelPair(G::White, G::Asian));
  EXPECT_NEAR(p.dominant_pct, 200.0 / 3.0, 1e-12);
}

TEST(ErrorPattern, NoErrorsAndTies) {
  const auto none = error_pattern({outcome(G::White, G::White)});
  EXPECT_EQ(none.total_errors, 0u);
  EXPECT_FALSE(none.dominant);
  EXPECT_TRUE(error_pattern_json(none)["dominant"].is_null());
  const auto tie = error_pattern({outcome(G::White, G::Asian), outcome(G::Asian, G::White)});
  EXPECT_EQ(*tie.dominant, LabelPair(G::Asian, G::White));  // smaller pair in label order
  EXPECT_DOUBLE_EQ(tie.dominant_pct, 50.0);
}

TEST(Buckets, MeansAndEmptyMarker) {
  const std::vector<G> order = {G::White, G::Asian};
  const std::vector<OutcomeRecord> os = {outcome(G::White, G::Asian, {{"A", 1.0}, {"B", -0.5}}),
                                         outcome(G::White, G::Asian, {{"A", 2.0}, {"B", -1.5}}),
                                         outcome(G::Asian, G::Asian, {{"A", 0.25}, {"B", 0.0}}),
                                         outcome(G::Asian, std::nullopt, {{"A", 9.0}, {"B", 9.0}})};
  const auto t = outcome_buckets(os, {"A", "B"}, order);
  ASSERT_EQ(t.columns.size(), 4u);
  // columns: W->W, W->A, A->W, A->A
  EXPECT_EQ(t.column_counts, (std::vector<std::size_t>{0, 2, 0, 1}));
  EXPECT_EQ(format_signed(t.cells[0][0]), "---");
  EXPECT_EQ(format_signed(t.cells[0][1]), "+1.50");
  EXPECT_EQ(format_signed(t.cells[1][1]), "-1.00");
  EXPECT_EQ(format_signed(t.cells[1][3]), "+0.00");
  EXPECT_EQ(format_signed(t.cells[0][3]), "+0.25");
}

TEST(Sweep, ClassifyAndRatesSumToOne) {
  EXPECT_EQ(classify_outcome(G::White, G::White, G::Asian), SweepOutcome::Correct);
  EXPECT_EQ(classify_outcome(G::Asian, G::White, G::Asian), SweepOutcome::OriginalBias);
  EXPECT_EQ(classify_outcome(G::BlackAA, G::White, G::Asian), SweepOutcome::Other);
  EXPECT_EQ(classify_outcome(std::nullopt, G::White, G::Asian), SweepOutcome::Unknown);
  SweepCell c{.kind = "direct", .factor = 5, .n = 7, .correct = 3, .original_bias = 2, .other = 1, .unknown = 1};
  EXPECT_NEAR(c.rate(c.correct) + c.rate(c.original_bias) + c.rate(c.other) + c.rate(c.unknown), 1.0, 1e-12);
  const auto j = sweep_json({{c}, {}});
  EXPECT_NEAR(j["cells"][0]["correct"].get<double>(), 3.0 / 7.0, 1e-15);
}

TEST(Sweep, NoBaselineErrors) {
  const auto m = ref::tiny_model(1);
  try {
    intervention_sweep(m, {}, {}, {5.0}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoBaselineErrors);
  }
}

TEST(Matrix, SingletonEqualsPooledActivation) {
  const auto m = ref::tiny_model(3, 16, 2, 2, 16, 24);
  const std::vector<TokenId> toks = {1, 5, 7, 2};
  const NeuronRef n{1, 4};
  const auto mat = activation_matrix(m, {{G::Asian, {toks}}}, {group_of({n})}, Pooling::MeanAllPositions);
  CapturePlan plan;
  plan.neurons = {n};
  const auto trace = forward(m, toks, plan);
  EXPECT_DOUBLE_EQ(*mat.cells[0][0], pool_activation(trace, n, Pooling::MeanAllPositions));
  const auto r = ref::forward(m, toks);
  double mean = 0.0;
  for (const auto& row : r.act[1]) mean += row[4];
  EXPECT_NEAR(*mat.cells[0][0], mean / 4.0, 1e-5);
}

TEST(Matrix, MemberAndRecordOrderDoNotMatter) {
  const auto m = ref::tiny_model(4, 16, 2, 2, 16, 24);
  const std::vector<std::vector<TokenId>> recs = {{3, 4, 5}, {9, 1}, {7, 7, 7, 2}};
  auto rev = recs;
  std::reverse(rev.begin(), rev.end());
  const auto a = activation_matrix(m, {{G::Asian, recs}}, {group_of({{0, 1}, {1, 3}, {1, 9}})}, Pooling::LastInputToken);
  const auto b = activation_matrix(m, {{G::Asian, rev}}, {group_of({{1, 9}, {0, 1}, {1, 3}})}, Pooling::LastInputToken);
  EXPECT_NEAR(*a.cells[0][0], *b.cells[0][0], 1e-12);
}

TEST(Matrix, EmptyGroupsAndMembers) {
  const auto m = ref::tiny_model(5);
  try {
    activation_matrix(m, {{G::Asian, {}}}, {group_of({{0, 1}})}, Pooling::MeanAllPositions);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyGroup);
  }
  const auto mat = activation_matrix(m, {{G::Asian, {{1, 2}}}}, {group_of({})}, Pooling::MeanAllPositions);
  EXPECT_FALSE(mat.cells[0][0]);
}

TEST(Matrix, PlantedDiagonalDominatesRows) {
  const auto fx = fixture::build();
  const std::vector<std::pair<G, std::string>> planted = {{G::Asian, "tox_asian"},
                                                          {G::Black, "tox_black"},
                                                          {G::Latino, "tox_latino"},
                                                          {G::MiddleEastern, "tox_middle_eastern"},
                                                          {G::NativeAmerican, "tox_native_american"}};
  std::vector<NeuronGroup> groups;
  for (const auto& [g, name] : planted) groups.push_back(group_of({fx.planted.at(name)}, g));
  std::map<G, std::vector<std::vector<TokenId>>> by_group;
  for (const auto& row : fx.toxigen) {
    const auto g = consolidate_group(row.group);
    if (g && by_group[*g].size() < 4) by_group[*g].push_back(pipeline::encode(fx.model, pipeline::DatasetMode::ToxiGen, row.text));
  }
  const auto mat = activation_matrix(fx.model, by_group, groups, Pooling::MeanAllPositions);
  for (std::size_t r = 0; r < groups.size(); ++r) {
    const auto col = static_cast<std::size_t>(std::find(mat.cols.begin(), mat.cols.end(), groups[r].group) - mat.cols.begin());
    for (std::size_t c = 0; c < mat.cols.size(); ++c) {
      if (c != col) {
        EXPECT_GT(*mat.cells[r][col], *mat.cells[r][c]) << mat.rows[r];
      }
    }
  }
}
