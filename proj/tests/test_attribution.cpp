#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "neurolens/attribution.hpp"
#include "neurolens/fixture.hpp"
#include "reference.hpp"

using namespace neurolens;

namespace {

struct Scored {
  std::size_t layer, index;
  double score;
};

// Brute-force ranking written from the definition: cosine in double, stable sort on a (layer, index) walk.
std::vector<Scored> oracle_rank(const ModelBundle& m, const Vec& dir, std::size_t window) {
  const std::size_t L = m.config.n_layers, first = L > window ? L - window : 0;
  std::vector<Scored> all;
  double dn = 0.0;
  for (float v : dir) dn += static_cast<double>(v) * v;
  for (std::size_t l = first; l < L; ++l)
    for (std::size_t j = 0; j < m.config.d_mlp; ++j) {
      double dot = 0.0, vn = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) {
        const double v = m.layers[l].down(j, i);
        dot += v * dir[i];
        vn += v * v;
      }
      all.push_back({l, j, (dn == 0.0 || vn == 0.0) ? 0.0 : dot / std::sqrt(dn * vn)});
    }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  return all;
}

Vec random_vec(SplitMix64& r, std::size_t n) {
  Vec v(n);
  for (auto& x : v) x = static_cast<float>(r.normal());
  return v;
}

ModelBundle identity_lens_model() {
  auto m = ref::tiny_model(4, 16, 1, 2, 8, 16);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t t = 0; t < 16; ++t) m.unembedding(i, t) = i == t ? 1.0f : 0.0f;
  return m;
}

}  // namespace

TEST(Rank, MatchesBruteForceIncludingTies) {
  auto m = ref::tiny_model(21, 32, 4, 4, 64, 40);
  // duplicate output vectors force exact ties across layers and within a layer
  for (std::size_t i = 0; i < 32; ++i) {
    m.layers[3].down(10, i) = m.layers[1].down(5, i);
    m.layers[2].down(7, i) = m.layers[1].down(5, i);
    m.layers[2].down(3, i) = m.layers[2].down(60, i);
  }
  SplitMix64 r(5);
  for (int trial = 0; trial < 3; ++trial) {
    Vec dir = random_vec(r, 32);
    if (trial == 2) {
      const auto v = m.neuron_output(1, 5);
      dir.assign(v.begin(), v.end());
    }
    const auto got = score_neurons(m, dir, 4);
    const auto want = oracle_rank(m, dir, 4);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].ref.layer, want[i].layer) << "rank " << i;
      EXPECT_EQ(got[i].ref.index, want[i].index) << "rank " << i;
      EXPECT_NEAR(got[i].score, want[i].score, 1e-6);
    }
  }
}

TEST(Rank, WindowLimitsLayers) {
  const auto m = ref::tiny_model(22, 16, 5, 2, 8, 16);
  SplitMix64 r(1);
  const auto got = score_neurons(m, random_vec(r, 16), 2);
  EXPECT_EQ(got.size(), 16u);
  for (const auto& c : got) EXPECT_GE(c.ref.layer, 3u);
  EXPECT_EQ(score_neurons(m, random_vec(r, 16), 9).size(), 40u);
}

TEST(Rank, ScoresAreCosinesInRange) {
  const auto m = ref::tiny_model(23);
  SplitMix64 r(2);
  for (const auto& c : score_neurons(m, random_vec(r, 16))) {
    EXPECT_LE(c.score, 1.0 + 1e-9);
    EXPECT_GE(c.score, -1.0 - 1e-9);
  }
}

TEST(Rank, PlantedNeuronTopsItsOwnDirection) {
  const auto m = ref::tiny_model(24, 16, 3, 2, 16, 20);
  const auto v = m.neuron_output(2, 9);
  const auto got = score_neurons(m, Vec(v.begin(), v.end()), 4);
  EXPECT_EQ(got.front().ref, (NeuronRef{2, 9}));
  EXPECT_NEAR(got.front().score, 1.0, 1e-6);
}

TEST(Rank, SelectAndErrors) {
  const auto m = ref::tiny_model(25);
  SplitMix64 r(3);
  const auto ranked = score_neurons(m, random_vec(r, 16));
  EXPECT_EQ(select_candidates(ranked, 5).size(), 5u);
  EXPECT_EQ(select_candidates(ranked, 1000).size(), ranked.size());
  EXPECT_THROW(select_candidates(ranked, 0), Error);
  EXPECT_THROW(score_neurons(m, Vec(3, 1.0f)), Error);
  EXPECT_THROW(score_neurons(m, random_vec(r, 16), 0), Error);
}

TEST(Lens, IdentityUnembeddingDeltas) {
  const auto m = identity_lens_model();
  for (std::size_t i = 0; i < 16; ++i) {
    Vec h(16, 0.0f);
    h[i] = 2.5f;
    const auto p = logit_lens(m, h, 3);
    EXPECT_EQ(p.entries[0].id, i);
    EXPECT_DOUBLE_EQ(p.entries[0].logit, 2.5);
    // the rest tie at zero and come in ascending id order
    EXPECT_EQ(p.entries[1].id, i == 0 ? 1u : 0u);
  }
}

TEST(Lens, ZeroVectorTiesByAscendingId) {
  const auto m = ref::tiny_model(26);
  const auto p = logit_lens(m, Vec(16, 0.0f), 10);
  ASSERT_EQ(p.entries.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(p.entries[i].id, i);
    EXPECT_EQ(p.entries[i].logit, 0.0);
  }
}

TEST(Lens, Linearity) {
  const auto m = ref::tiny_model(27);
  SplitMix64 r(4);
  for (int t = 0; t < 10; ++t) {
    const Vec a = random_vec(r, 16), b = random_vec(r, 16);
    const double alpha = r.normal(), beta = r.normal();
    Vec mix(16);
    for (std::size_t i = 0; i < 16; ++i) mix[i] = static_cast<float>(alpha * a[i] + beta * b[i]);
    const auto za = lens_logits(m, a), zb = lens_logits(m, b), zm = lens_logits(m, mix);
    for (std::size_t v = 0; v < zm.size(); ++v) EXPECT_NEAR(zm[v], alpha * za[v] + beta * zb[v], 1e-6);
  }
}

TEST(Lens, OrderingAndBounds) {
  const auto m = ref::tiny_model(28);
  SplitMix64 r(5);
  const auto p = logit_lens(m, random_vec(r, 16), 100);
  EXPECT_EQ(p.entries.size(), 24u);
  for (std::size_t i = 1; i < p.entries.size(); ++i) EXPECT_GE(p.entries[i - 1].logit, p.entries[i].logit);
  EXPECT_THROW(logit_lens(m, random_vec(r, 16), 0), Error);
  EXPECT_THROW(logit_lens(m, Vec(5, 0.0f), 3), Error);
}

TEST(Keywords, Normalization) {
  EXPECT_EQ(normalize_token(" Chinese"), "chinese");
  EXPECT_EQ(normalize_token("ASIAN,"), "asian");
  EXPECT_EQ(normalize_token("\xEF\xBC\xA1sian"), "asian");  // fullwidth A
  EXPECT_EQ(normalize_token("_Navajo_"), "navajo");
  EXPECT_EQ(normalize_token("\"Black/AA\""), "black/aa");
  EXPECT_EQ(normalize_token("  "), "");
  EXPECT_EQ(normalize_token("Stra\xC3\x9F" "e"), "strasse");
}

TEST(Keywords, TableDedupesAndRejectsUnknownGroups) {
  const auto t = KeywordTable::from_json(nlohmann::json::parse(R"({"Asian": ["Asian", " asian", "China"]})"));
  EXPECT_EQ(t.for_group(GroupLabel::Asian), (std::vector<std::string>{"asian", "china"}));
  EXPECT_TRUE(t.for_group(GroupLabel::White).empty());
  EXPECT_THROW(KeywordTable::from_json(nlohmann::json::parse(R"({"Martian": ["x"]})")), Error);
}

class FixtureFilter : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { fx = new fixture::Fixture(fixture::build()); }
  static void TearDownTestSuite() { delete fx; }
  static fixture::Fixture* fx;

  std::vector<NeuronCandidate> candidates(const std::vector<std::string>& names, std::size_t extra = 0) {
    std::vector<NeuronCandidate> out;
    for (const auto& n : names) out.push_back({.ref = fx->planted.at(n)});
    for (std::size_t j = 0; j < extra; ++j) out.push_back({.ref = {0, j}});
    return out;
  }
};
fixture::Fixture* FixtureFilter::fx = nullptr;

TEST_F(FixtureFilter, PlantedNeuronsPassTheirGroupKeywords) {
  const std::vector<std::string> kw = {"asian", "chinese", "china", "beijing"};
  const auto g = filter_by_alignment(candidates({"bias", "tox_latino"}), kw, fx->model, 20, 3, GroupLabel::Asian);
  ASSERT_EQ(g.members.size(), 1u);
  EXPECT_EQ(g.members[0].ref, fx->planted.at("bias"));
  EXPECT_GE(g.members[0].matched_keywords.size(), 3u);
  EXPECT_EQ(g.inspected.size(), 2u);
  EXPECT_FALSE(g.inspected[1].retained);
}

TEST_F(FixtureFilter, MinMatchesZeroKeepsEverything) {
  const auto g = filter_by_alignment(candidates({"bias"}, 12), {"zzz"}, fx->model, 5, 0, GroupLabel::Asian);
  EXPECT_EQ(g.members.size(), 13u);
}

TEST_F(FixtureFilter, DuplicateCandidatesCollapse) {
  auto c = candidates({"bias", "bias"});
  const auto g = filter_by_alignment(c, {"asian"}, fx->model, 20, 1, GroupLabel::Asian);
  EXPECT_EQ(g.members.size(), 1u);
  EXPECT_THROW(filter_by_alignment(c, {}, fx->model, 20, 1, GroupLabel::Asian), Error);
}

TEST_F(FixtureFilter, GroupJsonRoundTrip) {
  const auto g = filter_by_alignment(candidates({"white_indirect"}), {"russia", "poland", "italy", "europe"}, fx->model,
                                     20, 2, GroupLabel::White, Mention::Indirect);
  ASSERT_EQ(g.members.size(), 1u);
  EXPECT_EQ(g.name(), "White Indirect");
  const auto j = group_json(g);
  EXPECT_EQ(j["members"][0]["neuron"], fx->planted.at("white_indirect").notation());
  const auto back = group_from_json(j);
  EXPECT_EQ(back.refs(), g.refs());
  EXPECT_EQ(back.mention, Mention::Indirect);
}
