#include <cmath>

#include <gtest/gtest.h>

#include "neurolens/engine.hpp"
#include "neurolens/synthetic.hpp"
#include "reference.hpp"

using namespace neurolens;

namespace {

Vec random_vec(SplitMix64& r, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (auto& x : v) x = static_cast<float>(scale * r.normal());
  return v;
}

std::vector<TokenId> random_tokens(SplitMix64& r, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(r.below(vocab));
  return t;
}

}  // namespace

TEST(Mlp, ZeroInputGivesZero) {
  const auto m = ref::tiny_model(1);
  const Vec x(m.config.d_model, 0.0f);
  const auto r = mlp_forward(x, m.layers[0]);
  for (float a : r.activations) EXPECT_EQ(a, 0.0f);
  for (float o : r.output) EXPECT_EQ(o, 0.0f);
}

TEST(Mlp, OutputIsSumOfNeuronContributions) {
  const auto m = ref::tiny_model(2, 16, 1, 2, 8, 12);
  SplitMix64 r(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = random_vec(r, 16, 3.0);
    const auto res = mlp_forward(x, m.layers[0]);
    // independent matrix path
    std::vector<double> g(8, 0.0), u(8, 0.0);
    for (std::size_t j = 0; j < 8; ++j)
      for (std::size_t i = 0; i < 16; ++i) {
        g[j] += static_cast<double>(x[i]) * m.layers[0].gate(i, j);
        u[j] += static_cast<double>(x[i]) * m.layers[0].up(i, j);
      }
    std::vector<double> direct(16, 0.0), summed(16, 0.0);
    for (std::size_t j = 0; j < 8; ++j) {
      const double a = g[j] / (1.0 + std::exp(-g[j])) * u[j];
      for (std::size_t i = 0; i < 16; ++i) {
        direct[i] += a * m.layers[0].down(j, i);
        summed[i] += static_cast<double>(res.activations[j]) * m.neuron_output(0, j)[i];
      }
    }
    double num = 0, den = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      num += (direct[i] - res.output[i]) * (direct[i] - res.output[i]);
      den += direct[i] * direct[i];
      EXPECT_NEAR(summed[i], res.output[i], 1e-5 * (1.0 + std::abs(direct[i])));
    }
    EXPECT_LT(std::sqrt(num / den), 1e-5);
  }
}

TEST(Mlp, SingleNeuronOutputIsParallelToItsVector) {
  const auto m = ref::tiny_model(3, 16, 1, 2, 1, 12);
  SplitMix64 r(1);
  const auto res = mlp_forward(random_vec(r, 16, 2.0), m.layers[0]);
  EXPECT_NEAR(std::abs(cosine(res.output, m.neuron_output(0, 0))), 1.0, 1e-6);
}

TEST(Forward, MatchesReferenceImplementation) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto m = ref::tiny_model(seed, 16, 3, 4, 12, 14);
    SplitMix64 r(seed);
    const auto tokens = random_tokens(r, 9, 14);
    CapturePlan plan;
    plan.residual_layers = {0, 1, 2};
    plan.neurons = {{0, 1}, {2, 5}};
    const auto tr = forward(m, tokens, plan);
    const auto rf = ref::forward(m, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      for (std::size_t v = 0; v < 14; ++v) EXPECT_NEAR(tr.logits(t, v), rf.logits[t][v], 1e-4);
      for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(tr.residual.at(l)(t, i), rf.residual[l][t][i], 1e-4);
      EXPECT_NEAR(tr.activation.at({0, 1})[t], rf.act[0][t][1], 1e-5);
      EXPECT_NEAR(tr.activation.at({2, 5})[t], rf.act[2][t][5], 1e-5);
    }
  }
}

TEST(Forward, ActivationMatchesRecomputationFromLayerInput) {
  const auto m = ref::tiny_model(5, 16, 2, 2, 8, 12);
  SplitMix64 r(5);
  const auto tokens = random_tokens(r, 6, 12);
  CapturePlan plan;
  plan.residual_layers = {1};
  plan.capture_mlp_inputs = true;
  for (std::size_t j = 0; j < 8; ++j) plan.neurons.insert({1, j});
  const auto tr = forward(m, tokens, plan);
  const auto& x = tr.mlp_input.at(1);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto res = mlp_forward(x.row(t), m.layers[1]);
    for (std::size_t j = 0; j < 8; ++j) {
      const double a = tr.activation.at({1, j})[t];
      EXPECT_LE(std::abs(a - res.activations[j]), 1e-5 * std::max(1.0, std::abs(a)));
    }
  }
}

TEST(Forward, EmptyInput) {
  const auto m = ref::tiny_model(1);
  try {
    forward(m, {}, CapturePlan{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyInput);
  }
}

TEST(Forward, CaptureDoesNotChangeLogits) {
  const auto m = ref::tiny_model(6);
  SplitMix64 r(6);
  const auto tokens = random_tokens(r, 7, 24);
  const auto plain = forward(m, tokens, CapturePlan{});
  CapturePlan heavy;
  heavy.residual_layers = {0, 1};
  heavy.capture_mlp_inputs = true;
  for (std::size_t j = 0; j < 32; ++j) heavy.neurons.insert({0, j});
  const auto captured = forward(m, tokens, heavy);
  EXPECT_EQ(plain.logits.data(), captured.logits.data());
}

TEST(Intervention, TransformExamples) {
  EXPECT_EQ(InterventionPolicy::transform(2.0f, 5.0f), -10.0f);
  EXPECT_EQ(InterventionPolicy::transform(-3.0f, 5.0f), -15.0f);
  EXPECT_EQ(InterventionPolicy::transform(0.0f, 5.0f), 0.0f);
}

TEST(Intervention, TraceStoresPostInterventionValueAndMatchesReference) {
  const auto m = ref::tiny_model(8, 16, 2, 2, 8, 12);
  SplitMix64 r(8);
  const auto tokens = random_tokens(r, 5, 12);
  InterventionPolicy p;
  p.targets = {{0, 3}, {1, 2}};
  p.factor = 10;
  CapturePlan plan;
  plan.neurons = {{0, 3}};
  const auto base = forward(m, tokens, plan);
  const auto tr = forward(m, tokens, plan, &p);
  const auto rf = ref::forward(m, tokens, p.targets, 10.0);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    EXPECT_FLOAT_EQ(tr.activation.at({0, 3})[t], InterventionPolicy::transform(base.activation.at({0, 3})[t], 10.0f));
    for (std::size_t v = 0; v < 12; ++v) EXPECT_NEAR(tr.logits(t, v), rf.logits[t][v], 1e-4);
  }
}

TEST(Intervention, DisabledPolicyIsBitIdentical) {
  const auto m = ref::tiny_model(9);
  SplitMix64 r(9);
  const auto tokens = random_tokens(r, 6, 24);
  InterventionPolicy p;
  p.targets = {{1, 4}};
  p.enabled = false;
  EXPECT_EQ(forward(m, tokens, {}).logits.data(), forward(m, tokens, {}, &p).logits.data());
}

TEST(Intervention, DeadNeuronLeavesLogitsBitIdentical) {
  auto m = ref::tiny_model(10);
  for (std::size_t i = 0; i < m.config.d_model; ++i) m.layers[0].gate(i, 6) = 0.0f;  // silu(0) = 0
  SplitMix64 r(10);
  const auto tokens = random_tokens(r, 8, 24);
  InterventionPolicy p;
  p.targets = {{0, 6}};
  p.factor = 20;
  EXPECT_EQ(forward(m, tokens, {}).logits.data(), forward(m, tokens, {}, &p).logits.data());
}

TEST(Intervention, ClosedFormLogitDeltaOnLinearizedToy) {
  // No final norm and the planted neuron in the last layer: only the planted term changes.
  SyntheticSpec s;
  s.dims = {.d_model = 32, .n_layers = 2, .n_heads = 2, .d_mlp = 16, .vocab_size = 20, .final_norm = false};
  s.seed = 12;
  s.planted.push_back({.layer = 1, .index = 4, .group_label = "x", .write_token = 7, .strength = 3.0, .trigger_tokens = {2},
                       .trigger_gain = 3.0});
  const auto m = generate_synthetic_model(s);
  const std::vector<TokenId> tokens = {5, 9, 2};
  CapturePlan plan;
  plan.neurons = {{1, 4}};
  const auto base = forward(m, tokens, plan);
  const double a = base.activation.at({1, 4}).back();
  ASSERT_GT(a, 0.1);
  const double k = 5.0;
  InterventionPolicy p;
  p.targets = {{1, 4}};
  p.factor = k;
  const auto after = forward(m, tokens, plan, &p);
  const double vu = dot(m.neuron_output(1, 4), m.unembedding.column(7));
  const double expected = -(1.0 + k) * a * vu;
  const double got = static_cast<double>(after.final_logits()[7]) - base.final_logits()[7];
  EXPECT_NEAR(got, expected, 0.05 * std::abs(expected));
}

TEST(Intervention, ValidatesFactorAndTargets) {
  const auto m = ref::tiny_model(1);
  InterventionPolicy p;
  p.targets = {{5, 0}};
  EXPECT_THROW(forward(m, {1}, {}, &p), Error);
  p.targets = {{0, 0}};
  p.factor = 0;
  EXPECT_THROW(forward(m, {1}, {}, &p), Error);
}

namespace {

/// Residual stream carries a constant positive coordinate; W_U reads it only for `winner`.
ModelBundle constant_argmax_model(TokenId winner) {
  auto m = ref::tiny_model(13, 16, 2, 2, 8, 12);
  for (auto& L : m.layers) {
    std::fill(L.wo.data().begin(), L.wo.data().end(), 0.0f);
    std::fill(L.down.data().begin(), L.down.data().end(), 0.0f);
  }
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t i = 0; i < 16; ++i) m.token_embedding(t, i) = i == 0 ? 1.0f : 0.1f * static_cast<float>(t % 3);
  std::fill(m.unembedding.data().begin(), m.unembedding.data().end(), 0.0f);
  m.unembedding(0, winner) = 1.0f;
  return m;
}

}  // namespace

TEST(Generate, ConstantArgmaxModelRepeatsWinner) {
  const auto m = constant_argmax_model(7);
  const auto out = greedy_generate(m, {3, 4}, 5);
  EXPECT_EQ(out.ids, std::vector<TokenId>(5, 7));
}

TEST(Generate, TiesGoToLowestId) {
  auto m = constant_argmax_model(7);
  std::fill(m.unembedding.data().begin(), m.unembedding.data().end(), 0.0f);
  EXPECT_EQ(greedy_generate(m, {3}, 2).ids, (std::vector<TokenId>{0, 0}));
  const std::vector<float> tie = {1.0f, 3.0f, 3.0f, 2.0f};
  EXPECT_EQ(argmax_token(tie), 1u);
}

TEST(Generate, DeterministicAndFirstStepIsArgmax) {
  const auto m = ref::tiny_model(14);
  const std::vector<TokenId> prompt = {1, 5, 9};
  const auto a = greedy_generate(m, prompt, 4);
  const auto b = greedy_generate(m, prompt, 4);
  EXPECT_EQ(a.ids, b.ids);
  const auto one = greedy_generate(m, prompt, 1);
  const auto tr = forward(m, prompt, {});
  EXPECT_EQ(one.ids.front(), argmax_token(tr.final_logits()));
}

TEST(Generate, StopTokenEndsGeneration) {
  const auto m = constant_argmax_model(7);
  EXPECT_TRUE(greedy_generate(m, {3}, 4, nullptr, TokenId{7}).ids.empty());
}

TEST(Generate, RejectsBadArguments) {
  const auto m = ref::tiny_model(1);
  EXPECT_THROW(greedy_generate(m, {}, 3), Error);
  EXPECT_THROW(greedy_generate(m, {1}, 0), Error);
}

namespace {

ForwardTrace trace_with(const std::vector<Vec>& rows, std::vector<bool> pad = {}) {
  ForwardTrace t;
  t.tokens.assign(rows.size(), 3);
  t.is_pad = pad.empty() ? std::vector<bool>(rows.size(), false) : pad;
  Matrix r(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), r.row(i).begin());
  t.residual.emplace(0, r);
  return t;
}

}  // namespace

TEST(Pool, IdenticalRowsPoolToThatRow) {
  const Vec v{1, -2, 3};
  const auto t = trace_with({v, v, v});
  EXPECT_EQ(pool_residual(t, 0, Pooling::MeanAllPositions), v);
  EXPECT_EQ(pool_residual(t, 0, Pooling::LastInputToken), v);
}

TEST(Pool, MeanOfTwoAndLastOfThree) {
  const auto t2 = trace_with({{1, 2}, {3, 6}});
  EXPECT_EQ(pool_residual(t2, 0, Pooling::MeanAllPositions), (Vec{2, 4}));
  const auto t3 = trace_with({{1, 2}, {3, 6}, {7, 8}});
  EXPECT_EQ(pool_residual(t3, 0, Pooling::LastInputToken), (Vec{7, 8}));
}

TEST(Pool, PadPositionsAreSkipped) {
  const auto t = trace_with({{1, 1}, {3, 3}, {100, 100}}, {false, false, true});
  EXPECT_EQ(pool_residual(t, 0, Pooling::MeanAllPositions), (Vec{2, 2}));
  EXPECT_EQ(pool_residual(t, 0, Pooling::LastInputToken), (Vec{3, 3}));
}

TEST(Pool, LayerNotCaptured) {
  const auto t = trace_with({{1, 1}});
  try {
    pool_residual(t, 4, Pooling::MeanAllPositions);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LayerNotCaptured);
  }
}
