#include <cmath>

#include <gtest/gtest.h>

#include "neurolens/probe.hpp"
#include "neurolens/rng.hpp"
#include "test_util.hpp"

using namespace neurolens;

namespace {

const std::vector<GroupLabel> kThree = {GroupLabel::Asian, GroupLabel::BlackAA, GroupLabel::White};

/// Gaussian blobs around well separated class means.
std::vector<LabeledFeature> blobs(std::uint64_t seed, std::size_t per_class, std::size_t d, double spread) {
  SplitMix64 r(seed);
  std::vector<LabeledFeature> out;
  for (std::size_t c = 0; c < kThree.size(); ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      Vec x(d);
      for (std::size_t k = 0; k < d; ++k) x[k] = static_cast<float>((k % kThree.size() == c ? 2.0 : 0.0) + spread * r.normal());
      out.push_back({x, kThree[c]});
    }
  return out;
}

// Independent objective: mean cross-entropy + l2 ||W||^2, straight from the definition.
double oracle_loss(const std::vector<double>& w, const std::vector<double>& b, const std::vector<LabeledFeature>& data,
                   double l2) {
  const std::size_t C = b.size(), d = w.size() / C;
  double total = 0.0;
  for (const auto& f : data) {
    std::vector<double> z(C);
    for (std::size_t c = 0; c < C; ++c) {
      z[c] = b[c];
      for (std::size_t i = 0; i < d; ++i) z[c] += w[i * C + c] * f.x[i];
    }
    double lse = 0.0;
    for (double v : z) lse += std::exp(v);
    const auto y = static_cast<std::size_t>(std::find(kThree.begin(), kThree.end(), f.label) - kThree.begin());
    total += std::log(lse) - z[y];
  }
  double sq = 0.0;
  for (double v : w) sq += v * v;
  return total / static_cast<double>(data.size()) + l2 * sq;
}

}  // namespace

TEST(Objective, MatchesDefinition) {
  const auto data = blobs(1, 6, 5, 1.0);
  SplitMix64 r(3);
  std::vector<double> w(15), b(3);
  for (auto& v : w) v = 0.3 * r.normal();
  for (auto& v : b) v = 0.3 * r.normal();
  EXPECT_NEAR(probe_objective(w, b, data, kThree, 0.01).loss, oracle_loss(w, b, data, 0.01), 1e-12);
}

TEST(Objective, GradientMatchesCentralDifferences) {
  SplitMix64 r(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto data = blobs(100 + trial, 5, 6, 1.5);
    std::vector<double> w(18), b(3);
    for (auto& v : w) v = 0.5 * r.normal();
    for (auto& v : b) v = 0.5 * r.normal();
    const auto obj = probe_objective(w, b, data, kThree, 1e-2);
    for (int k = 0; k < 10; ++k) {
      const std::size_t idx = r.below(w.size() + b.size());
      const double h = 1e-5;
      auto wp = w, wm = w, bp = b, bm = b;
      double analytic;
      if (idx < w.size()) {
        wp[idx] += h;
        wm[idx] -= h;
        analytic = obj.grad_w[idx];
      } else {
        bp[idx - w.size()] += h;
        bm[idx - w.size()] -= h;
        analytic = obj.grad_b[idx - w.size()];
      }
      const double numeric = (oracle_loss(wp, bp, data, 1e-2) - oracle_loss(wm, bm, data, 1e-2)) / (2 * h);
      EXPECT_LT(std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric) + std::abs(analytic)), 1e-4)
          << "trial " << trial << " coord " << idx;
    }
  }
}

TEST(Train, LossNeverIncreases) {
  ProbeHyper h;
  h.lr = 5.0;  // deliberately large so some steps get rejected
  h.epochs = 200;
  const auto p = train_probe(blobs(2, 20, 8, 1.0), h);
  ASSERT_GE(p.loss_history.size(), 2u);
  for (std::size_t i = 1; i < p.loss_history.size(); ++i) EXPECT_LE(p.loss_history[i], p.loss_history[i - 1]);
  EXPECT_LT(p.loss_history.back(), p.loss_history.front());
}

TEST(Train, SeparableDataIsLearned) {
  const auto p = train_probe(blobs(3, 30, 8, 0.3), ProbeHyper{});
  const auto m = evaluate_probe(p, blobs(4, 10, 8, 0.3));
  EXPECT_GE(m.accuracy, 0.99);
  EXPECT_GE(m.macro_f1, 0.99);
  EXPECT_EQ(p.classes, kThree);
}

TEST(Train, InputOrderDoesNotMatter) {
  auto data = blobs(5, 10, 6, 1.0);
  const auto a = train_probe(data, ProbeHyper{});
  std::reverse(data.begin(), data.end());
  std::swap(data[3], data[17]);
  const auto b = train_probe(data, ProbeHyper{});
  EXPECT_EQ(a.weight, b.weight);
  EXPECT_EQ(a.bias, b.bias);
}

TEST(Train, DegenerateInputs) {
  auto one_class = blobs(6, 5, 4, 1.0);
  one_class.resize(5);
  EXPECT_THROW(train_probe(one_class, ProbeHyper{}), Error);
  EXPECT_THROW(train_probe({}, ProbeHyper{}), Error);
  auto bad = blobs(6, 5, 4, 1.0);
  bad[2].x[1] = std::nanf("");
  try {
    train_probe(bad, ProbeHyper{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteWeight);
  }
}

TEST(Metrics, PerfectAndAllWrong) {
  auto m = metrics_from_confusion({{3, 0}, {0, 2}});
  EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(m.macro_f1, 1.0);
  m = metrics_from_confusion({{0, 4}, {1, 0}});
  EXPECT_DOUBLE_EQ(m.accuracy, 0.0);
  EXPECT_DOUBLE_EQ(m.macro_f1, 0.0);
}

TEST(Metrics, HandComputedF1) {
  // class 0: tp 2, fp 1, fn 1 -> 4/6; class 1: tp 3, fp 1, fn 1 -> 6/8
  const auto m = metrics_from_confusion({{2, 1}, {1, 3}});
  EXPECT_DOUBLE_EQ(m.accuracy, 5.0 / 7.0);
  EXPECT_NEAR(m.per_class_f1[0], 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(m.per_class_f1[1], 6.0 / 8.0, 1e-15);
  EXPECT_NEAR(m.macro_f1, (4.0 / 6.0 + 0.75) / 2, 1e-15);
}

TEST(Metrics, AbsentClassScoresZeroAndEmptyThrows) {
  const auto m = metrics_from_confusion({{2, 0, 0}, {0, 2, 0}, {0, 0, 0}});
  EXPECT_DOUBLE_EQ(m.per_class_f1[2], 0.0);
  EXPECT_NEAR(m.macro_f1, 2.0 / 3.0, 1e-15);
  try {
    metrics_from_confusion({{0, 0}, {0, 0}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTestSet);
  }
}

TEST(Probe, DirectionIsWeightColumn) {
  const auto p = train_probe(blobs(7, 8, 5, 0.5), ProbeHyper{});
  const auto w = probe_direction(p, GroupLabel::BlackAA);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(w[i], p.weight(i, 1));
  EXPECT_THROW(probe_direction(p, GroupLabel::Latino), Error);
}

TEST(Probe, SaveLoadRoundTrip) {
  testutil::TempDir d("probe_io");
  auto p = train_probe(blobs(8, 8, 5, 0.5), ProbeHyper{});
  p.layer = 3;
  p.pooling = Pooling::LastInputToken;
  save_probe(p, d / "p.json");
  const auto q = load_probe(d / "p.json");
  EXPECT_EQ(q.weight, p.weight);
  EXPECT_EQ(q.bias, p.bias);
  EXPECT_EQ(q.classes, p.classes);
  EXPECT_EQ(q.layer, 3u);
  EXPECT_EQ(q.pooling, Pooling::LastInputToken);
}

TEST(Probe, PredictRejectsWrongDimension) {
  const auto p = train_probe(blobs(9, 4, 5, 0.5), ProbeHyper{});
  const Vec x(4, 0.0f);
  try {
    probe_predict(p, x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}
