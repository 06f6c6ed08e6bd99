#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurolens/corpus.hpp"
#include "neurolens/engine.hpp"
#include "neurolens/error.hpp"
#include "neurolens/rng.hpp"
#include "neurolens/tensor.hpp"
#include "neurolens/tensor_file.hpp"

namespace neurolens {

struct LabeledFeature {
  Vec x;
  GroupLabel label;
};

struct ProbeHyper {
  double lr = 0.1;
  std::size_t epochs = 500;
  double l2_lambda = 1e-3;
  std::uint64_t seed = 42;
};

/// Multi-class linear probe: P(c | h) = softmax(W^T h + b)_c. Column c of W is the direction for class c.
struct ProbeModel {
  Matrix weight;  // d_model × classes
  Vec bias;       // classes
  std::vector<GroupLabel> classes;
  std::size_t layer = 0;
  Pooling pooling = Pooling::MeanAllPositions;
  /// Objective after each accepted epoch (first entry is the initial objective).
  std::vector<double> loss_history;

  std::size_t dim() const { return weight.rows(); }
  std::size_t num_classes() const { return classes.size(); }
};

/// Objective and gradient at (W, b): mean cross-entropy + l2·||W||^2, bias unregularized.
/// W is d×C row-major in `w`, b has C entries.
struct ProbeObjective {
  double loss = 0.0;
  std::vector<double> grad_w;
  std::vector<double> grad_b;
};

inline std::vector<double> softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

inline ProbeObjective probe_objective(const std::vector<double>& w, const std::vector<double>& b,
                                      const std::vector<LabeledFeature>& data, const std::vector<GroupLabel>& classes,
                                      double l2_lambda) {
  const std::size_t C = classes.size();
  const std::size_t d = w.size() / C;
  ProbeObjective obj;
  obj.grad_w.assign(w.size(), 0.0);
  obj.grad_b.assign(C, 0.0);
  std::vector<double> z(C);
  for (const auto& f : data) {
    const auto y = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), f.label) - classes.begin());
    for (std::size_t c = 0; c < C; ++c) z[c] = b[c];
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = f.x[i];
      for (std::size_t c = 0; c < C; ++c) z[c] += xi * w[i * C + c];
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    obj.loss += -(z[y] - mx - std::log(s));
    for (std::size_t c = 0; c < C; ++c) {
      const double r = std::exp(z[c] - mx) / s - (c == y ? 1.0 : 0.0);
      obj.grad_b[c] += r;
      for (std::size_t i = 0; i < d; ++i) obj.grad_w[i * C + c] += f.x[i] * r;
    }
  }
  const double n = static_cast<double>(data.size());
  obj.loss /= n;
  for (auto& g : obj.grad_b) g /= n;
  double sq = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    obj.grad_w[k] = obj.grad_w[k] / n + 2.0 * l2_lambda * w[k];
    sq += w[k] * w[k];
  }
  obj.loss += l2_lambda * sq;
  return obj;
}

/// Sorted distinct labels (by name), which is the alphabetical class order of either mode.
inline std::vector<GroupLabel> classes_present(const std::vector<LabeledFeature>& data) {
  std::vector<GroupLabel> out;
  for (const auto& f : data) {
    if (std::find(out.begin(), out.end(), f.label) == out.end()) out.push_back(f.label);
  }
  std::sort(out.begin(), out.end(), [](GroupLabel a, GroupLabel b) { return to_string(a) < to_string(b); });
  return out;
}

/// Full-batch gradient descent from a seeded small random start. A step that would raise the
/// objective is retried at half the rate, so the recorded objective never increases. Training
/// data is put in a canonical order first, which makes the result independent of input order.
inline ProbeModel train_probe(std::vector<LabeledFeature> data, const ProbeHyper& hyper,
                              std::vector<GroupLabel> classes = {}) {
  if (data.empty()) fail(ErrorCode::DegenerateData, "no training features");
  const std::size_t d = data.front().x.size();
  for (const auto& f : data) {
    if (f.x.size() != d) fail(ErrorCode::DimensionMismatch, "training features have different dimensions");
    if (!all_finite(f.x)) fail(ErrorCode::NonFiniteWeight, "training feature has a non-finite entry");
  }
  if (classes.empty()) classes = classes_present(data);
  if (classes_present(data).size() < 2 || classes.size() < 2) fail(ErrorCode::DegenerateData, "probe training needs at least two classes");
  for (const auto& f : data) {
    if (std::find(classes.begin(), classes.end(), f.label) == classes.end()) {
      fail(ErrorCode::DegenerateData, "feature label " + to_string(f.label) + " is not in the class order");
    }
  }
  std::sort(data.begin(), data.end(), [](const LabeledFeature& a, const LabeledFeature& b) {
    if (a.label != b.label) return a.label < b.label;
    return a.x < b.x;
  });

  const std::size_t C = classes.size();
  SplitMix64 rng(hyper.seed);
  std::vector<double> w(d * C), b(C, 0.0);
  for (auto& v : w) v = 0.01 * rng.normal();

  ProbeModel probe;
  auto obj = probe_objective(w, b, data, classes, hyper.l2_lambda);
  probe.loss_history.push_back(obj.loss);
  double lr = hyper.lr;
  std::vector<double> w2(w.size()), b2(C);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    ProbeObjective next;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      for (std::size_t k = 0; k < w.size(); ++k) w2[k] = w[k] - lr * obj.grad_w[k];
      for (std::size_t c = 0; c < C; ++c) b2[c] = b[c] - lr * obj.grad_b[c];
      next = probe_objective(w2, b2, data, classes, hyper.l2_lambda);
      if (next.loss <= obj.loss) {
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;
    const double delta = obj.loss - next.loss;
    w.swap(w2);
    b.swap(b2);
    obj = std::move(next);
    probe.loss_history.push_back(obj.loss);
    if (delta < 1e-7) break;
  }

  probe.weight = Matrix(d, C);
  for (std::size_t k = 0; k < w.size(); ++k) probe.weight.data()[k] = static_cast<float>(w[k]);
  probe.bias.resize(C);
  for (std::size_t c = 0; c < C; ++c) probe.bias[c] = static_cast<float>(b[c]);
  probe.classes = std::move(classes);
  return probe;
}

inline std::vector<double> probe_predict(const ProbeModel& probe, std::span<const float> x) {
  if (x.size() != probe.dim()) {
    fail(ErrorCode::DimensionMismatch, "probe expects " + std::to_string(probe.dim()) + " features, got " + std::to_string(x.size()));
  }
  std::vector<double> z(probe.num_classes());
  for (std::size_t c = 0; c < z.size(); ++c) z[c] = probe.bias[c];
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += static_cast<double>(x[i]) * probe.weight(i, c);
  }
  return softmax(z);
}

/// Index into probe.classes; ties go to the earlier class.
inline std::size_t probe_argmax(const std::vector<double>& p) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

struct ProbeMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  /// confusion[truth][predicted], indexed by class order.
  std::vector<std::vector<std::size_t>> confusion;
};

/// Metrics from a confusion matrix. A class absent from both truth and predictions has F1 = 0.
inline ProbeMetrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  ProbeMetrics m;
  const std::size_t C = confusion.size();
  std::size_t total = 0, diag = 0;
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) total += confusion[i][j];
    diag += confusion[i][i];
  }
  if (total == 0) fail(ErrorCode::EmptyTestSet, "confusion matrix is empty");
  m.accuracy = static_cast<double>(diag) / static_cast<double>(total);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += confusion[k][c];
      fn += confusion[c][k];
    }
    const double tp = static_cast<double>(confusion[c][c]);
    const double den = 2.0 * tp + static_cast<double>(fp + fn);
    m.per_class_f1.push_back(den == 0.0 ? 0.0 : 2.0 * tp / den);
  }
  m.macro_f1 = std::accumulate(m.per_class_f1.begin(), m.per_class_f1.end(), 0.0) / static_cast<double>(C);
  m.confusion = std::move(confusion);
  return m;
}

inline ProbeMetrics evaluate_probe(const ProbeModel& probe, const std::vector<LabeledFeature>& test) {
  if (test.empty()) fail(ErrorCode::EmptyTestSet, "no test features");
  const std::size_t C = probe.num_classes();
  std::vector<std::vector<std::size_t>> confusion(C, std::vector<std::size_t>(C, 0));
  for (const auto& f : test) {
    auto it = std::find(probe.classes.begin(), probe.classes.end(), f.label);
    if (it == probe.classes.end()) fail(ErrorCode::UnknownClass, "test label " + to_string(f.label) + " is not a probe class");
    const auto truth = static_cast<std::size_t>(it - probe.classes.begin());
    confusion[truth][probe_argmax(probe_predict(probe, f.x))]++;
  }
  return metrics_from_confusion(std::move(confusion));
}

/// Column w_c of the probe weight (bias excluded).
inline Vec probe_direction(const ProbeModel& probe, GroupLabel c) {
  auto it = std::find(probe.classes.begin(), probe.classes.end(), c);
  if (it == probe.classes.end()) fail(ErrorCode::UnknownClass, to_string(c) + " is not a probe class");
  return probe.weight.column(static_cast<std::size_t>(it - probe.classes.begin()));
}

inline void save_probe(const ProbeModel& p, const std::filesystem::path& manifest_path) {
  nlohmann::json classes = nlohmann::json::array();
  for (auto c : p.classes) classes.push_back(to_string(c));
  nlohmann::json header = {{"format", "neurolens.probe"}, {"version", 1},          {"class_order", classes},
                           {"layer", p.layer},            {"pooling", to_string(p.pooling)}};
  tensor_file::write(manifest_path, manifest_path.stem().string() + ".bin", header,
                     {{"weight", {p.weight.rows(), p.weight.cols()}, p.weight.data()}, {"bias", {p.bias.size()}, p.bias}});
}

inline ProbeModel load_probe(const std::filesystem::path& manifest_path) {
  auto loaded = tensor_file::read(manifest_path);
  ProbeModel p;
  const auto& m = loaded.manifest;
  if (m.value("format", std::string()) != "neurolens.probe") fail(ErrorCode::SchemaError, manifest_path.string() + " is not a probe manifest");
  for (const auto& c : m.at("class_order")) {
    auto g = group_from_string(c.get<std::string>());
    if (!g) fail(ErrorCode::SchemaError, "unknown class '" + c.get<std::string>() + "' in probe manifest");
    p.classes.push_back(*g);
  }
  p.layer = m.value("layer", std::size_t{0});
  p.pooling = pooling_from_string(m.value("pooling", std::string("mean")));
  auto wit = loaded.tensors.find("weight");
  auto bit = loaded.tensors.find("bias");
  if (wit == loaded.tensors.end()) fail(ErrorCode::MissingTensor, "probe tensor 'weight' is missing");
  if (bit == loaded.tensors.end()) fail(ErrorCode::MissingTensor, "probe tensor 'bias' is missing");
  const auto& ws = wit->second.shape;
  if (ws.size() != 2 || ws[1] != p.classes.size() || bit->second.data.size() != p.classes.size()) {
    fail(ErrorCode::ShapeMismatch, "probe tensors do not match class_order");
  }
  p.weight = Matrix(ws[0], ws[1], std::move(wit->second.data));
  p.bias = std::move(bit->second.data);
  if (!all_finite(p.weight.data()) || !all_finite(p.bias)) fail(ErrorCode::NonFiniteWeight, "probe has non-finite entries");
  return p;
}

}  // namespace neurolens
