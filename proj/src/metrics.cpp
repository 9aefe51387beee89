#include "lakd/metrics.hpp"

#include <cmath>

#include "lakd/error.hpp"
#include "lakd/losses.hpp"
#include "lakd/rng.hpp"

namespace lakd {

double ek_metric(const PredictionLog& log) {
  if (log.teacher_pred.size() != log.labels.size() ||
      log.student_pred.size() != log.labels.size()) {
    throw ContractError("ek_metric: prediction/label lengths differ");
  }
  std::size_t wrong = 0, rescued = 0;
  for (std::size_t i = 0; i < log.labels.size(); ++i) {
    if (log.teacher_pred[i] != log.labels[i]) {
      ++wrong;
      if (log.student_pred[i] == log.labels[i]) ++rescued;
    }
  }
  if (wrong == 0) throw ContractError("EK undefined: teacher correct on every sample");
  return static_cast<double>(rescued) / static_cast<double>(wrong);
}

namespace {

// Column-centers m [n, cols] in place; reports whether anything varied.
bool center_columns(std::vector<double>& m, std::size_t n, std::size_t cols) {
  bool any = false;
  for (std::size_t j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += m[i * cols + j];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      m[i * cols + j] -= mean;
      any = any || m[i * cols + j] != 0.0;
    }
  }
  return any;
}

// n x n Gram matrix of the row vectors of m.
std::vector<double> gram(const std::vector<double>& m, std::size_t n, std::size_t cols) {
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += m[i * cols + c] * m[j * cols + c];
      g[i * n + j] = acc;
      g[j * n + i] = acc;
    }
  }
  return g;
}

}  // namespace

double cka_linear(const CkaInput& in) {
  if (in.n < 2) throw ContractError("cka_linear: need at least 2 samples");
  if (in.x.size() != in.n * in.p || in.y.size() != in.n * in.q) {
    throw DimensionError("cka_linear: matrix sizes do not match declared dimensions");
  }
  std::vector<double> xc = in.x, yc = in.y;
  bool x_var = center_columns(xc, in.n, in.p);
  bool y_var = center_columns(yc, in.n, in.q);
  if (!x_var || !y_var) throw ContractError("cka_linear: degenerate activations (zero variance)");

  // HSIC form over centered Grams: <Kx,Ky>_F / (||Kx||_F ||Ky||_F), equal to
  // the feature-space expression ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F).
  std::vector<double> kx = gram(xc, in.n, in.p);
  std::vector<double> ky = gram(yc, in.n, in.q);
  double cross = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < kx.size(); ++i) {
    cross += kx[i] * ky[i];
    nx += kx[i] * kx[i];
    ny += ky[i] * ky[i];
  }
  return cross / (std::sqrt(nx) * std::sqrt(ny));
}

void cka_features(const Tensor& tap, std::size_t max_features, std::uint64_t seed,
                  std::vector<double>& out, std::size_t& p) {
  if (tap.rank() < 2) throw DimensionError("cka_features: tap must have a batch axis");
  const std::size_t n = tap.dim(0), full = tap.numel() / n;
  const auto& v = tap.values();
  if (full <= max_features) {
    p = full;
    out = v;
    return;
  }
  // seeded stride sampling: fixed stride, seeded phase
  p = max_features;
  std::size_t stride = full / max_features;
  std::size_t phase = static_cast<std::size_t>(Rng::mix(seed, full) % stride);
  out.resize(n * p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = v[i * full + phase + j * stride];
  }
}

std::vector<int> argmax_predictions(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("argmax_predictions: expected [N,K], got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const auto& v = logits.values();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (v[i * k + j] > v[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k) {
  if (logits.rank() != 2) {
    throw DimensionError("topk_accuracy: expected [N,K], got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), kk = logits.dim(1);
  if (labels.size() != n) throw ContractError("topk_accuracy: label count mismatch");
  if (k < 1 || static_cast<std::size_t>(k) > kk) {
    throw ContractError("topk_accuracy: k=" + std::to_string(k) + " outside [1," +
                        std::to_string(kk) + "]");
  }
  const auto& v = logits.values();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= kk) {
      throw ContractError("topk_accuracy: label " + std::to_string(label) + " out of range");
    }
    double lv = v[i * kk + static_cast<std::size_t>(label)];
    // slots taken ahead of the label: strictly larger logits, plus equal
    // logits at lower class indices
    int ahead = 0;
    for (std::size_t j = 0; j < kk; ++j) {
      if (v[i * kk + j] > lv) ++ahead;
      if (j < static_cast<std::size_t>(label) && v[i * kk + j] == lv) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<double> layer_l2_report(const std::vector<Tensor>& teacher_taps,
                                    const std::vector<Tensor>& student_taps_projected) {
  if (teacher_taps.size() != student_taps_projected.size()) {
    throw ContractError("layer_l2_report: tap list lengths differ");
  }
  std::vector<double> out;
  out.reserve(teacher_taps.size());
  NoGradGuard ng;
  for (std::size_t i = 0; i < teacher_taps.size(); ++i) {
    out.push_back(feature_loss(teacher_taps[i], student_taps_projected[i]).item());
  }
  return out;
}

MemoryComparison memory_report(std::size_t baseline_peak, std::size_t sdm_peak) {
  MemoryComparison cmp;
  cmp.baseline_peak = baseline_peak;
  cmp.sdm_peak = sdm_peak;
  if (baseline_peak > 0) {
    cmp.reduction_fraction = (static_cast<double>(baseline_peak) - static_cast<double>(sdm_peak)) /
                             static_cast<double>(baseline_peak);
  }
  return cmp;
}

}  // namespace lakd
