#pragma once

#include <cstdint>
#include <vector>

#include "lakd/tensor.hpp"

namespace lakd {

// Matched predictions for the rescue-rate metric.
struct PredictionLog {
  std::vector<int> teacher_pred;
  std::vector<int> student_pred;
  std::vector<int> labels;
};

// Fraction of teacher-misclassified samples the student classifies
// correctly. Undefined (and loudly rejected) when the teacher is never
// wrong.
double ek_metric(const PredictionLog& log);

// Row-major activation matrices with one row per sample.
struct CkaInput {
  std::vector<double> x;  // [n, p]
  std::vector<double> y;  // [n, q]
  std::size_t n = 0, p = 0, q = 0;
};

// Linear centered kernel alignment in [0,1]; 1 for any orthogonal transform
// of the same activations, invariant to isotropic scaling.
double cka_linear(const CkaInput& in);

// Per-sample flattened features from a [N,C,H,W] tap, stride-sampled down to
// at most max_features columns (seeded, deterministic).
void cka_features(const Tensor& tap, std::size_t max_features, std::uint64_t seed,
                  std::vector<double>& out, std::size_t& p);

// Argmax class per row; ties go to the lower class index.
std::vector<int> argmax_predictions(const Tensor& logits);

// Fraction of samples whose label ranks among the k largest logits; a tie on
// the k-th slot is resolved toward the lower class index.
double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k);

// feature_loss per alignment layer, in layer order.
std::vector<double> layer_l2_report(const std::vector<Tensor>& teacher_taps,
                                    const std::vector<Tensor>& student_taps_projected);

// Peak retained-activation comparison between an end-to-end and a
// detach-partitioned step on the same net/batch.
struct MemoryComparison {
  std::size_t baseline_peak = 0;
  std::size_t sdm_peak = 0;
  double reduction_fraction = 0.0;  // (baseline - sdm) / baseline
};

MemoryComparison memory_report(std::size_t baseline_peak, std::size_t sdm_peak);

}  // namespace lakd
