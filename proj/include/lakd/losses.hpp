#pragma once

#include <vector>

#include "lakd/tensor.hpp"

namespace lakd {

// Mixing weights for the composed objectives. alpha splits hard vs. the
// distillation term, beta scales feature alignment, temperature softens the
// logit match. Distinct from the pooling weights in AttentionWeight, which
// reuse the alpha/beta names for an unrelated role.
struct LossWeights {
  double alpha = 0.5;
  double beta = 1.0;
  double temperature = 4.0;
};

void validate_weights(const LossWeights& w);

// Mean cross-entropy of logits against integer labels.
Tensor hard_loss(const Tensor& logits, const std::vector<int>& labels);

// Mean over the batch of KL(softmax(teacher/T) || softmax(student/T)) * T^2.
// Gradients flow into the student side only in practice (teacher logits
// arrive untracked), but the formula is symmetric in implementation.
Tensor soft_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

// (1/N) * sum_i ||a_i - b_i||^2 over all feature elements of each sample.
// Symmetric; inputs must already share a shape (projection applied upstream).
Tensor feature_loss(const Tensor& a, const Tensor& b);

// Attention transfer: per sample, the spatial map sum_c tap_c^2 is flattened
// and L2-normalized, and the loss is the mean squared distance between the
// teacher and student normalized maps. Channel counts may differ; batch and
// spatial sizes must match. All-zero maps are rejected loudly.
Tensor attention_loss(const Tensor& teacher_tap, const Tensor& student_tap);

// alpha*hard + (1-alpha)*soft + beta*sum(features). Terms with a zero weight
// are dropped from the graph entirely rather than multiplied by zero, so the
// degenerate configurations reproduce the single-term losses bitwise.
Tensor total_loss_traditional(const LossWeights& w, const Tensor& hard, const Tensor& soft,
                              const std::vector<Tensor>& feature_losses);

// alpha*hard + (1-alpha)*attention + beta*feature. Undefined tensors stand
// for absent terms (a block without logits passes no hard/attention loss);
// zero-weight terms are dropped the same way as above.
Tensor total_loss_lakd(const LossWeights& w, const Tensor& hard, const Tensor& attention,
                       const Tensor& feature);

}  // namespace lakd
