#include "lakd/losses.hpp"

#include <string>

#include "lakd/error.hpp"
#include "lakd/ops.hpp"

namespace lakd {

void validate_weights(const LossWeights& w) {
  if (w.alpha < 0.0 || w.alpha > 1.0) {
    throw ConfigError("loss weights: alpha must lie in [0,1], got " + std::to_string(w.alpha));
  }
  if (w.beta < 0.0) {
    throw ConfigError("loss weights: beta must be non-negative, got " + std::to_string(w.beta));
  }
  if (!(w.temperature > 0.0)) {
    throw ConfigError("loss weights: temperature must be positive, got " +
                      std::to_string(w.temperature));
  }
}

Tensor hard_loss(const Tensor& logits, const std::vector<int>& labels) {
  return nll_mean(log_softmax(logits), labels);
}

Tensor soft_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("soft_loss: shape mismatch " + shape_str(student_logits.shape()) +
                         " vs " + shape_str(teacher_logits.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError("soft_loss: temperature must be positive");
  double inv_t = 1.0 / temperature;
  Tensor log_ps = log_softmax(scalar_mul(student_logits, inv_t));
  Tensor soft_t = scalar_mul(teacher_logits, inv_t);
  Tensor p_t = softmax(soft_t);
  Tensor log_pt = log_softmax(soft_t);
  Tensor kl = sum(mul(p_t, sub(log_pt, log_ps)));
  double n = static_cast<double>(student_logits.dim(0));
  return scalar_mul(kl, temperature * temperature / n);
}

Tensor feature_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("feature_loss: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor d = sub(a, b);
  return scalar_mul(sum(mul(d, d)), 1.0 / static_cast<double>(a.dim(0)));
}

namespace {

// Flattened, per-sample L2-normalized squared-activation map.
Tensor normalized_attention(const Tensor& tap, const char* side) {
  const std::size_t n = tap.dim(0), hw = tap.dim(2) * tap.dim(3);
  // loud rejection of all-zero maps before any division enters the graph
  {
    const auto& v = tap.values();
    const std::size_t per = tap.numel() / n;
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < per && !any; ++j) any = v[i * per + j] != 0.0;
      if (!any) {
        throw ContractError(std::string("attention_loss: degenerate attention map (all-zero ") +
                            side + " features) at sample " + std::to_string(i));
      }
    }
  }
  Tensor amap = sum_channels(mul(tap, tap));
  Tensor flat = reshape(amap, {n, hw});
  Tensor norms = sqrt(rowwise_sum(mul(flat, flat)));
  return rowwise_scale(flat, reciprocal(norms));
}

}  // namespace

Tensor attention_loss(const Tensor& teacher_tap, const Tensor& student_tap) {
  if (teacher_tap.rank() != 4 || student_tap.rank() != 4) {
    throw DimensionError("attention_loss: taps must be [N,C,H,W]");
  }
  if (teacher_tap.dim(0) != student_tap.dim(0) || teacher_tap.dim(2) != student_tap.dim(2) ||
      teacher_tap.dim(3) != student_tap.dim(3)) {
    throw DimensionError("attention_loss: batch/spatial mismatch " +
                         shape_str(teacher_tap.shape()) + " vs " +
                         shape_str(student_tap.shape()));
  }
  Tensor at = normalized_attention(teacher_tap, "teacher");
  Tensor as = normalized_attention(student_tap, "student");
  Tensor d = sub(at, as);
  return scalar_mul(sum(mul(d, d)), 1.0 / static_cast<double>(teacher_tap.dim(0)));
}

namespace {

// w * term, appended to acc (which may start undefined). A weight of exactly
// zero or an undefined term contributes nothing — and builds no graph.
void accumulate(Tensor& acc, const Tensor& term, double w) {
  if (!term.defined() || w == 0.0) return;
  Tensor scaled = scalar_mul(term, w);
  acc = acc.defined() ? add(acc, scaled) : scaled;
}

}  // namespace

Tensor total_loss_traditional(const LossWeights& w, const Tensor& hard, const Tensor& soft,
                              const std::vector<Tensor>& feature_losses) {
  validate_weights(w);
  Tensor total;
  accumulate(total, hard, w.alpha);
  accumulate(total, soft, 1.0 - w.alpha);
  if (w.beta != 0.0) {
    Tensor fsum;
    for (const Tensor& f : feature_losses) {
      if (!f.defined()) continue;
      fsum = fsum.defined() ? add(fsum, f) : f;
    }
    accumulate(total, fsum, w.beta);
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor total_loss_lakd(const LossWeights& w, const Tensor& hard, const Tensor& attention,
                       const Tensor& feature) {
  validate_weights(w);
  Tensor total;
  accumulate(total, hard, w.alpha);
  accumulate(total, attention, 1.0 - w.alpha);
  accumulate(total, feature, w.beta);
  return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace lakd
