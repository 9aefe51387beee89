#pragma once

#include <string>

#include "lakd/tensor.hpp"

namespace lakd {

// Teacher-attention weighting of student features. The weight map is built
// once per tap from detached teacher features, then applied multiplicatively
// to the student map; gradients flow through the student side only.
struct AttentionWeight {
  Tensor map;  // [N,1,H,W]; undefined when weighting is disabled
  double alpha_pool = 0.0;
  double beta_pool = 0.0;
  bool use_abs = true;

  bool enabled() const { return alpha_pool != 0.0 || beta_pool != 0.0; }
};

// Per-position sum over channels of |T_c| (abs on) or T_c (abs off).
Tensor channel_sum(const Tensor& t, bool use_abs);

// alpha * avgpool3x3(fsum) + beta * maxpool3x3(fsum), stride 1, same
// padding. Average windows divide by their true overlap with the image; max
// windows take the max over the overlap (equivalent to replicating edges).
Tensor pool_combine(const Tensor& fsum, double alpha_pool, double beta_pool);

// Full map construction from a teacher tap; the tap is detached first and
// the result carries no graph.
AttentionWeight make_attention_weight(const Tensor& teacher_tap, double alpha_pool,
                                      double beta_pool, bool use_abs);

// student_tap * (1 + W_hat) broadcast over channels, where W_hat is the map
// normalized to unit mean over each sample's spatial positions. Disabled
// weighting (alpha_pool == beta_pool == 0) returns the input handle
// untouched.
Tensor apply_weighting(const Tensor& student_tap, const AttentionWeight& w);

// One sample of a [N,1,H,W] map as a P5 PGM, min-max scaled to 0..255.
void export_pgm(const Tensor& map, std::size_t sample, const std::string& path);

}  // namespace lakd
