#pragma once

#include <cstdint>
#include <vector>

#include "lakd/tensor.hpp"

namespace lakd {

// Differentiable tensor primitives. All validate shapes up front and throw
// DimensionError naming the offending axis. Recording happens only when grad
// mode is on, a tape is active, and at least one input is tracked.

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// scalar arithmetic
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// elementwise nonlinear
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);           // subgradient 0 at 0
Tensor sqrt(const Tensor& a);          // values must be > 0 when tracked
Tensor reciprocal(const Tensor& a);    // values must be nonzero

// [N,M] x [M,K]
Tensor matmul(const Tensor& a, const Tensor& b);
// [N,K] + [K] broadcast over rows
Tensor add_rowvec(const Tensor& a, const Tensor& b);

// convolution/pooling on [N,C,H,W]
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
// average over the true window overlap (padded cells excluded from the divisor)
Tensor avg_pool2d(const Tensor& a, int kernel, int stride, int padding);
// max over in-bounds cells; gradient goes to the first maximum in row-major scan
Tensor max_pool2d(const Tensor& a, int kernel, int stride, int padding);
Tensor upsample_nearest(const Tensor& a, int factor);
Tensor global_avg_pool(const Tensor& a);  // [N,C,H,W] -> [N,C]
// (x - mean[c]) / std[c] with constant per-channel stats
Tensor normalize_channels(const Tensor& a, const std::vector<double>& mean,
                          const std::vector<double>& std);
// sum over the channel axis -> [N,1,H,W]
Tensor sum_channels(const Tensor& a);
// [N,C,H,W] * [N,1,H,W] broadcast over channels
Tensor mul_broadcast_channel(const Tensor& a, const Tensor& w);

// softmax family, rowwise on [N,K]
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// mean over rows of -logp[i, labels[i]]
Tensor nll_mean(const Tensor& log_probs, const std::vector<int>& labels);

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor rowwise_sum(const Tensor& a);                    // [N,M] -> [N]
Tensor rowwise_scale(const Tensor& a, const Tensor& s); // [N,M] * [N] per row

// structure
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

}  // namespace lakd
