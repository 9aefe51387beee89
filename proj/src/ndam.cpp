#include "lakd/ndam.hpp"

#include <algorithm>
#include <fstream>

#include "lakd/error.hpp"
#include "lakd/ops.hpp"

namespace lakd {

Tensor channel_sum(const Tensor& t, bool use_abs) {
  if (t.rank() != 4) {
    throw DimensionError("channel_sum: expected [N,C,H,W], got " + shape_str(t.shape()));
  }
  return use_abs ? sum_channels(abs(t)) : sum_channels(t);
}

Tensor pool_combine(const Tensor& fsum, double alpha_pool, double beta_pool) {
  if (fsum.rank() != 4 || fsum.dim(1) != 1) {
    throw DimensionError("pool_combine: expected [N,1,H,W], got " + shape_str(fsum.shape()));
  }
  if (fsum.dim(2) < 3 || fsum.dim(3) < 3) {
    throw DimensionError("pool_combine: spatial size below the 3x3 kernel: " +
                         shape_str(fsum.shape()));
  }
  if (alpha_pool == 0.0 && beta_pool == 0.0) return Tensor::zeros(fsum.shape());
  Tensor out;
  if (alpha_pool != 0.0) out = scalar_mul(avg_pool2d(fsum, 3, 1, 1), alpha_pool);
  if (beta_pool != 0.0) {
    Tensor mx = scalar_mul(max_pool2d(fsum, 3, 1, 1), beta_pool);
    out = out.defined() ? add(out, mx) : mx;
  }
  return out;
}

AttentionWeight make_attention_weight(const Tensor& teacher_tap, double alpha_pool,
                                      double beta_pool, bool use_abs) {
  AttentionWeight w;
  w.alpha_pool = alpha_pool;
  w.beta_pool = beta_pool;
  w.use_abs = use_abs;
  if (!w.enabled()) return w;  // disabled: no map at all
  NoGradGuard ng;  // the map is a constant; no teacher gradient ever
  w.map = pool_combine(channel_sum(teacher_tap.detach(), use_abs), alpha_pool, beta_pool);
  return w;
}

Tensor apply_weighting(const Tensor& student_tap, const AttentionWeight& w) {
  if (!w.enabled()) return student_tap;  // identity, same handle
  if (student_tap.rank() != 4) {
    throw DimensionError("apply_weighting: expected [N,C,H,W], got " +
                         shape_str(student_tap.shape()));
  }
  if (!w.map.defined()) throw ContractError("apply_weighting: enabled weighting without a map");
  if (w.map.dim(0) != student_tap.dim(0) || w.map.dim(2) != student_tap.dim(2) ||
      w.map.dim(3) != student_tap.dim(3)) {
    throw DimensionError("apply_weighting: map " + shape_str(w.map.shape()) +
                         " does not match features " + shape_str(student_tap.shape()));
  }
  const std::size_t n = w.map.dim(0), hw = w.map.dim(2) * w.map.dim(3);
  const auto& mv = w.map.values();
  // 1 + map/mean(map) per sample, built as a plain constant
  std::vector<double> scaled(n * hw);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < hw; ++j) m += mv[i * hw + j];
    m /= static_cast<double>(hw);
    if (m == 0.0) {
      throw ContractError("apply_weighting: zero-mean attention map at sample " +
                          std::to_string(i));
    }
    for (std::size_t j = 0; j < hw; ++j) scaled[i * hw + j] = 1.0 + mv[i * hw + j] / m;
  }
  Tensor one_plus = Tensor::from(w.map.shape(), std::move(scaled));
  return mul_broadcast_channel(student_tap, one_plus);
}

void export_pgm(const Tensor& map, std::size_t sample, const std::string& path) {
  if (map.rank() != 4 || map.dim(1) != 1) {
    throw DimensionError("export_pgm: expected [N,1,H,W], got " + shape_str(map.shape()));
  }
  if (sample >= map.dim(0)) {
    throw ContractError("export_pgm: sample " + std::to_string(sample) + " out of range");
  }
  const std::size_t h = map.dim(2), w = map.dim(3), hw = h * w;
  const double* v = map.values().data() + sample * hw;
  double lo = v[0], hi = v[0];
  for (std::size_t i = 1; i < hw; ++i) {
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("export_pgm: cannot open " + path + " for writing");
  f << "P5\n" << w << " " << h << "\n255\n";
  double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    f.put(static_cast<char>(static_cast<unsigned char>((v[i] - lo) * scale + 0.5)));
  }
  if (!f) throw FormatError("export_pgm: write failed for " + path);
}

}  // namespace lakd
