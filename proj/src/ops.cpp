#include "lakd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lakd {

namespace {

// Recording context for a 1- or 2-input op.
struct Rec {
  Tape* tape = nullptr;
  int pa = -1;
  int pb = -1;
  bool on = false;
};

Rec begin1(const Tensor& a) {
  Rec r;
  if (!GradMode::enabled()) return r;
  r.tape = Tape::active();
  if (!r.tape || !a.tracked()) return r;
  r.pa = r.tape->node_of(a);
  r.on = true;
  return r;
}

Rec begin2(const Tensor& a, const Tensor& b) {
  Rec r;
  if (!GradMode::enabled()) return r;
  r.tape = Tape::active();
  if (!r.tape) return r;
  if (!a.tracked() && !b.tracked()) return r;
  r.pa = r.tape->node_of(a);
  r.pb = r.tape->node_of(b);
  r.on = true;
  return r;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void check_rank(const char* op, const Tensor& a, std::size_t rank, const char* what) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

Tensor alias_with_shape(const Tensor& a, Shape shape) {
  auto nd = std::make_shared<detail::TensorData>();
  nd->shape = std::move(shape);
  nd->values = a.storage();
  return Tensor::wrap(nd);
}

// Valid half-open ow range for kernel column j: 0 <= ow*s - p + j < W.
inline void conv_ow_range(long j, std::size_t W, std::size_t OW, long is, long ip,
                          std::size_t& lo, std::size_t& hi) {
  long lo_l = (ip - j + is - 1) / is;
  if (lo_l < 0) lo_l = 0;
  long hi_l = (static_cast<long>(W) - 1 + ip - j) / is;
  if (hi_l > static_cast<long>(OW) - 1) hi_l = static_cast<long>(OW) - 1;
  lo = static_cast<std::size_t>(std::max(0L, lo_l));
  hi = static_cast<std::size_t>(std::max(-1L, hi_l) + 1);
}

}  // namespace

// ------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin2(a, b); r.on) {
    int pa = r.pa, pb = r.pb;
    r.tape->add_node({pa, pb}, t, 0, 0, [pa, pb, n](Tape& tp, const std::vector<double>& g) {
      if (pa >= 0) {
        auto& ga = tp.grad_buf(pa);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb >= 0) {
        auto& gb = tp.grad_buf(pb);
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return t;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin2(a, b); r.on) {
    int pa = r.pa, pb = r.pb;
    r.tape->add_node({pa, pb}, t, 0, 0, [pa, pb, n](Tape& tp, const std::vector<double>& g) {
      if (pa >= 0) {
        auto& ga = tp.grad_buf(pa);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb >= 0) {
        auto& gb = tp.grad_buf(pb);
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return t;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin2(a, b); r.on) {
    int pa = r.pa, pb = r.pb;
    Storage sa = a.storage(), sb = b.storage();
    r.tape->add_node({pa, pb}, t, 2, 2 * n,
                     [pa, pb, n, sa, sb](Tape& tp, const std::vector<double>& g) {
                       if (pa >= 0) {
                         auto& ga = tp.grad_buf(pa);
                         for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (*sb)[i];
                       }
                       if (pb >= 0) {
                         auto& gb = tp.grad_buf(pb);
                         for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * (*sa)[i];
                       }
                     });
  }
  return t;
}

Tensor scalar_mul(const Tensor& a, double c) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * c;
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [pa, c, n](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return t;
}

Tensor scalar_add(const Tensor& a, double c) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + c;
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [pa, n](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return t;
}

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor relu(const Tensor& a) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sa = a.storage();
    r.tape->add_node({pa}, t, 1, n, [pa, n, sa](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) {
        if ((*sa)[i] > 0.0) ga[i] += g[i];
      }
    });
  }
  return t;
}

Tensor abs(const Tensor& a) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::fabs(av[i]);
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sa = a.storage();
    r.tape->add_node({pa}, t, 1, n, [pa, n, sa](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) {
        double v = (*sa)[i];
        if (v > 0.0)
          ga[i] += g[i];
        else if (v < 0.0)
          ga[i] -= g[i];
      }
    });
  }
  return t;
}

Tensor sqrt(const Tensor& a) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(av[i]);
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sy = t.storage();
    r.tape->add_node({pa}, t, 1, n, [pa, n, sy](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * 0.5 / (*sy)[i];
    });
  }
  return t;
}

Tensor reciprocal(const Tensor& a) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / av[i];
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sy = t.storage();
    r.tape->add_node({pa}, t, 1, n, [pa, n, sy](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) {
        double y = (*sy)[i];
        ga[i] -= g[i] * y * y;
      }
    });
  }
  return t;
}

// ------------------------------------------------------------------ matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank("matmul", a, 2, "lhs");
  check_rank("matmul", b, 2, "rhs");
  std::size_t N = a.dim(0), M = a.dim(1), M2 = b.dim(0), K = b.dim(1);
  if (M != M2) {
    throw DimensionError("matmul: inner axis mismatch, lhs cols " + std::to_string(M) +
                         " vs rhs rows " + std::to_string(M2));
  }
  std::vector<double> out(N * K, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      double x = av[i * M + m];
      const double* brow = &bv[m * K];
      double* orow = &out[i * K];
      for (std::size_t k = 0; k < K; ++k) orow[k] += x * brow[k];
    }
  }
  Tensor t = Tensor::from({N, K}, std::move(out));
  if (Rec r = begin2(a, b); r.on) {
    int pa = r.pa, pb = r.pb;
    Storage sa = a.storage(), sb = b.storage();
    r.tape->add_node(
        {pa, pb}, t, 2, N * M + M * K,
        [pa, pb, N, M, K, sa, sb](Tape& tp, const std::vector<double>& g) {
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::size_t i = 0; i < N; ++i) {
              for (std::size_t m = 0; m < M; ++m) {
                const double* grow = &g[i * K];
                const double* brow = &(*sb)[m * K];
                double acc = 0.0;
                for (std::size_t k = 0; k < K; ++k) acc += grow[k] * brow[k];
                ga[i * M + m] += acc;
              }
            }
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::size_t i = 0; i < N; ++i) {
              for (std::size_t m = 0; m < M; ++m) {
                double x = (*sa)[i * M + m];
                const double* grow = &g[i * K];
                double* gbrow = &gb[m * K];
                for (std::size_t k = 0; k < K; ++k) gbrow[k] += x * grow[k];
              }
            }
          }
        });
  }
  return t;
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  check_rank("add_rowvec", a, 2, "matrix");
  check_rank("add_rowvec", b, 1, "row vector");
  std::size_t N = a.dim(0), K = a.dim(1);
  if (b.dim(0) != K) {
    throw DimensionError("add_rowvec: column axis mismatch, matrix cols " + std::to_string(K) +
                         " vs vector length " + std::to_string(b.dim(0)));
  }
  std::vector<double> out(N * K);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] = av[i * K + k] + bv[k];
  Tensor t = Tensor::from({N, K}, std::move(out));
  if (Rec r = begin2(a, b); r.on) {
    int pa = r.pa, pb = r.pb;
    r.tape->add_node({pa, pb}, t, 0, 0, [pa, pb, N, K](Tape& tp, const std::vector<double>& g) {
      if (pa >= 0) {
        auto& ga = tp.grad_buf(pa);
        for (std::size_t i = 0; i < N * K; ++i) ga[i] += g[i];
      }
      if (pb >= 0) {
        auto& gb = tp.grad_buf(pb);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t k = 0; k < K; ++k) gb[k] += g[i * K + k];
      }
    });
  }
  return t;
}

// ------------------------------------------------------------ conv / pool

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  check_rank("conv2d", input, 4, "input");
  check_rank("conv2d", kernel, 4, "kernel");
  if (stride < 1) throw ContractError("conv2d: stride must be positive");
  if (padding < 0) throw ContractError("conv2d: padding must be non-negative");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t K = kernel.dim(0), KC = kernel.dim(1), KH = kernel.dim(2), KW = kernel.dim(3);
  if (KC != C) {
    throw DimensionError("conv2d: channel axis mismatch, input C=" + std::to_string(C) +
                         " vs kernel C=" + std::to_string(KC));
  }
  const std::size_t p = static_cast<std::size_t>(padding), s = static_cast<std::size_t>(stride);
  if (KH > H + 2 * p) {
    throw DimensionError("conv2d: kernel height " + std::to_string(KH) +
                         " exceeds padded input height " + std::to_string(H + 2 * p));
  }
  if (KW > W + 2 * p) {
    throw DimensionError("conv2d: kernel width " + std::to_string(KW) +
                         " exceeds padded input width " + std::to_string(W + 2 * p));
  }
  const std::size_t OH = (H + 2 * p - KH) / s + 1;
  const std::size_t OW = (W + 2 * p - KW) / s + 1;

  std::vector<double> out(N * K * OH * OW, 0.0);
  const auto& in = input.values();
  const auto& ker = kernel.values();
  const long ip = static_cast<long>(p), is = static_cast<long>(s);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      double* oplane = &out[(n * K + k) * OH * OW];
      for (std::size_t c = 0; c < C; ++c) {
        const double* iplane = &in[(n * C + c) * H * W];
        const double* kplane = &ker[(k * C + c) * KH * KW];
        for (std::size_t i = 0; i < KH; ++i) {
          for (std::size_t oh = 0; oh < OH; ++oh) {
            long y = static_cast<long>(oh) * is - ip + static_cast<long>(i);
            if (y < 0 || y >= static_cast<long>(H)) continue;
            const double* irow = &iplane[static_cast<std::size_t>(y) * W];
            double* orow = &oplane[oh * OW];
            for (std::size_t j = 0; j < KW; ++j) {
              double w = kplane[i * KW + j];
              std::size_t lo, hi;
              conv_ow_range(static_cast<long>(j), W, OW, is, ip, lo, hi);
              long xoff = -ip + static_cast<long>(j);
              for (std::size_t ow = lo; ow < hi; ++ow) {
                orow[ow] += w * irow[static_cast<std::size_t>(static_cast<long>(ow) * is + xoff)];
              }
            }
          }
        }
      }
    }
  }
  Tensor t = Tensor::from({N, K, OH, OW}, std::move(out));
  if (Rec r = begin2(input, kernel); r.on) {
    int pa = r.pa, pb = r.pb;
    Storage sin = input.storage(), sker = kernel.storage();
    r.tape->add_node(
        {pa, pb}, t, 2, input.numel() + kernel.numel(),
        [=](Tape& tp, const std::vector<double>& g) {
          std::vector<double>* din = pa >= 0 ? &tp.grad_buf(pa) : nullptr;
          std::vector<double>* dker = pb >= 0 ? &tp.grad_buf(pb) : nullptr;
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t k = 0; k < K; ++k) {
              const double* gplane = &g[(n * K + k) * OH * OW];
              for (std::size_t c = 0; c < C; ++c) {
                const double* iplane = &(*sin)[(n * C + c) * H * W];
                const double* kplane = &(*sker)[(k * C + c) * KH * KW];
                double* diplane = din ? &(*din)[(n * C + c) * H * W] : nullptr;
                for (std::size_t i = 0; i < KH; ++i) {
                  for (std::size_t oh = 0; oh < OH; ++oh) {
                    long y = static_cast<long>(oh) * is - ip + static_cast<long>(i);
                    if (y < 0 || y >= static_cast<long>(H)) continue;
                    const double* irow = &iplane[static_cast<std::size_t>(y) * W];
                    double* dirow = din ? &diplane[static_cast<std::size_t>(y) * W] : nullptr;
                    const double* grow = &gplane[oh * OW];
                    for (std::size_t j = 0; j < KW; ++j) {
                      double w = kplane[i * KW + j];
                      std::size_t lo, hi;
                      conv_ow_range(static_cast<long>(j), W, OW, is, ip, lo, hi);
                      long xoff = -ip + static_cast<long>(j);
                      double acc = 0.0;
                      for (std::size_t ow = lo; ow < hi; ++ow) {
                        std::size_t x = static_cast<std::size_t>(static_cast<long>(ow) * is + xoff);
                        double go = grow[ow];
                        if (dirow) dirow[x] += go * w;
                        acc += go * irow[x];
                      }
                      if (dker) (*dker)[(k * C + c) * KH * KW + i * KW + j] += acc;
                    }
                  }
                }
              }
            }
          }
        });
  }
  return t;
}

namespace {
void check_pool_args(const char* op, const Tensor& a, int kernel, int stride, int padding) {
  check_rank(op, a, 4, "input");
  if (kernel < 1) throw ContractError(std::string(op) + ": kernel must be positive");
  if (stride < 1) throw ContractError(std::string(op) + ": stride must be positive");
  if (padding < 0) throw ContractError(std::string(op) + ": padding must be non-negative");
  if (padding >= kernel) {
    throw ContractError(std::string(op) + ": padding must be smaller than kernel");
  }
  std::size_t H = a.dim(2), W = a.dim(3);
  std::size_t k = static_cast<std::size_t>(kernel), p = static_cast<std::size_t>(padding);
  if (k > H + 2 * p || k > W + 2 * p) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(k) +
                         " exceeds padded spatial size of " + shape_str(a.shape()));
  }
}
}  // namespace

Tensor avg_pool2d(const Tensor& a, int kernel, int stride, int padding) {
  check_pool_args("avg_pool2d", a, kernel, stride, padding);
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const long k = kernel, s = stride, p = padding;
  const std::size_t OH = (H + 2 * p - k) / s + 1, OW = (W + 2 * p - k) / s + 1;
  std::vector<double> out(N * C * OH * OW, 0.0);
  const auto& in = a.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* iplane = &in[nc * H * W];
    double* oplane = &out[nc * OH * OW];
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        long y0 = static_cast<long>(oh) * s - p, x0 = static_cast<long>(ow) * s - p;
        long ylo = std::max(0L, y0), yhi = std::min(static_cast<long>(H), y0 + k);
        long xlo = std::max(0L, x0), xhi = std::min(static_cast<long>(W), x0 + k);
        double acc = 0.0;
        for (long y = ylo; y < yhi; ++y)
          for (long x = xlo; x < xhi; ++x) acc += iplane[y * W + x];
        oplane[oh * OW + ow] = acc / static_cast<double>((yhi - ylo) * (xhi - xlo));
      }
    }
  }
  Tensor t = Tensor::from({N, C, OH, OW}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        double* gplane = &ga[nc * H * W];
        const double* goplane = &g[nc * OH * OW];
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            long y0 = static_cast<long>(oh) * s - p, x0 = static_cast<long>(ow) * s - p;
            long ylo = std::max(0L, y0), yhi = std::min(static_cast<long>(H), y0 + k);
            long xlo = std::max(0L, x0), xhi = std::min(static_cast<long>(W), x0 + k);
            double go = goplane[oh * OW + ow] / static_cast<double>((yhi - ylo) * (xhi - xlo));
            for (long y = ylo; y < yhi; ++y)
              for (long x = xlo; x < xhi; ++x) gplane[y * W + x] += go;
          }
        }
      }
    });
  }
  return t;
}

Tensor max_pool2d(const Tensor& a, int kernel, int stride, int padding) {
  check_pool_args("max_pool2d", a, kernel, stride, padding);
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const long k = kernel, s = stride, p = padding;
  const std::size_t OH = (H + 2 * p - k) / s + 1, OW = (W + 2 * p - k) / s + 1;
  std::vector<double> out(N * C * OH * OW);
  auto argmax = std::make_shared<std::vector<std::size_t>>(N * C * OH * OW);
  const auto& in = a.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* iplane = &in[nc * H * W];
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        long y0 = static_cast<long>(oh) * s - p, x0 = static_cast<long>(ow) * s - p;
        long ylo = std::max(0L, y0), yhi = std::min(static_cast<long>(H), y0 + k);
        long xlo = std::max(0L, x0), xhi = std::min(static_cast<long>(W), x0 + k);
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        // first maximum in row-major scan wins
        for (long y = ylo; y < yhi; ++y) {
          for (long x = xlo; x < xhi; ++x) {
            double v = iplane[y * W + x];
            if (v > best) {
              best = v;
              best_idx = static_cast<std::size_t>(y * W + x);
            }
          }
        }
        out[nc * OH * OW + oh * OW + ow] = best;
        (*argmax)[nc * OH * OW + oh * OW + ow] = best_idx;
      }
    }
  }
  Tensor t = Tensor::from({N, C, OH, OW}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 1, N * C * OH * OW,
                     [=](Tape& tp, const std::vector<double>& g) {
                       auto& ga = tp.grad_buf(pa);
                       for (std::size_t nc = 0; nc < N * C; ++nc) {
                         for (std::size_t o = 0; o < OH * OW; ++o) {
                           ga[nc * H * W + (*argmax)[nc * OH * OW + o]] += g[nc * OH * OW + o];
                         }
                       }
                     });
  }
  return t;
}

Tensor upsample_nearest(const Tensor& a, int factor) {
  check_rank("upsample_nearest", a, 4, "input");
  if (factor < 1) throw ContractError("upsample_nearest: factor must be positive");
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t f = static_cast<std::size_t>(factor), OH = H * f, OW = W * f;
  std::vector<double> out(N * C * OH * OW);
  const auto& in = a.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* iplane = &in[nc * H * W];
    double* oplane = &out[nc * OH * OW];
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t x = 0; x < OW; ++x) oplane[y * OW + x] = iplane[(y / f) * W + x / f];
  }
  Tensor t = Tensor::from({N, C, OH, OW}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* gplane = &g[nc * OH * OW];
        double* gaplane = &ga[nc * H * W];
        for (std::size_t y = 0; y < OH; ++y)
          for (std::size_t x = 0; x < OW; ++x) gaplane[(y / f) * W + x / f] += gplane[y * OW + x];
      }
    });
  }
  return t;
}

Tensor global_avg_pool(const Tensor& a) {
  check_rank("global_avg_pool", a, 4, "input");
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const double inv = 1.0 / static_cast<double>(H * W);
  std::vector<double> out(N * C, 0.0);
  const auto& in = a.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const double* iplane = &in[nc * H * W];
    for (std::size_t i = 0; i < H * W; ++i) acc += iplane[i];
    out[nc] = acc * inv;
  }
  Tensor t = Tensor::from({N, C}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        double go = g[nc] * inv;
        double* gaplane = &ga[nc * H * W];
        for (std::size_t i = 0; i < H * W; ++i) gaplane[i] += go;
      }
    });
  }
  return t;
}

Tensor normalize_channels(const Tensor& a, const std::vector<double>& mean,
                          const std::vector<double>& std) {
  check_rank("normalize_channels", a, 4, "input");
  const std::size_t N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  if (mean.size() != C || std.size() != C) {
    throw DimensionError("normalize_channels: channel axis has " + std::to_string(C) +
                         " entries but stats have " + std::to_string(mean.size()) + "/" +
                         std::to_string(std.size()));
  }
  for (double s : std) {
    if (s == 0.0) throw ContractError("normalize_channels: zero std");
  }
  std::vector<double> out(a.numel());
  const auto& in = a.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double m = mean[c], inv = 1.0 / std[c];
      const double* ip = &in[(n * C + c) * HW];
      double* op = &out[(n * C + c) * HW];
      for (std::size_t i = 0; i < HW; ++i) op[i] = (ip[i] - m) * inv;
    }
  }
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    std::vector<double> inv(C);
    for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std[c];
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double iv = inv[c];
          const double* gp = &g[(n * C + c) * HW];
          double* gap = &ga[(n * C + c) * HW];
          for (std::size_t i = 0; i < HW; ++i) gap[i] += gp[i] * iv;
        }
      }
    });
  }
  return t;
}

Tensor sum_channels(const Tensor& a) {
  check_rank("sum_channels", a, 4, "input");
  const std::size_t N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<double> out(N * HW, 0.0);
  const auto& in = a.values();
  for (std::size_t n = 0; n < N; ++n) {
    double* op = &out[n * HW];
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = &in[(n * C + c) * HW];
      for (std::size_t i = 0; i < HW; ++i) op[i] += ip[i];
    }
  }
  Tensor t = Tensor::from({N, 1, a.dim(2), a.dim(3)}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t n = 0; n < N; ++n) {
        const double* gp = &g[n * HW];
        for (std::size_t c = 0; c < C; ++c) {
          double* gap = &ga[(n * C + c) * HW];
          for (std::size_t i = 0; i < HW; ++i) gap[i] += gp[i];
        }
      }
    });
  }
  return t;
}

Tensor mul_broadcast_channel(const Tensor& a, const Tensor& w) {
  check_rank("mul_broadcast_channel", a, 4, "input");
  check_rank("mul_broadcast_channel", w, 4, "weight map");
  const std::size_t N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  if (w.dim(0) != N) {
    throw DimensionError("mul_broadcast_channel: batch axis mismatch " +
                         std::to_string(w.dim(0)) + " vs " + std::to_string(N));
  }
  if (w.dim(1) != 1) {
    throw DimensionError("mul_broadcast_channel: weight map channel axis must be 1, got " +
                         std::to_string(w.dim(1)));
  }
  if (w.dim(2) != a.dim(2) || w.dim(3) != a.dim(3)) {
    throw DimensionError("mul_broadcast_channel: spatial axes mismatch " + shape_str(w.shape()) +
                         " vs " + shape_str(a.shape()));
  }
  std::vector<double> out(a.numel());
  const auto& in = a.values();
  const auto& wv = w.values();
  for (std::size_t n = 0; n < N; ++n) {
    const double* wp = &wv[n * HW];
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = &in[(n * C + c) * HW];
      double* op = &out[(n * C + c) * HW];
      for (std::size_t i = 0; i < HW; ++i) op[i] = ip[i] * wp[i];
    }
  }
  Tensor t = Tensor::from(a.shape(), std::move(out));
  if (Rec r = begin2(a, w); r.on) {
    int pa = r.pa, pb = r.pb;
    Storage sa = a.storage(), sw = w.storage();
    r.tape->add_node(
        {pa, pb}, t, 2, a.numel() + w.numel(), [=](Tape& tp, const std::vector<double>& g) {
          for (std::size_t n = 0; n < N; ++n) {
            const double* wp = &(*sw)[n * HW];
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = &g[(n * C + c) * HW];
              if (pa >= 0) {
                double* gap = &tp.grad_buf(pa)[(n * C + c) * HW];
                for (std::size_t i = 0; i < HW; ++i) gap[i] += gp[i] * wp[i];
              }
              if (pb >= 0) {
                const double* ip = &(*sa)[(n * C + c) * HW];
                double* gwp = &tp.grad_buf(pb)[n * HW];
                for (std::size_t i = 0; i < HW; ++i) gwp[i] += gp[i] * ip[i];
              }
            }
          }
        });
  }
  return t;
}

// ----------------------------------------------------------------- softmax

Tensor softmax(const Tensor& a) {
  check_rank("softmax", a, 2, "input");
  const std::size_t N = a.dim(0), K = a.dim(1);
  std::vector<double> out(N * K);
  const auto& in = a.values();
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = &in[i * K];
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] = std::exp(row[k] - mx) / z;
  }
  Tensor t = Tensor::from({N, K}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sy = t.storage();
    r.tape->add_node({pa}, t, 1, N * K, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < N; ++i) {
        const double* yrow = &(*sy)[i * K];
        const double* grow = &g[i * K];
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += grow[k] * yrow[k];
        for (std::size_t k = 0; k < K; ++k) ga[i * K + k] += yrow[k] * (grow[k] - dot);
      }
    });
  }
  return t;
}

Tensor log_softmax(const Tensor& a) {
  check_rank("log_softmax", a, 2, "input");
  const std::size_t N = a.dim(0), K = a.dim(1);
  std::vector<double> out(N * K);
  const auto& in = a.values();
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = &in[i * K];
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    double lz = std::log(z) + mx;
    for (std::size_t k = 0; k < K; ++k) out[i * K + k] = row[k] - lz;
  }
  Tensor t = Tensor::from({N, K}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    Storage sy = t.storage();
    r.tape->add_node({pa}, t, 1, N * K, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < N; ++i) {
        const double* yrow = &(*sy)[i * K];
        const double* grow = &g[i * K];
        double gs = 0.0;
        for (std::size_t k = 0; k < K; ++k) gs += grow[k];
        for (std::size_t k = 0; k < K; ++k) ga[i * K + k] += grow[k] - std::exp(yrow[k]) * gs;
      }
    });
  }
  return t;
}

Tensor nll_mean(const Tensor& log_probs, const std::vector<int>& labels) {
  check_rank("nll_mean", log_probs, 2, "log probs");
  const std::size_t N = log_probs.dim(0), K = log_probs.dim(1);
  if (labels.size() != N) {
    throw DimensionError("nll_mean: batch axis mismatch, " + std::to_string(N) +
                         " rows vs " + std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
      throw ContractError("nll_mean: label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " outside [0," + std::to_string(K) + ")");
    }
  }
  const auto& in = log_probs.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) acc -= in[i * K + static_cast<std::size_t>(labels[i])];
  Tensor t = Tensor::scalar(acc / static_cast<double>(N));
  if (Rec r = begin1(log_probs); r.on) {
    int pa = r.pa;
    std::vector<int> lab = labels;
    r.tape->add_node({pa}, t, 0, 0, [=](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      double go = g[0] / static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i) {
        ga[i * K + static_cast<std::size_t>(lab[i])] -= go;
      }
    });
  }
  return t;
}

// -------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  const auto& in = a.values();
  double acc = 0.0;
  for (double v : in) acc += v;
  Tensor t = Tensor::scalar(acc);
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    std::size_t n = a.numel();
    r.tape->add_node({pa}, t, 0, 0, [pa, n](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
    });
  }
  return t;
}

Tensor mean(const Tensor& a) {
  const auto& in = a.values();
  double acc = 0.0;
  for (double v : in) acc += v;
  double inv = 1.0 / static_cast<double>(a.numel());
  Tensor t = Tensor::scalar(acc * inv);
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    std::size_t n = a.numel();
    r.tape->add_node({pa}, t, 0, 0, [pa, n, inv](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      double go = g[0] * inv;
      for (std::size_t i = 0; i < n; ++i) ga[i] += go;
    });
  }
  return t;
}

Tensor rowwise_sum(const Tensor& a) {
  check_rank("rowwise_sum", a, 2, "input");
  const std::size_t N = a.dim(0), M = a.dim(1);
  std::vector<double> out(N, 0.0);
  const auto& in = a.values();
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = &in[i * M];
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) acc += row[m];
    out[i] = acc;
  }
  Tensor t = Tensor::from({N}, std::move(out));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    r.tape->add_node({pa}, t, 0, 0, [pa, N, M](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t m = 0; m < M; ++m) ga[i * M + m] += g[i];
    });
  }
  return t;
}

Tensor rowwise_scale(const Tensor& a, const Tensor& s) {
  check_rank("rowwise_scale", a, 2, "input");
  check_rank("rowwise_scale", s, 1, "scale");
  const std::size_t N = a.dim(0), M = a.dim(1);
  if (s.dim(0) != N) {
    throw DimensionError("rowwise_scale: row axis mismatch " + std::to_string(N) + " vs " +
                         std::to_string(s.dim(0)));
  }
  std::vector<double> out(N * M);
  const auto& in = a.values();
  const auto& sv = s.values();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t m = 0; m < M; ++m) out[i * M + m] = in[i * M + m] * sv[i];
  Tensor t = Tensor::from({N, M}, std::move(out));
  if (Rec r = begin2(a, s); r.on) {
    int pa = r.pa, pb = r.pb;
    Storage sa = a.storage(), ss = s.storage();
    r.tape->add_node({pa, pb}, t, 2, N * M + N,
                     [=](Tape& tp, const std::vector<double>& g) {
                       if (pa >= 0) {
                         auto& ga = tp.grad_buf(pa);
                         for (std::size_t i = 0; i < N; ++i)
                           for (std::size_t m = 0; m < M; ++m)
                             ga[i * M + m] += g[i * M + m] * (*ss)[i];
                       }
                       if (pb >= 0) {
                         auto& gs = tp.grad_buf(pb);
                         for (std::size_t i = 0; i < N; ++i) {
                           double acc = 0.0;
                           for (std::size_t m = 0; m < M; ++m)
                             acc += g[i * M + m] * (*sa)[i * M + m];
                           gs[i] += acc;
                         }
                       }
                     });
  }
  return t;
}

// --------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw DimensionError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                         shape_str(new_shape));
  }
  Tensor t = alias_with_shape(a, std::move(new_shape));
  if (Rec r = begin1(a); r.on) {
    int pa = r.pa;
    std::size_t n = a.numel();
    r.tape->add_node({pa}, t, 0, 0, [pa, n](Tape& tp, const std::vector<double>& g) {
      auto& ga = tp.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return t;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(s0.size()));
  }
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(s0));
    }
    for (std::size_t d = 0; d < s0.size(); ++d) {
      if (d != axis && p.shape()[d] != s0[d]) {
        throw DimensionError("concat: axis " + std::to_string(d) + " mismatch " +
                             shape_str(p.shape()) + " vs " + shape_str(s0));
      }
    }
    axis_total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(shape_numel(out_shape));
  std::size_t out_row = axis_total * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::size_t rows = p.shape()[axis] * inner;
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(&out[o * out_row + offset], &pv[o * rows], rows * sizeof(double));
    }
    offset += rows;
  }
  Tensor t = Tensor::from(out_shape, std::move(out));

  bool any_tracked = false;
  for (const auto& p : parts) any_tracked = any_tracked || p.tracked();
  Tape* tape = Tape::active();
  if (GradMode::enabled() && tape && any_tracked) {
    std::vector<int> pids;
    std::vector<std::size_t> rows;
    for (const auto& p : parts) {
      pids.push_back(tape->node_of(p));
      rows.push_back(p.shape()[axis] * inner);
    }
    tape->add_node(std::vector<int>(pids), t, 0, 0,
                   [pids, rows, outer, out_row](Tape& tp, const std::vector<double>& g) {
                     std::size_t offset = 0;
                     for (std::size_t pi = 0; pi < pids.size(); ++pi) {
                       if (pids[pi] >= 0) {
                         auto& gp = tp.grad_buf(pids[pi]);
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = &g[o * out_row + offset];
                           double* dst = &gp[o * rows[pi]];
                           for (std::size_t i = 0; i < rows[pi]; ++i) dst[i] += src[i];
                         }
                       }
                       offset += rows[pi];
                     }
                   });
  }
  return t;
}

}  // namespace lakd
