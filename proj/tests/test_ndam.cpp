#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fd_check.hpp"
#include "lakd/error.hpp"
#include "lakd/ndam.hpp"
#include "lakd/ops.hpp"
#include "lakd/rng.hpp"
#include "lakd/tensor.hpp"

using namespace lakd;

namespace {

// Summed-map oracle with explicit loops.
std::vector<double> channel_sum_oracle(const std::vector<double>& v, std::size_t n, std::size_t c,
                                       std::size_t hw, bool use_abs) {
  std::vector<double> out(n * hw, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        double x = v[(i * c + ch) * hw + j];
        out[i * hw + j] += use_abs ? std::fabs(x) : x;
      }
  return out;
}

// 3x3 stride-1 same-size pooling oracle over an [H,W] plane.
// avg divides by the in-bounds count; max ranges over in-bounds cells only.
double window_avg(const std::vector<double>& p, std::size_t H, std::size_t W, long ci, long cj) {
  double s = 0.0;
  int cnt = 0;
  for (long di = -1; di <= 1; ++di)
    for (long dj = -1; dj <= 1; ++dj) {
      long i = ci + di, j = cj + dj;
      if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W)) continue;
      s += p[static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)];
      ++cnt;
    }
  return s / cnt;
}

double window_max(const std::vector<double>& p, std::size_t H, std::size_t W, long ci, long cj) {
  double m = -1e300;
  for (long di = -1; di <= 1; ++di)
    for (long dj = -1; dj <= 1; ++dj) {
      long i = ci + di, j = cj + dj;
      if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W)) continue;
      m = std::max(m, p[static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)]);
    }
  return m;
}

}  // namespace

TEST_CASE("channel_sum: analytic values and oracle") {
  Tensor ones = Tensor::full({2, 4, 3, 3}, 1.0);
  for (bool use_abs : {false, true}) {
    Tensor m = channel_sum(ones, use_abs);
    CHECK(m.shape() == Shape{2, 1, 3, 3});
    for (double v : m.values()) CHECK(v == 4.0);
  }

  // channels +1 and -1: signed sum cancels, abs sum doubles
  std::vector<double> pm(2 * 9);
  for (std::size_t i = 0; i < 9; ++i) { pm[i] = 1.0; pm[9 + i] = -1.0; }
  Tensor t = Tensor::from({1, 2, 3, 3}, pm);
  Tensor signed_sum = channel_sum(t, false);
  Tensor abs_sum = channel_sum(t, true);
  for (double v : signed_sum.values()) CHECK(v == 0.0);
  for (double v : abs_sum.values()) CHECK(v == 2.0);

  Rng rng(61);
  auto v = rng.normal_vec(2 * 3 * 20, 1.0);
  Tensor r = Tensor::from({2, 3, 4, 5}, v);
  for (bool use_abs : {false, true}) {
    auto ref = channel_sum_oracle(v, 2, 3, 20, use_abs);
    Tensor cs = channel_sum(r, use_abs);
    const auto& got = cs.values();
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-13));
  }

  CHECK_THROWS_AS(channel_sum(Tensor::zeros({2, 3}), false), DimensionError);
}

TEST_CASE("pool_combine: constants, zero weights, oracle") {
  // constant interior: every 3x3 window of a constant-c plane averages and maxes to c
  Tensor c = Tensor::full({1, 1, 5, 5}, 2.0);
  Tensor pc = pool_combine(c, 0.25, 0.75);
  for (double v : pc.values()) CHECK(v == doctest::Approx(2.0).epsilon(1e-13));

  Tensor z = pool_combine(c, 0.0, 0.0);
  CHECK(z.shape() == Shape{1, 1, 5, 5});
  for (double v : z.values()) CHECK(v == 0.0);

  Rng rng(62);
  std::size_t H = 5, W = 6;
  auto v = rng.normal_vec(H * W, 1.0);
  Tensor f = Tensor::from({1, 1, H, W}, v);
  double a = 0.25, b = 0.75;
  Tensor combined = pool_combine(f, a, b);
  const auto& got = combined.values();
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double ref = a * window_avg(v, H, W, static_cast<long>(i), static_cast<long>(j)) +
                   b * window_max(v, H, W, static_cast<long>(i), static_cast<long>(j));
      CHECK(got[i * W + j] == doctest::Approx(ref).epsilon(1e-12));
    }

  CHECK_THROWS_AS(pool_combine(Tensor::zeros({1, 2, 5, 5}), 0.5, 0.5), DimensionError);
  CHECK_THROWS_AS(pool_combine(Tensor::zeros({1, 1, 2, 5}), 0.5, 0.5), DimensionError);
}

TEST_CASE("make_attention_weight: disabled builds nothing, enabled is untracked") {
  Rng rng(63);
  Tensor tap = Tensor::from({2, 3, 4, 4}, rng.normal_vec(2 * 3 * 16, 1.0), true);

  AttentionWeight off = make_attention_weight(tap, 0.0, 0.0, true);
  CHECK_FALSE(off.enabled());
  CHECK_FALSE(off.map.defined());

  TapeScope scope;
  AttentionWeight on = make_attention_weight(tap, 0.5, 0.5, true);
  CHECK(on.enabled());
  CHECK(on.map.shape() == Shape{2, 1, 4, 4});
  CHECK_FALSE(on.map.tracked());        // weighting must not feed gradients back
  CHECK(Tape::active()->node_count() == 0);  // and must not even touch the tape
}

TEST_CASE("apply_weighting: disabled identity is the same handle") {
  Rng rng(64);
  Tensor x = Tensor::from({2, 3, 4, 4}, rng.normal_vec(2 * 3 * 16, 1.0));
  AttentionWeight off;
  Tensor y = apply_weighting(x, off);
  CHECK(y.storage().get() == x.storage().get());  // no copy, no new tensor
}

TEST_CASE("apply_weighting: constant map doubles, oracle for general maps") {
  Rng rng(65);
  std::size_t n = 2, c = 3, H = 4, W = 4, hw = H * W;
  auto xv = rng.normal_vec(n * c * hw, 1.0);
  Tensor x = Tensor::from({n, c, H, W}, xv);

  // a constant map normalizes to 1 everywhere, so out = 2 * x
  AttentionWeight wconst;
  wconst.map = Tensor::full({n, 1, H, W}, 3.7);
  wconst.alpha_pool = 1.0;
  Tensor doubled = apply_weighting(x, wconst);
  const auto& dv = doubled.values();
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(dv[i] == doctest::Approx(2.0 * xv[i]).epsilon(1e-12));

  auto mv = rng.normal_vec(n * hw, 1.0);
  for (auto& m : mv) m = std::fabs(m) + 0.1;  // positive map, as pooling of |a| yields
  AttentionWeight w;
  w.map = Tensor::from({n, 1, H, W}, mv);
  w.alpha_pool = 1.0;
  Tensor weighted = apply_weighting(x, w);
  const auto& got = weighted.values();
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < hw; ++j) mean += mv[i * hw + j];
    mean /= static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        std::size_t idx = (i * c + ch) * hw + j;
        double ref = xv[idx] * (1.0 + mv[i * hw + j] / mean);
        CHECK(got[idx] == doctest::Approx(ref).epsilon(1e-12));
      }
  }

  AttentionWeight zero;
  zero.map = Tensor::zeros({n, 1, H, W});
  zero.alpha_pool = 1.0;
  CHECK_THROWS_AS(apply_weighting(x, zero), ContractError);

  AttentionWeight bad;
  bad.map = Tensor::zeros({n, 1, H + 1, W});
  bad.alpha_pool = 1.0;
  CHECK_THROWS_AS(apply_weighting(x, bad), DimensionError);
}

TEST_CASE("weighting pipeline: gradient flows through the student only") {
  Rng rng(66);
  Tensor teacher_tap = Tensor::from({1, 2, 4, 4}, rng.normal_vec(32, 1.0), true);
  Tensor student_tap = Tensor::from({1, 2, 4, 4}, rng.normal_vec(32, 1.0), true);

  TapeScope scope;
  AttentionWeight w = make_attention_weight(teacher_tap, 0.5, 0.5, true);
  Tensor weighted = apply_weighting(student_tap, w);
  backward(sum(mul(weighted, weighted)));

  CHECK(teacher_tap.grad() == nullptr);  // teacher stays outside the graph
  REQUIRE(student_tap.grad() != nullptr);
  double norm = 0.0;
  for (double g : *student_tap.grad()) norm += g * g;
  CHECK(norm > 0.0);
  student_tap.zero_grad();

  // the weight acts as a constant: grad(student) == 2 * (1+What)^2 * student elementwise
  auto res = fd::check_gradients(
      [&] { return sum(mul(apply_weighting(student_tap, w), apply_weighting(student_tap, w))); },
      {student_tap});
  CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("export_pgm: header and byte scaling") {
  // 2x2 map with a known min/max spread
  AttentionWeight w;
  w.map = Tensor::from({1, 1, 2, 2}, {0.0, 0.5, 1.0, 0.25});
  w.alpha_pool = 1.0;
  std::string path = "/tmp/lakd_test_attention.pgm";
  export_pgm(w.map, 0, path);

  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string data = ss.str();
  CHECK(data.substr(0, 3) == "P5\n");
  CHECK(data.find("2 2\n255\n") != std::string::npos);
  std::string pixels = data.substr(data.size() - 4);
  CHECK(static_cast<unsigned char>(pixels[0]) == 0);
  CHECK(static_cast<unsigned char>(pixels[1]) == 128);  // 0.5 * 255 + 0.5 -> 128
  CHECK(static_cast<unsigned char>(pixels[2]) == 255);
  CHECK(static_cast<unsigned char>(pixels[3]) == 64);   // 0.25 * 255 + 0.5 -> 64
  std::remove(path.c_str());

  CHECK_THROWS_AS(export_pgm(w.map, 1, path), ContractError);
  CHECK_THROWS_AS(export_pgm(Tensor::zeros({1, 2, 2, 2}), 0, path), DimensionError);
}

TEST_CASE("full ndam path against a hand-rolled reference") {
  Rng rng(67);
  std::size_t n = 2, ct = 3, H = 5, W = 5, hw = H * W;
  auto tv = rng.normal_vec(n * ct * hw, 1.0);
  Tensor teacher_tap = Tensor::from({n, ct, H, W}, tv);
  double ap = 0.6, bp = 0.4;

  AttentionWeight w = make_attention_weight(teacher_tap, ap, bp, true);
  REQUIRE(w.enabled());

  auto fsum = channel_sum_oracle(tv, n, ct, hw, true);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> plane(fsum.begin() + static_cast<long>(i * hw),
                              fsum.begin() + static_cast<long>((i + 1) * hw));
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t cidx = 0; cidx < W; ++cidx) {
        double ref = ap * window_avg(plane, H, W, static_cast<long>(r), static_cast<long>(cidx)) +
                     bp * window_max(plane, H, W, static_cast<long>(r), static_cast<long>(cidx));
        CHECK(w.map.values()[i * hw + r * W + cidx] == doctest::Approx(ref).epsilon(1e-12));
      }
  }
}
