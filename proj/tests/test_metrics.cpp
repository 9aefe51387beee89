#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lakd/error.hpp"
#include "lakd/metrics.hpp"
#include "lakd/rng.hpp"
#include "lakd/tensor.hpp"
#include "oracles.hpp"

using namespace lakd;

TEST_CASE("ek_metric: analytic cases and oracle") {
  // teacher wrong on samples 1,2,4; student rescues sample 2 only -> 1/3
  PredictionLog log;
  log.labels = {0, 1, 2, 3, 4};
  log.teacher_pred = {0, 0, 0, 3, 0};
  log.student_pred = {0, 0, 2, 3, 3};
  CHECK(ek_metric(log) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // student identical to teacher: rescues nothing
  log.student_pred = log.teacher_pred;
  CHECK(ek_metric(log) == 0.0);

  // random agreement against the independent oracle
  Rng rng(71);
  PredictionLog big;
  for (int i = 0; i < 1000; ++i) {
    big.labels.push_back(static_cast<int>(rng.uniform_int(0, 9)));
    big.teacher_pred.push_back(static_cast<int>(rng.uniform_int(0, 9)));
    big.student_pred.push_back(static_cast<int>(rng.uniform_int(0, 9)));
  }
  bool defined = false;
  double ref = oracle::effective_knowledge(big.teacher_pred, big.student_pred, big.labels, defined);
  REQUIRE(defined);
  CHECK(ek_metric(big) == ref);

  // perfect teacher: the metric has no denominator
  PredictionLog perfect;
  perfect.labels = {0, 1, 2};
  perfect.teacher_pred = {0, 1, 2};
  perfect.student_pred = {2, 1, 0};
  CHECK_THROWS_WITH_AS(ek_metric(perfect), doctest::Contains("EK undefined"), ContractError);

  PredictionLog ragged;
  ragged.labels = {0, 1};
  ragged.teacher_pred = {0};
  ragged.student_pred = {0, 1};
  CHECK_THROWS_AS(ek_metric(ragged), ContractError);
}

TEST_CASE("cka_linear: self-similarity and invariances") {
  Rng rng(72);
  std::size_t n = 16, p = 8;
  CkaInput in;
  in.n = n;
  in.p = p;
  in.q = p;
  in.x = rng.normal_vec(n * p, 1.0);
  in.y = in.x;
  CHECK(cka_linear(in) == doctest::Approx(1.0).epsilon(1e-12));

  // column permutation of the same features
  std::vector<std::size_t> perm(p);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) in.y[i * p + j] = in.x[i * p + perm[j]];
  CHECK(cka_linear(in) == doctest::Approx(1.0).epsilon(1e-12));

  // isotropic scaling of either side
  CkaInput scaled = in;
  scaled.y = scaled.x;
  for (auto& v : scaled.y) v *= 37.5;
  CHECK(cka_linear(scaled) == doctest::Approx(1.0).epsilon(1e-12));

  // scaling leaves a general pair untouched too
  CkaInput a;
  a.n = 12;
  a.p = 6;
  a.q = 4;
  a.x = rng.normal_vec(a.n * a.p, 1.0);
  a.y = rng.normal_vec(a.n * a.q, 1.0);
  double base = cka_linear(a);
  CkaInput b = a;
  for (auto& v : b.x) v *= 0.001;
  for (auto& v : b.y) v *= 250.0;
  CHECK(cka_linear(b) == doctest::Approx(base).epsilon(1e-10));
  CHECK(base > 0.0);
  CHECK(base < 1.0);
}

TEST_CASE("cka_linear: oracle agreement and symmetry") {
  Rng rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    CkaInput in;
    in.n = 16;
    in.p = 8;
    in.q = 5;
    in.x = rng.normal_vec(in.n * in.p, 1.0);
    in.y = rng.normal_vec(in.n * in.q, 1.0);
    double got = cka_linear(in);
    double ref = oracle::cka_linear(in.x, in.y, in.n, in.p, in.q);
    CHECK(got == doctest::Approx(ref).epsilon(1e-10));

    CkaInput sw;
    sw.n = in.n;
    sw.p = in.q;
    sw.q = in.p;
    sw.x = in.y;
    sw.y = in.x;
    CHECK(cka_linear(sw) == doctest::Approx(got).epsilon(1e-10));
  }

  CkaInput flat;
  flat.n = 8;
  flat.p = 3;
  flat.q = 3;
  flat.x.assign(flat.n * flat.p, 2.5);  // constant columns center to zero
  flat.y = rng.normal_vec(flat.n * flat.q, 1.0);
  CHECK_THROWS_WITH_AS(cka_linear(flat), doctest::Contains("degenerate activations"),
                       ContractError);

  CkaInput tiny;
  tiny.n = 1;
  tiny.p = 2;
  tiny.q = 2;
  tiny.x = {1.0, 2.0};
  tiny.y = {3.0, 4.0};
  CHECK_THROWS_AS(cka_linear(tiny), ContractError);
}

TEST_CASE("cka_features: flattening and stride sampling") {
  Rng rng(74);
  std::size_t n = 4, c = 2, h = 3, w = 3, full = c * h * w;
  auto v = rng.normal_vec(n * full, 1.0);
  Tensor tap = Tensor::from({n, c, h, w}, v);

  // wide cap: all features pass through in order
  std::vector<double> out;
  std::size_t p = 0;
  cka_features(tap, 1024, 9, out, p);
  CHECK(p == full);
  CHECK(out == v);

  // tight cap: at most max_features columns, deterministic for a fixed seed
  std::vector<double> s1, s2;
  std::size_t p1 = 0, p2 = 0;
  cka_features(tap, 7, 9, s1, p1);
  cka_features(tap, 7, 9, s2, p2);
  CHECK(p1 <= 7);
  CHECK(p1 >= 1);
  CHECK(s1.size() == n * p1);
  CHECK(s1 == s2);
  CHECK(p1 == p2);

  // sampled columns are an actual arithmetic sub-grid of the full feature set
  std::size_t stride = full / 7;
  bool found_offset = false;
  for (std::size_t phase = 0; phase < stride && !found_offset; ++phase) {
    bool all = true;
    for (std::size_t i = 0; i < n && all; ++i)
      for (std::size_t j = 0; j < p1 && all; ++j)
        all = s1[i * p1 + j] == v[i * full + phase + j * stride];
    found_offset = all;
  }
  CHECK(found_offset);

  CHECK_THROWS_AS(cka_features(Tensor::zeros({5}), 16, 0, out, p), DimensionError);
}

TEST_CASE("argmax and top-k accuracy") {
  Tensor logits = Tensor::from({3, 4}, {
      0.1, 0.9, 0.2, 0.3,   // argmax 1
      2.0, 2.0, 1.0, 0.0,   // tie 0/1 -> 0
      -1.0, -2.0, -0.5, -3.0,  // argmax 2
  });
  CHECK(argmax_predictions(logits) == std::vector<int>{1, 0, 2});

  std::vector<int> labels{1, 1, 2};
  CHECK(topk_accuracy(logits, labels, 4) == 1.0);
  // row 1 label 1 ties with class 0 at k=1: the tie resolves to class 0, a miss
  CHECK(topk_accuracy(logits, labels, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(topk_accuracy(logits, labels, 2) == 1.0);

  Rng rng(75);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 8, k = 10;
    auto lv = rng.normal_vec(n * k, 1.0);
    Tensor t = Tensor::from({n, k}, lv);
    std::vector<int> labs(n);
    for (auto& l : labs) l = static_cast<int>(rng.uniform_int(0, 9));
    for (int kk : {1, 3, 5, 10}) {
      int hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(lv.begin() + static_cast<long>(i * k),
                                lv.begin() + static_cast<long>((i + 1) * k));
        if (oracle::topk_hit(row, labs[i], kk)) ++hits;
      }
      CHECK(topk_accuracy(t, labs, kk) ==
            doctest::Approx(static_cast<double>(hits) / static_cast<double>(n)).epsilon(1e-15));
    }
    // monotone in k
    double prev = 0.0;
    for (int kk = 1; kk <= 10; ++kk) {
      double acc = topk_accuracy(t, labs, kk);
      CHECK(acc >= prev);
      prev = acc;
    }
    CHECK(prev == 1.0);
  }

  CHECK_THROWS_AS(topk_accuracy(logits, labels, 0), ContractError);
  CHECK_THROWS_AS(topk_accuracy(logits, labels, 5), ContractError);
  CHECK_THROWS_AS(topk_accuracy(logits, {1, 1, 4}, 1), ContractError);
  CHECK_THROWS_AS(topk_accuracy(logits, {1, 1}, 1), ContractError);
}

TEST_CASE("layer_l2_report and memory_report") {
  Rng rng(76);
  Tensor a = Tensor::from({2, 3, 2, 2}, rng.normal_vec(24, 1.0));
  Tensor b = Tensor::from({2, 3, 2, 2}, rng.normal_vec(24, 1.0));

  auto zeros = layer_l2_report({a, b}, {a, b});
  REQUIRE(zeros.size() == 2);
  CHECK(zeros[0] == 0.0);
  CHECK(zeros[1] == 0.0);

  auto vals = layer_l2_report({a}, {b});
  REQUIRE(vals.size() == 1);
  double ref = 0.0;
  for (std::size_t i = 0; i < 24; ++i)
    ref += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
  ref /= 2.0;
  CHECK(vals[0] == doctest::Approx(ref).epsilon(1e-12));

  CHECK_THROWS_AS(layer_l2_report({a, b}, {a}), ContractError);

  MemoryComparison eq = memory_report(100, 100);
  CHECK(eq.reduction_fraction == 0.0);
  MemoryComparison less = memory_report(100, 40);
  CHECK(less.baseline_peak == 100);
  CHECK(less.sdm_peak == 40);
  CHECK(less.reduction_fraction == doctest::Approx(0.6));
}
