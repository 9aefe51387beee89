#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "lakd/error.hpp"
#include "lakd/model.hpp"
#include "lakd/ops.hpp"
#include "lakd/rng.hpp"
#include "lakd/sdm.hpp"
#include "lakd/tensor.hpp"

using namespace lakd;

namespace {

Tensor rand_images(Rng& rng, std::size_t n, std::size_t side) {
  auto v = rng.normal_vec(n * 3 * side * side, 1.0);
  for (auto& x : v) x = 0.5 + 0.25 * x;
  return Tensor::from({n, 3, side, side}, v);
}

std::vector<int> rand_labels(Rng& rng, std::size_t n, int classes) {
  std::vector<int> out(n);
  for (auto& l : out) l = static_cast<int>(rng.uniform_int(0, classes - 1));
  return out;
}

std::vector<double> all_param_values(const TapNet& net) {
  std::vector<double> out;
  for (const auto& [name, p] : named_params(net)) {
    (void)name;
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return out;
}

}  // namespace

TEST_CASE("partition: layouts, flags, parameter tiling") {
  TapNet net = build_tapnet(9, 4, 5, 100);

  PartitionPlan plan;
  plan.detach_after = {3, 6};
  plan.align_at = {3, 6, 9};
  auto blocks = partition(net, plan);
  REQUIRE(blocks.size() == 3);
  CHECK(blocks[0].first_unit == 1);
  CHECK(blocks[0].last_unit == 3);
  CHECK(blocks[1].first_unit == 4);
  CHECK(blocks[1].last_unit == 6);
  CHECK(blocks[2].first_unit == 7);
  CHECK(blocks[2].last_unit == 9);
  CHECK(blocks[0].align == std::vector<int>{3});
  CHECK(blocks[1].align == std::vector<int>{6});
  CHECK(blocks[2].align == std::vector<int>{9});
  CHECK_FALSE(blocks[0].terminal);
  CHECK_FALSE(blocks[0].hard_enabled);
  CHECK(blocks[0].feature_enabled);
  CHECK(blocks[2].terminal);
  CHECK(blocks[2].hard_enabled);
  CHECK(blocks[2].attention_enabled);

  // block params tile named_params exactly, in order
  std::vector<std::string> tiled;
  for (const auto& b : blocks)
    for (const auto& [name, p] : b.params) {
      (void)p;
      tiled.push_back(name);
    }
  std::vector<std::string> want;
  for (const auto& [name, p] : named_params(net)) {
    (void)p;
    want.push_back(name);
  }
  CHECK(tiled == want);
  for (const auto& b : blocks) {
    REQUIRE(b.momentum.size() == b.params.size());
    for (std::size_t i = 0; i < b.params.size(); ++i) {
      CHECK(b.momentum[i].size() == b.params[i].second.numel());
    }
  }

  // remapped best row: detach [1,4], align [1,4,9]
  PartitionPlan best;
  best.detach_after = {1, 4};
  best.align_at = {1, 4, 9};
  auto b2 = partition(net, best);
  REQUIRE(b2.size() == 3);
  CHECK(b2[0].last_unit == 1);
  CHECK(b2[1].first_unit == 2);
  CHECK(b2[1].last_unit == 4);
  CHECK(b2[2].first_unit == 5);
  CHECK(b2[0].align == std::vector<int>{1});
  CHECK(b2[1].align == std::vector<int>{4});
  CHECK(b2[2].align == std::vector<int>{9});

  // no detach points: one terminal block spanning everything
  auto single = partition(net, PartitionPlan{});
  REQUIRE(single.size() == 1);
  CHECK(single[0].first_unit == 1);
  CHECK(single[0].last_unit == 9);
  CHECK(single[0].terminal);

  PartitionPlan bad;
  bad.detach_after = {3, 3};
  CHECK_THROWS_AS(partition(net, bad), ConfigError);
  bad.detach_after = {0};
  CHECK_THROWS_AS(partition(net, bad), ConfigError);
  bad.detach_after = {9};
  CHECK_THROWS_WITH_AS(partition(net, bad), doctest::Contains("classifier"), ConfigError);
  bad.detach_after = {};
  bad.align_at = {0};
  CHECK_THROWS_AS(partition(net, bad), ConfigError);
  bad.align_at = {10};
  CHECK_THROWS_AS(partition(net, bad), ConfigError);
  bad.align_at = {4, 4};
  CHECK_THROWS_AS(partition(net, bad), ConfigError);
}

TEST_CASE("remap_alignment: rule and validation") {
  CHECK(remap_alignment({3, 6, 9}, AlignMode::standard) == std::vector<int>{3, 6, 9});
  CHECK(remap_alignment({3, 6, 9}, AlignMode::forward_shifted) == std::vector<int>{1, 4, 9});
  CHECK(remap_alignment({2, 4, 6}, AlignMode::forward_shifted) == std::vector<int>{1, 3, 6});
  CHECK(remap_alignment({1, 2, 3}, AlignMode::forward_shifted) == std::vector<int>{1, 2, 3});
  CHECK_THROWS_AS(remap_alignment({2, 4, 7}, AlignMode::standard), ConfigError);
  CHECK_THROWS_AS(remap_alignment({3, 6}, AlignMode::standard), ConfigError);
  CHECK_THROWS_AS(remap_alignment({0, 0, 0}, AlignMode::forward_shifted), ConfigError);
}

TEST_CASE("sgd_update matches a hand-rolled nesterov loop") {
  SgdConfig cfg{0.1, 0.9, 5e-3};
  Tensor p = Tensor::from({4}, {1.0, -2.0, 0.5, 3.0});
  std::vector<double> vel(4, 0.0);
  std::vector<double> ref = p.values();
  std::vector<double> ref_vel(4, 0.0);

  Rng rng(101);
  for (int step = 0; step < 5; ++step) {
    auto grad = rng.normal_vec(4, 1.0);
    sgd_update(p, vel, grad, cfg);
    for (std::size_t i = 0; i < 4; ++i) {
      double g = grad[i] + cfg.weight_decay * ref[i];
      ref_vel[i] = cfg.momentum * ref_vel[i] + g;
      ref[i] -= cfg.lr * (g + cfg.momentum * ref_vel[i]);
    }
    CHECK(p.values() == ref);
    CHECK(vel == ref_vel);
  }

  std::vector<double> short_vel(3, 0.0);
  CHECK_THROWS_AS(sgd_update(p, short_vel, {1, 2, 3, 4}, cfg), ContractError);
  CHECK_THROWS_AS(sgd_update(p, vel, {1, 2, 3}, cfg), ContractError);
}

TEST_CASE("decayed_lr: linear schedule") {
  CHECK(decayed_lr(0.05, 0, 10) == 0.05);
  CHECK(decayed_lr(0.05, 5, 10) == doctest::Approx(0.025));
  CHECK(decayed_lr(0.05, 9, 10) == doctest::Approx(0.005));
  for (std::size_t e = 1; e < 10; ++e) CHECK(decayed_lr(0.05, e, 10) < decayed_lr(0.05, e - 1, 10));
  CHECK_THROWS_AS(decayed_lr(0.05, 10, 10), ConfigError);
  CHECK_THROWS_AS(decayed_lr(0.05, 0, 0), ConfigError);
}

TEST_CASE("forward equivalence: partitioned logits are bitwise the plain logits") {
  Rng rng(102);
  TapNet net = build_tapnet(9, 4, 5, 103);
  Tensor images = rand_images(rng, 2, 8);

  ForwardResult plain;
  {
    TapeScope scope;
    plain = forward_with_taps(net, images);
  }

  for (std::vector<int> cuts : {std::vector<int>{}, {3, 6}, {1, 4}, {2, 5, 7}}) {
    PartitionPlan plan;
    plan.detach_after = cuts;
    auto blocks = partition(net, plan);
    TapeScope scope;
    Tensor x = images;
    Tensor logits;
    for (const auto& b : blocks) {
      BlockForward fwd = run_block(net, b, x);
      if (b.terminal) logits = fwd.logits;
      else x = fwd.output.detach();
    }
    REQUIRE(logits.defined());
    CHECK(logits.values() == plain.logits.values());
  }
}

TEST_CASE("isolation: a later block's loss deposits nothing upstream") {
  Rng rng(104);
  TapNet student = build_tapnet(4, 4, 5, 105);
  TapNet teacher = build_tapnet(4, 8, 5, 106);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 8);
  auto labels = rand_labels(rng, 2, 5);

  PartitionPlan plan;
  plan.detach_after = {2};
  plan.align_at = {2, 4};
  auto blocks = partition(student, plan);
  auto s_shapes = probe_tap_shapes(student, images, plan.align_at);
  auto t_shapes = probe_tap_shapes(teacher, images, plan.align_at);
  Rng prng(107);
  init_alignment(blocks, s_shapes, t_shapes, prng);
  TeacherContext ctx = make_teacher_context(teacher, images, {2, 4});
  LossWeights w{0.5, 1.0, 4.0};

  TapeScope scope;
  BlockForward f1 = run_block(student, blocks[0], images);
  Tensor x2 = f1.output.detach();
  BlockForward f2 = run_block(student, blocks[1], x2);
  Tensor loss2 = block_loss(blocks[1], f2, ctx, labels, w, NdamConfig{}, nullptr);
  backward(loss2);

  // exact-zero isolation: nothing was ever deposited into block 1
  for (const auto& [name, p] : blocks[0].params) {
    INFO("param ", name);
    CHECK(p.grad() == nullptr);
  }
  // while block 2 genuinely learned something
  double norm = 0.0;
  for (const auto& [name, p] : blocks[1].params) {
    (void)name;
    if (const auto* g = p.grad()) {
      for (double x : *g) norm += x * x;
    }
  }
  CHECK(norm > 0.0);
  for (auto& [name, p] : blocks[1].params) {
    (void)name;
    p.zero_grad();
  }
}

TEST_CASE("isolation: block-1 gradients ignore block-2 parameter values") {
  Rng rng(108);
  TapNet student = build_tapnet(4, 4, 5, 109);
  TapNet teacher = build_tapnet(4, 8, 5, 110);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 8);
  auto labels = rand_labels(rng, 2, 5);

  PartitionPlan plan;
  plan.detach_after = {2};
  plan.align_at = {2, 4};
  auto blocks = partition(student, plan);
  Rng prng(111);
  init_alignment(blocks, probe_tap_shapes(student, images, plan.align_at),
                 probe_tap_shapes(teacher, images, plan.align_at), prng);
  TeacherContext ctx = make_teacher_context(teacher, images, {2, 4});
  LossWeights w{0.5, 1.0, 4.0};

  auto block1_grads = [&] {
    TapeScope scope;
    Tensor x = images;
    std::vector<std::vector<double>> grads;
    for (const auto& b : blocks) {
      BlockForward fwd = run_block(student, b, x);
      Tensor loss = block_loss(b, fwd, ctx, labels, w, NdamConfig{}, nullptr);
      if (loss.tracked()) backward(loss);
      if (!b.terminal) x = fwd.output.detach();
    }
    for (const auto& [name, p] : blocks[0].params) {
      (void)name;
      REQUIRE(p.grad() != nullptr);
      grads.push_back(*p.grad());
    }
    for (auto& blk : blocks)
      for (auto& [name, p] : blk.params) {
        (void)name;
        p.zero_grad();
      }
    return grads;
  };

  auto before = block1_grads();
  for (auto& [name, p] : blocks[1].params) {
    (void)name;
    for (auto& v : p.values_mut()) v += 0.1;
  }
  auto after = block1_grads();
  CHECK(before == after);  // bitwise: block 1 never saw the change
}

TEST_CASE("dual finite differences: local gradient is the truncated one") {
  Rng rng(112);
  TapNet student = build_tapnet(3, 2, 4, 113);
  TapNet teacher = build_tapnet(3, 4, 4, 114);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 6);
  auto labels = rand_labels(rng, 2, 4);

  PartitionPlan plan;
  plan.detach_after = {1, 2};
  plan.align_at = {1, 2, 3};
  auto blocks = partition(student, plan);
  Rng prng(115);
  init_alignment(blocks, probe_tap_shapes(student, images, plan.align_at),
                 probe_tap_shapes(teacher, images, plan.align_at), prng);
  TeacherContext ctx = make_teacher_context(teacher, images, {1, 2, 3});
  LossWeights w{0.5, 1.0, 4.0};

  // block 1's local loss, rebuilt from scratch on every call
  auto local1 = [&] {
    BlockForward f1 = run_block(student, blocks[0], images);
    return block_loss(blocks[0], f1, ctx, labels, w, NdamConfig{}, nullptr);
  };
  std::vector<Tensor> params1;
  for (auto& [name, p] : blocks[0].params) {
    (void)name;
    params1.push_back(p);
  }
  auto res = fd::check_gradients(local1, params1);
  CHECK_MESSAGE(res.ok, res.detail);

  // the composite objective: sum of every block's local loss. Its value
  // ignores detachment, so finite differences see the cross-block paths.
  auto composite = [&] {
    Tensor x = images;
    Tensor sum;
    for (const auto& b : blocks) {
      BlockForward fwd = run_block(student, b, x);
      Tensor loss = block_loss(b, fwd, ctx, labels, w, NdamConfig{}, nullptr);
      sum = sum.defined() ? add(sum, loss) : loss;
      if (!b.terminal) x = fwd.output.detach();
    }
    return sum;
  };

  // analytic truncated gradient of the composite w.r.t. block 1
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope;
    backward(composite());
    for (const Tensor& p : params1) {
      REQUIRE(p.grad() != nullptr);
      analytic.push_back(*p.grad());
    }
    for (auto& blk : blocks)
      for (auto& [name, p] : blk.params) {
        (void)name;
        p.zero_grad();
      }
  }

  // numeric full gradient of the same scalar
  double max_gap = 0.0;
  const double eps = 1e-5;
  for (std::size_t pi = 0; pi < params1.size(); ++pi) {
    Tensor p = params1[pi];
    auto& vals = p.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      NoGradGuard ng;
      const double save = vals[i];
      vals[i] = save + eps;
      double up = composite().item();
      vals[i] = save - eps;
      double dn = composite().item();
      vals[i] = save;
      double numeric = (up - dn) / (2.0 * eps);
      max_gap = std::max(max_gap, std::fabs(numeric - analytic[pi][i]));
    }
  }
  // the truncated gradient must measurably disagree with the full one:
  // cross-boundary contributions exist and are not small here
  CHECK(max_gap > 1e-4);
}

TEST_CASE("degeneracy: single-block sdm equals the end-to-end step bitwise") {
  Rng rng(116);
  TapNet sdm_net = build_tapnet(4, 4, 5, 117);
  TapNet e2e_net = clone(sdm_net);
  TapNet teacher = build_tapnet(4, 8, 5, 118);
  set_frozen(teacher, true);

  PartitionPlan plan;  // no detach points, no feature aligns
  plan.align_at = {};
  auto blocks = partition(sdm_net, plan);
  EndToEndState state = make_e2e_state(e2e_net);

  LossWeights w{0.5, 0.0, 4.0};  // beta = 0: no feature terms on either path
  SgdConfig sgd{0.05, 0.9, 5e-4};
  NdamConfig ndam;

  for (int step = 0; step < 5; ++step) {
    Tensor images = rand_images(rng, 2, 8);
    auto labels = rand_labels(rng, 2, 5);
    TeacherContext ctx = make_teacher_context(teacher, images, {4});
    StepReport ra = sdm_step(sdm_net, blocks, ctx, images, labels, w, ndam, sgd);
    StepReport rb = standard_step(e2e_net, state, ctx, images, labels, w, Regime::lakd, ndam, sgd);
    CHECK(ra.total == rb.total);
    CHECK(ra.hard == rb.hard);
    CHECK(ra.attention == rb.attention);
    CHECK(all_param_values(sdm_net) == all_param_values(e2e_net));
  }
}

TEST_CASE("memory: detachment strictly lowers the retained-activation peak") {
  Rng rng(119);
  TapNet whole = build_tapnet(9, 4, 5, 120);
  TapNet cut = clone(whole);
  TapNet teacher = build_tapnet(9, 8, 5, 121);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 8);
  auto labels = rand_labels(rng, 2, 5);
  TeacherContext ctx = make_teacher_context(teacher, images, {1, 4, 9});
  LossWeights w{0.5, 1.0, 4.0};
  SgdConfig sgd;
  NdamConfig ndam;

  PartitionPlan whole_plan;
  whole_plan.align_at = {1, 4, 9};
  auto whole_blocks = partition(whole, whole_plan);
  Rng prng1(122);
  init_alignment(whole_blocks, probe_tap_shapes(whole, images, whole_plan.align_at),
                 probe_tap_shapes(teacher, images, whole_plan.align_at), prng1);

  PartitionPlan cut_plan = whole_plan;
  cut_plan.detach_after = {1, 4};
  auto cut_blocks = partition(cut, cut_plan);
  Rng prng2(122);
  init_alignment(cut_blocks, probe_tap_shapes(cut, images, cut_plan.align_at),
                 probe_tap_shapes(teacher, images, cut_plan.align_at), prng2);

  StepReport base = sdm_step(whole, whole_blocks, ctx, images, labels, w, ndam, sgd);
  StepReport part = sdm_step(cut, cut_blocks, ctx, images, labels, w, ndam, sgd);
  CHECK(base.peak_retained > 0);
  CHECK(part.peak_retained > 0);
  CHECK(part.peak_retained < base.peak_retained);
}

TEST_CASE("alignment projections live in the owning block and train") {
  Rng rng(123);
  TapNet student = build_tapnet(4, 4, 5, 124);
  TapNet teacher = build_tapnet(4, 8, 5, 125);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 8);
  auto labels = rand_labels(rng, 2, 5);

  PartitionPlan plan;
  plan.detach_after = {2};
  plan.align_at = {2, 4};
  auto blocks = partition(student, plan);
  std::size_t before0 = blocks[0].params.size(), before1 = blocks[1].params.size();
  Rng prng(126);
  init_alignment(blocks, probe_tap_shapes(student, images, plan.align_at),
                 probe_tap_shapes(teacher, images, plan.align_at), prng);

  // widths differ (4 vs 8 channels), so each align index needs a kernel
  REQUIRE(blocks[0].params.size() == before0 + 1);
  REQUIRE(blocks[1].params.size() == before1 + 1);
  CHECK(blocks[0].params.back().first == "align2.proj");
  CHECK(blocks[1].params.back().first == "align4.proj");
  CHECK(blocks[0].projections.at(2).kernel.defined());
  CHECK(blocks[0].momentum.back().size() == blocks[0].params.back().second.numel());

  // a step with feature terms moves the kernels
  auto k_before = blocks[0].params.back().second.values();
  TeacherContext ctx = make_teacher_context(teacher, images, {2, 4});
  sdm_step(student, blocks, ctx, images, labels, LossWeights{0.5, 1.0, 4.0}, NdamConfig{},
           SgdConfig{});
  CHECK(blocks[0].params.back().second.values() != k_before);
}

TEST_CASE("block_loss failure modes are loud") {
  Rng rng(127);
  TapNet student = build_tapnet(4, 4, 5, 128);
  TapNet teacher = build_tapnet(4, 8, 5, 129);
  set_frozen(teacher, true);
  Tensor images = rand_images(rng, 2, 8);
  auto labels = rand_labels(rng, 2, 5);
  LossWeights w{0.5, 1.0, 4.0};

  PartitionPlan plan;
  plan.align_at = {4};
  auto blocks = partition(student, plan);

  // no init_alignment: the missing projection is reported
  {
    TapeScope scope;
    BlockForward fwd = run_block(student, blocks[0], images);
    CHECK_THROWS_WITH_AS(block_loss(blocks[0], fwd, make_teacher_context(teacher, images, {4}),
                                    labels, w, NdamConfig{}, nullptr),
                         doctest::Contains("init_alignment"), ContractError);
  }

  Rng prng(130);
  init_alignment(blocks, probe_tap_shapes(student, images, plan.align_at),
                 probe_tap_shapes(teacher, images, plan.align_at), prng);

  // missing teacher tap
  {
    TapeScope scope;
    BlockForward fwd = run_block(student, blocks[0], images);
    TeacherContext empty;
    CHECK_THROWS_WITH_AS(block_loss(blocks[0], fwd, empty, labels, w, NdamConfig{}, nullptr),
                         doctest::Contains("teacher tap"), ContractError);
  }

  // teacher tap whose shape the projection cannot reach
  {
    TapeScope scope;
    BlockForward fwd = run_block(student, blocks[0], images);
    TeacherContext broken = make_teacher_context(teacher, images, {4});
    broken.taps[4] = Tensor::zeros({2, 8, 3, 3});  // wrong spatial size
    CHECK_THROWS_WITH_AS(block_loss(blocks[0], fwd, broken, labels, w, NdamConfig{}, nullptr),
                         doctest::Contains("tap 4"), DimensionError);
  }
}

TEST_CASE("ndam in the step: disabled is inert, enabled changes training") {
  Rng rng(131);
  TapNet a = build_tapnet(4, 4, 5, 132);
  TapNet b = clone(a);
  TapNet c = clone(a);
  TapNet teacher = build_tapnet(4, 8, 5, 133);
  set_frozen(teacher, true);
  // 16x16 input keeps every tap at least 3x3, the pooling kernel's floor
  Tensor images = rand_images(rng, 2, 16);
  auto labels = rand_labels(rng, 2, 5);
  TeacherContext ctx = make_teacher_context(teacher, images, {2, 4});
  LossWeights w{0.5, 1.0, 4.0};
  SgdConfig sgd;

  PartitionPlan plan;
  plan.detach_after = {2};
  plan.align_at = {2, 4};
  // this net/seed pair has a dead sample at the last tap, so the attention
  // term would reject it; the weighting under test only touches features
  plan.terminal_attention = false;

  auto step_with = [&](TapNet& net, const NdamConfig& ndam) {
    auto blocks = partition(net, plan);
    Rng prng(134);
    init_alignment(blocks, probe_tap_shapes(net, images, plan.align_at),
                   probe_tap_shapes(teacher, images, plan.align_at), prng);
    sdm_step(net, blocks, ctx, images, labels, w, ndam, sgd);
    return all_param_values(net);
  };

  auto off1 = step_with(a, NdamConfig{});
  NdamConfig skipped;
  skipped.bypass = true;
  auto off2 = step_with(b, skipped);
  CHECK(off1 == off2);  // the zero-weight path is bitwise the no-weighting path

  NdamConfig on;
  on.alpha_pool = 0.25;
  on.beta_pool = 0.75;
  auto with = step_with(c, on);
  CHECK(with != off1);  // weighting genuinely alters the feature gradients

  // the raw-tap variant runs when spatial sizes line up (same-depth pair)
  TapNet d = clone(a);
  NdamConfig raw = on;
  raw.weight_projected = false;
  auto raw_vals = step_with(d, raw);
  CHECK(raw_vals != off2);
}
