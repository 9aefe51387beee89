#include "lakd/sdm.hpp"

#include <algorithm>
#include <string>

#include "lakd/error.hpp"
#include "lakd/ops.hpp"

namespace lakd {

void sgd_update(Tensor& param, std::vector<double>& velocity, const std::vector<double>& grad,
                const SgdConfig& cfg) {
  auto& v = param.values_mut();
  if (velocity.size() != v.size() || grad.size() != v.size()) {
    throw ContractError("sgd_update: buffer sizes do not match the parameter");
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double g = grad[i] + cfg.weight_decay * v[i];
    velocity[i] = cfg.momentum * velocity[i] + g;
    v[i] -= cfg.lr * (g + cfg.momentum * velocity[i]);
  }
}

double decayed_lr(double base_lr, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs == 0 || epoch >= total_epochs) {
    throw ConfigError("decayed_lr: epoch " + std::to_string(epoch) + " outside a " +
                      std::to_string(total_epochs) + "-epoch schedule");
  }
  return base_lr * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
}

std::vector<int> remap_alignment(const std::vector<int>& base_align, AlignMode mode) {
  bool ok = base_align.size() == 3 && base_align[0] >= 1 &&
            base_align[1] == 2 * base_align[0] && base_align[2] == 3 * base_align[0];
  if (!ok) {
    std::string got;
    for (int a : base_align) got += (got.empty() ? "" : ",") + std::to_string(a);
    throw ConfigError("remap_alignment: base must have the form [n,2n,3n], got [" + got + "]");
  }
  if (mode == AlignMode::standard) return base_align;
  return {1, base_align[0] + 1, base_align[2]};
}

namespace {

void check_strictly_increasing(const std::vector<int>& v, const char* what) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] <= v[i - 1]) {
      throw ConfigError(std::string("partition: ") + what + " must be strictly increasing");
    }
  }
}

}  // namespace

std::vector<LocalBlock> partition(const TapNet& student, const PartitionPlan& plan) {
  const int depth = student.depth;
  check_strictly_increasing(plan.detach_after, "detach_after");
  check_strictly_increasing(plan.align_at, "align_at");
  for (int d : plan.detach_after) {
    if (d == depth) {
      throw ConfigError("partition: detaching after the final unit " + std::to_string(d) +
                        " would orphan the classifier");
    }
    if (d < 1 || d > depth) {
      throw ConfigError("partition: detach_after index " + std::to_string(d) + " outside [1," +
                        std::to_string(depth - 1) + "]");
    }
  }
  for (int a : plan.align_at) {
    if (a < 1 || a > depth) {
      throw ConfigError("partition: align_at index " + std::to_string(a) + " outside [1," +
                        std::to_string(depth) + "]");
    }
  }

  std::vector<int> bounds = plan.detach_after;
  bounds.push_back(depth);

  std::vector<LocalBlock> blocks;
  int start = 1;
  for (std::size_t b = 0; b < bounds.size(); ++b) {
    LocalBlock blk;
    blk.first_unit = start;
    blk.last_unit = bounds[b];
    blk.terminal = b + 1 == bounds.size();
    blk.hard_enabled = blk.terminal && plan.terminal_hard;
    blk.attention_enabled = blk.terminal && plan.terminal_attention;
    blk.feature_enabled = blk.terminal ? plan.terminal_feature : true;
    for (int a : plan.align_at) {
      if (a >= blk.first_unit && a <= blk.last_unit) blk.align.push_back(a);
    }
    for (int u = blk.first_unit; u <= blk.last_unit; ++u) {
      for (const auto& [name, p] : student.units[static_cast<std::size_t>(u - 1)].params) {
        blk.params.emplace_back(name, p);
      }
    }
    if (blk.terminal) {
      // head units (global pool carries no parameters, the classifier does)
      for (std::size_t u = static_cast<std::size_t>(depth); u < student.units.size(); ++u) {
        for (const auto& [name, p] : student.units[u].params) blk.params.emplace_back(name, p);
      }
    }
    for (const auto& [name, p] : blk.params) {
      (void)name;
      blk.momentum.emplace_back(p.numel(), 0.0);
    }
    blocks.push_back(std::move(blk));
    start = bounds[b] + 1;
  }
  return blocks;
}

std::map<int, Shape> probe_tap_shapes(const TapNet& net, const Tensor& batch,
                                      const std::vector<int>& indices) {
  NoGradGuard ng;
  std::map<int, Shape> out;
  Tensor x = batch;
  for (int u = 1; u <= net.depth; ++u) {
    x = run_unit(net, u, x);
    if (std::find(indices.begin(), indices.end(), u) != indices.end()) {
      out[u] = Shape{x.dim(1), x.dim(2), x.dim(3)};
    }
  }
  return out;
}

namespace {

Projection build_projection(int align_index, const std::map<int, Shape>& student_chw,
                            const std::map<int, Shape>& teacher_chw, Rng& rng) {
  auto s = student_chw.find(align_index);
  auto t = teacher_chw.find(align_index);
  if (s == student_chw.end() || t == teacher_chw.end()) {
    throw ConfigError("init_alignment: no probed shape for align index " +
                      std::to_string(align_index));
  }
  return make_projection(s->second, t->second, rng);
}

}  // namespace

void init_alignment(std::vector<LocalBlock>& blocks, const std::map<int, Shape>& student_chw,
                    const std::map<int, Shape>& teacher_chw, Rng& rng) {
  for (auto& blk : blocks) {
    for (int a : blk.align) {
      Projection proj = build_projection(a, student_chw, teacher_chw, rng);
      if (proj.kernel.defined()) {
        blk.params.emplace_back("align" + std::to_string(a) + ".proj", proj.kernel);
        blk.momentum.emplace_back(proj.kernel.numel(), 0.0);
      }
      blk.projections[a] = std::move(proj);
    }
  }
}

BlockForward run_block(const TapNet& net, const LocalBlock& block, const Tensor& input) {
  BlockForward fwd;
  Tensor x = input;
  for (int u = block.first_unit; u <= block.last_unit; ++u) {
    x = run_unit(net, u, x);
    if (std::find(block.align.begin(), block.align.end(), u) != block.align.end()) {
      fwd.taps[u] = x;
    }
  }
  fwd.output = x;
  if (block.terminal) fwd.logits = head_forward(net, x);
  return fwd;
}

namespace {

// Projection + optional teacher-attention weighting + squared distance for
// one alignment tap; shared verbatim by the partitioned and end-to-end
// paths so their graphs match op for op.
Tensor aligned_feature_term(int align_index, const std::string& where, const Projection& proj,
                            const Tensor& student_tap, const Tensor& teacher_tap,
                            const NdamConfig& ndam) {
  Tensor s = student_tap;
  AttentionWeight aw;
  if (!ndam.bypass) {
    aw = make_attention_weight(teacher_tap, ndam.alpha_pool, ndam.beta_pool, ndam.use_abs);
    if (!ndam.weight_projected) s = apply_weighting(s, aw);
  }
  s = project_features(proj, s);
  if (s.shape() != teacher_tap.shape()) {
    throw DimensionError(where + ", tap " + std::to_string(align_index) +
                         ": projected student " + shape_str(s.shape()) +
                         " incompatible with teacher " + shape_str(teacher_tap.shape()));
  }
  if (!ndam.bypass && ndam.weight_projected) s = apply_weighting(s, aw);
  return feature_loss(teacher_tap, s);
}

const Tensor& teacher_tap_at(const TeacherContext& teacher, int index, const std::string& who) {
  auto it = teacher.taps.find(index);
  if (it == teacher.taps.end()) {
    throw ContractError(who + ": no teacher tap for unit index " + std::to_string(index));
  }
  return it->second;
}

// Grad-or-zero update of one parameter list through the shared routine.
void apply_sgd(std::vector<std::pair<std::string, Tensor>>& params,
               std::vector<std::vector<double>>& momentum, const SgdConfig& cfg) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    if (const auto* g = p.grad()) {
      sgd_update(p, momentum[i], *g, cfg);
    } else {
      std::vector<double> zeros(p.numel(), 0.0);
      sgd_update(p, momentum[i], zeros, cfg);
    }
    p.zero_grad();
  }
}

}  // namespace

TeacherContext make_teacher_context(const TapNet& teacher, const Tensor& images,
                                    const std::vector<int>& tap_indices) {
  NoGradGuard ng;
  TeacherContext ctx;
  Tensor x = images;
  for (int u = 1; u <= teacher.depth; ++u) {
    x = run_unit(teacher, u, x);
    if (std::find(tap_indices.begin(), tap_indices.end(), u) != tap_indices.end()) {
      ctx.taps[u] = x;
    }
  }
  ctx.logits = head_forward(teacher, x);
  return ctx;
}

Tensor block_loss(const LocalBlock& block, const BlockForward& fwd, const TeacherContext& teacher,
                  const std::vector<int>& labels, const LossWeights& weights,
                  const NdamConfig& ndam, StepReport* rep) {
  const std::string where =
      "block [" + std::to_string(block.first_unit) + ".." + std::to_string(block.last_unit) + "]";
  Tensor feature_sum;
  if (block.feature_enabled) {
    for (int a : block.align) {
      const Tensor& t_tap = teacher_tap_at(teacher, a, "block_loss");
      auto s_it = fwd.taps.find(a);
      if (s_it == fwd.taps.end()) {
        throw ContractError("block_loss: " + where + " produced no tap at " + std::to_string(a));
      }
      auto proj_it = block.projections.find(a);
      if (proj_it == block.projections.end()) {
        throw ContractError("block_loss: alignment " + std::to_string(a) +
                            " has no projection; init_alignment must run first");
      }
      Tensor f = aligned_feature_term(a, where, proj_it->second, s_it->second, t_tap, ndam);
      if (rep) rep->feature += f.item();
      feature_sum = feature_sum.defined() ? add(feature_sum, f) : f;
    }
  }
  Tensor hard;
  if (block.hard_enabled) {
    hard = hard_loss(fwd.logits, labels);
    if (rep) rep->hard += hard.item();
  }
  Tensor attention;
  if (block.attention_enabled) {
    const Tensor& t_tap = teacher_tap_at(teacher, block.last_unit, "block_loss");
    attention = attention_loss(t_tap, fwd.output);
    if (rep) rep->attention += attention.item();
  }
  return total_loss_lakd(weights, hard, attention, feature_sum);
}

StepReport sdm_step(TapNet& student, std::vector<LocalBlock>& blocks,
                    const TeacherContext& teacher, const Tensor& images,
                    const std::vector<int>& labels, const LossWeights& weights,
                    const NdamConfig& ndam, const SgdConfig& sgd) {
  if (blocks.empty()) throw ContractError("sdm_step: empty block list");
  validate_weights(weights);

  StepReport rep;
  TapeScope scope;
  Tape* tape = Tape::active();

  Tensor x = images;
  for (auto& block : blocks) {
    BlockForward fwd = run_block(student, block, x);
    // boundary value for the next block: values pass, gradients do not
    Tensor next = block.terminal ? Tensor() : fwd.output.detach();
    Tensor loss = block_loss(block, fwd, teacher, labels, weights, ndam, &rep);
    if (loss.tracked()) backward(loss);
    apply_sgd(block.params, block.momentum, sgd);
    rep.block_losses.push_back(loss.item());
    rep.total += loss.item();
    x = next;
  }
  rep.peak_retained = tape->peak_retained();
  return rep;
}

EndToEndState make_e2e_state(const TapNet& net) {
  EndToEndState state;
  state.params = named_params(net);
  for (const auto& [name, p] : state.params) {
    (void)name;
    state.momentum.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void init_e2e_alignment(EndToEndState& state, const std::vector<int>& align_at,
                        const std::map<int, Shape>& student_chw,
                        const std::map<int, Shape>& teacher_chw, Rng& rng) {
  for (int a : align_at) {
    Projection proj = build_projection(a, student_chw, teacher_chw, rng);
    if (proj.kernel.defined()) {
      state.params.emplace_back("align" + std::to_string(a) + ".proj", proj.kernel);
      state.momentum.emplace_back(proj.kernel.numel(), 0.0);
    }
    state.projections[a] = std::move(proj);
  }
}

StepReport standard_step(TapNet& net, EndToEndState& state, const TeacherContext& teacher,
                         const Tensor& images, const std::vector<int>& labels,
                         const LossWeights& weights, Regime regime, const NdamConfig& ndam,
                         const SgdConfig& sgd) {
  validate_weights(weights);

  StepReport rep;
  TapeScope scope;
  Tape* tape = Tape::active();

  ForwardResult fwd = forward_with_taps(net, images);

  auto student_tap = [&](int a) -> const Tensor& {
    auto it = fwd.taps.find(a);
    if (it == fwd.taps.end()) {
      throw ContractError("standard_step: no student tap at unit " + std::to_string(a) +
                          "; tap_indices must cover the alignment indices");
    }
    return it->second;
  };

  Tensor total;
  if (regime == Regime::scratch) {
    Tensor hard = hard_loss(fwd.logits, labels);
    rep.hard = hard.item();
    total = hard;
  } else if (regime == Regime::traditional_kd) {
    Tensor hard = hard_loss(fwd.logits, labels);
    rep.hard = hard.item();
    if (!teacher.logits.defined()) {
      throw ContractError("standard_step: traditional distillation needs teacher logits");
    }
    Tensor soft = soft_loss(fwd.logits, teacher.logits, weights.temperature);
    rep.soft = soft.item();
    std::vector<Tensor> features;
    for (const auto& [a, proj] : state.projections) {
      const Tensor& t_tap = teacher_tap_at(teacher, a, "standard_step");
      Tensor f = aligned_feature_term(a, "end-to-end", proj, student_tap(a), t_tap,
                                      NdamConfig{});  // plain feature match, no weighting
      rep.feature += f.item();
      features.push_back(f);
    }
    total = total_loss_traditional(weights, hard, soft, features);
  } else {
    // same term order as the partitioned path: features, hard, attention
    Tensor feature_sum;
    for (const auto& [a, proj] : state.projections) {
      const Tensor& t_tap = teacher_tap_at(teacher, a, "standard_step");
      Tensor f = aligned_feature_term(a, "end-to-end", proj, student_tap(a), t_tap, ndam);
      rep.feature += f.item();
      feature_sum = feature_sum.defined() ? add(feature_sum, f) : f;
    }
    Tensor hard = hard_loss(fwd.logits, labels);
    rep.hard = hard.item();
    const Tensor& t_final = teacher_tap_at(teacher, net.depth, "standard_step");
    Tensor attention = attention_loss(t_final, student_tap(net.depth));
    rep.attention = attention.item();
    total = total_loss_lakd(weights, hard, attention, feature_sum);
  }

  if (total.tracked()) backward(total);
  apply_sgd(state.params, state.momentum, sgd);
  rep.block_losses.push_back(total.item());
  rep.total = total.item();
  rep.peak_retained = tape->peak_retained();
  return rep;
}

}  // namespace lakd
