#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lakd/losses.hpp"
#include "lakd/model.hpp"
#include "lakd/ndam.hpp"
#include "lakd/rng.hpp"
#include "lakd/tensor.hpp"

namespace lakd {

// ---- optimizer ----------------------------------------------------------

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// Nesterov momentum with coupled weight decay. Every training path funnels
// through this one routine, so equal gradients imply bitwise-equal updates.
void sgd_update(Tensor& param, std::vector<double>& velocity, const std::vector<double>& grad,
                const SgdConfig& cfg);

// Linear schedule: base * (1 - epoch/total).
double decayed_lr(double base_lr, std::size_t epoch, std::size_t total_epochs);

// ---- partitioning -------------------------------------------------------

// Where the student is cut into gradient-independent blocks and where the
// teacher alignment losses attach. The terminal flags decide which global
// terms the last block carries (feature covers the aligns falling inside it).
struct PartitionPlan {
  std::vector<int> detach_after;  // strictly increasing, within [1, depth)
  std::vector<int> align_at;      // strictly increasing, within [1, depth]
  bool terminal_hard = true;
  bool terminal_attention = true;
  bool terminal_feature = true;
};

enum class AlignMode { standard, forward_shifted };

// [n,2n,3n] -> itself (standard) or [1, n+1, 3n] (forward-shifted).
std::vector<int> remap_alignment(const std::vector<int>& base_align, AlignMode mode);

// One contiguous unit range plus everything needed to train it in
// isolation: its parameter handles (shared with the net), momentum buffers,
// and the student->teacher projections for its alignment taps.
struct LocalBlock {
  int first_unit = 1;
  int last_unit = 1;
  bool terminal = false;
  bool hard_enabled = false;
  bool attention_enabled = false;
  bool feature_enabled = true;
  std::vector<int> align;
  std::map<int, Projection> projections;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::vector<double>> momentum;  // parallel to params
};

// D detach points -> D+1 blocks tiling [1, depth]; the last block also owns
// the head parameters.
std::vector<LocalBlock> partition(const TapNet& student, const PartitionPlan& plan);

// Tap shapes (C,H,W) at the requested unit indices, probed without a graph.
std::map<int, Shape> probe_tap_shapes(const TapNet& net, const Tensor& batch,
                                      const std::vector<int>& indices);

// Builds one projection per align index from probed shapes and registers any
// learnable kernel (plus its momentum) with the owning block.
void init_alignment(std::vector<LocalBlock>& blocks, const std::map<int, Shape>& student_chw,
                    const std::map<int, Shape>& teacher_chw, Rng& rng);

// ---- stepping -----------------------------------------------------------

// Teacher-attention weighting of the student tap right before feature_loss.
// weight_projected picks whether the map multiplies the projected tap (its
// spatial size always matches the teacher) or the raw one.
struct NdamConfig {
  double alpha_pool = 0.0;
  double beta_pool = 0.0;
  bool use_abs = true;
  bool weight_projected = true;
  // skip the weighting calls outright instead of letting them no-op; the
  // ablation harness compares this against alpha = beta = 0 bitwise
  bool bypass = false;

  bool enabled() const { return alpha_pool != 0.0 || beta_pool != 0.0; }
};

// Frozen-teacher context for one batch: detached taps keyed by unit index
// (alignment indices, plus the final unit when attention is on) and
// untracked logits for the soft loss.
struct TeacherContext {
  std::map<int, Tensor> taps;
  Tensor logits;
};

// Runs the teacher without a graph and collects taps at the given indices
// plus its logits.
TeacherContext make_teacher_context(const TapNet& teacher, const Tensor& images,
                                    const std::vector<int>& tap_indices);

struct StepReport {
  std::vector<double> block_losses;  // scalar local loss per block
  double total = 0.0;
  double hard = 0.0;       // unweighted term values, summed where repeated
  double soft = 0.0;
  double attention = 0.0;
  double feature = 0.0;
  std::size_t peak_retained = 0;  // peak retained-activation slots this step
};

struct BlockForward {
  Tensor output;               // final unit's activation of the block
  Tensor logits;               // defined on the terminal block only
  std::map<int, Tensor> taps;  // align index -> activation
};

// Units first..last applied in order from an (already detached) input.
BlockForward run_block(const TapNet& net, const LocalBlock& block, const Tensor& input);

// The block's local objective: feature terms at its align taps, plus hard
// and attention on the terminal block per its flags. Returns an untracked
// zero scalar when the block carries no terms. Term values accumulate into
// rep when given.
Tensor block_loss(const LocalBlock& block, const BlockForward& fwd, const TeacherContext& teacher,
                  const std::vector<int>& labels, const LossWeights& weights,
                  const NdamConfig& ndam, StepReport* rep);

// One partitioned training step: per block in forward order, run the block,
// detach its boundary value, backpropagate the local loss, update the
// block's parameters — so only one block's subgraph is ever held at once.
StepReport sdm_step(TapNet& student, std::vector<LocalBlock>& blocks,
                    const TeacherContext& teacher, const Tensor& images,
                    const std::vector<int>& labels, const LossWeights& weights,
                    const NdamConfig& ndam, const SgdConfig& sgd);

// ---- end-to-end reference path ------------------------------------------

enum class Regime { scratch, traditional_kd, lakd };

// Optimizer and alignment state for unpartitioned training: all net
// parameters (then any projection kernels) with their momentum buffers.
struct EndToEndState {
  std::map<int, Projection> projections;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::vector<double>> momentum;
};

EndToEndState make_e2e_state(const TapNet& net);

void init_e2e_alignment(EndToEndState& state, const std::vector<int>& align_at,
                        const std::map<int, Shape>& student_chw,
                        const std::map<int, Shape>& teacher_chw, Rng& rng);

// One unpartitioned step: single forward, one composite loss per the
// regime, one backward, the shared sgd routine over every parameter. The
// net's tap_indices must cover the alignment indices (and the final unit
// for the attention term).
StepReport standard_step(TapNet& net, EndToEndState& state, const TeacherContext& teacher,
                         const Tensor& images, const std::vector<int>& labels,
                         const LossWeights& weights, Regime regime, const NdamConfig& ndam,
                         const SgdConfig& sgd);

}  // namespace lakd
