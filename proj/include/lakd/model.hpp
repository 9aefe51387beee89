#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lakd/rng.hpp"
#include "lakd/tensor.hpp"

namespace lakd {

// Small conv-relu network family with named tap points. Teacher and student
// are the same family at different (depth, width); depth counts the body
// units, after which a global pool and a linear classifier always follow.
//
// Body layout for depth d: unit 1 is a conv-relu stem (3 -> width). The body
// splits into three stages of ceil(d/3), ceil(rest/2), rest units; the first
// unit of stage 2 and of stage 3 downsamples (stride 2) and doubles the
// channels; every other unit past the stem is a residual block. Stage-end
// indices are the natural tap points (e.g. depth 9 -> 3, 6, 9).

enum class UnitKind { conv_relu, residual_block, downsample, global_pool, classifier };

struct LayerUnit {
  UnitKind kind;
  int index = 0;  // 1-based; body units run 1..depth, head units follow
  std::vector<std::pair<std::string, Tensor>> params;
};

struct TapNet {
  std::vector<LayerUnit> units;  // body units, then global_pool, classifier
  std::vector<int> tap_indices;  // strictly increasing, within [1, depth]
  int depth = 0;
  int width = 0;
  int num_classes = 0;
  bool frozen = false;
};

struct ForwardResult {
  Tensor logits;                // [N, num_classes], pre-softmax
  std::map<int, Tensor> taps;   // unit index -> feature map
};

TapNet build_tapnet(int depth, int width, int num_classes, std::uint64_t seed);

// Stage-end indices for a given depth (the default tap/alignment layout).
std::vector<int> stage_ends(int depth);

void set_taps(TapNet& net, std::vector<int> taps);
void set_frozen(TapNet& net, bool frozen);
TapNet clone(const TapNet& net);

// Parameters in a fixed deterministic order (creation order); handles share
// storage with the net, so in-place updates train it.
std::vector<std::pair<std::string, Tensor>> named_params(const TapNet& net);

// One body unit applied to its input; unit_index is 1-based.
Tensor run_unit(const TapNet& net, int unit_index, const Tensor& x);
// Global pool + classifier on the final body output.
Tensor head_forward(const TapNet& net, const Tensor& features);
// Full forward; taps are collected at the configured tap_indices.
ForwardResult forward_with_taps(const TapNet& net, const Tensor& batch);

// Shape reconciliation between a student tap and its teacher counterpart:
// spatial resampling (average pool down / nearest upsample) plus a learnable
// 1x1 convolution when channel counts differ. Identity when shapes match.
struct Projection {
  Tensor kernel;        // [Ct, Cs, 1, 1]; undefined when channels match
  int pool_factor = 1;  // >1: average-pool by this factor
  int up_factor = 1;    // >1: nearest-upsample by this factor
  bool identity = true;
};

// chw shapes exclude the batch axis.
Projection make_projection(const Shape& student_chw, const Shape& teacher_chw, Rng& rng);
Tensor project_features(const Projection& proj, const Tensor& student_tap);

// Binary checkpoint container. Header: magic "LAKD", format version u32,
// unit count u32. Then one record per parameter: name length u32, utf-8
// name, rank u32, dims u64 each, float64 payload. All integers and floats
// little-endian. Round-trips bit-exactly.
void save_checkpoint(const TapNet& net, const std::string& path);
TapNet load_checkpoint(const std::string& path);

}  // namespace lakd
