#include "lakd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "lakd/error.hpp"
#include "lakd/ops.hpp"

namespace lakd {

namespace {

Tensor kaiming_conv(std::size_t out_c, std::size_t in_c, std::size_t k, Rng& rng) {
  double std = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  return Tensor::from({out_c, in_c, k, k}, rng.normal_vec(out_c * in_c * k * k, std), true);
}

// Channel width of the output of body unit u under the three-stage layout.
int unit_out_width(int u, int depth, int width) {
  auto ends = stage_ends(depth);
  if (u <= ends[0]) return width;
  if (ends.size() >= 2 && u <= ends[1]) return 2 * width;
  return 4 * width;
}

}  // namespace

std::vector<int> stage_ends(int depth) {
  int a = (depth + 2) / 3;
  int b = (depth - a + 1) / 2;
  std::vector<int> ends{a};
  if (b > 0) ends.push_back(a + b);
  if (depth > a + b) ends.push_back(depth);
  return ends;
}

TapNet build_tapnet(int depth, int width, int num_classes, std::uint64_t seed) {
  if (depth < 2) throw ConfigError("build_tapnet: depth must be at least 2");
  if (width < 1) throw ConfigError("build_tapnet: width must be positive");
  if (num_classes < 1) throw ConfigError("build_tapnet: num_classes must be positive");

  TapNet net;
  net.depth = depth;
  net.width = width;
  net.num_classes = num_classes;
  Rng rng(seed);

  auto ends = stage_ends(depth);
  int cur = 0;  // input channels of the next unit (3 for the stem handled below)
  for (int u = 1; u <= depth; ++u) {
    LayerUnit unit;
    unit.index = u;
    std::string tag = "u" + std::to_string(u);
    int out = unit_out_width(u, depth, width);
    if (u == 1) {
      unit.kind = UnitKind::conv_relu;
      unit.params.emplace_back(tag + ".conv", kaiming_conv(out, 3, 3, rng));
    } else if (out != cur) {
      unit.kind = UnitKind::downsample;
      unit.params.emplace_back(tag + ".conv", kaiming_conv(out, cur, 3, rng));
    } else {
      unit.kind = UnitKind::residual_block;
      unit.params.emplace_back(tag + ".conv_a", kaiming_conv(out, cur, 3, rng));
      unit.params.emplace_back(tag + ".conv_b", kaiming_conv(out, cur, 3, rng));
    }
    cur = out;
    net.units.push_back(std::move(unit));
  }

  LayerUnit pool;
  pool.kind = UnitKind::global_pool;
  pool.index = depth + 1;
  net.units.push_back(std::move(pool));

  LayerUnit head;
  head.kind = UnitKind::classifier;
  head.index = depth + 2;
  double std = std::sqrt(2.0 / static_cast<double>(cur));
  head.params.emplace_back(
      "head.fc_w", Tensor::from({static_cast<std::size_t>(cur),
                                 static_cast<std::size_t>(num_classes)},
                                rng.normal_vec(static_cast<std::size_t>(cur * num_classes), std),
                                true));
  head.params.emplace_back("head.fc_b",
                           Tensor::zeros({static_cast<std::size_t>(num_classes)}, true));
  net.units.push_back(std::move(head));

  net.tap_indices = ends;
  return net;
}

void set_taps(TapNet& net, std::vector<int> taps) {
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 1 || taps[i] > net.depth) {
      throw ConfigError("tap index " + std::to_string(taps[i]) + " outside [1," +
                        std::to_string(net.depth) + "]");
    }
    if (i > 0 && taps[i] <= taps[i - 1]) {
      throw ConfigError("tap indices must be strictly increasing");
    }
  }
  net.tap_indices = std::move(taps);
}

void set_frozen(TapNet& net, bool frozen) {
  net.frozen = frozen;
  for (auto& unit : net.units) {
    for (auto& [name, t] : unit.params) t.set_requires_grad(!frozen);
  }
}

TapNet clone(const TapNet& net) {
  TapNet out;
  out.depth = net.depth;
  out.width = net.width;
  out.num_classes = net.num_classes;
  out.frozen = net.frozen;
  out.tap_indices = net.tap_indices;
  for (const auto& unit : net.units) {
    LayerUnit cu;
    cu.kind = unit.kind;
    cu.index = unit.index;
    for (const auto& [name, t] : unit.params) {
      cu.params.emplace_back(name, Tensor::from(t.shape(), t.values(), t.requires_grad()));
    }
    out.units.push_back(std::move(cu));
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> named_params(const TapNet& net) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& unit : net.units) {
    for (const auto& [name, t] : unit.params) out.emplace_back(name, t);
  }
  return out;
}

Tensor run_unit(const TapNet& net, int unit_index, const Tensor& x) {
  if (unit_index < 1 || unit_index > net.depth) {
    throw ContractError("run_unit: unit " + std::to_string(unit_index) + " outside body [1," +
                        std::to_string(net.depth) + "]");
  }
  const LayerUnit& unit = net.units[static_cast<std::size_t>(unit_index - 1)];
  switch (unit.kind) {
    case UnitKind::conv_relu:
      return relu(conv2d(x, unit.params[0].second, 1, 1));
    case UnitKind::downsample:
      return relu(conv2d(x, unit.params[0].second, 2, 1));
    case UnitKind::residual_block: {
      Tensor h = relu(conv2d(x, unit.params[0].second, 1, 1));
      return relu(add(x, conv2d(h, unit.params[1].second, 1, 1)));
    }
    default:
      throw ContractError("run_unit: unit " + std::to_string(unit_index) + " is not a body unit");
  }
}

Tensor head_forward(const TapNet& net, const Tensor& features) {
  const LayerUnit& head = net.units.back();
  Tensor pooled = global_avg_pool(features);
  return add_rowvec(matmul(pooled, head.params[0].second), head.params[1].second);
}

ForwardResult forward_with_taps(const TapNet& net, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw DimensionError("forward: expected a [N,3,H,W] batch, got " + shape_str(batch.shape()));
  }
  ForwardResult res;
  Tensor x = batch;
  std::size_t next_tap = 0;
  for (int u = 1; u <= net.depth; ++u) {
    x = run_unit(net, u, x);
    if (next_tap < net.tap_indices.size() && net.tap_indices[next_tap] == u) {
      res.taps.emplace(u, x);
      ++next_tap;
    }
  }
  res.logits = head_forward(net, x);
  return res;
}

Projection make_projection(const Shape& student_chw, const Shape& teacher_chw, Rng& rng) {
  if (student_chw.size() != 3 || teacher_chw.size() != 3) {
    throw DimensionError("make_projection: tap shapes must be [C,H,W]");
  }
  std::size_t cs = student_chw[0], hs = student_chw[1], ws = student_chw[2];
  std::size_t ct = teacher_chw[0], ht = teacher_chw[1], wt = teacher_chw[2];
  Projection p;
  if (hs != ht || ws != wt) {
    if (hs >= ht) {
      if (hs % ht != 0 || ws % wt != 0 || hs / ht != ws / wt) {
        throw DimensionError("make_projection: spatial sizes not related by an integer factor: " +
                             shape_str(student_chw) + " vs " + shape_str(teacher_chw));
      }
      p.pool_factor = static_cast<int>(hs / ht);
    } else {
      if (ht % hs != 0 || wt % ws != 0 || ht / hs != wt / ws) {
        throw DimensionError("make_projection: spatial sizes not related by an integer factor: " +
                             shape_str(student_chw) + " vs " + shape_str(teacher_chw));
      }
      p.up_factor = static_cast<int>(ht / hs);
    }
    p.identity = false;
  }
  if (cs != ct) {
    double std = std::sqrt(2.0 / static_cast<double>(cs));
    p.kernel = Tensor::from({ct, cs, 1, 1}, rng.normal_vec(ct * cs, std), true);
    p.identity = false;
  }
  return p;
}

Tensor project_features(const Projection& proj, const Tensor& student_tap) {
  if (proj.identity) return student_tap;
  Tensor x = student_tap;
  if (proj.pool_factor > 1) x = avg_pool2d(x, proj.pool_factor, proj.pool_factor, 0);
  if (proj.up_factor > 1) x = upsample_nearest(x, proj.up_factor);
  if (proj.kernel.defined()) x = conv2d(x, proj.kernel, 1, 0);
  return x;
}

// ------------------------------------------------------------- checkpoint

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ofstream& f, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(f, bits);
}

std::uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw FormatError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  if (!f) throw FormatError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::ifstream& f) {
  std::uint64_t bits = get_u64(f);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const TapNet& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
  f.write("LAKD", 4);
  put_u32(f, kCheckpointVersion);
  put_u32(f, static_cast<std::uint32_t>(net.units.size()));
  for (const auto& [name, t] : named_params(net)) {
    put_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(f, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) put_u64(f, t.dim(d));
    for (double v : t.values()) put_f64(f, v);
  }
  if (!f) throw FormatError("checkpoint: write failed for " + path);
}

TapNet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "LAKD", 4) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  std::uint32_t version = get_u32(f);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  std::uint32_t unit_count = get_u32(f);
  if (unit_count < 4) throw FormatError("checkpoint: implausible unit count");
  int depth = static_cast<int>(unit_count) - 2;

  // Parameter records, in file order.
  std::vector<std::pair<std::string, Tensor>> records;
  while (f.peek() != std::ifstream::traits_type::eof()) {
    std::uint32_t name_len = get_u32(f);
    if (name_len == 0 || name_len > 256) throw FormatError("checkpoint: bad parameter name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw FormatError("checkpoint: truncated parameter name");
    std::uint32_t rank = get_u32(f);
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for " + name);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = get_u64(f);
      if (d == 0) throw FormatError("checkpoint: zero dimension in " + name);
      numel *= d;
    }
    std::vector<double> vals(numel);
    for (auto& v : vals) v = get_f64(f);
    records.emplace_back(name, Tensor::from(shape, std::move(vals)));
  }

  // Reconstruct the architecture from the stem kernel and classifier bias.
  int width = 0, num_classes = 0;
  for (const auto& [name, t] : records) {
    if (name == "u1.conv") width = static_cast<int>(t.dim(0));
    if (name == "head.fc_b") num_classes = static_cast<int>(t.dim(0));
  }
  if (width == 0 || num_classes == 0) {
    throw FormatError("checkpoint: missing stem or classifier parameters");
  }
  TapNet net = build_tapnet(depth, width, num_classes, 0);
  auto params = named_params(net);
  if (params.size() != records.size()) {
    throw FormatError("checkpoint: parameter count " + std::to_string(records.size()) +
                      " does not match a depth-" + std::to_string(depth) + " network (" +
                      std::to_string(params.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != records[i].first) {
      throw FormatError("checkpoint: unexpected parameter " + records[i].first + " (wanted " +
                        params[i].first + ")");
    }
    if (params[i].second.shape() != records[i].second.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + records[i].first + ": " +
                        shape_str(records[i].second.shape()) + " vs " +
                        shape_str(params[i].second.shape()));
    }
    params[i].second.values_mut() = records[i].second.values();
  }
  return net;
}

}  // namespace lakd
