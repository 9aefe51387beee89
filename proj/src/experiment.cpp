#include "lakd/experiment.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "lakd/error.hpp"
#include "lakd/metrics.hpp"
#include "lakd/model.hpp"
#include "lakd/ndam.hpp"
#include "lakd/ops.hpp"
#include "lakd/rng.hpp"

namespace lakd {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw ConfigError("config field " + path + ": " + what);
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) field_error(path + "." + it.key(), "unknown field");
  }
}

const json* member(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double num_field(const json& j, const std::string& path, const char* key, double fb) {
  const json* m = member(j, key);
  if (!m) return fb;
  if (!m->is_number()) field_error(path + "." + key, "expected a number");
  return m->get<double>();
}

bool bool_field(const json& j, const std::string& path, const char* key, bool fb) {
  const json* m = member(j, key);
  if (!m) return fb;
  if (!m->is_boolean()) field_error(path + "." + key, "expected a boolean");
  return m->get<bool>();
}

std::string str_field(const json& j, const std::string& path, const char* key,
                      const std::string& fb) {
  const json* m = member(j, key);
  if (!m) return fb;
  if (!m->is_string()) field_error(path + "." + key, "expected a string");
  return m->get<std::string>();
}

std::uint64_t u64_field(const json& j, const std::string& path, const char* key,
                        std::uint64_t fb) {
  const json* m = member(j, key);
  if (!m) return fb;
  if (!m->is_number_integer() || (m->is_number_integer() && m->get<std::int64_t>() < 0 &&
                                  !m->is_number_unsigned()))
    field_error(path + "." + key, "expected a non-negative integer");
  return m->get<std::uint64_t>();
}

int int_field(const json& j, const std::string& path, const char* key, int fb) {
  const json* m = member(j, key);
  if (!m) return fb;
  if (!m->is_number_integer()) field_error(path + "." + key, "expected an integer");
  return m->get<int>();
}

std::size_t size_field(const json& j, const std::string& path, const char* key, std::size_t fb) {
  return static_cast<std::size_t>(u64_field(j, path, key, fb));
}

std::vector<int> int_list_field(const json& j, const std::string& path, const char* key) {
  const json* m = member(j, key);
  if (!m) return {};
  if (!m->is_array()) field_error(path + "." + key, "expected an array of integers");
  std::vector<int> out;
  for (const auto& v : *m) {
    if (!v.is_number_integer()) field_error(path + "." + key, "expected an array of integers");
    out.push_back(v.get<int>());
  }
  return out;
}

// shortest representation that parses back to the same double
std::string fmt(double v) {
  std::array<char, 32> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// [count, 3, H, W] batch of consecutive samples in dataset order
LabeledBatch materialize(const Dataset& ds, std::size_t first, std::size_t count,
                         const Normalization* norm) {
  const std::size_t ss = ds.sample_size();
  const std::size_t hw = ds.height * ds.width;
  std::vector<double> px(count * ss);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double* src = ds.pixels.data() + (first + i) * ss;
    double* dst = px.data() + i * ss;
    std::copy(src, src + ss, dst);
    if (norm) {
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < hw; ++k)
          dst[c * hw + k] = (dst[c * hw + k] - norm->mean[c]) / norm->stddev[c];
    }
    labels[i] = ds.labels[first + i];
  }
  LabeledBatch out;
  out.images = Tensor::from({count, 3, ds.height, ds.width}, std::move(px));
  out.labels = std::move(labels);
  return out;
}

struct EvalPass {
  double top1 = 0, top5 = 0;
  std::vector<int> preds;
};

// validation metrics over the dataset in natural order
EvalPass eval_net(const TapNet& net, const Dataset& ds, std::size_t batch,
                  const Normalization* norm) {
  NoGradGuard ng;
  EvalPass out;
  const std::size_t count = ds.count();
  out.preds.reserve(count);
  const int k5 = std::min(5, net.num_classes);
  double hit1 = 0, hitk = 0;
  for (std::size_t ofs = 0; ofs < count; ofs += batch) {
    const std::size_t n = std::min(batch, count - ofs);
    LabeledBatch b = materialize(ds, ofs, n, norm);
    ForwardResult res = forward_with_taps(net, b.images);
    std::vector<int> am = argmax_predictions(res.logits);
    for (std::size_t i = 0; i < n; ++i) {
      if (am[i] == b.labels[i]) hit1 += 1.0;
      out.preds.push_back(am[i]);
    }
    hitk += topk_accuracy(res.logits, b.labels, k5) * static_cast<double>(n);
  }
  out.top1 = hit1 / static_cast<double>(count);
  out.top5 = hitk / static_cast<double>(count);
  return out;
}

const Projection* find_projection(const std::vector<LocalBlock>& blocks,
                                  const EndToEndState& state, Regime regime, int a) {
  if (regime == Regime::lakd) {
    for (const auto& b : blocks) {
      auto it = b.projections.find(a);
      if (it != b.projections.end()) return &it->second;
    }
    return nullptr;
  }
  auto it = state.projections.find(a);
  return it == state.projections.end() ? nullptr : &it->second;
}

// projected-student vs teacher distances at the alignment taps; empty when
// no projections were trained (nothing meaningful to report)
std::vector<double> eval_layer_l2(const TapNet& student, const TapNet& teacher,
                                  const std::vector<int>& align,
                                  const std::vector<LocalBlock>& blocks,
                                  const EndToEndState& state, Regime regime,
                                  const Tensor& probe_images) {
  if (align.empty()) return {};
  NoGradGuard ng;
  ForwardResult s_res = forward_with_taps(student, probe_images);
  ForwardResult t_res = forward_with_taps(teacher, probe_images);
  std::vector<Tensor> s_taps, t_taps;
  for (int a : align) {
    const Projection* proj = find_projection(blocks, state, regime, a);
    if (!proj) return {};
    s_taps.push_back(project_features(*proj, s_res.taps.at(a)));
    t_taps.push_back(t_res.taps.at(a));
  }
  return layer_l2_report(t_taps, s_taps);
}

CkaMatrix eval_cka(const TapNet& student, const TapNet& teacher, const Tensor& probe_images,
                   std::uint64_t seed) {
  CkaMatrix m;
  m.taps = stage_ends(student.depth);
  const std::size_t k = m.taps.size();
  m.values.assign(k * k, std::numeric_limits<double>::quiet_NaN());
  NoGradGuard ng;
  ForwardResult s_res = forward_with_taps(student, probe_images);
  ForwardResult t_res = forward_with_taps(teacher, probe_images);
  const std::size_t n = probe_images.shape()[0];
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      CkaInput in;
      in.n = n;
      cka_features(s_res.taps.at(m.taps[i]), 128, Rng::mix(seed, 0xcca0 + i), in.x, in.p);
      cka_features(t_res.taps.at(m.taps[j]), 128, Rng::mix(seed, 0xccb0 + j), in.y, in.q);
      try {
        m.values[i * k + j] = cka_linear(in);
      } catch (const ContractError&) {
        // degenerate activations stay NaN
      }
    }
  }
  return m;
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    int v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
      throw ConfigError(what + ": '" + tok + "' is not an integer");
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError(what + ": '" + s + "' is not a number");
  return v;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ContractError("cannot open for writing: " + path);
  f << content;
  if (!f) throw ContractError("write failed: " + path);
}

Normalization source_norm(const RunConfig& config) {
  Normalization norm;  // defaults are the CIFAR channel statistics
  if (config.data.cifar_path.empty()) {
    norm.mean = {0.5, 0.5, 0.5};
    norm.stddev = {0.5, 0.5, 0.5};
  }
  return norm;
}

}  // namespace

int dataset_classes(const RunConfig& config) {
  return config.data.cifar_path.empty() ? static_cast<int>(config.data.synth.num_classes) : 10;
}

std::string regime_name(Regime regime) {
  switch (regime) {
    case Regime::scratch: return "scratch";
    case Regime::traditional_kd: return "traditional-kd";
    case Regime::lakd: return "lakd";
  }
  throw ContractError("unknown regime value");
}

Regime regime_from_name(const std::string& name) {
  if (name == "scratch") return Regime::scratch;
  if (name == "traditional-kd") return Regime::traditional_kd;
  if (name == "lakd") return Regime::lakd;
  throw ConfigError("config field regime: unknown regime '" + name +
                    "' (expected scratch, traditional-kd or lakd)");
}

void validate_config(const RunConfig& c) {
  validate_weights(c.weights);
  if (c.student_depth < 1) throw ConfigError("config field student.depth: must be at least 1");
  if (c.student_width < 1) throw ConfigError("config field student.width: must be at least 1");
  if (!(c.opt.lr > 0)) throw ConfigError("config field optimizer.lr: must be positive");
  if (c.opt.momentum < 0 || c.opt.momentum >= 1)
    throw ConfigError("config field optimizer.momentum: must lie in [0, 1)");
  if (c.opt.weight_decay < 0)
    throw ConfigError("config field optimizer.weight_decay: must be non-negative");
  if (c.opt.epochs < 1) throw ConfigError("config field optimizer.epochs: must be at least 1");
  if (c.opt.batch_size < 1)
    throw ConfigError("config field optimizer.batch_size: must be at least 1");
  if (c.ndam.alpha_pool < 0 || c.ndam.beta_pool < 0)
    throw ConfigError("config field ndam: pooling weights must be non-negative");
  if (!c.data.cifar_path.empty() && !fs::exists(c.data.cifar_path))
    throw ConfigError("config field data.cifar_path: no such file: " + c.data.cifar_path);
  if (c.regime != Regime::scratch) {
    if (c.teacher_checkpoint.empty())
      throw ConfigError("config field teacher_checkpoint: required for regime " +
                        regime_name(c.regime));
    if (!fs::exists(c.teacher_checkpoint))
      throw ConfigError("config field teacher_checkpoint: no such file: " + c.teacher_checkpoint);
  }
  if (c.regime != Regime::lakd && !c.detach_after.empty())
    throw ConfigError("config field plan.detach_after: only meaningful for the lakd regime");
  auto check_units = [&](const std::vector<int>& v, const char* name) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1 || v[i] > c.student_depth)
        throw ConfigError(std::string("config field plan.") + name + ": unit index " +
                          std::to_string(v[i]) + " out of range for depth " +
                          std::to_string(c.student_depth));
      if (i && v[i] <= v[i - 1])
        throw ConfigError(std::string("config field plan.") + name +
                          ": indices must be strictly increasing");
    }
  };
  check_units(c.detach_after, "detach_after");
  check_units(c.align_at, "align_at");
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["data"] = {{"cifar_path", c.data.cifar_path},
               {"synth",
                {{"num_classes", c.data.synth.num_classes},
                 {"samples", c.data.synth.samples},
                 {"image_size", c.data.synth.image_size},
                 {"sigma", c.data.synth.sigma},
                 {"seed", c.data.synth.seed}}},
               {"train_count", c.data.train_count},
               {"val_count", c.data.val_count},
               {"shuffle_seed", c.data.shuffle_seed}};
  j["normalize"] = c.normalize;
  j["augment"] = c.augment;
  j["student"] = {{"depth", c.student_depth}, {"width", c.student_width}};
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  j["regime"] = regime_name(c.regime);
  j["weights"] = {{"alpha", c.weights.alpha},
                  {"beta", c.weights.beta},
                  {"temperature", c.weights.temperature}};
  j["plan"] = {{"detach_after", c.detach_after},
               {"align_at", c.align_at},
               {"terminal_hard", c.terminal_hard},
               {"terminal_attention", c.terminal_attention},
               {"terminal_feature", c.terminal_feature}};
  j["ndam"] = {{"alpha_pool", c.ndam.alpha_pool},
               {"beta_pool", c.ndam.beta_pool},
               {"use_abs", c.ndam.use_abs},
               {"weight_projected", c.ndam.weight_projected},
               {"bypass", c.ndam.bypass}};
  j["optimizer"] = {{"lr", c.opt.lr},
                    {"momentum", c.opt.momentum},
                    {"weight_decay", c.opt.weight_decay},
                    {"epochs", c.opt.epochs},
                    {"batch_size", c.opt.batch_size}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j.dump();
}

RunConfig config_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j, "config",
             {"data", "normalize", "augment", "student", "teacher_checkpoint", "regime",
              "weights", "plan", "ndam", "optimizer", "seed", "out_dir"});
  RunConfig c;
  if (const json* d = member(j, "data")) {
    if (!d->is_object()) field_error("data", "expected an object");
    check_keys(*d, "data", {"cifar_path", "synth", "train_count", "val_count", "shuffle_seed"});
    c.data.cifar_path = str_field(*d, "data", "cifar_path", "");
    if (const json* s = member(*d, "synth")) {
      if (!s->is_object()) field_error("data.synth", "expected an object");
      check_keys(*s, "data.synth", {"num_classes", "samples", "image_size", "sigma", "seed"});
      c.data.synth.num_classes = size_field(*s, "data.synth", "num_classes", 3);
      c.data.synth.samples = size_field(*s, "data.synth", "samples", 0);
      c.data.synth.image_size = size_field(*s, "data.synth", "image_size", 16);
      c.data.synth.sigma = num_field(*s, "data.synth", "sigma", 0.15);
      c.data.synth.seed = u64_field(*s, "data.synth", "seed", 0);
    }
    c.data.train_count = size_field(*d, "data", "train_count", 0);
    c.data.val_count = size_field(*d, "data", "val_count", 0);
    c.data.shuffle_seed = u64_field(*d, "data", "shuffle_seed", 0);
  }
  c.normalize = bool_field(j, "config", "normalize", true);
  c.augment = bool_field(j, "config", "augment", true);
  if (const json* s = member(j, "student")) {
    if (!s->is_object()) field_error("student", "expected an object");
    check_keys(*s, "student", {"depth", "width"});
    c.student_depth = int_field(*s, "student", "depth", 4);
    c.student_width = int_field(*s, "student", "width", 8);
  }
  c.teacher_checkpoint = str_field(j, "config", "teacher_checkpoint", "");
  c.regime = regime_from_name(str_field(j, "config", "regime", "scratch"));
  if (const json* w = member(j, "weights")) {
    if (!w->is_object()) field_error("weights", "expected an object");
    check_keys(*w, "weights", {"alpha", "beta", "temperature"});
    c.weights.alpha = num_field(*w, "weights", "alpha", c.weights.alpha);
    c.weights.beta = num_field(*w, "weights", "beta", c.weights.beta);
    c.weights.temperature = num_field(*w, "weights", "temperature", c.weights.temperature);
  }
  if (const json* p = member(j, "plan")) {
    if (!p->is_object()) field_error("plan", "expected an object");
    check_keys(*p, "plan",
               {"detach_after", "align_at", "terminal_hard", "terminal_attention",
                "terminal_feature"});
    c.detach_after = int_list_field(*p, "plan", "detach_after");
    c.align_at = int_list_field(*p, "plan", "align_at");
    c.terminal_hard = bool_field(*p, "plan", "terminal_hard", true);
    c.terminal_attention = bool_field(*p, "plan", "terminal_attention", true);
    c.terminal_feature = bool_field(*p, "plan", "terminal_feature", true);
  }
  if (const json* n = member(j, "ndam")) {
    if (!n->is_object()) field_error("ndam", "expected an object");
    check_keys(*n, "ndam", {"alpha_pool", "beta_pool", "use_abs", "weight_projected", "bypass"});
    c.ndam.alpha_pool = num_field(*n, "ndam", "alpha_pool", 0.0);
    c.ndam.beta_pool = num_field(*n, "ndam", "beta_pool", 0.0);
    c.ndam.use_abs = bool_field(*n, "ndam", "use_abs", true);
    c.ndam.weight_projected = bool_field(*n, "ndam", "weight_projected", true);
    c.ndam.bypass = bool_field(*n, "ndam", "bypass", false);
  }
  if (const json* o = member(j, "optimizer")) {
    if (!o->is_object()) field_error("optimizer", "expected an object");
    check_keys(*o, "optimizer", {"lr", "momentum", "weight_decay", "epochs", "batch_size"});
    c.opt.lr = num_field(*o, "optimizer", "lr", c.opt.lr);
    c.opt.momentum = num_field(*o, "optimizer", "momentum", c.opt.momentum);
    c.opt.weight_decay = num_field(*o, "optimizer", "weight_decay", c.opt.weight_decay);
    c.opt.epochs = size_field(*o, "optimizer", "epochs", c.opt.epochs);
    c.opt.batch_size = size_field(*o, "optimizer", "batch_size", c.opt.batch_size);
  }
  c.seed = u64_field(j, "config", "seed", 1);
  c.out_dir = str_field(j, "config", "out_dir", "");
  return c;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = fnv1a64(config_to_json(config));
  std::array<char, 17> buf{};
  for (int i = 15; i >= 0; --i) {
    buf[i] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  return std::string(buf.data(), 16);
}

std::vector<std::string> csv_header(const RunConfig& config) {
  std::vector<std::string> cols = {"epoch", "hard",     "soft", "attention", "feature",
                                   "total", "top1",     "top5", "ek"};
  if (config.regime != Regime::scratch)
    for (int a : config.align_at) cols.push_back("l2_u" + std::to_string(a));
  cols.push_back("peak_retained");
  cols.push_back("seconds");
  return cols;
}

std::string record_to_csv(const RunConfig& config, const RunRecord& rec) {
  std::string out = "# config_hash=" + rec.hash + "\n";
  auto cols = csv_header(config);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) out += ',';
    out += cols[i];
  }
  out += '\n';
  const std::size_t l2_cols = config.regime != Regime::scratch ? config.align_at.size() : 0;
  for (const EpochRow& r : rec.rows) {
    out += std::to_string(r.epoch);
    for (double v : {r.hard, r.soft, r.attention, r.feature, r.total, r.top1, r.top5})
      out += ',' + fmt(v);
    out += ',';
    if (r.ek_defined) out += fmt(r.ek);
    for (std::size_t i = 0; i < l2_cols; ++i) {
      out += ',';
      if (i < r.layer_l2.size()) out += fmt(r.layer_l2[i]);
    }
    out += ',' + std::to_string(r.peak_retained);
    out += ',' + fmt(r.seconds);
    out += '\n';
  }
  return out;
}

std::string record_to_json(const RunConfig& config, const RunRecord& rec) {
  json j;
  j["config"] = json::parse(config_to_json(config));
  j["config_hash"] = rec.hash;
  json rows = json::array();
  for (const EpochRow& r : rec.rows) {
    json row;
    row["epoch"] = r.epoch;
    row["hard"] = r.hard;
    row["soft"] = r.soft;
    row["attention"] = r.attention;
    row["feature"] = r.feature;
    row["total"] = r.total;
    row["top1"] = r.top1;
    row["top5"] = r.top5;
    row["ek"] = r.ek_defined ? json(r.ek) : json(nullptr);
    row["layer_l2"] = r.layer_l2;
    row["peak_retained"] = r.peak_retained;
    row["seconds"] = r.seconds;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  if (rec.cka.taps.empty()) {
    j["cka"] = nullptr;
  } else {
    const std::size_t k = rec.cka.taps.size();
    json matrix = json::array();
    for (std::size_t i = 0; i < k; ++i) {
      json row = json::array();
      for (std::size_t jj = 0; jj < k; ++jj) {
        double v = rec.cka.values[i * k + jj];
        row.push_back(std::isnan(v) ? json(nullptr) : json(v));
      }
      matrix.push_back(std::move(row));
    }
    j["cka"] = {{"taps", rec.cka.taps}, {"matrix", std::move(matrix)}};
  }
  j["final_top1"] = rec.final_top1;
  return j.dump(2) + "\n";
}

RunRecord cmd_train(const RunConfig& config) {
  validate_config(config);
  const int classes = dataset_classes(config);
  SplitDataset split = make_dataset(config.data);
  Normalization norm = source_norm(config);
  const Normalization* norm_ptr = config.normalize ? &norm : nullptr;

  TapNet student = build_tapnet(config.student_depth, config.student_width, classes,
                                Rng::mix(config.seed, 0x57d));
  // taps: alignment indices plus every stage end, for the analysis metrics
  std::vector<int> taps = config.align_at;
  for (int u : stage_ends(config.student_depth)) taps.push_back(u);
  std::sort(taps.begin(), taps.end());
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  set_taps(student, taps);

  const bool distill = config.regime != Regime::scratch;
  TapNet teacher;
  if (distill) {
    teacher = load_checkpoint(config.teacher_checkpoint);
    if (teacher.num_classes != classes)
      throw DimensionError("teacher checkpoint has " + std::to_string(teacher.num_classes) +
                           " classes but the dataset has " + std::to_string(classes));
    if (teacher.depth != config.student_depth)
      throw ConfigError("teacher depth " + std::to_string(teacher.depth) +
                        " must match student depth " + std::to_string(config.student_depth) +
                        " (taps pair up by unit index)");
    set_frozen(teacher, true);
    set_taps(teacher, taps);
  }

  const std::size_t probe_n = std::min<std::size_t>(split.val.count(), 64);
  LabeledBatch probe = materialize(split.val, 0, probe_n, norm_ptr);

  PartitionPlan plan;
  plan.detach_after = config.detach_after;
  plan.align_at = config.align_at;
  plan.terminal_hard = config.terminal_hard;
  plan.terminal_attention = config.terminal_attention;
  plan.terminal_feature = config.terminal_feature;

  std::vector<LocalBlock> blocks;
  EndToEndState state;
  Rng proj_rng(Rng::mix(config.seed, 0xa117));
  if (config.regime == Regime::lakd) {
    blocks = partition(student, plan);
    if (!config.align_at.empty()) {
      auto s_sh = probe_tap_shapes(student, probe.images, config.align_at);
      auto t_sh = probe_tap_shapes(teacher, probe.images, config.align_at);
      init_alignment(blocks, s_sh, t_sh, proj_rng);
    }
  } else {
    state = make_e2e_state(student);
    if (config.regime == Regime::traditional_kd && !config.align_at.empty() &&
        config.weights.beta != 0.0) {
      auto s_sh = probe_tap_shapes(student, probe.images, config.align_at);
      auto t_sh = probe_tap_shapes(teacher, probe.images, config.align_at);
      init_e2e_alignment(state, config.align_at, s_sh, t_sh, proj_rng);
    }
  }

  std::vector<int> ctx_taps = config.align_at;
  if (std::find(ctx_taps.begin(), ctx_taps.end(), config.student_depth) == ctx_taps.end())
    ctx_taps.push_back(config.student_depth);

  // the teacher never moves, so its validation predictions are fixed
  EvalPass teacher_val;
  if (distill) teacher_val = eval_net(teacher, split.val, config.opt.batch_size, norm_ptr);

  RunRecord rec;
  rec.hash = config_hash(config);
  for (std::size_t e = 0; e < config.opt.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    SgdConfig sgd{decayed_lr(config.opt.lr, e, config.opt.epochs), config.opt.momentum,
                  config.opt.weight_decay};
    BatchIter iter(split.train, config.opt.batch_size, Rng::mix(config.seed, 0xe90c0 + e),
                   config.augment, norm_ptr);
    EpochRow row;
    row.epoch = e;
    LabeledBatch batch;
    double seen = 0;
    while (iter.next(batch)) {
      TeacherContext ctx;
      if (distill) ctx = make_teacher_context(teacher, batch.images, ctx_taps);
      StepReport rep =
          config.regime == Regime::lakd
              ? sdm_step(student, blocks, ctx, batch.images, batch.labels, config.weights,
                         config.ndam, sgd)
              : standard_step(student, state, ctx, batch.images, batch.labels, config.weights,
                              config.regime, config.ndam, sgd);
      const double n = static_cast<double>(batch.labels.size());
      row.hard += rep.hard * n;
      row.soft += rep.soft * n;
      row.attention += rep.attention * n;
      row.feature += rep.feature * n;
      row.total += rep.total * n;
      row.peak_retained = std::max(row.peak_retained, rep.peak_retained);
      seen += n;
    }
    row.hard /= seen;
    row.soft /= seen;
    row.attention /= seen;
    row.feature /= seen;
    row.total /= seen;

    EvalPass ev = eval_net(student, split.val, config.opt.batch_size, norm_ptr);
    row.top1 = ev.top1;
    row.top5 = ev.top5;
    if (distill) {
      try {
        row.ek = ek_metric({teacher_val.preds, ev.preds, split.val.labels});
        row.ek_defined = true;
      } catch (const ContractError&) {
        row.ek_defined = false;  // teacher never wrong on this split
      }
      row.layer_l2 = eval_layer_l2(student, teacher, config.align_at, blocks, state,
                                   config.regime, probe.images);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.rows.push_back(std::move(row));
  }
  rec.final_top1 = rec.rows.back().top1;
  if (distill) rec.cka = eval_cka(student, teacher, probe.images, config.seed);

  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    write_file(config.out_dir + "/record.csv", record_to_csv(config, rec));
    write_file(config.out_dir + "/record.json", record_to_json(config, rec));
    save_checkpoint(student, config.out_dir + "/model.ckpt");
  }
  return rec;
}

EvalReport cmd_eval(const std::string& checkpoint, const RunConfig& config) {
  TapNet net = load_checkpoint(checkpoint);
  const int classes = dataset_classes(config);
  if (net.num_classes != classes)
    throw DimensionError("checkpoint has " + std::to_string(net.num_classes) +
                         " classes but the dataset has " + std::to_string(classes));
  SplitDataset split = make_dataset(config.data);
  Normalization norm = source_norm(config);
  const Normalization* norm_ptr = config.normalize ? &norm : nullptr;
  set_taps(net, stage_ends(net.depth));

  EvalReport rep;
  rep.samples = split.val.count();
  EvalPass ev = eval_net(net, split.val, config.opt.batch_size, norm_ptr);
  rep.top1 = ev.top1;
  rep.top5 = ev.top5;

  if (!config.teacher_checkpoint.empty()) {
    TapNet teacher = load_checkpoint(config.teacher_checkpoint);
    if (teacher.num_classes != classes)
      throw DimensionError("teacher checkpoint has " + std::to_string(teacher.num_classes) +
                           " classes but the dataset has " + std::to_string(classes));
    if (teacher.depth != net.depth)
      throw ConfigError("teacher depth " + std::to_string(teacher.depth) +
                        " must match checkpoint depth " + std::to_string(net.depth));
    set_frozen(teacher, true);
    set_taps(teacher, stage_ends(teacher.depth));
    EvalPass tv = eval_net(teacher, split.val, config.opt.batch_size, norm_ptr);
    try {
      rep.ek = ek_metric({tv.preds, ev.preds, split.val.labels});
      rep.ek_defined = true;
    } catch (const ContractError&) {
      rep.ek_defined = false;
    }
    const std::size_t probe_n = std::min<std::size_t>(split.val.count(), 64);
    LabeledBatch probe = materialize(split.val, 0, probe_n, norm_ptr);
    rep.cka = eval_cka(net, teacher, probe.images, config.seed);
  }
  return rep;
}

RunConfig cell_config(const RunConfig& base, SweepKind kind, const std::string& cell) {
  RunConfig c = base;
  if (kind == SweepKind::detach_locations) {
    c.regime = Regime::lakd;
    if (cell == "none") {
      c.detach_after = {};
      c.align_at = stage_ends(c.student_depth);
    } else {
      c.align_at = parse_int_list(cell, "sweep cell '" + cell + "'");
      if (c.align_at.empty()) throw ConfigError("sweep cell '" + cell + "': empty location list");
      c.detach_after.assign(c.align_at.begin(), c.align_at.end() - 1);
    }
  } else {
    if (cell == "off") {
      c.ndam.alpha_pool = 0.0;
      c.ndam.beta_pool = 0.0;
    } else {
      std::string rest;
      if (cell.rfind("abs:", 0) == 0) {
        c.ndam.use_abs = true;
        rest = cell.substr(4);
      } else if (cell.rfind("noabs:", 0) == 0) {
        c.ndam.use_abs = false;
        rest = cell.substr(6);
      } else {
        throw ConfigError("sweep cell '" + cell +
                          "': expected 'off', 'abs:A,B' or 'noabs:A,B'");
      }
      std::size_t comma = rest.find(',');
      if (comma == std::string::npos)
        throw ConfigError("sweep cell '" + cell + "': expected two pooling weights");
      c.ndam.alpha_pool = parse_double(rest.substr(0, comma), "sweep cell '" + cell + "'");
      c.ndam.beta_pool = parse_double(rest.substr(comma + 1), "sweep cell '" + cell + "'");
    }
    c.ndam.bypass = false;
  }
  return c;
}

SweepTable cmd_ablate(const RunConfig& base, SweepKind kind,
                      const std::vector<std::string>& cells) {
  if (cells.empty()) throw ConfigError("ablation sweep is empty");
  std::vector<RunConfig> configs;
  for (const std::string& cell : cells) configs.push_back(cell_config(base, kind, cell));

  SweepTable table;
  table.kind = kind;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    SweepCell out;
    out.name = cells[i];
    RunConfig cfg = configs[i];
    if (!base.out_dir.empty()) cfg.out_dir = base.out_dir + "/cell_" + sanitize(cells[i]);
    try {
      RunRecord rec = cmd_train(cfg);
      out.ok = true;
      out.top1 = rec.final_top1;
      out.ek = rec.rows.back().ek;
      out.ek_defined = rec.rows.back().ek_defined;
    } catch (const std::exception& ex) {
      out.ok = false;
      out.detail = ex.what();
      table.all_ok = false;
    }
    table.cells.push_back(std::move(out));
  }
  if (!base.out_dir.empty()) {
    fs::create_directories(base.out_dir);
    write_file(base.out_dir + "/ablation.csv", table_to_csv(base, table));
  }
  return table;
}

std::string table_to_csv(const RunConfig& base, const SweepTable& table) {
  std::string out;
  if (table.kind == SweepKind::detach_locations) {
    out = "cell,detach,location,top1,status,detail\n";
    for (const SweepCell& c : table.cells) {
      const bool detached = c.name != "none";
      const std::string loc =
          c.name == "none" ? join_ints(stage_ends(base.student_depth), ',') : c.name;
      out += csv_quote(c.name) + ',' + (detached ? "yes" : "no") + ',' + csv_quote(loc) + ',';
      if (c.ok) out += fmt(c.top1);
      out += c.ok ? ",ok," : ",failed,";
      out += csv_quote(c.detail) + '\n';
    }
  } else {
    out = "cell,abs,alpha,beta,ek,top1,status,detail\n";
    for (const SweepCell& c : table.cells) {
      RunConfig cfg = cell_config(base, table.kind, c.name);
      const std::string abs_col =
          c.name == "off" ? "off" : (cfg.ndam.use_abs ? "yes" : "no");
      out += csv_quote(c.name) + ',' + abs_col + ',' + fmt(cfg.ndam.alpha_pool) + ',' +
             fmt(cfg.ndam.beta_pool) + ',';
      if (c.ok && c.ek_defined) out += fmt(c.ek);
      out += ',';
      if (c.ok) out += fmt(c.top1);
      out += c.ok ? ",ok," : ",failed,";
      out += csv_quote(c.detail) + '\n';
    }
  }
  return out;
}

void cmd_export_attention(const std::string& checkpoint, const RunConfig& config,
                          std::size_t count, const std::string& out_dir) {
  if (count == 0) throw ConfigError("attention export needs at least one sample");
  if (out_dir.empty()) throw ConfigError("attention export needs an output directory");
  TapNet net = load_checkpoint(checkpoint);
  set_frozen(net, true);
  SplitDataset split = make_dataset(config.data);
  Normalization norm = source_norm(config);
  const Normalization* norm_ptr = config.normalize ? &norm : nullptr;
  count = std::min(count, split.val.count());
  LabeledBatch probe = materialize(split.val, 0, count, norm_ptr);
  set_taps(net, stage_ends(net.depth));

  double a = config.ndam.alpha_pool, b = config.ndam.beta_pool;
  bool use_abs = config.ndam.use_abs;
  if (a == 0.0 && b == 0.0) {
    a = b = 0.5;  // a map export needs a live weighting
    use_abs = true;
  }

  NoGradGuard ng;
  ForwardResult res = forward_with_taps(net, probe.images);
  fs::create_directories(out_dir + "/attention");
  for (int u : stage_ends(net.depth)) {
    AttentionWeight w = make_attention_weight(res.taps.at(u), a, b, use_abs);
    for (std::size_t i = 0; i < count; ++i) {
      export_pgm(w.map, i,
                 out_dir + "/attention/u" + std::to_string(u) + "_s" + std::to_string(i) + ".pgm");
    }
  }
}

}  // namespace lakd
