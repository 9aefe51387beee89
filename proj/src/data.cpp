#include "lakd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "lakd/error.hpp"

namespace lakd {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCropPad = 4;

}  // namespace

Dataset load_cifar_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("load_cifar_binary: cannot open " + path);
  const std::size_t size = static_cast<std::size_t>(f.tellg());
  if (size == 0 || size % kCifarRecord != 0) {
    throw FormatError("load_cifar_binary: " + path + " has size " + std::to_string(size) +
                      ", not a positive multiple of " + std::to_string(kCifarRecord));
  }
  f.seekg(0);
  const std::size_t count = size / kCifarRecord;

  Dataset ds;
  ds.num_classes = 10;
  ds.height = kCifarSide;
  ds.width = kCifarSide;
  ds.labels.resize(count);
  ds.pixels.resize(count * ds.sample_size());

  std::vector<unsigned char> record(kCifarRecord);
  for (std::size_t i = 0; i < count; ++i) {
    f.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(kCifarRecord));
    if (!f) throw FormatError("load_cifar_binary: short read at record " + std::to_string(i));
    if (record[0] >= 10) {
      throw FormatError("load_cifar_binary: label byte " + std::to_string(record[0]) +
                        " at record " + std::to_string(i));
    }
    ds.labels[i] = record[0];
    double* dst = ds.pixels.data() + i * ds.sample_size();
    for (std::size_t j = 0; j < 3 * kCifarSide * kCifarSide; ++j) {
      dst[j] = static_cast<double>(record[1 + j]) / 255.0;
    }
  }
  return ds;
}

void export_cifar_binary(const Dataset& ds, const std::string& path) {
  if (ds.height != kCifarSide || ds.width != kCifarSide) {
    throw FormatError("export_cifar_binary: format demands 32x32 images, dataset is " +
                      std::to_string(ds.height) + "x" + std::to_string(ds.width));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("export_cifar_binary: cannot open " + path + " for writing");
  for (std::size_t i = 0; i < ds.count(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] >= 10) {
      throw FormatError("export_cifar_binary: label " + std::to_string(ds.labels[i]) +
                        " at record " + std::to_string(i) + " does not fit the format");
    }
    f.put(static_cast<char>(static_cast<unsigned char>(ds.labels[i])));
    const double* src = ds.pixels.data() + i * ds.sample_size();
    for (std::size_t j = 0; j < ds.sample_size(); ++j) {
      double v = std::clamp(src[j], 0.0, 1.0);
      f.put(static_cast<char>(static_cast<unsigned char>(v * 255.0 + 0.5)));
    }
  }
  if (!f) throw FormatError("export_cifar_binary: write failed for " + path);
}

double synth_template(std::size_t cls, std::size_t channel, std::size_t y, std::size_t x,
                      std::size_t s) {
  const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(s) - 0.5;
  const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(s) - 0.5;
  const double r = std::sqrt(cy * cy + cx * cx);
  const std::size_t band = std::max<std::size_t>(1, s / 8);

  bool on = false;
  switch (cls % 10) {
    case 0: on = (y / band) % 2 == 0; break;                       // horizontal bars
    case 1: on = (x / band) % 2 == 0; break;                       // vertical bars
    case 2: on = r < 0.30; break;                                  // centered disk
    case 3: on = ((y / band) + (x / band)) % 2 == 0; break;        // checkerboard
    case 4: on = ((y + x) / band) % 2 == 0; break;                 // diagonal stripes
    case 5: on = r > 0.22 && r < 0.40; break;                      // ring
    case 6: on = std::fabs(cy) < 0.12 || std::fabs(cx) < 0.12; break;  // cross
    case 7: on = std::max(std::fabs(cy), std::fabs(cx)) > 0.36; break; // frame
    case 8: on = cy + cx < 0.0; break;                             // half-plane
    case 9: on = std::fabs(cy) + std::fabs(cx) < 0.32; break;      // diamond
  }

  // per-class channel tint keeps classes linearly distinguishable in color
  static constexpr double kTint[3] = {1.0, 0.75, 0.55};
  double tint = kTint[(cls + channel) % 3];
  return (on ? 0.85 : 0.15) * tint;
}

Dataset synth_generate(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 10) {
    throw ConfigError("synth_generate: num_classes must lie in [2,10], got " +
                      std::to_string(spec.num_classes));
  }
  if (spec.samples == 0) throw ConfigError("synth_generate: samples must be positive");
  if (spec.image_size < 8) {
    throw ConfigError("synth_generate: image_size must be at least 8, got " +
                      std::to_string(spec.image_size));
  }
  if (spec.sigma < 0.0) throw ConfigError("synth_generate: sigma must be non-negative");

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.height = spec.image_size;
  ds.width = spec.image_size;
  ds.labels.resize(spec.samples);
  ds.pixels.resize(spec.samples * ds.sample_size());

  Rng rng(Rng::mix(spec.seed, 0x5d1f));
  const std::size_t s = spec.image_size;
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t cls = i % spec.num_classes;
    ds.labels[i] = static_cast<int>(cls);
    double* img = ds.pixels.data() + i * ds.sample_size();
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          double v = synth_template(cls, c, y, x, s);
          if (spec.sigma > 0.0) v += rng.normal(0.0, spec.sigma);
          v = std::clamp(v, 0.0, 1.0);
          // snap to the byte grid so an export/load cycle is exact
          img[(c * s + y) * s + x] = std::round(v * 255.0) / 255.0;
        }
      }
    }
  }
  return ds;
}

SplitDataset make_dataset(const DatasetSpec& spec) {
  if (spec.train_count == 0 || spec.val_count == 0) {
    throw ConfigError("make_dataset: split sizes must be positive");
  }
  Dataset full = spec.cifar_path.empty() ? synth_generate(spec.synth)
                                         : load_cifar_binary(spec.cifar_path);
  if (spec.train_count + spec.val_count > full.count()) {
    throw ConfigError("make_dataset: split " + std::to_string(spec.train_count) + "+" +
                      std::to_string(spec.val_count) + " exceeds the " +
                      std::to_string(full.count()) + " available samples");
  }

  std::vector<std::size_t> order(full.count());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(spec.shuffle_seed, 0xd5117));
  std::shuffle(order.begin(), order.end(), rng.engine());

  auto take = [&](std::size_t offset, std::size_t n) {
    Dataset part;
    part.num_classes = full.num_classes;
    part.height = full.height;
    part.width = full.width;
    part.labels.resize(n);
    part.pixels.resize(n * full.sample_size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = order[offset + i];
      part.labels[i] = full.labels[src];
      std::memcpy(part.pixels.data() + i * full.sample_size(),
                  full.pixels.data() + src * full.sample_size(),
                  full.sample_size() * sizeof(double));
    }
    return part;
  };

  SplitDataset out;
  out.train = take(0, spec.train_count);
  out.val = take(spec.train_count, spec.val_count);
  return out;
}

void hflip_image(double* img, std::size_t h, std::size_t w) {
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      double* row = img + (c * h + y) * w;
      std::reverse(row, row + w);
    }
  }
}

void crop_padded(const double* img, std::size_t h, std::size_t w, std::size_t dy, std::size_t dx,
                 double* out) {
  if (dy > 2 * kCropPad || dx > 2 * kCropPad) {
    throw ContractError("crop_padded: offset outside the pad-4 grid");
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y + dy) - static_cast<long>(kCropPad);
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x + dx) - static_cast<long>(kCropPad);
        const bool in = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
        out[(c * h + y) * w + x] =
            in ? img[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)]
               : 0.0;
      }
    }
  }
}

BatchIter::BatchIter(const Dataset& ds, std::size_t batch_size, std::uint64_t epoch_seed,
                     bool augment, const Normalization* norm)
    : ds_(&ds),
      batch_size_(batch_size),
      augment_(augment),
      norm_(norm),
      rng_(Rng::mix(epoch_seed, 0xba7c4)) {
  if (batch_size == 0 || batch_size > ds.count()) {
    throw ContractError("batch_iter: batch size " + std::to_string(batch_size) +
                        " outside [1," + std::to_string(ds.count()) + "]");
  }
  order_.resize(ds.count());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_.engine());
}

bool BatchIter::next(LabeledBatch& out) {
  if (pos_ >= order_.size()) return false;
  const std::size_t n = std::min(batch_size_, order_.size() - pos_);
  const std::size_t h = ds_->height, w = ds_->width, per = ds_->sample_size();

  std::vector<double> pixels(n * per);
  out.labels.resize(n);
  std::vector<double> scratch(per);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order_[pos_ + i];
    out.labels[i] = ds_->labels[src];
    double* dst = pixels.data() + i * per;
    const double* raw = ds_->pixels.data() + src * per;
    if (augment_) {
      // draw order is part of the determinism contract: dy, dx, flip
      const std::size_t dy = static_cast<std::size_t>(rng_.uniform_int(0, 2 * kCropPad));
      const std::size_t dx = static_cast<std::size_t>(rng_.uniform_int(0, 2 * kCropPad));
      const bool flip = rng_.bernoulli(0.5);
      crop_padded(raw, h, w, dy, dx, dst);
      if (flip) hflip_image(dst, h, w);
    } else {
      std::memcpy(dst, raw, per * sizeof(double));
    }
    if (norm_) {
      for (std::size_t c = 0; c < 3; ++c) {
        double* plane = dst + c * h * w;
        for (std::size_t j = 0; j < h * w; ++j) {
          plane[j] = (plane[j] - norm_->mean[c]) / norm_->stddev[c];
        }
      }
    }
  }
  pos_ += n;
  out.images = Tensor::from({n, 3, h, w}, std::move(pixels));
  return true;
}

}  // namespace lakd
