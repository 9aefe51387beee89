#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lakd/rng.hpp"
#include "lakd/tensor.hpp"

namespace lakd {

// In-memory image collection: pixels in [0,1], channel-planar [count,3,H,W].
struct Dataset {
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t sample_size() const { return 3 * height * width; }
};

// One training batch; images may already be normalized by the iterator.
struct LabeledBatch {
  Tensor images;  // [N,3,H,W]
  std::vector<int> labels;
};

// Per-channel affine normalization (x - mean) / std, CIFAR-10 conventional
// constants by default.
struct Normalization {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev{0.2470, 0.2435, 0.2616};
};

struct SyntheticSpec {
  std::size_t num_classes = 3;
  std::size_t samples = 0;
  std::size_t image_size = 16;
  double sigma = 0.15;
  std::uint64_t seed = 0;
};

// Declarative dataset description: where the samples come from and how they
// split into train/val. A non-empty cifar_path wins over the synthetic spec.
struct DatasetSpec {
  std::string cifar_path;
  SyntheticSpec synth;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::uint64_t shuffle_seed = 0;
};

struct SplitDataset {
  Dataset train;
  Dataset val;
};

// CIFAR-10 binary layout: records of exactly 3073 bytes, one label byte then
// 1024 red + 1024 green + 1024 blue bytes (row-major 32x32). Pixels land in
// [0,1] as byte/255.
Dataset load_cifar_binary(const std::string& path);

// Inverse of the loader for 32x32 datasets; values are rounded to the
// nearest byte. Datasets whose pixels sit on the k/255 grid round-trip
// bit-exactly.
void export_cifar_binary(const Dataset& ds, const std::string& path);

// Class-conditional images: a distinct geometric template per class (bars,
// disks, checkers, ...) with a per-class channel tint, plus seeded Gaussian
// noise of the requested sigma. Pixels are clamped to [0,1] and quantized to
// the k/255 grid so an export round-trips exactly. Labels cycle through the
// classes for an exactly balanced set.
Dataset synth_generate(const SyntheticSpec& spec);

// Noise-free template pixel for one class/channel/position; the generator
// adds noise on top of exactly this value (before quantization).
double synth_template(std::size_t cls, std::size_t channel, std::size_t y, std::size_t x,
                      std::size_t image_size);

// Materializes the spec's source and splits it by a seeded shuffle into
// train then val.
SplitDataset make_dataset(const DatasetSpec& spec);

// Horizontal mirror of one [3,H,W] sample, in place.
void hflip_image(double* img, std::size_t h, std::size_t w);

// Zero-pad by 4 on each side, then crop h x w at offset (dy, dx) in [0,8]^2.
void crop_padded(const double* img, std::size_t h, std::size_t w, std::size_t dy, std::size_t dx,
                 double* out);

// One epoch over a dataset: seeded shuffle, optional pad-4 crop + p=0.5
// horizontal flip (all draws from the epoch generator, in emission order),
// optional normalization last. The final short batch is emitted.
class BatchIter {
 public:
  BatchIter(const Dataset& ds, std::size_t batch_size, std::uint64_t epoch_seed, bool augment,
            const Normalization* norm = nullptr);

  // Fills the next batch; false once the epoch is exhausted.
  bool next(LabeledBatch& out);

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  bool augment_;
  const Normalization* norm_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng rng_;
};

}  // namespace lakd
