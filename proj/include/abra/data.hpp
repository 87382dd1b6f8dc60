#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "abra/rng.hpp"
#include "abra/tensor.hpp"

namespace abra {

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PlateSpec {
  int num_plates = 8;
  int test_plates = 2;        // the last test_plates plate ids form the test split
  int images_per_plate = 200;
  int num_classes = 10;
  int channels = 3;
  int image_size = 16;        // H = W
  double shift_severity = 0.5;  // tau: per-plate gain ~ N(1, tau^2), offset ~ N(0, tau^2)
  double noise_level = 0.1;     // iid pixel noise stddev

  void validate() const;  // throws DatasetError naming the offending field
};

struct Plate {
  std::uint32_t plate_id = 0;
  bool is_test = false;
  std::vector<double> images;  // N*C*H*W row-major
  std::vector<int> labels;
  std::vector<double> gain;    // planted per-channel gain (ground truth)
  std::vector<double> offset;  // planted per-channel offset
};

struct PlateDataset {
  PlateSpec spec;
  std::uint64_t seed = 0;
  std::vector<Plate> plates;

  std::vector<int> train_plate_indices() const;
  std::vector<int> test_plate_indices() const;
  // N x C x H x W batch of the given samples of one plate
  Tensor batch(int plate_index, const std::vector<int>& sample_indices) const;
  std::vector<int> batch_labels(int plate_index,
                                const std::vector<int>& sample_indices) const;
};

// Plate-structured generator: class prototypes are fixed smooth random
// patterns; each sample is gain_b * (prototype_y + jitter) + offset_b +
// pixel noise with plate-level gain/offset. Deterministic in seed.
PlateDataset generate(const PlateSpec& spec, std::uint64_t seed);

// PLT1 binary + human-readable sidecar manifest (split and planted
// gain/offset per plate) at path + ".manifest.txt".
void save_dataset(const std::string& path, const PlateDataset& ds);
PlateDataset load_dataset(const std::string& path);

// Every emitted batch is drawn from a single plate; plates are visited in
// shuffled order per epoch, samples uniformly without replacement.
class PlateSampler {
 public:
  struct Batch {
    int plate_index;
    std::vector<int> sample_indices;
  };

  PlateSampler(const PlateDataset& ds, std::vector<int> plate_indices,
               int batch_size);

  std::vector<Batch> epoch(RngStream& rng) const;

 private:
  const PlateDataset* ds_;
  std::vector<int> plate_indices_;
  int batch_size_;
};

// Per image, per channel: subtract the spatial mean and divide by the
// spatial std (eps-guarded). Value-level preprocessing, no gradient.
Tensor self_standardize(const Tensor& x);

// On-the-fly train augmentation: horizontal flip, vertical flip and 90
// degree rotation, each with probability 0.5.
Tensor augment_flips_rotations(const Tensor& x, RngStream& rng);

}  // namespace abra
