#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "stt/preprocess/dataset.hpp"
#include "stt/sequence.hpp"

namespace stt::prep {

class DegenerateOrientation : public std::runtime_error {
public:
  DegenerateOrientation() : std::runtime_error("degenerate orientation") {}
};

// Translates the frame-0 root joint to the origin (same shift for every
// frame), then rotates about +y so the frame-0 left-hip -> right-hip vector,
// projected onto the ground plane, points along +x. Expects C = 3 (x, y, z).
SkeletonSequence view_normalize(const SkeletonSequence& seq, std::size_t left_hip,
                                std::size_t right_hip, std::size_t root);

// Linear interpolation along time onto `target_frames` evenly spaced samples;
// output frame i reads source coordinate i * (T - 1) / (target_frames - 1).
SkeletonSequence resample(const SkeletonSequence& seq, std::size_t target_frames = 64);

struct AugmentSpec {
  int factor = 1;
  double rotation_range_deg = 15.0;
  double scale_range = 0.1;
  double noise_std = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

// `factor` sequences: the unmodified input followed by factor - 1 copies with
// a random yaw in +-rotation_range_deg, a uniform scale in 1 +- scale_range
// and i.i.d. Gaussian noise. Randomness depends only on (seed, sample_index).
std::vector<SkeletonSequence> augment(const SkeletonSequence& seq, const AugmentSpec& spec,
                                      std::size_t sample_index);

// Applies augment() to every item, using its position as the sample index.
LabeledDataset augment_dataset(const LabeledDataset& ds, const AugmentSpec& spec);

struct Split {
  LabeledDataset train;
  LabeledDataset test;
};

// Stratified: per class max(1, floor(ratio * n)) items drawn without
// replacement go to train, the rest to test. Deterministic in `seed`.
Split split_dataset(const LabeledDataset& ds, double train_ratio, std::uint64_t seed);

}  // namespace stt::prep
