#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "stt/config.hpp"
#include "stt/preprocess/dataset.hpp"

namespace stt::exp {

// Synthetic action corpus. A fixed skeleton moves through a weighted sum of
// shared motion primitives (joint-group oscillations). Every class owns a
// primitive weight vector base + distance * deviation_k, so `distance` = 0
// makes all classes identical in expectation. Classes are drawn from one
// universe indexed by class_offset + k, which lets disjoint class ranges share
// the primitive vocabulary (pre-train on some, transfer to others).
struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 20;
  std::size_t joints = 25;
  std::size_t frames = 64;
  std::size_t primitives = 12;
  double distance = 1.0;
  double amplitude_jitter = 0.1;  // relative, per sample and primitive
  double noise_std = 0.01;
  std::size_t class_offset = 0;
  std::uint64_t seed = 1;

  void validate() const;
  static SynthSpec from_kv(const KeyValues& kv);
  std::string to_text() const;
};

prep::LabeledDataset synth_dataset(const SynthSpec& spec);

}  // namespace stt::exp
