#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stt/nn/tensor.hpp"

namespace stt::nn {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Named-parameter snapshot, including batch-norm running statistics.
//
// On disk ("CKPT1", little-endian): magic, u32 count, then per entry
// u32 name length, UTF-8 name, u32 rank, u32 dims[rank], float32 values.
struct Checkpoint {
  std::vector<NamedTensor> entries;

  const NamedTensor* find(const std::string& name) const;
  void add(std::string name, Tensor<float> value);
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stt::nn
