#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stt/config.hpp"
#include "stt/model/adjacency.hpp"

namespace stt::model {

// Where the normalized adjacency enters the attention: added to the logits
// before softmax (pre) or to the attention matrix after it (post).
enum class Fusion { pre, post };

struct NetworkConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> block_channels = {64, 64, 64, 128, 128, 128, 256, 256, 256};
  std::vector<std::size_t> strides = {1, 1, 1, 2, 1, 1, 2, 1, 1};
  std::size_t temporal_kernel = 9;
  std::size_t num_classes = 49;
  std::size_t num_joints = 25;
  std::size_t num_frames = 64;
  std::size_t channel_divisor = 1;
  std::size_t heads = 8;
  double head_dim_ratio = 0.25;
  Fusion fusion = Fusion::post;
  std::size_t root_joint = 0;
  std::vector<Bone> bones;  // empty with 25 joints means the NTU skeleton

  // Block widths after applying channel_divisor (never below 1).
  std::vector<std::size_t> channels() const;
  // d_q = d_k = d_v for a block of width c_out, at least 1.
  std::size_t head_dim(std::size_t c_out) const;
  std::vector<Bone> skeleton() const;
  // Output frame count after all strided blocks.
  std::size_t output_frames() const;

  void validate() const;

  // Reads the network keys from `kv`; absent keys keep the defaults above.
  static NetworkConfig from_kv(const KeyValues& kv);
  std::string to_text() const;
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

// Desk-scale preset: default architecture with channels divided by 8.
NetworkConfig desk_config(std::size_t num_classes = 49);

}  // namespace stt::model
