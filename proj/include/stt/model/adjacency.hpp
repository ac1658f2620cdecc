#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stt/nn/tensor.hpp"

namespace stt::model {

// Undirected skeleton edge, conventionally written (parent, child).
struct Bone {
  std::size_t a = 0;
  std::size_t b = 0;
  friend bool operator==(const Bone&, const Bone&) = default;
};

// K = 3 partitions of the skeleton graph, indexed [k][i][j]:
//   k = 0 self (plus edges between joints equally far from the root),
//   k = 1 centripetal: i receives from a neighbour j closer to the root,
//   k = 2 centrifugal: i receives from a neighbour j farther from the root.
// `normalized` holds D^-1/2 A_k D^-1/2 where D is the degree (self loop
// included) of the whole graph plus 1e-6.
struct AdjacencyPartitions {
  static constexpr std::size_t kPartitions = 3;
  std::size_t joints = 0;
  nn::Tensor<double> raw;
  nn::Tensor<double> normalized;
  std::vector<double> degree;
  std::size_t duplicates_removed = 0;
  bool trainable = true;
};

// Throws std::out_of_range for joint indices >= V and std::invalid_argument
// for self-loops. Duplicate bones (in either direction) are dropped and
// counted in duplicates_removed.
AdjacencyPartitions build_adjacency(const std::vector<Bone>& bones, std::size_t joints,
                                    std::size_t root = 0);

// NTU RGB+D 25-joint skeleton, 0-based.
std::vector<Bone> ntu25_bones();

// Bone list text: first non-comment line is V, then one `parent child` pair
// per line (0-based).
struct BoneList {
  std::size_t joints = 0;
  std::vector<Bone> bones;
};
BoneList parse_bone_list(std::string_view text);
BoneList load_bone_list(const std::filesystem::path& path);
std::string write_bone_list(const BoneList& list);

}  // namespace stt::model
