#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stt/mocap/bvh.hpp"
#include "stt/sequence.hpp"

namespace stt::mocap {

// Target joint index -> source BVH joint name. Several targets may share a
// source joint; every target index in [0, target_count) appears exactly once.
struct JointMapping {
  std::size_t target_count = 0;
  std::vector<std::pair<std::size_t, std::string>> entries;
};

// Text form: one `<target_index> <source_joint_name>` per line, `#` starts a
// comment. target_count is inferred as max index + 1.
JointMapping parse_mapping(std::string_view text);
JointMapping load_mapping(const std::filesystem::path& path);
std::string write_mapping(const JointMapping& mapping);

// Throws std::invalid_argument unless the targets are complete and unique and
// every source names a non-end-site joint in `doc`.
void validate_mapping(const JointMapping& mapping, const BvhDocument& doc);

// 3 x T x target_count world positions (x, y, z) in file units.
SkeletonSequence retarget(const BvhDocument& doc, const JointMapping& mapping,
                          std::string layout = "ntu25");

// Built-in Axis Neuron (59 joints + 13 end sites) -> NTU RGB+D 25 mapping.
// The same table ships as data/axis72_to_ntu25.map.
const JointMapping& axis72_to_ntu25();
std::string_view axis72_to_ntu25_text();

// Reference Axis Neuron style hierarchy: 72 entries in depth-first order,
// 59 rotating joints and 13 end sites, offsets in centimetres. The root has
// six channels (position + ZXY rotation), every other joint ZXY rotation.
std::vector<BvhJoint> axis_neuron_hierarchy();

}  // namespace stt::mocap
