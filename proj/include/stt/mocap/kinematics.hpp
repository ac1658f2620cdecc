#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "stt/mocap/bvh.hpp"

namespace stt::mocap {

using Rotation3 = Eigen::Matrix3d;
using Transform4 = Eigen::Matrix4d;

enum class Axis { X, Y, Z };

// Right-handed single-axis rotation by `degrees`.
Rotation3 axis_rotation(Axis axis, double degrees);

// R = R_order[0](angles[0]) * R_order[1](angles[1]) * R_order[2](angles[2]).
// Angles are given in the same order as the axes.
Rotation3 euler_to_matrix(const Eigen::Vector3d& angles_deg, const std::array<Axis, 3>& order);

// [R t; 0 0 0 1]
Transform4 local_transform(const Rotation3& rotation, const Eigen::Vector3d& translation);

// Joint-local transform for one frame: translation is the joint offset plus
// any position channels, rotation is the product of its rotation channels in
// declared order.
Transform4 joint_transform(const BvhDocument& doc, std::size_t joint, std::size_t frame);

struct JointPositions {
  std::size_t frame = 0;
  std::vector<std::size_t> joints;  // document index of each row
  Eigen::Matrix<double, Eigen::Dynamic, 3> positions;
};

// World positions of every non-end-site joint, in document order. Parent
// world transforms are computed once and reused, O(V) per frame.
JointPositions forward_kinematics(const BvhDocument& doc, std::size_t frame);

}  // namespace stt::mocap
