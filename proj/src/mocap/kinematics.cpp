#include "stt/mocap/kinematics.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stt::mocap {

Rotation3 axis_rotation(Axis axis, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a);
  const double s = std::sin(a);
  Rotation3 r;
  switch (axis) {
    case Axis::X:
      r << 1, 0, 0,
           0, c, -s,
           0, s, c;
      break;
    case Axis::Y:
      r << c, 0, s,
           0, 1, 0,
           -s, 0, c;
      break;
    case Axis::Z:
      r << c, -s, 0,
           s, c, 0,
           0, 0, 1;
      break;
  }
  return r;
}

Rotation3 euler_to_matrix(const Eigen::Vector3d& angles_deg, const std::array<Axis, 3>& order) {
  return axis_rotation(order[0], angles_deg[0]) * axis_rotation(order[1], angles_deg[1]) *
         axis_rotation(order[2], angles_deg[2]);
}

Transform4 local_transform(const Rotation3& rotation, const Eigen::Vector3d& translation) {
  Transform4 m = Transform4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Transform4 joint_transform(const BvhDocument& doc, std::size_t joint, std::size_t frame) {
  const BvhJoint& j = doc.joint(joint);
  Eigen::Vector3d t = j.offset;
  Rotation3 r = Rotation3::Identity();
  const std::size_t base = doc.channel_offset(joint);
  const auto row = doc.motion().row(static_cast<Eigen::Index>(frame));
  for (std::size_t k = 0; k < j.channels.size(); ++k) {
    const double v = row(static_cast<Eigen::Index>(base + k));
    switch (j.channels[k]) {
      case Channel::Xposition: t.x() += v; break;
      case Channel::Yposition: t.y() += v; break;
      case Channel::Zposition: t.z() += v; break;
      case Channel::Xrotation: r = r * axis_rotation(Axis::X, v); break;
      case Channel::Yrotation: r = r * axis_rotation(Axis::Y, v); break;
      case Channel::Zrotation: r = r * axis_rotation(Axis::Z, v); break;
    }
  }
  return local_transform(r, t);
}

JointPositions forward_kinematics(const BvhDocument& doc, std::size_t frame) {
  if (frame >= doc.frame_count())
    throw std::out_of_range("frame " + std::to_string(frame) + " out of range (document has " +
                            std::to_string(doc.frame_count()) + " frames)");
  const std::size_t n = doc.joint_count();
  std::vector<Transform4, Eigen::aligned_allocator<Transform4>> world(n);
  JointPositions out;
  out.frame = frame;
  for (std::size_t j = 0; j < n; ++j) {
    const BvhJoint& joint = doc.joint(j);
    if (joint.is_end_site) continue;
    const Transform4 local = joint_transform(doc, j, frame);
    world[j] = joint.parent ? Transform4(world[*joint.parent] * local) : local;
    out.joints.push_back(j);
  }
  out.positions.resize(static_cast<Eigen::Index>(out.joints.size()), 3);
  for (std::size_t r = 0; r < out.joints.size(); ++r)
    out.positions.row(static_cast<Eigen::Index>(r)) = world[out.joints[r]].topRightCorner<3, 1>().transpose();
  return out;
}

}  // namespace stt::mocap
