#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace stt::mocap {

enum class Channel { Xposition, Yposition, Zposition, Xrotation, Yrotation, Zrotation };

std::string_view channel_name(Channel c);
std::optional<Channel> parse_channel(std::string_view name);
inline bool is_rotation(Channel c) {
  return c == Channel::Xrotation || c == Channel::Yrotation || c == Channel::Zrotation;
}

struct BvhJoint {
  std::string name;
  std::optional<std::size_t> parent;
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
  std::vector<Channel> channels;
  bool is_end_site = false;
};

using MotionMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class BvhError : public std::runtime_error {
public:
  BvhError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

// Parsed BVH: joint tree in depth-first file order plus frame_count x
// channel_count motion values. Immutable; the constructor enforces the
// structural invariants (single root, parents precede children, end sites
// carry no channels, motion width matches the channel layout).
class BvhDocument {
public:
  BvhDocument(std::vector<BvhJoint> joints, double frame_time, MotionMatrix motion);

  const std::vector<BvhJoint>& joints() const noexcept { return joints_; }
  const BvhJoint& joint(std::size_t i) const { return joints_.at(i); }
  std::size_t joint_count() const noexcept { return joints_.size(); }
  std::size_t frame_count() const noexcept { return static_cast<std::size_t>(motion_.rows()); }
  double frame_time() const noexcept { return frame_time_; }
  const MotionMatrix& motion() const noexcept { return motion_; }
  std::size_t channel_count() const noexcept { return static_cast<std::size_t>(motion_.cols()); }

  // Column of the joint's first channel in the motion matrix.
  std::size_t channel_offset(std::size_t joint) const { return channel_offsets_.at(joint); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::vector<std::size_t> children(std::size_t joint) const;

private:
  std::vector<BvhJoint> joints_;
  std::vector<std::size_t> channel_offsets_;
  double frame_time_;
  MotionMatrix motion_;
};

// End sites are named "<parent>_End".
BvhDocument parse_bvh(std::string_view text);
BvhDocument load_bvh(const std::filesystem::path& path);

// Canonical text form: tab indentation, shortest round-trip number format.
std::string write_bvh(const BvhDocument& doc);
void save_bvh(const std::filesystem::path& path, const BvhDocument& doc);

}  // namespace stt::mocap
