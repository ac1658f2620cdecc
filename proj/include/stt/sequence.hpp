#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace stt {

// Dense C x T x V array (channels x frames x joints), C-major, V-minor.
struct SkeletonSequence {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::uint32_t label = 0;
  std::string layout;
  std::vector<double> data;

  SkeletonSequence() = default;
  SkeletonSequence(std::size_t c, std::size_t t, std::size_t v, std::uint32_t lbl = 0,
                   std::string layout_tag = {})
      : channels(c), frames(t), joints(v), label(lbl), layout(std::move(layout_tag)),
        data(c * t * v, 0.0) {}

  std::size_t index(std::size_t c, std::size_t t, std::size_t v) const noexcept {
    return (c * frames + t) * joints + v;
  }
  double& at(std::size_t c, std::size_t t, std::size_t v) noexcept { return data[index(c, t, v)]; }
  double at(std::size_t c, std::size_t t, std::size_t v) const noexcept { return data[index(c, t, v)]; }

  bool same_shape(const SkeletonSequence& o) const noexcept {
    return channels == o.channels && frames == o.frames && joints == o.joints;
  }
};

// SKSEQ1: magic "SKSEQ1", u32 C, T, V, label, then C*T*V float32, all
// little-endian. Values are stored as float32 and widened on read.
void write_skseq(std::ostream& os, const SkeletonSequence& seq);
SkeletonSequence read_skseq(std::istream& is);
void save_skseq(const std::filesystem::path& path, const SkeletonSequence& seq);
SkeletonSequence load_skseq(const std::filesystem::path& path);

}  // namespace stt
