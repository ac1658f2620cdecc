#include "stt/sequence.hpp"

#include <fstream>

#include "stt/io/binary.hpp"

namespace stt {

namespace {
constexpr const char* kMagic = "SKSEQ1";
constexpr std::uint32_t kMaxDim = 1u << 24;
}  // namespace

void write_skseq(std::ostream& os, const SkeletonSequence& seq) {
  io::write_magic(os, kMagic);
  io::write_u32(os, static_cast<std::uint32_t>(seq.channels));
  io::write_u32(os, static_cast<std::uint32_t>(seq.frames));
  io::write_u32(os, static_cast<std::uint32_t>(seq.joints));
  io::write_u32(os, seq.label);
  for (double v : seq.data) io::write_f32(os, static_cast<float>(v));
}

SkeletonSequence read_skseq(std::istream& is) {
  io::expect_magic(is, kMagic);
  const std::uint32_t c = io::read_u32(is);
  const std::uint32_t t = io::read_u32(is);
  const std::uint32_t v = io::read_u32(is);
  const std::uint32_t label = io::read_u32(is);
  if (c == 0 || t == 0 || v == 0 || c > kMaxDim || t > kMaxDim || v > kMaxDim ||
      std::uint64_t(c) * t * v > kMaxDim * 16ull)
    throw io::FormatError("implausible SKSEQ1 dimensions");
  SkeletonSequence seq(c, t, v, label);
  for (double& x : seq.data) x = io::read_f32(is);
  return seq;
}

void save_skseq(const std::filesystem::path& path, const SkeletonSequence& seq) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_skseq(os, seq);
}

SkeletonSequence load_skseq(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_skseq(is);
}

}  // namespace stt
