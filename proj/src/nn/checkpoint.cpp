#include "stt/nn/checkpoint.hpp"

#include <fstream>

#include "stt/io/binary.hpp"

namespace stt::nn {

namespace {
constexpr const char* kMagic = "CKPT1";
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void Checkpoint::add(std::string name, Tensor<float> value) {
  entries.push_back(NamedTensor{std::move(name), std::move(value)});
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  io::write_magic(os, kMagic);
  io::write_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    io::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::write_u32(os, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
    for (float f : e.value.data()) io::write_f32(os, f);
  }
}

Checkpoint read_checkpoint(std::istream& is) {
  io::expect_magic(is, kMagic);
  Checkpoint ckpt;
  const std::uint32_t count = io::read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io::read_u32(is);
    if (len > (1u << 16)) throw io::FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw io::FormatError("unexpected end of file");
    const std::uint32_t rank = io::read_u32(is);
    if (rank > 8) throw io::FormatError("checkpoint entry '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u32(is);
    Tensor<float> value(shape);
    for (auto& f : value.storage()) f = io::read_f32(is);
    ckpt.add(std::move(name), std::move(value));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_checkpoint(is);
}

}  // namespace stt::nn
