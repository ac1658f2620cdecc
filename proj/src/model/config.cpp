#include "stt/model/config.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stt::model {

std::vector<std::size_t> NetworkConfig::channels() const {
  std::vector<std::size_t> out;
  for (std::size_t c : block_channels) out.push_back(std::max<std::size_t>(1, c / std::max<std::size_t>(1, channel_divisor)));
  return out;
}

std::size_t NetworkConfig::head_dim(std::size_t c_out) const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(head_dim_ratio * double(c_out))));
}

std::vector<Bone> NetworkConfig::skeleton() const {
  if (bones.empty() && num_joints == 25) return ntu25_bones();
  return bones;
}

std::size_t NetworkConfig::output_frames() const {
  std::size_t t = num_frames;
  for (std::size_t s : strides) t = (t + s - 1) / s;
  return t;
}

void NetworkConfig::validate() const {
  if (block_channels.empty()) throw ConfigError("network needs at least one block");
  if (strides.size() != block_channels.size())
    throw ConfigError("strides must list one value per block (" + std::to_string(block_channels.size()) + ")");
  for (std::size_t i = 1; i < block_channels.size(); ++i)
    if (block_channels[i] < block_channels[i - 1]) throw ConfigError("block_channels must be non-decreasing");
  for (std::size_t s : strides)
    if (s != 1 && s != 2) throw ConfigError("strides must be 1 or 2");
  if (temporal_kernel == 0 || temporal_kernel % 2 == 0) throw ConfigError("temporal_kernel must be odd");
  if (in_channels == 0 || num_classes == 0 || num_joints == 0 || num_frames == 0 || heads == 0 ||
      channel_divisor == 0)
    throw ConfigError("network sizes must be positive");
  if (!(head_dim_ratio > 0)) throw ConfigError("head_dim_ratio must be positive");
  if (root_joint >= num_joints) throw ConfigError("root_joint out of range");
  if (bones.empty() && num_joints != 25 && num_joints > 1)
    throw ConfigError("bones must be given unless num_joints is 25 (NTU layout)");
  for (const Bone& b : bones)
    if (b.a >= num_joints || b.b >= num_joints) throw ConfigError("bone references a joint out of range");
}

NetworkConfig NetworkConfig::from_kv(const KeyValues& kv) {
  NetworkConfig c;
  c.in_channels = kv.get_uint("in_channels", c.in_channels);
  c.block_channels = kv.get_sizes("block_channels", c.block_channels);
  c.strides = kv.get_sizes("strides", c.strides);
  c.temporal_kernel = kv.get_uint("temporal_kernel", c.temporal_kernel);
  c.num_classes = kv.get_uint("num_classes", c.num_classes);
  c.num_joints = kv.get_uint("num_joints", c.num_joints);
  c.num_frames = kv.get_uint("num_frames", c.num_frames);
  c.channel_divisor = kv.get_uint("channel_divisor", c.channel_divisor);
  c.heads = kv.get_uint("heads", c.heads);
  c.head_dim_ratio = kv.get_double("head_dim_ratio", c.head_dim_ratio);
  const std::string fusion = kv.get_string("fusion", "post");
  if (fusion == "post") c.fusion = Fusion::post;
  else if (fusion == "pre") c.fusion = Fusion::pre;
  else throw ConfigError("fusion must be 'pre' or 'post', got '" + fusion + "'");
  c.root_joint = kv.get_uint("root_joint", c.root_joint);
  const std::string bones_file = kv.get_string("bones_file", "");
  const auto flat = kv.get_sizes("bones", {});
  if (!bones_file.empty() && !flat.empty()) throw ConfigError("give either bones or bones_file, not both");
  if (!bones_file.empty()) {
    BoneList list = load_bone_list(bones_file);
    if (list.joints != c.num_joints)
      throw ConfigError("bones_file declares " + std::to_string(list.joints) + " joints, config has " +
                        std::to_string(c.num_joints));
    c.bones = list.bones;
  }
  if (flat.size() % 2 != 0) throw ConfigError("bones must list parent,child pairs");
  for (std::size_t i = 0; i < flat.size(); i += 2) c.bones.push_back({flat[i], flat[i + 1]});
  c.validate();
  return c;
}

std::string NetworkConfig::to_text() const {
  std::string out;
  out += "in_channels=" + std::to_string(in_channels) + "\n";
  out += "block_channels=" + join_sizes(block_channels) + "\n";
  out += "strides=" + join_sizes(strides) + "\n";
  out += "temporal_kernel=" + std::to_string(temporal_kernel) + "\n";
  out += "num_classes=" + std::to_string(num_classes) + "\n";
  out += "num_joints=" + std::to_string(num_joints) + "\n";
  out += "num_frames=" + std::to_string(num_frames) + "\n";
  out += "channel_divisor=" + std::to_string(channel_divisor) + "\n";
  out += "heads=" + std::to_string(heads) + "\n";
  out += "head_dim_ratio=" + format_double(head_dim_ratio) + "\n";
  out += std::string("fusion=") + (fusion == Fusion::pre ? "pre" : "post") + "\n";
  out += "root_joint=" + std::to_string(root_joint) + "\n";
  if (!bones.empty()) {
    std::vector<std::size_t> flat;
    for (const auto& b : bones) {
      flat.push_back(b.a);
      flat.push_back(b.b);
    }
    out += "bones=" + join_sizes(flat) + "\n";
  }
  return out;
}

NetworkConfig desk_config(std::size_t num_classes) {
  NetworkConfig c;
  c.channel_divisor = 8;
  c.num_classes = num_classes;
  return c;
}

}  // namespace stt::model
