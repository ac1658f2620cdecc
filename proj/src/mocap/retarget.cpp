#include "stt/mocap/retarget.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "stt/mocap/kinematics.hpp"

namespace stt::mocap {

namespace {

constexpr std::string_view kAxisToNtu = R"(# Axis Neuron (72 entries incl. end sites) -> NTU RGB+D 25 joints.
# <ntu_index_0_based> <bvh_joint_name>
# Finger chains collapse onto the wrist, middle-finger and thumb joints;
# the foot tip reuses the ankle because the source skeleton has no toes.
0 Hips
1 Spine1
2 Neck
3 Head
4 LeftArm
5 LeftForeArm
6 LeftHand
7 LeftInHandMiddle
8 RightArm
9 RightForeArm
10 RightHand
11 RightInHandMiddle
12 LeftUpLeg
13 LeftLeg
14 LeftFoot
15 LeftFoot
16 RightUpLeg
17 RightLeg
18 RightFoot
19 RightFoot
20 Spine3
21 LeftHandMiddle3
22 LeftHandThumb2
23 RightHandMiddle3
24 RightHandThumb2
)";

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void add_joint(std::vector<BvhJoint>& out, std::string name, std::optional<std::size_t> parent,
               Eigen::Vector3d offset, bool root = false) {
  BvhJoint j;
  j.name = std::move(name);
  j.parent = parent;
  j.offset = offset;
  if (root)
    j.channels = {Channel::Xposition, Channel::Yposition, Channel::Zposition,
                  Channel::Zrotation, Channel::Xrotation, Channel::Yrotation};
  else
    j.channels = {Channel::Zrotation, Channel::Xrotation, Channel::Yrotation};
  out.push_back(std::move(j));
}

std::size_t add_chain(std::vector<BvhJoint>& out, std::size_t parent,
                      const std::vector<std::pair<std::string, Eigen::Vector3d>>& links,
                      const Eigen::Vector3d& end_offset) {
  std::size_t p = parent;
  for (const auto& [name, off] : links) {
    add_joint(out, name, p, off);
    p = out.size() - 1;
  }
  BvhJoint site;
  site.name = out[p].name + "_End";
  site.parent = p;
  site.offset = end_offset;
  site.is_end_site = true;
  out.push_back(std::move(site));
  return p;
}

void add_arm(std::vector<BvhJoint>& out, std::size_t spine3, const std::string& side, double sx) {
  const auto v = [sx](double x, double y, double z) { return Eigen::Vector3d(sx * x, y, z); };
  add_joint(out, side + "Shoulder", spine3, v(4, 9, 0));
  add_joint(out, side + "Arm", out.size() - 1, v(13, 0, 0));
  add_joint(out, side + "ForeArm", out.size() - 1, v(28, 0, 0));
  add_joint(out, side + "Hand", out.size() - 1, v(25, 0, 0));
  const std::size_t hand = out.size() - 1;
  add_chain(out, hand,
            {{side + "HandThumb1", v(3, 0, 3)}, {side + "HandThumb2", v(3, 0, 1.5)},
             {side + "HandThumb3", v(2.5, 0, 1)}},
            v(2, 0, 0.5));
  const std::pair<const char*, double> fingers[] = {
      {"Index", 2.0}, {"Middle", 0.7}, {"Ring", -0.7}, {"Pinky", -2.0}};
  for (const auto& [finger, z] : fingers) {
    const std::string f = finger;
    add_chain(out, hand,
              {{side + "InHand" + f, v(3, 0, z)}, {side + "Hand" + f + "1", v(6, 0, 0.3 * z)},
               {side + "Hand" + f + "2", v(3.5, 0, 0)}, {side + "Hand" + f + "3", v(2.5, 0, 0)}},
              v(2, 0, 0));
  }
}

}  // namespace

JointMapping parse_mapping(std::string_view text) {
  JointMapping m;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto space = line.find_first_of(" \t");
    if (space == std::string_view::npos)
      throw std::invalid_argument("mapping line " + std::to_string(line_no) +
                                  ": expected '<target_index> <source_joint_name>'");
    const std::string_view idx = line.substr(0, space);
    const std::string_view name = trim(line.substr(space));
    std::size_t target = 0;
    auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), target);
    if (ec != std::errc() || ptr != idx.data() + idx.size() || name.empty() ||
        name.find_first_of(" \t") != std::string_view::npos)
      throw std::invalid_argument("mapping line " + std::to_string(line_no) +
                                  ": expected '<target_index> <source_joint_name>'");
    m.entries.emplace_back(target, std::string(name));
    m.target_count = std::max(m.target_count, target + 1);
    if (end == text.size()) break;
  }
  std::vector<bool> seen(m.target_count, false);
  for (const auto& [target, name] : m.entries) {
    if (seen[target])
      throw std::invalid_argument("mapping: target index " + std::to_string(target) + " appears twice");
    seen[target] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw std::invalid_argument("mapping: target index " + std::to_string(i) + " is missing");
  return m;
}

JointMapping load_mapping(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_mapping(ss.str());
}

std::string write_mapping(const JointMapping& mapping) {
  std::string out;
  for (const auto& [target, name] : mapping.entries) out += std::to_string(target) + " " + name + "\n";
  return out;
}

void validate_mapping(const JointMapping& mapping, const BvhDocument& doc) {
  std::vector<bool> seen(mapping.target_count, false);
  for (const auto& [target, name] : mapping.entries) {
    if (target >= mapping.target_count || seen[target])
      throw std::invalid_argument("mapping: target index " + std::to_string(target) +
                                  " is out of range or duplicated");
    seen[target] = true;
    const auto j = doc.find(name);
    if (!j) throw std::invalid_argument("mapping: source joint '" + name + "' not found in document");
    if (doc.joint(*j).is_end_site)
      throw std::invalid_argument("mapping: source joint '" + name + "' is an end site");
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw std::invalid_argument("mapping: target index " + std::to_string(i) + " is missing");
}

SkeletonSequence retarget(const BvhDocument& doc, const JointMapping& mapping, std::string layout) {
  validate_mapping(mapping, doc);
  const std::size_t T = doc.frame_count();
  const std::size_t V = mapping.target_count;

  // document joint index -> row of forward_kinematics output
  std::vector<std::size_t> row_of(doc.joint_count(), 0);
  {
    std::size_t r = 0;
    for (std::size_t j = 0; j < doc.joint_count(); ++j)
      if (!doc.joint(j).is_end_site) row_of[j] = r++;
  }
  std::vector<std::size_t> source_row(V);
  for (const auto& [target, name] : mapping.entries) source_row[target] = row_of[*doc.find(name)];

  SkeletonSequence seq(3, T, V, 0, std::move(layout));
  for (std::size_t t = 0; t < T; ++t) {
    const JointPositions fk = forward_kinematics(doc, t);
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t c = 0; c < 3; ++c)
        seq.at(c, t, v) = fk.positions(static_cast<Eigen::Index>(source_row[v]), static_cast<Eigen::Index>(c));
  }
  return seq;
}

std::string_view axis72_to_ntu25_text() { return kAxisToNtu; }

const JointMapping& axis72_to_ntu25() {
  static const JointMapping mapping = parse_mapping(kAxisToNtu);
  return mapping;
}

std::vector<BvhJoint> axis_neuron_hierarchy() {
  std::vector<BvhJoint> out;
  add_joint(out, "Hips", std::nullopt, {0, 0, 0}, true);
  for (const auto& [side, sx] : {std::pair<std::string, double>{"Right", -1.0}, {"Left", 1.0}}) {
    add_chain(out, 0,
              {{side + "UpLeg", {sx * 9, 0, 0}}, {side + "Leg", {0, -44, 0}}, {side + "Foot", {0, -42, 0}}},
              {0, -4, 14});
  }
  add_joint(out, "Spine", 0, {0, 10, 0});
  add_joint(out, "Spine1", out.size() - 1, {0, 10, 0});
  add_joint(out, "Spine2", out.size() - 1, {0, 10, 0});
  add_joint(out, "Spine3", out.size() - 1, {0, 10, 0});
  const std::size_t spine3 = out.size() - 1;
  add_chain(out, spine3, {{"Neck", {0, 12, 0}}, {"Head", {0, 10, 0}}}, {0, 16, 0});
  add_arm(out, spine3, "Right", -1.0);
  add_arm(out, spine3, "Left", 1.0);
  return out;
}

}  // namespace stt::mocap
