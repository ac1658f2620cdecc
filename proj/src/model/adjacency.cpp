#include "stt/model/adjacency.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <sstream>
#include <stdexcept>

namespace stt::model {

AdjacencyPartitions build_adjacency(const std::vector<Bone>& bones, std::size_t joints,
                                    std::size_t root) {
  if (joints == 0) throw std::invalid_argument("adjacency needs at least one joint");
  if (root >= joints) throw std::out_of_range("adjacency root out of range");

  AdjacencyPartitions adj;
  adj.joints = joints;
  std::vector<std::vector<bool>> edge(joints, std::vector<bool>(joints, false));
  for (const Bone& b : bones) {
    if (b.a >= joints || b.b >= joints)
      throw std::out_of_range("bone (" + std::to_string(b.a) + ", " + std::to_string(b.b) +
                              ") references a joint outside [0, " + std::to_string(joints) + ")");
    if (b.a == b.b) throw std::invalid_argument("bone connects joint " + std::to_string(b.a) + " to itself");
    if (edge[b.a][b.b]) {
      ++adj.duplicates_removed;
      continue;
    }
    edge[b.a][b.b] = edge[b.b][b.a] = true;
  }

  constexpr std::size_t kUnreached = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> hop(joints, kUnreached);
  std::queue<std::size_t> q;
  hop[root] = 0;
  q.push(root);
  while (!q.empty()) {
    const std::size_t i = q.front();
    q.pop();
    for (std::size_t j = 0; j < joints; ++j)
      if (edge[i][j] && hop[j] == kUnreached) {
        hop[j] = hop[i] + 1;
        q.push(j);
      }
  }

  const std::size_t K = AdjacencyPartitions::kPartitions;
  adj.raw = nn::Tensor<double>({K, joints, joints});
  for (std::size_t i = 0; i < joints; ++i) {
    adj.raw.at({0, i, i}) = 1.0;
    for (std::size_t j = 0; j < joints; ++j) {
      if (!edge[i][j]) continue;
      std::size_t k = 0;
      if (hop[j] < hop[i]) k = 1;
      else if (hop[j] > hop[i]) k = 2;
      adj.raw.at({k, i, j}) = 1.0;
    }
  }

  adj.degree.assign(joints, 0.0);
  for (std::size_t i = 0; i < joints; ++i) {
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < joints; ++j) adj.degree[i] += adj.raw.at({k, i, j});
    adj.degree[i] += 1e-6;
  }
  adj.normalized = nn::Tensor<double>(adj.raw.shape());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j)
        adj.normalized.at({k, i, j}) =
            adj.raw.at({k, i, j}) / std::sqrt(adj.degree[i] * adj.degree[j]);
  return adj;
}

std::vector<Bone> ntu25_bones() {
  // 1-based pairs from the NTU RGB+D joint layout.
  static const std::size_t pairs[][2] = {
      {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},   {8, 7},
      {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
      {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12}};
  std::vector<Bone> out;
  for (const auto& p : pairs) out.push_back({p[1] - 1, p[0] - 1});
  return out;
}

BoneList parse_bone_list(std::string_view text) {
  BoneList list;
  bool have_count = false;
  std::istringstream is{std::string(text)};
  std::size_t line_no = 0;
  for (std::string raw; std::getline(is, raw);) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    std::istringstream ls(raw);
    std::vector<long long> nums;
    long long v = 0;
    while (ls >> v) nums.push_back(v);
    if (!ls.eof()) throw std::invalid_argument("bone list line " + std::to_string(line_no) + ": not a number");
    if (nums.empty()) continue;
    for (long long n : nums)
      if (n < 0) throw std::invalid_argument("bone list line " + std::to_string(line_no) + ": negative index");
    if (!have_count) {
      if (nums.size() != 1) throw std::invalid_argument("bone list must start with the joint count");
      list.joints = static_cast<std::size_t>(nums[0]);
      have_count = true;
    } else {
      if (nums.size() != 2)
        throw std::invalid_argument("bone list line " + std::to_string(line_no) + ": expected 'parent child'");
      list.bones.push_back({static_cast<std::size_t>(nums[0]), static_cast<std::size_t>(nums[1])});
    }
  }
  if (!have_count) throw std::invalid_argument("bone list is empty");
  return list;
}

BoneList load_bone_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_bone_list(ss.str());
}

std::string write_bone_list(const BoneList& list) {
  std::string out = std::to_string(list.joints) + "\n";
  for (const auto& b : list.bones) out += std::to_string(b.a) + " " + std::to_string(b.b) + "\n";
  return out;
}

}  // namespace stt::model
