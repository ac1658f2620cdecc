#include "stt/preprocess/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <stdexcept>
#include <tuple>

namespace stt::prep {

namespace {

bool parse_sample_name(const std::string& stem, std::uint32_t& cls, std::uint32_t& idx) {
  const auto us = stem.find('_');
  if (us == std::string::npos) return false;
  const char* b = stem.data();
  auto r1 = std::from_chars(b, b + us, cls);
  auto r2 = std::from_chars(b + us + 1, b + stem.size(), idx);
  return r1.ec == std::errc() && r1.ptr == b + us && r2.ec == std::errc() && r2.ptr == b + stem.size();
}

}  // namespace

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& s : items)
    if (s.class_id < counts.size()) ++counts[s.class_id];
  return counts;
}

void LabeledDataset::validate() const {
  if (items.empty()) return;
  const auto& first = items.front().sequence;
  for (const auto& s : items) {
    if (s.class_id >= class_names.size())
      throw std::invalid_argument("sample '" + s.name + "' has class " + std::to_string(s.class_id) +
                                  " but only " + std::to_string(class_names.size()) + " classes exist");
    if (s.sequence.channels != first.channels || s.sequence.joints != first.joints)
      throw std::invalid_argument("sample '" + s.name + "' has a different channel/joint count");
    if (s.sequence.data.size() != s.sequence.channels * s.sequence.frames * s.sequence.joints)
      throw std::invalid_argument("sample '" + s.name + "' has inconsistent data length");
  }
}

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "classes.txt");
    if (!os) throw std::runtime_error("cannot write " + (dir / "classes.txt").string());
    for (const auto& n : ds.class_names) os << n << '\n';
  }
  for (const auto& s : ds.items) {
    SkeletonSequence seq = s.sequence;
    seq.label = s.class_id;
    save_skseq(dir / (s.name + ".skq"), seq);
  }
}

LabeledDataset load_dataset(const std::filesystem::path& dir, const std::string& layout_tag) {
  LabeledDataset ds;
  ds.layout_tag = layout_tag;
  std::ifstream cls(dir / "classes.txt");
  if (!cls) throw std::runtime_error("missing " + (dir / "classes.txt").string());
  for (std::string line; std::getline(cls, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ds.class_names.push_back(line);
  }

  std::vector<std::tuple<std::uint32_t, std::uint32_t, std::filesystem::path>> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".skq") continue;
    std::uint32_t c = 0, i = 0;
    const std::string stem = entry.path().stem().string();
    if (!parse_sample_name(stem, c, i))
      throw std::runtime_error("sample file '" + entry.path().filename().string() +
                               "' is not named <class_id>_<sample_id>.skq");
    files.emplace_back(c, i, entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& [c, i, path] : files) {
    Sample s;
    s.sequence = load_skseq(path);
    s.sequence.layout = layout_tag;
    if (s.sequence.label != c)
      throw std::runtime_error(path.filename().string() + ": stored label " +
                               std::to_string(s.sequence.label) + " disagrees with file name");
    s.class_id = c;
    s.name = path.stem().string();
    ds.items.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

void write_manifest(const std::filesystem::path& path, const LabeledDataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : ds.items) os << s.name << ".skq\n";
}

}  // namespace stt::prep
