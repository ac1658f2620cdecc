#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stt/sequence.hpp"

namespace stt::prep {

struct Sample {
  SkeletonSequence sequence;
  std::uint32_t class_id = 0;
  std::string name;  // "<class_id>_<sample_id>"
};

// Items share C, V and layout; every class_id indexes class_names.
struct LabeledDataset {
  std::vector<Sample> items;
  std::vector<std::string> class_names;
  std::string layout_tag = "ntu25";

  std::size_t size() const noexcept { return items.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::vector<std::size_t> class_counts() const;

  // Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
};

// Directory layout: `<class_id>_<sample_id>.skq` per sample plus
// `classes.txt` with one class name per line.
void save_dataset(const std::filesystem::path& dir, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& dir, const std::string& layout_tag = "ntu25");

// One `<name>.skq` file name per line.
void write_manifest(const std::filesystem::path& path, const LabeledDataset& ds);

}  // namespace stt::prep
