#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stt/experiments/train.hpp"

namespace stt::exp {

struct GridSpec {
  std::vector<double> ratios = {0.1, 0.3, 0.5, 0.7};
  std::vector<int> factors = {2, 4, 8};
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency
};

struct GridCell {
  double ratio = 0.0;
  int aug = 1;
  std::uint64_t seed = 0;
  FinetuneResult result;
};

// Worker count: `requested` (or the hardware concurrency when 0), capped by
// the STT_THREADS environment variable and by `jobs`.
std::size_t worker_count(std::size_t requested, std::size_t jobs);

// Fine-tunes one classifier per (ratio, factor) cell on top of the frozen
// backbone from `ckpt`. Every cell uses the grid seed, so cells sharing a
// ratio share their test split. Cells run on worker threads; the result order
// (ratio-major, then factor) and content do not depend on the thread count.
std::vector<GridCell> run_grid(const nn::Checkpoint& ckpt, const model::NetworkConfig& net_cfg,
                               const prep::LabeledDataset& target, const GridSpec& grid, const TrainConfig& tc);

// `ratio,aug,seed,accuracy` header plus one row per cell.
std::string grid_metrics_csv(const std::vector<GridCell>& cells);
// `ratio,aug,class,train,test` rows: per-class split sizes of every cell.
std::string grid_splits_csv(const std::vector<GridCell>& cells);
std::string confusion_file_name(const GridCell& cell);

// Writes metrics.csv, splits.csv and one confusion CSV per cell into `dir`.
void write_grid_outputs(const std::filesystem::path& dir, const std::vector<GridCell>& cells);

}  // namespace stt::exp
