#include "stt/experiments/grid.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace stt::exp {

std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested != 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STT_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && cap > 0) n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

std::vector<GridCell> run_grid(const nn::Checkpoint& ckpt, const model::NetworkConfig& net_cfg,
                               const prep::LabeledDataset& target, const GridSpec& grid, const TrainConfig& tc) {
  tc.validate();
  target.validate();
  if (grid.ratios.empty() || grid.factors.empty()) throw std::invalid_argument("grid needs ratios and factors");
  model::NetworkConfig cfg = net_cfg;
  cfg.num_classes = target.num_classes();

  const auto make_backbone = [&] {
    model::Network<float> net(cfg, grid.seed);
    net.load_checkpoint(ckpt, /*skip_fc=*/true);
    net.set_mode(nn::Mode::eval);
    return net;
  };
  FeatureCache cache;
  {
    model::Network<float> net = make_backbone();
    net.freeze_and_reinit_fc(cfg.num_classes, grid.seed);
    cache = cache_features(net, target, tc.batch_size);
  }

  std::vector<GridCell> cells;
  for (double r : grid.ratios)
    for (int f : grid.factors) cells.push_back(GridCell{r, f, grid.seed, {}});

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    try {
      model::Network<float> net = make_backbone();
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        FinetuneOptions opts;
        opts.ratio = cells[i].ratio;
        opts.aug_factor = cells[i].aug;
        opts.seed = cells[i].seed;
        cells[i].result = finetune_backbone(net, target, opts, tc, &cache);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = cells.size();
    }
  };
  const std::size_t n_workers = worker_count(grid.threads, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return cells;
}

std::string grid_metrics_csv(const std::vector<GridCell>& cells) {
  std::string out = "ratio,aug,seed,accuracy\n";
  for (const auto& c : cells) {
    char acc[32];
    std::snprintf(acc, sizeof(acc), "%.6f", c.result.metrics.accuracy);
    out += format_double(c.ratio) + "," + std::to_string(c.aug) + "," + std::to_string(c.seed) + "," + acc + "\n";
  }
  return out;
}

std::string grid_splits_csv(const std::vector<GridCell>& cells) {
  std::string out = "ratio,aug,class,train,test\n";
  for (const auto& c : cells)
    for (std::size_t k = 0; k < c.result.train_per_class.size(); ++k)
      out += format_double(c.ratio) + "," + std::to_string(c.aug) + "," + std::to_string(k) + "," +
             std::to_string(c.result.train_per_class[k]) + "," + std::to_string(c.result.test_per_class[k]) + "\n";
  return out;
}

std::string confusion_file_name(const GridCell& cell) {
  return "confusion_r" + format_double(cell.ratio) + "_a" + std::to_string(cell.aug) + ".csv";
}

namespace {
void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}
}  // namespace

void write_grid_outputs(const std::filesystem::path& dir, const std::vector<GridCell>& cells) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", grid_metrics_csv(cells));
  write_text(dir / "splits.csv", grid_splits_csv(cells));
  for (const auto& c : cells) write_text(dir / confusion_file_name(c), confusion_csv(c.result.metrics));
}

}  // namespace stt::exp
