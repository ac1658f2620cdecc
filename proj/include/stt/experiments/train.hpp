#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stt/config.hpp"
#include "stt/model/network.hpp"
#include "stt/nn/checkpoint.hpp"
#include "stt/preprocess/dataset.hpp"
#include "stt/preprocess/transforms.hpp"

namespace stt::exp {

class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 0.1;
  std::vector<std::size_t> lr_drop_epochs = {50, 70, 90};
  double lr_drop_factor = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  // Desk-scale divisor: epochs and drop epochs are divided by it.
  std::size_t epoch_divisor = 1;
  // Fraction of each class held out for validation during pre-training.
  double val_fraction = 0.1;
  // Stop once an epoch reaches 100% training accuracy.
  bool stop_at_perfect_train = false;

  std::size_t effective_epochs() const;
  std::vector<std::size_t> effective_drops() const;
  // Learning rate for 0-based epoch `epoch`: divided by lr_drop_factor once
  // for every drop epoch <= epoch.
  double lr_at_epoch(std::size_t epoch) const;

  void validate() const;
  static TrainConfig from_kv(const KeyValues& kv);
  std::string to_text() const;
};

struct Metrics {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_accuracy;           // NaN for classes absent from the data

  std::size_t total() const;
};

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes);
std::vector<int> argmax_rows(const nn::Tensor<float>& logits);

// "true\pred" header then one row per true class.
std::string confusion_csv(const Metrics& m);

// [N, C, T, V] batch of the given items.
nn::Tensor<float> make_batch(const prep::LabeledDataset& ds, std::span<const std::size_t> indices);
std::vector<int> batch_labels(const prep::LabeledDataset& ds, std::span<const std::size_t> indices);

// Logits for every item, computed in batches without recording a tape.
nn::Tensor<float> predict_logits(const model::Network<float>& net, const prep::LabeledDataset& ds,
                                 std::size_t batch_size = 32);
// Pooled backbone features [N, C_last].
nn::Tensor<float> extract_features(const model::Network<float>& net, const prep::LabeledDataset& ds,
                                   std::size_t batch_size = 32);

// Requires the network in eval mode and a matching class count.
Metrics evaluate(const model::Network<float>& net, const prep::LabeledDataset& ds, std::size_t batch_size = 32);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};
std::string format_log_line(const EpochLog& e);

struct TrainResult {
  nn::Checkpoint best;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  std::vector<EpochLog> log;
};

// Trains every non-frozen parameter of `net` with SGD and the step schedule.
// Without a validation set the training accuracy selects the best epoch.
// Each log line is also written to `log` when given. Throws TrainingDiverged
// on a non-finite loss.
TrainResult train_network(model::Network<float>& net, const prep::LabeledDataset& train,
                          const prep::LabeledDataset* val, const TrainConfig& tc, std::ostream* log = nullptr);

// Builds a fresh network, holds out val_fraction per class for validation
// (when > 0) and trains. The returned checkpoint is the best epoch.
TrainResult pretrain(const prep::LabeledDataset& ds, const model::NetworkConfig& net_cfg, const TrainConfig& tc,
                     std::ostream* log = nullptr);

// Re-estimates batch-norm running statistics by running `passes` shuffled
// epochs of train-mode forward passes over `ds`; no parameter changes. Used to
// give a never-trained backbone meaningful eval-mode normalization.
void calibrate_batch_norm(model::Network<float>& net, const prep::LabeledDataset& ds, std::size_t batch_size,
                          std::size_t passes, std::uint64_t seed);

struct FinetuneOptions {
  double ratio = 0.1;
  int aug_factor = 1;
  std::uint64_t seed = 1;
};

struct FinetuneResult {
  Metrics metrics;
  std::vector<std::size_t> train_per_class;  // before augmentation
  std::vector<std::size_t> test_per_class;
  std::size_t train_items = 0;  // after augmentation
  std::vector<std::string> train_names;  // split members, before augmentation
  std::vector<std::string> test_names;
  nn::Checkpoint model;  // backbone plus the trained classifier
};

// Backbone features of the target items, reused across fine-tuning runs that
// share the backbone. Index i belongs to target.items[i].
struct FeatureCache {
  nn::Tensor<float> features;
};
FeatureCache cache_features(const model::Network<float>& backbone, const prep::LabeledDataset& target,
                            std::size_t batch_size = 32);

// Split by ratio, augment the train split, freeze the backbone and
// reinitialize the classifier, train the classifier only, evaluate on the
// untouched test split. `backbone` keeps its weights; only its classifier is
// replaced. The frozen backbone's features are computed once per item, which
// is equivalent to running it inside every step because its batch norms use
// running statistics.
FinetuneResult finetune_backbone(model::Network<float>& backbone, const prep::LabeledDataset& target,
                                 const FinetuneOptions& opts, const TrainConfig& tc,
                                 const FeatureCache* cache = nullptr);

// Loads `ckpt` (classifier excluded) into a network built from `net_cfg`,
// then fine-tunes. Throws model::CheckpointMismatch for incompatible
// checkpoints.
FinetuneResult finetune(const nn::Checkpoint& ckpt, const model::NetworkConfig& net_cfg,
                        const prep::LabeledDataset& target, const FinetuneOptions& opts, const TrainConfig& tc);

}  // namespace stt::exp
