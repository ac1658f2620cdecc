#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "stt/experiments/gradcheck.hpp"
#include "stt/experiments/grid.hpp"
#include "stt/experiments/synth.hpp"
#include "stt/experiments/train.hpp"
#include "stt/preprocess/transforms.hpp"
#include "temp_dir.hpp"

using namespace stt;
using namespace stt::exp;

namespace {

model::NetworkConfig tiny_net(std::size_t classes) {
  model::NetworkConfig c;
  c.block_channels = {8, 8, 16};
  c.strides = {1, 2, 1};
  c.temporal_kernel = 3;
  c.num_classes = classes;
  c.num_joints = 5;
  c.num_frames = 8;
  c.heads = 2;
  c.bones = {{0, 1}, {1, 2}, {1, 3}, {3, 4}};
  return c;
}

SynthSpec tiny_synth(std::size_t classes, std::size_t per_class, std::uint64_t seed, std::size_t offset = 0) {
  SynthSpec s;
  s.num_classes = classes;
  s.samples_per_class = per_class;
  s.joints = 5;
  s.frames = 8;
  s.seed = seed;
  s.class_offset = offset;
  return s;
}

TrainConfig short_training(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr_drop_epochs = {};
  tc.batch_size = 8;
  return tc;
}

std::string bytes_of(const nn::Checkpoint& c) {
  std::ostringstream os;
  nn::write_checkpoint(os, c);
  return os.str();
}

}  // namespace

TEST_CASE("metrics and confusion matrix") {
  const std::vector<int> pred = {0, 1, 1, 2, 0}, label = {0, 1, 2, 2, 1};
  const Metrics m = compute_metrics(pred, label, 4);
  CHECK(m.accuracy == doctest::Approx(0.6));
  CHECK(m.total() == 5);
  CHECK(m.confusion[2][1] == 1);
  CHECK(m.confusion[1][0] == 1);
  CHECK(m.per_class_accuracy[0] == 1.0);
  CHECK(m.per_class_accuracy[1] == 0.5);
  CHECK(std::isnan(m.per_class_accuracy[3]));
  const std::string csv = confusion_csv(m);
  CHECK(csv.starts_with("true\\pred,0,1,2,3\n"));
  CHECK(csv.find("\n2,0,1,1,0\n") != std::string::npos);
  CHECK_THROWS(compute_metrics(pred, std::vector<int>{0, 1}, 4));
}

TEST_CASE("argmax picks the first maximum") {
  const nn::Tensor<float> logits({2, 3}, {0.1f, 0.7f, 0.7f, 2.0f, -1.0f, 1.0f});
  CHECK(argmax_rows(logits) == std::vector<int>{1, 0});
}

TEST_CASE("step schedule uses 0-based epochs") {
  TrainConfig tc;
  CHECK(tc.lr_at_epoch(0) == doctest::Approx(0.1));
  CHECK(tc.lr_at_epoch(49) == doctest::Approx(0.1));
  CHECK(tc.lr_at_epoch(50) == doctest::Approx(0.01));
  CHECK(tc.lr_at_epoch(70) == doctest::Approx(0.001));
  CHECK(tc.lr_at_epoch(99) == doctest::Approx(0.0001));
  tc.epoch_divisor = 10;
  CHECK(tc.effective_epochs() == 10);
  CHECK(tc.effective_drops() == std::vector<std::size_t>{5, 7, 9});
  CHECK(tc.lr_at_epoch(5) == doctest::Approx(0.01));
  tc.lr_drop_epochs = {50, 50};
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("training config text round-trips") {
  TrainConfig tc;
  tc.epochs = 12;
  tc.lr_drop_epochs = {4, 8};
  tc.lr = 0.05;
  const TrainConfig back = TrainConfig::from_kv(KeyValues::parse(tc.to_text()));
  CHECK(back.epochs == 12);
  CHECK(back.lr_drop_epochs == tc.lr_drop_epochs);
  CHECK(back.lr == 0.05);
}

TEST_CASE("log lines are comma-separated epoch, rate, loss and accuracies") {
  CHECK(format_log_line({3, 0.01, 1.25, 0.5, 0.75}) == "3,0.01,1.250000,0.500000,0.750000");
}

TEST_CASE("synthetic corpora are reproducible and separable by seed") {
  const auto a = synth_dataset(tiny_synth(3, 4, 5)), b = synth_dataset(tiny_synth(3, 4, 5)),
             c = synth_dataset(tiny_synth(3, 4, 6));
  REQUIRE(a.size() == 12);
  CHECK(a.class_counts() == std::vector<std::size_t>{4, 4, 4});
  CHECK_NOTHROW(a.validate());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.items[i].sequence.data == b.items[i].sequence.data);
  CHECK(a.items[0].sequence.data != c.items[0].sequence.data);
  const auto shifted = synth_dataset(tiny_synth(3, 4, 5, 3));
  CHECK(shifted.class_names != a.class_names);
  SynthSpec bad = tiny_synth(3, 4, 5);
  bad.frames = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training reduces the loss on a tiny separable corpus") {
  const auto ds = synth_dataset(tiny_synth(3, 8, 2));
  model::Network<float> net(tiny_net(3), 1);
  const TrainResult r = train_network(net, ds, nullptr, short_training(15));
  REQUIRE(r.log.size() == 15);
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
  CHECK(r.best_val_acc >= r.log.front().train_acc);
}

TEST_CASE("a non-finite loss stops training") {
  const auto ds = synth_dataset(tiny_synth(3, 4, 2));
  model::Network<float> net(tiny_net(3), 1);
  TrainConfig tc = short_training(30);
  tc.lr = 1e30;
  CHECK_THROWS_AS(train_network(net, ds, nullptr, tc), TrainingDiverged);
}

TEST_CASE("pre-training is deterministic for a fixed seed") {
  const auto ds = synth_dataset(tiny_synth(3, 6, 4));
  TrainConfig tc = short_training(3);
  tc.seed = 9;
  std::ostringstream log1, log2;
  const TrainResult a = pretrain(ds, tiny_net(3), tc, &log1);
  const TrainResult b = pretrain(ds, tiny_net(3), tc, &log2);
  CHECK(bytes_of(a.best) == bytes_of(b.best));
  CHECK(log1.str() == log2.str());
  CHECK(a.best_epoch < 3);
}

TEST_CASE("batch norm calibration moves running statistics only") {
  const auto ds = synth_dataset(tiny_synth(3, 4, 2));
  model::Network<float> net(tiny_net(3), 1);
  const auto before = net.to_checkpoint();
  calibrate_batch_norm(net, ds, 8, 2, 1);
  const auto after = net.to_checkpoint();
  bool buffers_moved = false;
  for (std::size_t i = 0; i < before.entries.size(); ++i) {
    const bool running = before.entries[i].name.find("running") != std::string::npos;
    if (running)
      buffers_moved = buffers_moved || before.entries[i].value != after.entries[i].value;
    else
      CHECK(before.entries[i].value == after.entries[i].value);
  }
  CHECK(buffers_moved);
}

TEST_CASE("cached features give the same fine-tuning result") {
  const auto target = synth_dataset(tiny_synth(3, 10, 3, 3));
  model::Network<float> a(tiny_net(3), 2), b(tiny_net(3), 2);
  a.freeze_and_reinit_fc(3, 1);
  a.set_mode(nn::Mode::eval);
  const FeatureCache cache = cache_features(a, target);
  FinetuneOptions opts;
  opts.ratio = 0.3;
  opts.aug_factor = 2;
  const TrainConfig tc = short_training(5);
  const FinetuneResult with = finetune_backbone(a, target, opts, tc, &cache);
  const FinetuneResult without = finetune_backbone(b, target, opts, tc);
  CHECK(with.metrics.accuracy == without.metrics.accuracy);
  CHECK(with.metrics.confusion == without.metrics.confusion);
  CHECK(with.train_per_class == std::vector<std::size_t>{3, 3, 3});
  CHECK(with.test_per_class == std::vector<std::size_t>{7, 7, 7});
  CHECK(with.train_items == 18);
  CHECK(bytes_of(with.model) == bytes_of(without.model));
}

TEST_CASE("fine-tuning leaves the backbone untouched") {
  const auto target = synth_dataset(tiny_synth(3, 10, 3, 3));
  model::Network<float> src(tiny_net(5), 4);
  const nn::Checkpoint ckpt = src.to_checkpoint();
  FinetuneOptions opts;
  opts.ratio = 0.5;
  const FinetuneResult r = finetune(ckpt, tiny_net(5), target, opts, short_training(4));
  model::Network<float> tuned(tiny_net(3), 0);
  tuned.load_checkpoint(r.model);
  for (const auto& e : ckpt.entries) {
    if (e.name.starts_with("fc.")) continue;
    CHECK(r.model.find(e.name)->value == e.value);
  }
  CHECK(r.model.find("fc.weight")->value.shape() == nn::Shape{16, 3});

  model::NetworkConfig wider = tiny_net(5);
  wider.block_channels = {8, 16, 16};
  CHECK_THROWS_AS(finetune(ckpt, wider, target, opts, short_training(1)), model::CheckpointMismatch);
}

TEST_CASE("grid results do not depend on the thread count") {
  const auto target = synth_dataset(tiny_synth(3, 10, 3, 3));
  const nn::Checkpoint ckpt = model::Network<float>(tiny_net(5), 4).to_checkpoint();
  GridSpec grid;
  grid.ratios = {0.3, 0.5};
  grid.factors = {1, 3};
  grid.seed = 2;
  const TrainConfig tc = short_training(3);
  grid.threads = 1;
  const auto one = run_grid(ckpt, tiny_net(5), target, grid, tc);
  grid.threads = 3;
  const auto three = run_grid(ckpt, tiny_net(5), target, grid, tc);
  REQUIRE(one.size() == 4);
  CHECK(grid_metrics_csv(one) == grid_metrics_csv(three));
  CHECK(grid_splits_csv(one) == grid_splits_csv(three));
  for (std::size_t i = 0; i < one.size(); ++i)
    CHECK(confusion_csv(one[i].result.metrics) == confusion_csv(three[i].result.metrics));

  // Cells sharing a ratio evaluate on the same test items.
  CHECK(one[0].ratio == one[1].ratio);
  CHECK(one[0].aug != one[1].aug);
  CHECK(one[0].result.test_names == one[1].result.test_names);
  CHECK(one[0].result.test_names != one[2].result.test_names);

  CHECK(grid_metrics_csv(one).starts_with("ratio,aug,seed,accuracy\n"));
  CHECK(confusion_file_name(one[0]) == "confusion_r0.3_a1.csv");
  TempDir dir("grid");
  write_grid_outputs(dir.path, one);
  CHECK(std::filesystem::exists(dir.path / "metrics.csv"));
  CHECK(std::filesystem::exists(dir.path / "splits.csv"));
  CHECK(std::filesystem::exists(dir.path / "confusion_r0.5_a3.csv"));
}

TEST_CASE("worker count honours the request, the job count and STT_THREADS") {
  const char* saved = std::getenv("STT_THREADS");
  const std::string restore = saved ? saved : "";
  ::unsetenv("STT_THREADS");
  CHECK(worker_count(4, 12) == 4);
  CHECK(worker_count(4, 2) == 2);
  CHECK(worker_count(0, 12) >= 1);
  ::setenv("STT_THREADS", "2", 1);
  CHECK(worker_count(4, 12) == 2);
  if (saved)
    ::setenv("STT_THREADS", restore.c_str(), 1);
  else
    ::unsetenv("STT_THREADS");
}

TEST_CASE("gradient check passes for every layer") {
  for (const auto& layer : gradcheck_layers()) {
    CAPTURE(layer);
    const LayerReport r = gradcheck_layer(layer);
    CHECK(r.checked > 0);
    CHECK(r.ok(GradcheckOptions{}));
  }
  CHECK_THROWS_AS(gradcheck_layer("lstm"), std::invalid_argument);
}

TEST_CASE("gradient check catches a sign error in each backward rule") {
  const std::vector<std::pair<nn::FaultSite, std::string>> cases = {
      {nn::FaultSite::matmul, "fc"},       {nn::FaultSite::softmax, "attention"}, {nn::FaultSite::relu, "block"},
      {nn::FaultSite::conv, "tcn"},        {nn::FaultSite::batchnorm, "batchnorm"}, {nn::FaultSite::add, "block"}};
  for (const auto& [site, layer] : cases) {
    CAPTURE(layer);
    nn::set_sign_flip(site);
    const LayerReport r = gradcheck_layer(layer);
    nn::set_sign_flip(nn::FaultSite::none);
    CHECK_FALSE(r.ok(GradcheckOptions{}));
  }
}
