#include "stt/experiments/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "stt/nn/optim.hpp"
#include "stt/rng.hpp"

namespace stt::exp {

using model::Network;
using nn::Tensor;
using prep::LabeledDataset;

std::size_t TrainConfig::effective_epochs() const {
  return std::max<std::size_t>(1, epochs / std::max<std::size_t>(1, epoch_divisor));
}

std::vector<std::size_t> TrainConfig::effective_drops() const {
  std::vector<std::size_t> out;
  for (std::size_t d : lr_drop_epochs) out.push_back(d / std::max<std::size_t>(1, epoch_divisor));
  return out;
}

double TrainConfig::lr_at_epoch(std::size_t epoch) const {
  double rate = lr;
  for (std::size_t d : effective_drops())
    if (epoch >= d) rate /= lr_drop_factor;
  return rate;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (epoch_divisor == 0) throw ConfigError("epoch_divisor must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
    if (lr_drop_epochs[i] >= epochs) throw ConfigError("lr_drop_epochs must be below epochs");
    if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
      throw ConfigError("lr_drop_epochs must be strictly ascending");
  }
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  c.epochs = kv.get_uint("epochs", c.epochs);
  c.batch_size = kv.get_uint("batch_size", c.batch_size);
  c.lr = kv.get_double("lr", c.lr);
  c.lr_drop_epochs = kv.get_sizes("lr_drop_epochs", c.lr_drop_epochs);
  c.lr_drop_factor = kv.get_double("lr_drop_factor", c.lr_drop_factor);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.seed = kv.get_uint("seed", c.seed);
  c.epoch_divisor = kv.get_uint("epoch_divisor", c.epoch_divisor);
  c.val_fraction = kv.get_double("val_fraction", c.val_fraction);
  c.stop_at_perfect_train = kv.get_uint("stop_at_perfect_train", c.stop_at_perfect_train ? 1 : 0) != 0;
  c.validate();
  return c;
}

std::string TrainConfig::to_text() const {
  std::string out;
  out += "epochs=" + std::to_string(epochs) + "\n";
  out += "batch_size=" + std::to_string(batch_size) + "\n";
  out += "lr=" + format_double(lr) + "\n";
  out += "lr_drop_epochs=" + join_sizes(lr_drop_epochs) + "\n";
  out += "lr_drop_factor=" + format_double(lr_drop_factor) + "\n";
  out += "momentum=" + format_double(momentum) + "\n";
  out += "weight_decay=" + format_double(weight_decay) + "\n";
  out += "seed=" + std::to_string(seed) + "\n";
  out += "epoch_divisor=" + std::to_string(epoch_divisor) + "\n";
  out += "val_fraction=" + format_double(val_fraction) + "\n";
  out += std::string("stop_at_perfect_train=") + (stop_at_perfect_train ? "1" : "0") + "\n";
  return out;
}

std::size_t Metrics::total() const {
  std::size_t n = 0;
  for (const auto& row : confusion) n = std::accumulate(row.begin(), row.end(), n);
  return n;
}

Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("prediction/label count mismatch");
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || p < 0 || std::size_t(t) >= num_classes || std::size_t(p) >= num_classes)
      throw std::out_of_range("class index outside [0, " + std::to_string(num_classes) + ")");
    ++m.confusion[std::size_t(t)][std::size_t(p)];
    if (t == p) ++correct;
  }
  m.accuracy = labels.empty() ? 0.0 : double(correct) / double(labels.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t row = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
    m.per_class_accuracy.push_back(row == 0 ? std::numeric_limits<double>::quiet_NaN()
                                            : double(m.confusion[c][c]) / double(row));
  }
  return m;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

std::string confusion_csv(const Metrics& m) {
  std::string out = "true\\pred";
  for (std::size_t c = 0; c < m.confusion.size(); ++c) out += "," + std::to_string(c);
  out += "\n";
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    out += std::to_string(r);
    for (std::size_t v : m.confusion[r]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

Tensor<float> make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const SkeletonSequence& first = ds.items.at(indices[0]).sequence;
  const std::size_t per = first.data.size();
  Tensor<float> out({indices.size(), first.channels, first.frames, first.joints});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const SkeletonSequence& s = ds.items.at(indices[b]).sequence;
    if (!s.same_shape(first)) throw std::invalid_argument("batch items differ in shape");
    std::transform(s.data.begin(), s.data.end(), out.raw() + b * per, [](double v) { return float(v); });
  }
  return out;
}

std::vector<int> batch_labels(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  for (std::size_t i : indices) out.push_back(static_cast<int>(ds.items.at(i).class_id));
  return out;
}

namespace {

template <class F>
void for_each_batch(std::size_t n, std::size_t batch_size, F&& f) {
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    f(std::span<const std::size_t>(idx));
  }
}

Tensor<float> stack_rows(std::vector<Tensor<float>>& parts, std::size_t n, std::size_t width) {
  Tensor<float> out({n, width});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.raw(), p.raw() + p.size(), out.raw() + off);
    off += p.size();
  }
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_finite(double loss, std::size_t epoch, std::size_t step, double lr) {
  if (!std::isfinite(loss)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "non-finite training loss (%g) at epoch %zu, step %zu, lr %g", loss, epoch, step,
                  lr);
    throw TrainingDiverged(buf);
  }
}

}  // namespace

Tensor<float> predict_logits(const Network<float>& net, const LabeledDataset& ds, std::size_t batch_size) {
  std::vector<Tensor<float>> parts;
  for_each_batch(ds.size(), batch_size, [&](std::span<const std::size_t> idx) {
    nn::Tape<float> tape(false);
    parts.push_back(net.forward(tape, make_batch(ds, idx)).value());
  });
  return stack_rows(parts, ds.size(), net.config().num_classes);
}

Tensor<float> extract_features(const Network<float>& net, const LabeledDataset& ds, std::size_t batch_size) {
  std::vector<Tensor<float>> parts;
  for_each_batch(ds.size(), batch_size, [&](std::span<const std::size_t> idx) {
    nn::Tape<float> tape(false);
    parts.push_back(net.features(tape, make_batch(ds, idx)).value());
  });
  return stack_rows(parts, ds.size(), net.feature_dim());
}

Metrics evaluate(const Network<float>& net, const LabeledDataset& ds, std::size_t batch_size) {
  if (net.backbone_mode() != nn::Mode::eval) throw std::logic_error("evaluate() needs the network in eval mode");
  if (ds.num_classes() != net.config().num_classes)
    throw std::invalid_argument("class-count mismatch: dataset has " + std::to_string(ds.num_classes()) +
                                " classes, network predicts " + std::to_string(net.config().num_classes));
  const auto labels = batch_labels(ds, iota_indices(ds.size()));
  if (ds.size() == 0) return compute_metrics({}, {}, ds.num_classes());
  return compute_metrics(argmax_rows(predict_logits(net, ds, batch_size)), labels, ds.num_classes());
}

std::string format_log_line(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.6g,%.6f,%.6f,%.6f", e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc);
  return buf;
}

TrainResult train_network(Network<float>& net, const LabeledDataset& train, const LabeledDataset* val,
                          const TrainConfig& tc, std::ostream* log) {
  tc.validate();
  if (train.size() == 0) throw std::invalid_argument("empty training set");
  if (train.num_classes() != net.config().num_classes)
    throw std::invalid_argument("class-count mismatch: training set has " + std::to_string(train.num_classes()) +
                                " classes, network predicts " + std::to_string(net.config().num_classes));
  nn::Sgd<float> opt(net.parameters(), float(tc.momentum), float(tc.weight_decay));
  TrainResult result;
  bool have_best = false;
  std::vector<std::size_t> order = iota_indices(train.size());
  for (std::size_t epoch = 0; epoch < tc.effective_epochs(); ++epoch) {
    const double lr = tc.lr_at_epoch(epoch);
    Rng rng = make_rng(tc.seed, 1000 + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    net.set_mode(nn::Mode::train);
    double loss_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(tc.batch_size, order.size() - start));
      const auto labels = batch_labels(train, idx);
      nn::Tape<float> tape;
      const nn::Var<float> logits = net.forward(tape, make_batch(train, idx));
      const nn::Var<float> loss = nn::cross_entropy(logits, std::span<const int>(labels));
      const double lv = loss.value()[0];
      check_finite(lv, epoch, step, lr);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(float(lr));
      loss_sum += lv * double(idx.size());
      const auto pred = argmax_rows(logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    }
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.train_loss = loss_sum / double(train.size());
    e.train_acc = double(correct) / double(train.size());
    net.set_mode(nn::Mode::eval);
    e.val_acc = val != nullptr && val->size() > 0 ? evaluate(net, *val).accuracy : e.train_acc;
    result.log.push_back(e);
    if (log) *log << format_log_line(e) << '\n' << std::flush;
    if (!have_best || e.val_acc > result.best_val_acc) {
      have_best = true;
      result.best_val_acc = e.val_acc;
      result.best_epoch = epoch;
      result.best = net.to_checkpoint();
    }
    if (tc.stop_at_perfect_train && correct == train.size()) break;
  }
  return result;
}

TrainResult pretrain(const LabeledDataset& ds, const model::NetworkConfig& net_cfg, const TrainConfig& tc,
                     std::ostream* log) {
  tc.validate();
  if (ds.num_classes() != net_cfg.num_classes)
    throw std::invalid_argument("dataset has " + std::to_string(ds.num_classes()) + " classes, config expects " +
                                std::to_string(net_cfg.num_classes));
  Network<float> net(net_cfg, tc.seed);
  if (tc.val_fraction > 0.0) {
    const prep::Split split = prep::split_dataset(ds, 1.0 - tc.val_fraction, mix_seed(tc.seed, 77));
    return train_network(net, split.train, &split.test, tc, log);
  }
  return train_network(net, ds, nullptr, tc, log);
}

void calibrate_batch_norm(Network<float>& net, const LabeledDataset& ds, std::size_t batch_size, std::size_t passes,
                          std::uint64_t seed) {
  if (ds.size() == 0 || batch_size == 0) throw std::invalid_argument("calibration needs data and a positive batch size");
  const nn::Mode before = net.mode();
  net.set_mode(nn::Mode::train);
  std::vector<std::size_t> order = iota_indices(ds.size());
  for (std::size_t pass = 0; pass < passes; ++pass) {
    Rng rng = make_rng(seed, 5000 + pass);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch_size, order.size() - start));
      nn::Tape<float> tape(false);
      net.features(tape, make_batch(ds, idx));
    }
  }
  net.set_mode(before);
}

FeatureCache cache_features(const Network<float>& backbone, const LabeledDataset& target, std::size_t batch_size) {
  if (backbone.backbone_mode() != nn::Mode::eval)
    throw std::logic_error("feature caching needs the backbone in eval mode");
  return {extract_features(backbone, target, batch_size)};
}

namespace {

// Rows of `features` for the items of `part`, reading cached rows for items
// that are unmodified copies of the target set.
Tensor<float> part_features(const Network<float>& net, const LabeledDataset& part,
                            const std::unordered_map<std::string, std::size_t>& cached_row,
                            const FeatureCache* cache, std::size_t batch_size) {
  const std::size_t width = net.feature_dim();
  Tensor<float> out({part.size(), width});
  LabeledDataset missing;
  missing.class_names = part.class_names;
  missing.layout_tag = part.layout_tag;
  std::vector<std::size_t> missing_rows;
  for (std::size_t i = 0; i < part.size(); ++i) {
    const auto it = cache ? cached_row.find(part.items[i].name) : cached_row.end();
    if (it != cached_row.end()) {
      std::copy_n(cache->features.raw() + it->second * width, width, out.raw() + i * width);
    } else {
      missing.items.push_back(part.items[i]);
      missing_rows.push_back(i);
    }
  }
  if (!missing.items.empty()) {
    const Tensor<float> f = extract_features(net, missing, batch_size);
    for (std::size_t r = 0; r < missing_rows.size(); ++r)
      std::copy_n(f.raw() + r * width, width, out.raw() + missing_rows[r] * width);
  }
  return out;
}

Tensor<float> gather_rows(const Tensor<float>& m, std::span<const std::size_t> rows) {
  const std::size_t width = m.dim(1);
  Tensor<float> out({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(m.raw() + rows[r] * width, width, out.raw() + r * width);
  return out;
}

}  // namespace

FinetuneResult finetune_backbone(Network<float>& net, const LabeledDataset& target, const FinetuneOptions& opts,
                                 const TrainConfig& tc, const FeatureCache* cache) {
  tc.validate();
  target.validate();
  if (cache && cache->features.dim(0) != target.size())
    throw std::invalid_argument("feature cache does not match the target set");
  prep::AugmentSpec aug;
  aug.factor = opts.aug_factor;
  aug.seed = opts.seed;
  aug.validate();

  const prep::Split split = prep::split_dataset(target, opts.ratio, opts.seed);
  const LabeledDataset train = prep::augment_dataset(split.train, aug);
  net.freeze_and_reinit_fc(target.num_classes(), opts.seed);
  net.set_mode(nn::Mode::eval);

  std::unordered_map<std::string, std::size_t> cached_row;
  for (std::size_t i = 0; i < target.size(); ++i) cached_row.emplace(target.items[i].name, i);
  const Tensor<float> train_f = part_features(net, train, cached_row, cache, tc.batch_size);
  const Tensor<float> test_f = part_features(net, split.test, cached_row, cache, tc.batch_size);
  const auto train_labels = batch_labels(train, iota_indices(train.size()));
  const auto test_labels = batch_labels(split.test, iota_indices(split.test.size()));

  nn::Sgd<float> opt(net.trainable_parameters(), float(tc.momentum), float(tc.weight_decay));
  std::vector<std::size_t> order = iota_indices(train.size());
  for (std::size_t epoch = 0; epoch < tc.effective_epochs(); ++epoch) {
    const double lr = tc.lr_at_epoch(epoch);
    Rng rng = make_rng(opts.seed, 1000 + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(tc.batch_size, order.size() - start));
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train_labels[i]);
      nn::Tape<float> tape;
      const nn::Var<float> logits = net.classify(tape.constant(gather_rows(train_f, idx)));
      const nn::Var<float> loss = nn::cross_entropy(logits, std::span<const int>(labels));
      check_finite(loss.value()[0], epoch, step, lr);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(float(lr));
    }
  }

  FinetuneResult r;
  if (split.test.size() > 0) {
    nn::Tape<float> tape(false);
    const auto pred = argmax_rows(net.classify(tape.constant(test_f)).value());
    r.metrics = compute_metrics(pred, test_labels, target.num_classes());
  } else {
    r.metrics = compute_metrics({}, {}, target.num_classes());
  }
  r.train_per_class = split.train.class_counts();
  r.test_per_class = split.test.class_counts();
  r.train_items = train.size();
  for (const auto& s : split.train.items) r.train_names.push_back(s.name);
  for (const auto& s : split.test.items) r.test_names.push_back(s.name);
  r.model = net.to_checkpoint();
  return r;
}

FinetuneResult finetune(const nn::Checkpoint& ckpt, const model::NetworkConfig& net_cfg, const LabeledDataset& target,
                        const FinetuneOptions& opts, const TrainConfig& tc) {
  model::NetworkConfig cfg = net_cfg;
  cfg.num_classes = target.num_classes();
  Network<float> net(cfg, opts.seed);
  net.load_checkpoint(ckpt, /*skip_fc=*/true);
  return finetune_backbone(net, target, opts, tc);
}

}  // namespace stt::exp
