#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stt/config.hpp"
#include "stt/experiments/gradcheck.hpp"
#include "stt/experiments/grid.hpp"
#include "stt/experiments/synth.hpp"
#include "stt/experiments/train.hpp"
#include "stt/mocap/retarget.hpp"
#include "stt/nn/checkpoint.hpp"
#include "stt/preprocess/transforms.hpp"

namespace stt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad flags or configuration, reported before any compute.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.path, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "override one configuration key (key=value); repeatable");
}

// Every configuration section a run may need, resolved from defaults, the
// config file and --set overrides. Unknown keys are rejected.
struct Resolved {
  KeyValues kv;
  model::NetworkConfig net;
  exp::TrainConfig train;
  exp::SynthSpec synth;
  double ratio = 0.1;
  int aug_factor = 1;
  std::vector<double> grid_ratios = {0.1, 0.3, 0.5, 0.7};
  std::vector<std::size_t> grid_factors = {2, 4, 8};
};

Resolved resolve(const ConfigFlags& f) {
  Resolved r;
  if (!f.path.empty()) r.kv = KeyValues::load(f.path);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    r.kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  r.net = model::NetworkConfig::from_kv(r.kv);
  r.train = exp::TrainConfig::from_kv(r.kv);
  r.synth = exp::SynthSpec::from_kv(r.kv);
  r.ratio = r.kv.get_double("finetune_ratio", r.ratio);
  r.aug_factor = int(r.kv.get_int("aug_factor", r.aug_factor));
  r.grid_ratios = r.kv.get_doubles("grid_ratios", r.grid_ratios);
  r.grid_factors = r.kv.get_sizes("grid_factors", r.grid_factors);
  r.kv.reject_unused();
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// Network settings for `ds`: the class count follows the data unless the
// configuration pins a different one. Frames and joints must match.
model::NetworkConfig network_for(const Resolved& r, const prep::LabeledDataset& ds) {
  model::NetworkConfig cfg = r.net;
  if (r.kv.has("num_classes") && cfg.num_classes != ds.num_classes())
    throw UsageError("config num_classes=" + std::to_string(cfg.num_classes) + " but the data has " +
                     std::to_string(ds.num_classes()) + " classes");
  cfg.num_classes = ds.num_classes();
  if (!ds.items.empty()) {
    const auto& s = ds.items.front().sequence;
    if (s.frames != cfg.num_frames || s.joints != cfg.num_joints || s.channels != cfg.in_channels)
      throw UsageError("data sequences are C=" + std::to_string(s.channels) + " T=" + std::to_string(s.frames) +
                       " V=" + std::to_string(s.joints) + " but the network expects C=" +
                       std::to_string(cfg.in_channels) + " T=" + std::to_string(cfg.num_frames) +
                       " V=" + std::to_string(cfg.num_joints));
  }
  cfg.validate();
  return cfg;
}

std::size_t checkpoint_classes(const nn::Checkpoint& ckpt) {
  const nn::NamedTensor* b = ckpt.find("fc.bias");
  if (b == nullptr) throw std::runtime_error("checkpoint has no classifier (fc.bias)");
  return b->value.size();
}

json metrics_json(const exp::Metrics& m) {
  json per_class = json::array();
  for (double a : m.per_class_accuracy) per_class.push_back(std::isnan(a) ? json(nullptr) : json(a));
  return {{"accuracy", m.accuracy}, {"samples", m.total()}, {"per_class_accuracy", per_class}};
}

// ---- bvh2seq ---------------------------------------------------------------

struct Bvh2SeqArgs {
  std::vector<std::string> inputs;
  std::string mapping;
  std::string out;
  bool normalize = false;
  std::size_t frames = 64;
  std::uint32_t label = 0;
};

std::vector<fs::path> bvh_inputs(const std::vector<std::string>& inputs, std::ostream& err, bool& missing) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (e.is_regular_file() && ext == ".bvh") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      err << "error " << in << ": no such file or directory\n";
      missing = true;
    }
  }
  return files;
}

int cmd_bvh2seq(const Bvh2SeqArgs& a, std::ostream& out, std::ostream& err) {
  const mocap::JointMapping mapping = a.mapping.empty() ? mocap::axis72_to_ntu25() : mocap::load_mapping(a.mapping);
  if (a.normalize && mapping.target_count != 25)
    throw UsageError("--normalize needs the 25-joint target layout, the mapping has " +
                     std::to_string(mapping.target_count) + " joints");
  if (a.frames == 1) throw UsageError("--frames must be 0 (keep) or at least 2");
  const std::string layout = mapping.target_count == 25 ? "ntu25" : "map" + std::to_string(mapping.target_count);

  bool failed = false;
  const auto files = bvh_inputs(a.inputs, err, failed);
  fs::create_directories(a.out);
  std::size_t written = 0;
  for (const auto& file : files) {
    try {
      const mocap::BvhDocument doc = mocap::load_bvh(file);
      mocap::validate_mapping(mapping, doc);
      SkeletonSequence seq = mocap::retarget(doc, mapping, layout);
      if (a.normalize) seq = prep::view_normalize(seq, 12, 16, 0);
      if (a.frames != 0) seq = prep::resample(seq, a.frames);
      seq.label = a.label;
      const fs::path dst = fs::path(a.out) / (file.stem().string() + ".skq");
      save_skseq(dst, seq);
      ++written;
      out << "ok " << file.string() << " -> " << dst.string() << " C=" << seq.channels << " T=" << seq.frames
          << " V=" << seq.joints << "\n";
    } catch (const std::exception& e) {
      failed = true;
      err << "error " << file.string() << ": " << e.what() << "\n";
    }
  }
  out << "converted " << written << " of " << files.size() << " file(s)\n";
  return failed ? kExitData : kExitOk;
}

// ---- synth -----------------------------------------------------------------

int cmd_synth(const Resolved& r, std::optional<std::uint64_t> seed, const std::string& out_dir, std::ostream& out) {
  exp::SynthSpec spec = r.synth;
  if (seed) spec.seed = *seed;
  const prep::LabeledDataset ds = exp::synth_dataset(spec);
  prep::save_dataset(out_dir, ds);
  write_text(fs::path(out_dir) / "synth.txt", spec.to_text());
  out << "wrote " << ds.size() << " sequences in " << ds.num_classes() << " classes to " << out_dir << "\n";
  return kExitOk;
}

// ---- pretrain --------------------------------------------------------------

int cmd_pretrain(const Resolved& r, std::optional<std::uint64_t> seed, const std::string& data,
                 const std::string& out_dir, std::ostream& out) {
  exp::TrainConfig tc = r.train;
  if (seed) tc.seed = *seed;
  tc.validate();
  const prep::LabeledDataset ds = prep::load_dataset(data);
  const model::NetworkConfig cfg = network_for(r, ds);

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train.log", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (fs::path(out_dir) / "train.log").string());
  const exp::TrainResult res = exp::pretrain(ds, cfg, tc, &log);
  nn::save_checkpoint(fs::path(out_dir) / "best.ckpt", res.best);
  write_text(fs::path(out_dir) / "config.txt", cfg.to_text() + tc.to_text());
  write_json(fs::path(out_dir) / "summary.json", {{"best_epoch", res.best_epoch},
                                                  {"best_val_acc", res.best_val_acc},
                                                  {"epochs_run", res.log.size()},
                                                  {"classes", ds.num_classes()},
                                                  {"samples", ds.size()}});
  out << "best epoch " << res.best_epoch << " val_acc " << fmt(res.best_val_acc) << "; checkpoint "
      << (fs::path(out_dir) / "best.ckpt").string() << "\n";
  return kExitOk;
}

// ---- finetune --------------------------------------------------------------

struct FinetuneArgs {
  std::string checkpoint, data, out;
  std::optional<double> ratio;
  std::optional<int> aug;
  std::optional<std::uint64_t> seed;
};

int cmd_finetune(const Resolved& r, const FinetuneArgs& a, std::ostream& out) {
  exp::FinetuneOptions opts;
  opts.ratio = a.ratio.value_or(r.ratio);
  opts.aug_factor = a.aug.value_or(r.aug_factor);
  opts.seed = a.seed.value_or(r.train.seed);
  if (!(opts.ratio > 0.0 && opts.ratio <= 1.0)) throw UsageError("--ratio must lie in (0, 1]");
  if (opts.aug_factor < 1) throw UsageError("--aug must be at least 1");
  exp::TrainConfig tc = r.train;
  tc.seed = opts.seed;
  tc.validate();

  const prep::LabeledDataset ds = prep::load_dataset(a.data);
  const model::NetworkConfig cfg = network_for(r, ds);
  const nn::Checkpoint ckpt = nn::load_checkpoint(a.checkpoint);
  exp::FinetuneResult res;
  try {
    res = exp::finetune(ckpt, cfg, ds, opts, tc);
  } catch (const model::CheckpointMismatch& e) {
    throw UsageError(std::string("checkpoint does not fit the configured network: ") + e.what());
  }

  fs::create_directories(a.out);
  nn::save_checkpoint(fs::path(a.out) / "model.ckpt", res.model);
  exp::GridCell cell{opts.ratio, opts.aug_factor, opts.seed, res};
  write_text(fs::path(a.out) / "metrics.csv", exp::grid_metrics_csv({cell}));
  write_text(fs::path(a.out) / "confusion.csv", exp::confusion_csv(res.metrics));
  const auto manifest = [](const std::vector<std::string>& names) {
    std::string text;
    for (const auto& n : names) text += n + ".skq\n";
    return text;
  };
  write_text(fs::path(a.out) / "train.txt", manifest(res.train_names));
  write_text(fs::path(a.out) / "test.txt", manifest(res.test_names));
  json j = metrics_json(res.metrics);
  j["ratio"] = opts.ratio;
  j["aug"] = opts.aug_factor;
  j["seed"] = opts.seed;
  j["train_per_class"] = res.train_per_class;
  j["test_per_class"] = res.test_per_class;
  j["train_items"] = res.train_items;
  write_json(fs::path(a.out) / "summary.json", j);
  out << "test accuracy " << fmt(res.metrics.accuracy) << " on " << res.metrics.total() << " sequences ("
      << res.train_items << " training items)\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const Resolved& r, const std::string& checkpoint, const std::string& data, const std::string& out_dir,
             std::ostream& out) {
  const prep::LabeledDataset ds = prep::load_dataset(data);
  const nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint);
  const std::size_t classes = checkpoint_classes(ckpt);
  if (classes != ds.num_classes())
    throw UsageError("checkpoint classifies " + std::to_string(classes) + " classes but the data has " +
                     std::to_string(ds.num_classes()));
  const model::NetworkConfig cfg = network_for(r, ds);
  model::Network<float> net(cfg, r.train.seed);
  try {
    net.load_checkpoint(ckpt);
  } catch (const model::CheckpointMismatch& e) {
    throw UsageError(std::string("checkpoint does not fit the configured network: ") + e.what());
  }
  net.set_mode(nn::Mode::eval);
  const exp::Metrics m = exp::evaluate(net, ds, r.train.batch_size);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "confusion.csv", exp::confusion_csv(m));
    write_json(fs::path(out_dir) / "metrics.json", metrics_json(m));
  }
  out << "accuracy " << fmt(m.accuracy) << " on " << m.total() << " sequences\n";
  return kExitOk;
}

// ---- grid ------------------------------------------------------------------

struct GridArgs {
  std::string checkpoint, data, out;
  std::vector<double> ratios;
  std::vector<int> factors;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
};

int cmd_grid(const Resolved& r, const GridArgs& a, std::ostream& out) {
  exp::GridSpec g;
  g.ratios = a.ratios.empty() ? r.grid_ratios : a.ratios;
  if (a.factors.empty())
    g.factors.assign(r.grid_factors.begin(), r.grid_factors.end());
  else
    g.factors = a.factors;
  g.seed = a.seed.value_or(r.train.seed);
  g.threads = a.threads;
  for (double x : g.ratios)
    if (!(x > 0.0 && x <= 1.0)) throw UsageError("grid ratios must lie in (0, 1]");
  for (int f : g.factors)
    if (f < 1) throw UsageError("grid factors must be at least 1");
  exp::TrainConfig tc = r.train;
  tc.seed = g.seed;
  tc.validate();

  const prep::LabeledDataset ds = prep::load_dataset(a.data);
  const model::NetworkConfig cfg = network_for(r, ds);
  const nn::Checkpoint ckpt = nn::load_checkpoint(a.checkpoint);
  std::vector<exp::GridCell> cells;
  try {
    cells = exp::run_grid(ckpt, cfg, ds, g, tc);
  } catch (const model::CheckpointMismatch& e) {
    throw UsageError(std::string("checkpoint does not fit the configured network: ") + e.what());
  }
  exp::write_grid_outputs(a.out, cells);
  for (const auto& c : cells)
    out << "ratio " << format_double(c.ratio) << " aug " << c.aug << " accuracy " << fmt(c.result.metrics.accuracy)
        << "\n";
  out << cells.size() << " cells written to " << a.out << "\n";
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

const std::map<std::string, nn::FaultSite>& fault_sites() {
  static const std::map<std::string, nn::FaultSite> sites = {
      {"matmul", nn::FaultSite::matmul}, {"softmax", nn::FaultSite::softmax},
      {"relu", nn::FaultSite::relu},     {"conv", nn::FaultSite::conv},
      {"batchnorm", nn::FaultSite::batchnorm}, {"add", nn::FaultSite::add}};
  return sites;
}

struct GradcheckArgs {
  std::vector<std::string> layers;
  std::string inject;
  exp::GradcheckOptions opts;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const auto layers = a.layers.empty() ? exp::gradcheck_layers() : a.layers;
  if (!a.inject.empty()) nn::set_sign_flip(fault_sites().at(a.inject));
  bool all_ok = true;
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %12s %10s %8s %7s  %s\n", "layer", "max_rel_err", "pass_frac", "checked",
                "kinked", "status");
  out << line;
  for (const auto& layer : layers) {
    const exp::LayerReport rep = exp::gradcheck_layer(layer, a.opts);
    const bool ok = rep.ok(a.opts);
    all_ok = all_ok && ok;
    std::snprintf(line, sizeof(line), "%-14s %12.3e %10.4f %8zu %7zu  %s\n", layer.c_str(), rep.max_rel_error,
                  rep.pass_fraction(), rep.checked, rep.kinked, ok ? "ok" : "FAIL");
    out << line;
  }
  nn::set_sign_flip(nn::FaultSite::none);
  return all_ok ? kExitOk : kExitData;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skeleton action recognition toolkit: motion-capture conversion, training and transfer experiments",
               "stt"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Bvh2SeqArgs b2s;
  auto* bvh = app.add_subcommand("bvh2seq", "Convert BVH recordings to 25-joint SKSEQ1 sequences");
  bvh->add_option("inputs", b2s.inputs, "BVH files or directories of .bvh files")->required();
  bvh->add_option("--mapping", b2s.mapping, "joint mapping file (default: built-in 72 -> 25 table)")
      ->check(CLI::ExistingFile);
  bvh->add_option("--out", b2s.out, "output directory")->required();
  bvh->add_flag("--normalize", b2s.normalize, "centre the root and face the hips along +x at frame 0");
  bvh->add_option("--frames", b2s.frames, "resample to this many frames; 0 keeps the recording length")
      ->capture_default_str();
  bvh->add_option("--label", b2s.label, "class label stored in every output")->capture_default_str();

  ConfigFlags synth_cfg;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled corpus");
  add_config_flags(synth, synth_cfg);
  synth->add_option("--seed", synth_seed, "generator seed (overrides synth_seed)");
  synth->add_option("--out", synth_out, "output dataset directory")->required();

  ConfigFlags pre_cfg;
  std::optional<std::uint64_t> pre_seed;
  std::string pre_data, pre_out;
  auto* pre = app.add_subcommand("pretrain", "Train the full network on a labelled corpus");
  add_config_flags(pre, pre_cfg);
  pre->add_option("--data", pre_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--seed", pre_seed, "training seed (overrides seed)");
  pre->add_option("--out", pre_out, "output directory")->required();

  ConfigFlags ft_cfg;
  FinetuneArgs ft;
  auto* fine = app.add_subcommand("finetune", "Train a new classifier on a frozen pre-trained backbone");
  add_config_flags(fine, ft_cfg);
  fine->add_option("--checkpoint", ft.checkpoint, "pre-trained checkpoint")->required()->check(CLI::ExistingFile);
  fine->add_option("--data", ft.data, "target dataset directory")->required()->check(CLI::ExistingDirectory);
  fine->add_option("--ratio", ft.ratio, "fraction of each class used for training (overrides finetune_ratio)");
  fine->add_option("--aug", ft.aug, "augmentation factor for the training split (overrides aug_factor)");
  fine->add_option("--seed", ft.seed, "split, augmentation and training seed (overrides seed)");
  fine->add_option("--out", ft.out, "output directory")->required();

  ConfigFlags ev_cfg;
  std::string ev_ckpt, ev_data, ev_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled dataset");
  add_config_flags(eval, ev_cfg);
  eval->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", ev_out, "optional directory for confusion.csv and metrics.json");

  ConfigFlags grid_cfg;
  GridArgs ga;
  auto* grid = app.add_subcommand("grid", "Fine-tune over every training-ratio x augmentation-factor setting");
  add_config_flags(grid, grid_cfg);
  grid->add_option("--checkpoint", ga.checkpoint, "pre-trained checkpoint")->required()->check(CLI::ExistingFile);
  grid->add_option("--data", ga.data, "target dataset directory")->required()->check(CLI::ExistingDirectory);
  grid->add_option("--ratios", ga.ratios, "training ratios (overrides grid_ratios)")->delimiter(',');
  grid->add_option("--factors", ga.factors, "augmentation factors (overrides grid_factors)")->delimiter(',');
  grid->add_option("--seed", ga.seed, "seed shared by every cell (overrides seed)");
  grid->add_option("--threads", ga.threads, "worker threads; 0 uses every core (STT_THREADS caps it)")
      ->capture_default_str();
  grid->add_option("--out", ga.out, "output directory")->required();

  GradcheckArgs gc;
  std::vector<std::string> layer_names = exp::gradcheck_layers();
  std::vector<std::string> site_names;
  for (const auto& [name, site] : fault_sites()) site_names.push_back(name);
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  grad->add_option("--layer", gc.layers, "layer(s) to check (default: all)")->check(CLI::IsMember(layer_names));
  grad->add_option("--inject-sign-flip", gc.inject, "flip the sign of one backward rule (checker self-test)")
      ->check(CLI::IsMember(site_names));
  grad->add_option("--batch", gc.opts.batch, "batch size N")->capture_default_str();
  grad->add_option("--channels", gc.opts.channels, "channels C")->capture_default_str();
  grad->add_option("--frames", gc.opts.frames, "frames T")->capture_default_str();
  grad->add_option("--joints", gc.opts.joints, "joints V")->capture_default_str();
  grad->add_option("--step", gc.opts.h, "finite-difference step h")->capture_default_str();
  grad->add_option("--tolerance", gc.opts.tolerance, "relative error tolerance")->capture_default_str();
  grad->add_option("--seed", gc.opts.seed, "test-point seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*bvh) return cmd_bvh2seq(b2s, out, err);
    if (*synth) return cmd_synth(resolve(synth_cfg), synth_seed, synth_out, out);
    if (*pre) return cmd_pretrain(resolve(pre_cfg), pre_seed, pre_data, pre_out, out);
    if (*fine) return cmd_finetune(resolve(ft_cfg), ft, out);
    if (*eval) return cmd_eval(resolve(ev_cfg), ev_ckpt, ev_data, ev_out, out);
    if (*grid) return cmd_grid(resolve(grid_cfg), ga, out);
    if (*grad) {
      if (gc.opts.batch == 0 || gc.opts.channels < 2 || gc.opts.frames == 0 || gc.opts.joints < 2 ||
          !(gc.opts.h > 0.0) || !(gc.opts.tolerance > 0.0))
        throw UsageError("gradcheck needs N >= 1, C >= 2, T >= 1, V >= 2 and positive step and tolerance");
      return cmd_gradcheck(gc, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const exp::TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace stt::cli
