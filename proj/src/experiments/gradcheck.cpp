#include "stt/experiments/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>

#include "stt/model/network.hpp"

namespace stt::exp {

namespace {

using nn::Tape;
using nn::Tensor;
using nn::Var;
using Store = model::ParameterStore<double>;

struct Problem {
  Store store;
  std::function<Var<double>(Tape<double>&)> loss;
};

Tensor<double> random_tensor(nn::Shape shape, double scale, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = scale * g(rng);
  return t;
}

// Weighted sum of the layer output with fixed random weights, so every output
// coordinate contributes with a different coefficient.
Var<double> probe_loss(Var<double> out, std::optional<Tensor<double>>& weights, std::uint64_t seed) {
  if (!weights) {
    Rng rng = make_rng(seed, 0x9A0BE);
    weights = random_tensor(out.shape(), 1.0, rng);
  }
  return nn::sum(nn::mul(out, out.tape().constant(*weights)));
}

model::NetworkConfig small_config(const GradcheckOptions& o) {
  model::NetworkConfig cfg;
  cfg.num_joints = o.joints;
  cfg.num_frames = o.frames;
  if (o.joints == 5) {
    cfg.bones = {{0, 1}, {1, 2}, {1, 3}, {3, 4}};
  } else {
    cfg.bones.clear();
    for (std::size_t v = 1; v < o.joints; ++v) cfg.bones.push_back({v - 1, v});
  }
  return cfg;
}

std::vector<int> labels_for(std::size_t n, std::size_t classes) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = int(i % classes);
  return labels;
}

std::unique_ptr<Problem> build_problem(const std::string& layer, const GradcheckOptions& o) {
  auto pb = std::make_unique<Problem>();
  Store& store = pb->store;
  Rng rng = make_rng(o.seed, 1);
  const model::NetworkConfig cfg = small_config(o);
  const model::AdjacencyPartitions adj = build_adjacency(cfg.skeleton(), o.joints, cfg.root_joint);
  const std::size_t N = o.batch, C = o.channels, T = o.frames, V = o.joints;
  constexpr std::size_t kClasses = 4;
  auto weights = std::make_shared<std::optional<Tensor<double>>>();
  const std::uint64_t seed = o.seed;

  if (layer == "attention" || layer == "attention_pre") {
    const auto fusion = layer == "attention" ? model::Fusion::post : model::Fusion::pre;
    auto attn = model::AttentionLayer<double>::create(store, "attn", C, C, cfg.heads, cfg.head_dim(C), fusion, adj, rng);
    auto& pos = store.add("positional", random_tensor({V, V}, 0.1, rng));
    auto& x = store.add("input", random_tensor({N * T, V, C}, 1.0, rng));
    pb->loss = [attn, &pos, &x, weights, seed](Tape<double>& tape) {
      return probe_loss(attn(tape.parameter(x), tape.parameter(pos)).output, *weights, seed);
    };
  } else if (layer == "tcn") {
    auto conv = model::ConvLayer<double>::create(store, "tcn", C, C, cfg.temporal_kernel, 1, rng);
    auto& x = store.add("input", random_tensor({N, C, T, V}, 1.0, rng));
    pb->loss = [conv, &x, weights, seed](Tape<double>& tape) {
      return probe_loss(conv(tape.parameter(x)), *weights, seed);
    };
  } else if (layer == "batchnorm") {
    auto bn = model::BatchNormLayer<double>::create(store, "bn", C);
    auto& x = store.add("input", random_tensor({N, C, T, V}, 1.0, rng));
    pb->loss = [bn, &x, weights, seed](Tape<double>& tape) {
      return probe_loss(bn(tape.parameter(x), nn::Mode::train), *weights, seed);
    };
  } else if (layer == "fc") {
    auto& w = store.add("fc.weight", random_tensor({C, kClasses}, 0.5, rng));
    auto& b = store.add("fc.bias", random_tensor({kClasses}, 0.1, rng));
    auto& x = store.add("input", random_tensor({N, C}, 1.0, rng));
    pb->loss = [&w, &b, &x, N](Tape<double>& tape) {
      const auto labels = labels_for(N, kClasses);
      return nn::cross_entropy(nn::linear(tape.parameter(x), tape.parameter(w), tape.parameter(b)),
                               std::span<const int>(labels));
    };
  } else if (layer == "block" || layer == "block_proj") {
    const bool proj = layer == "block_proj";
    const std::size_t c_in = proj ? std::max<std::size_t>(1, C / 2) : C;
    auto block = model::StBlock<double>::create(store, "block", c_in, C, proj ? 2 : 1, cfg, adj, rng);
    auto& pos = store.add("positional", random_tensor({V, V}, 0.1, rng));
    auto& w = store.add("fc.weight", random_tensor({C, kClasses}, 0.5, rng));
    auto& b = store.add("fc.bias", random_tensor({kClasses}, 0.1, rng));
    auto& x = store.add("input", random_tensor({N, c_in, T, V}, 1.0, rng));
    pb->loss = [block, &pos, &w, &b, &x, N](Tape<double>& tape) {
      Var<double> h = block(tape.parameter(x), tape.parameter(pos), nn::Mode::train);
      const nn::Shape s = h.shape();
      h = nn::mean_last(nn::reshape(h, {s[0], s[1], s[2] * s[3]}));
      const auto labels = labels_for(N, kClasses);
      return nn::cross_entropy(nn::linear(h, tape.parameter(w), tape.parameter(b)), std::span<const int>(labels));
    };
  } else {
    throw std::invalid_argument("unknown gradcheck layer '" + layer + "'");
  }

  // Test point. Every weight that feeds a batch norm can be scaled freely
  // without changing the block's function, and a larger scale shrinks how far
  // an h step moves the relu inputs, so fewer stencils straddle a kink. The
  // attention projections stay small enough that the softmax is not saturated.
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto* p : store.parameters()) {
    if (p->name == "input") continue;
    const bool projection = p->name.ends_with(".wq") || p->name.ends_with(".wk") || p->name.ends_with(".wv");
    const double sd = projection ? o.projection_scale / std::sqrt(double(p->value.dim(0))) : o.weight_scale;
    for (double& v : p->value.data()) v = sd * gauss(rng);
  }
  return pb;
}

double eval_loss(Problem& pb, std::vector<bool>& relu_signs) {
  relu_signs.clear();
  nn::set_relu_trace(&relu_signs);
  Tape<double> tape(false);
  const double loss = pb.loss(tape).value()[0];
  nn::set_relu_trace(nullptr);
  return loss;
}

}  // namespace

const std::vector<std::string>& gradcheck_layers() {
  static const std::vector<std::string> layers = {"attention", "attention_pre", "tcn", "batchnorm",
                                                  "fc",        "block",         "block_proj"};
  return layers;
}

LayerReport gradcheck_layer(const std::string& layer, const GradcheckOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  auto pb = build_problem(layer, opts);
  const auto params = pb->store.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = pb->loss(tape);
    tape.backward(loss);
  }

  LayerReport rep;
  rep.layer = layer;
  std::vector<bool> signs_up, signs_down;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      ++rep.coordinates;
      const double a = p->grad[i];
      if (std::abs(a) <= opts.grad_floor) continue;
      const double orig = p->value[i];
      p->value[i] = orig + opts.h;
      const double up = eval_loss(*pb, signs_up);
      p->value[i] = orig - opts.h;
      const double down = eval_loss(*pb, signs_down);
      p->value[i] = orig;
      const bool kink = signs_up != signs_down;
      const double f = (up - down) / (2.0 * opts.h);
      const double rel = std::abs(a - f) / std::max(std::abs(a), std::abs(f));
      ++rep.checked;
      rep.kinked += kink ? 1 : 0;
      if (rel < opts.tolerance)
        ++rep.passed;
      else if (kink)
        ++rep.failed_at_kink;
      if (!(rel <= rep.max_rel_error)) {
        rep.max_rel_error = rel;
        rep.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace stt::exp
