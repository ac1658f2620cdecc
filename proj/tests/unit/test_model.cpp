#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "stt/model/network.hpp"

using namespace stt;
using namespace stt::model;
using stt::nn::Shape;
using stt::nn::Tape;
using stt::nn::Tensor;

namespace {

template <class T = double>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(g(rng));
  return t;
}

NetworkConfig tiny_config(std::size_t classes = 4) {
  NetworkConfig c;
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

}  // namespace

TEST_CASE("the NTU skeleton is a 25-joint tree") {
  const auto bones = ntu25_bones();
  CHECK(bones.size() == 24);
  std::vector<std::size_t> parent(25);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i];
    return i;
  };
  for (const Bone& b : bones) {
    REQUIRE(b.a < 25);
    REQUIRE(b.b < 25);
    const std::size_t ra = find(b.a), rb = find(b.b);
    CHECK(ra != rb);  // no cycles
    parent[ra] = rb;
  }
}

TEST_CASE("adjacency partitions of a three-joint chain") {
  const AdjacencyPartitions adj = build_adjacency({{0, 1}, {1, 2}}, 3, 0);
  const auto raw = [&](std::size_t k, std::size_t i, std::size_t j) { return adj.raw.at({k, i, j}); };
  for (std::size_t i = 0; i < 3; ++i) CHECK(raw(0, i, i) == 1.0);
  CHECK(raw(1, 1, 0) == 1.0);
  CHECK(raw(1, 2, 1) == 1.0);
  CHECK(raw(2, 0, 1) == 1.0);
  CHECK(raw(2, 1, 2) == 1.0);
  double total = 0;
  for (double v : adj.raw.data()) total += v;
  CHECK(total == 7.0);
  CHECK(adj.degree[0] == doctest::Approx(2.0));
  CHECK(adj.degree[1] == doctest::Approx(3.0));
  CHECK(adj.normalized.at({1, 1, 0}) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-6));
  CHECK(adj.normalized.at({0, 2, 2}) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("adjacency of the NTU skeleton is symmetric once partitions are summed") {
  const AdjacencyPartitions adj = build_adjacency(ntu25_bones(), 25, 0);
  for (std::size_t i = 0; i < 25; ++i)
    for (std::size_t j = 0; j < 25; ++j) {
      double a = 0, b = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        a += adj.normalized.at({k, i, j});
        b += adj.normalized.at({k, j, i});
      }
      CHECK(a == doctest::Approx(b));
    }
}

TEST_CASE("adjacency input validation") {
  CHECK_THROWS_AS(build_adjacency({{0, 5}}, 5), std::out_of_range);
  CHECK_THROWS_AS(build_adjacency({{2, 2}}, 5), std::invalid_argument);
  const AdjacencyPartitions dup = build_adjacency({{0, 1}, {1, 0}, {0, 1}}, 2);
  CHECK(dup.duplicates_removed == 2);
  CHECK(dup.raw.at({1, 1, 0}) == 1.0);
}

TEST_CASE("bone list text round-trips") {
  const BoneList list = parse_bone_list("# chain\n3\n0 1\n1 2\n");
  CHECK(list.joints == 3);
  CHECK(list.bones == std::vector<Bone>{{0, 1}, {1, 2}});
  const BoneList back = parse_bone_list(write_bone_list(list));
  CHECK(back.joints == 3);
  CHECK(back.bones == list.bones);
  CHECK_THROWS(parse_bone_list("3\n0\n"));
}

TEST_CASE("attention equals the explicit joint-pair computation") {
  Rng rng = make_rng(17);
  std::uniform_int_distribution<std::size_t> pick_v(2, 9), pick_h(1, 3), pick_d(1, 4), pick_c(1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 2, V = pick_v(rng), H = pick_h(rng), d = pick_d(rng), C = pick_c(rng), Co = pick_c(rng);
    const auto x = randn({B, V, C}, rng), wq = randn({C, H * d}, rng), wk = randn({C, H * d}, rng),
               wv = randn({C, H * d}, rng), wo = randn({H * d, Co}, rng), bo = randn({Co}, rng),
               pos = randn({V, V}, rng, 0.3), adj = randn({3, V, V}, rng, 0.3);
    std::vector<double> structure(V * V, 0.0);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < V * V; ++i) structure[i] += adj[k * V * V + i];
    for (Fusion fusion : {Fusion::pre, Fusion::post}) {
      Tape<double> tape(false);
      const AttentionInputs<double> in{tape.constant(wq), tape.constant(wk), tape.constant(wv), tape.constant(wo),
                                       tape.constant(bo), tape.constant(pos), tape.constant(adj)};
      const auto r = spatial_attention(tape.constant(x), in, H, d, fusion, true);
      const auto ref = oracle::attention_pairs(x, wq, wk, wv, wo, bo, pos, structure, H, d, fusion == Fusion::pre);
      REQUIRE(r.output.value().size() == ref.out.size());
      for (std::size_t i = 0; i < ref.out.size(); ++i) CHECK(r.output.value()[i] == doctest::Approx(ref.out[i]));
      for (std::size_t i = 0; i < ref.weights.size(); ++i) CHECK(r.weights[i] == doctest::Approx(ref.weights[i]));
      for (std::size_t row = 0; row < B * H * V; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < V; ++j) s += r.weights[row * V + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("attention is equivariant under joint permutations") {
  Rng rng = make_rng(23);
  const std::size_t B = 3, V = 7, H = 2, d = 3, C = 4, Co = 5;
  const auto x = randn({B, V, C}, rng), wq = randn({C, H * d}, rng), wk = randn({C, H * d}, rng),
             wv = randn({C, H * d}, rng), wo = randn({H * d, Co}, rng), bo = randn({Co}, rng),
             pos = randn({V, V}, rng), adj = randn({3, V, V}, rng);
  std::vector<std::size_t> perm(V);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  // Permuted joint i is original joint perm[i].
  Tensor<double> px({B, V, C}), ppos({V, V}), padj({3, V, V});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t c = 0; c < C; ++c) px.at({b, i, c}) = x.at({b, perm[i], c});
  for (std::size_t i = 0; i < V; ++i)
    for (std::size_t j = 0; j < V; ++j) {
      ppos.at({i, j}) = pos.at({perm[i], perm[j]});
      for (std::size_t k = 0; k < 3; ++k) padj.at({k, i, j}) = adj.at({k, perm[i], perm[j]});
    }
  for (Fusion fusion : {Fusion::pre, Fusion::post}) {
    Tape<double> tape(false);
    const auto run = [&](const Tensor<double>& xi, const Tensor<double>& p, const Tensor<double>& a) {
      const AttentionInputs<double> in{tape.constant(wq), tape.constant(wk), tape.constant(wv), tape.constant(wo),
                                       tape.constant(bo), tape.constant(p), tape.constant(a)};
      return spatial_attention(tape.constant(xi), in, H, d, fusion).output.value();
    };
    const Tensor<double> y = run(x, pos, adj), py = run(px, ppos, padj);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < V; ++i)
        for (std::size_t c = 0; c < Co; ++c) CHECK(py.at({b, i, c}) == doctest::Approx(y.at({b, perm[i], c})));
  }
}

TEST_CASE("attention rejects mismatched weight shapes") {
  Rng rng = make_rng(1);
  Tape<double> tape(false);
  const AttentionInputs<double> in{tape.constant(randn({4, 6}, rng)), tape.constant(randn({4, 6}, rng)),
                                   tape.constant(randn({4, 5}, rng)), tape.constant(randn({6, 3}, rng)),
                                   tape.constant(randn({3}, rng)),    tape.constant(randn({5, 5}, rng)),
                                   tape.constant(randn({3, 5, 5}, rng))};
  CHECK_THROWS_AS(spatial_attention(tape.constant(randn({2, 5, 4}, rng)), in, 2, 3, Fusion::post), nn::ShapeError);
}

TEST_CASE("network forward shapes follow the strides") {
  const NetworkConfig cfg = tiny_config();
  CHECK(cfg.output_frames() == 4);
  Network<float> net(cfg, 1);
  Rng rng = make_rng(2);
  const auto x = randn<float>({3, 3, 8, 5}, rng);
  Tape<float> tape(false);
  const auto feats = net.features(tape, x);
  CHECK(feats.shape() == Shape{3, 16});
  CHECK(net.classify(feats).shape() == Shape{3, 4});
  CHECK_THROWS_AS(net.forward(tape, randn<float>({3, 3, 9, 5}, rng)), nn::ShapeError);
}

TEST_CASE("desk and full configurations") {
  const NetworkConfig full;
  CHECK(full.channels() == std::vector<std::size_t>{64, 64, 64, 128, 128, 128, 256, 256, 256});
  CHECK(full.head_dim(64) == 16);
  CHECK(full.output_frames() == 16);
  const NetworkConfig desk = desk_config(10);
  CHECK(desk.channels() == std::vector<std::size_t>{8, 8, 8, 16, 16, 16, 32, 32, 32});
  CHECK(desk.num_classes == 10);
  NetworkConfig bad = full;
  bad.strides.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = full;
  bad.temporal_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("network config text round-trips") {
  NetworkConfig cfg = tiny_config();
  cfg.fusion = Fusion::pre;
  const NetworkConfig back = NetworkConfig::from_kv(KeyValues::parse(cfg.to_text()));
  CHECK(back == cfg);
}

TEST_CASE("parameter names are unique and the same seed gives the same weights") {
  Network<float> a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  std::set<std::string> names;
  for (auto* p : a.parameters()) CHECK(names.insert(p->name).second);
  CHECK(names.count("fc.weight") == 1);
  CHECK(names.count("blocks.0.attn.wq") == 1);
  CHECK(a.parameter("blocks.1.attn.wq").value == b.parameter("blocks.1.attn.wq").value);
  CHECK(a.parameter("blocks.1.attn.wq").value != c.parameter("blocks.1.attn.wq").value);
}

TEST_CASE("float and double networks agree") {
  Network<float> f(tiny_config(), 3);
  Network<double> d(tiny_config(), 3);
  f.set_mode(nn::Mode::eval);
  d.set_mode(nn::Mode::eval);
  Rng rng = make_rng(4);
  const auto x = randn({2, 3, 8, 5}, rng);
  Tensor<float> xf(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) xf[i] = float(x[i]);
  Tape<float> tf(false);
  Tape<double> td(false);
  const auto yf = f.forward(tf, xf).value();
  const auto yd = d.forward(td, x).value();
  for (std::size_t i = 0; i < yd.size(); ++i) CHECK(yf[i] == doctest::Approx(yd[i]).epsilon(1e-4).scale(1.0));
}

TEST_CASE("checkpoints restore identical logits") {
  Rng rng = make_rng(8);
  const auto x = randn<float>({2, 3, 8, 5}, rng);
  Network<float> a(tiny_config(), 1);
  {
    // A training pass moves the batch norm running statistics.
    Tape<float> tape(false);
    a.forward(tape, x);
  }
  a.set_mode(nn::Mode::eval);
  Network<float> b(tiny_config(), 2);
  b.set_mode(nn::Mode::eval);
  b.load_checkpoint(a.to_checkpoint());
  Tape<float> ta(false), tb(false);
  CHECK(a.forward(ta, x).value() == b.forward(tb, x).value());

  Network<float> other(tiny_config(7), 1);
  CHECK_THROWS_AS(other.load_checkpoint(a.to_checkpoint()), CheckpointMismatch);
  CHECK_NOTHROW(other.load_checkpoint(a.to_checkpoint(), true));
  NetworkConfig wider = tiny_config();
  wider.block_channels = {8, 16, 16};
  Network<float> w(wider, 1);
  CHECK_THROWS_AS(w.load_checkpoint(a.to_checkpoint(), true), CheckpointMismatch);
  nn::Checkpoint partial = a.to_checkpoint();
  partial.entries.pop_back();
  CHECK_THROWS_AS(b.load_checkpoint(partial), CheckpointMismatch);
}

TEST_CASE("freezing leaves only the classifier trainable") {
  Network<float> net(tiny_config(), 1);
  const std::size_t all = net.parameters().size();
  net.freeze_and_reinit_fc(6, 9);
  CHECK(net.backbone_frozen());
  const auto trainable = net.trainable_parameters();
  REQUIRE(trainable.size() == 2);
  std::set<std::string> names{trainable[0]->name, trainable[1]->name};
  CHECK(names == std::set<std::string>{"fc.weight", "fc.bias"});
  CHECK(trainable[0]->value.size() + trainable[1]->value.size() == 16 * 6 + 6);
  CHECK(net.parameters().size() == all);
  CHECK(net.config().num_classes == 6);
  CHECK(net.backbone_mode() == nn::Mode::eval);
}
