#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "stt/preprocess/transforms.hpp"

using namespace stt;
using namespace stt::prep;

namespace {

SkeletonSequence random_sequence(std::size_t t, std::size_t v, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  SkeletonSequence s(3, t, v, 2, "ntu25");
  for (double& x : s.data) x = g(rng);
  return s;
}

LabeledDataset dataset(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  LabeledDataset ds;
  for (std::size_t k = 0; k < classes; ++k) {
    ds.class_names.push_back("c" + std::to_string(k));
    for (std::size_t j = 0; j < per_class; ++j) {
      Sample s;
      s.sequence = random_sequence(4, 25, rng);
      s.sequence.label = std::uint32_t(k);
      s.class_id = std::uint32_t(k);
      s.name = std::to_string(k) + "_" + std::to_string(j);
      ds.items.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("view normalization centres the root and aligns the hips") {
  Rng rng = make_rng(3);
  for (int i = 0; i < 50; ++i) {
    const SkeletonSequence s = random_sequence(6, 25, rng);
    const SkeletonSequence n = view_normalize(s, 12, 16, 0);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(n.at(c, 0, 0)) < 1e-12);
    const double hx = n.at(0, 0, 16) - n.at(0, 0, 12);
    const double hz = n.at(2, 0, 16) - n.at(2, 0, 12);
    CHECK(hx > 0);
    CHECK(std::abs(hz) < 1e-12);
    // Rigid: pairwise distances and heights are preserved in every frame.
    for (std::size_t t = 0; t < s.frames; ++t) {
      const auto dist = [&](const SkeletonSequence& q, std::size_t a, std::size_t b) {
        double d = 0;
        for (std::size_t c = 0; c < 3; ++c) d += std::pow(q.at(c, t, a) - q.at(c, t, b), 2);
        return std::sqrt(d);
      };
      CHECK(dist(n, 3, 19) == doctest::Approx(dist(s, 3, 19)).epsilon(1e-12));
      CHECK(n.at(1, t, 7) - n.at(1, t, 2) == doctest::Approx(s.at(1, t, 7) - s.at(1, t, 2)).epsilon(1e-12));
    }
  }
}

TEST_CASE("view normalization rejects vertical hip axes") {
  SkeletonSequence s(3, 2, 25);
  s.at(1, 0, 16) = 1.0;  // right hip straight above the left hip
  CHECK_THROWS_AS(view_normalize(s, 12, 16, 0), DegenerateOrientation);
  CHECK_THROWS_AS(view_normalize(s, 12, 30, 0), std::out_of_range);
  CHECK_THROWS_AS(view_normalize(SkeletonSequence(2, 2, 25), 12, 16, 0), std::invalid_argument);
}

TEST_CASE("resampling matches scalar interpolation and keeps the endpoints") {
  Rng rng = make_rng(5);
  std::uniform_int_distribution<std::size_t> frames(2, 300), target(2, 128);
  for (int i = 0; i < 40; ++i) {
    const SkeletonSequence s = random_sequence(frames(rng), 7, rng);
    const std::size_t n = target(rng);
    const SkeletonSequence r = resample(s, n);
    const SkeletonSequence ref = oracle::resample_scalar(s, n);
    REQUIRE(r.frames == n);
    double worst = 0;
    for (std::size_t k = 0; k < r.data.size(); ++k) worst = std::max(worst, std::abs(r.data[k] - ref.data[k]));
    CHECK(worst < 1e-12);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 7; ++v) {
        CHECK(r.at(c, 0, v) == s.at(c, 0, v));
        CHECK(r.at(c, n - 1, v) == s.at(c, s.frames - 1, v));
      }
  }
}

TEST_CASE("resampling 64 frames to 64 is the identity") {
  Rng rng = make_rng(6);
  const SkeletonSequence s = random_sequence(64, 25, rng);
  CHECK(resample(s, 64).data == s.data);
  CHECK_THROWS_AS(resample(SkeletonSequence(3, 1, 25), 64), std::invalid_argument);
  CHECK_THROWS_AS(resample(s, 1), std::invalid_argument);
}

TEST_CASE("augmentation keeps the original first and is reproducible") {
  Rng rng = make_rng(7);
  const SkeletonSequence s = random_sequence(10, 25, rng);
  AugmentSpec spec;
  spec.factor = 5;
  spec.seed = 9;
  const auto a = augment(s, spec, 3);
  const auto b = augment(s, spec, 3);
  REQUIRE(a.size() == 5);
  CHECK(a[0].data == s.data);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].data == b[k].data);
  CHECK(a[1].data != s.data);
  CHECK(augment(s, spec, 4)[1].data != a[1].data);

  // Without noise a copy is a yaw rotation and scale: heights scale uniformly.
  spec.noise_std = 0;
  const auto c = augment(s, spec, 0);
  const double ratio = c[1].at(1, 0, 0) / s.at(1, 0, 0);
  CHECK(ratio >= 0.9 - 1e-12);
  CHECK(ratio <= 1.1 + 1e-12);
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t v = 0; v < s.joints; ++v) CHECK(c[1].at(1, t, v) == doctest::Approx(ratio * s.at(1, t, v)));

  spec.factor = 0;
  CHECK_THROWS_AS(augment(s, spec, 0), std::invalid_argument);
}

TEST_CASE("augmented datasets keep labels and original names") {
  const LabeledDataset ds = dataset(3, 2, 1);
  AugmentSpec spec;
  spec.factor = 4;
  const LabeledDataset aug = augment_dataset(ds, spec);
  CHECK(aug.size() == 24);
  CHECK(aug.class_counts() == std::vector<std::size_t>{8, 8, 8});
  CHECK(aug.items[0].name == ds.items[0].name);
  CHECK(aug.items[1].name == ds.items[0].name + "_aug1");
  CHECK_NOTHROW(aug.validate());
}

TEST_CASE("stratified split sizes are floor(ratio * n) per class") {
  const LabeledDataset ds = dataset(10, 20, 2);
  for (double ratio : {0.1, 0.3, 0.5, 0.7, 1.0}) {
    const Split sp = split_dataset(ds, ratio, 11);
    const std::size_t want = static_cast<std::size_t>(std::floor(ratio * 20 + 1e-9));
    for (std::size_t k = 0; k < 10; ++k) {
      CHECK(sp.train.class_counts()[k] == want);
      CHECK(sp.test.class_counts()[k] == 20 - want);
    }
    std::set<std::string> names;
    for (const auto& s : sp.train.items) names.insert(s.name);
    for (const auto& s : sp.test.items) CHECK(names.insert(s.name).second);
    CHECK(names.size() == ds.size());
  }
}

TEST_CASE("split keeps at least one training item and is seed-deterministic") {
  const LabeledDataset ds = dataset(4, 5, 3);
  const Split tiny = split_dataset(ds, 0.05, 1);
  CHECK(tiny.train.class_counts() == std::vector<std::size_t>{1, 1, 1, 1});
  const Split a = split_dataset(ds, 0.4, 7), b = split_dataset(ds, 0.4, 7), c = split_dataset(ds, 0.4, 8);
  std::vector<std::string> na, nb, nc;
  for (const auto& s : a.train.items) na.push_back(s.name);
  for (const auto& s : b.train.items) nb.push_back(s.name);
  for (const auto& s : c.train.items) nc.push_back(s.name);
  CHECK(na == nb);
  CHECK(na != nc);
  CHECK_THROWS_AS(split_dataset(ds, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(split_dataset(ds, 1.5, 1), std::invalid_argument);
}
