#include "stt/preprocess/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "stt/rng.hpp"

namespace stt::prep {

namespace {

// Rotation about +y applied to every (x, z) pair: x' = c x + s z, z' = -s x + c z.
void rotate_about_y(SkeletonSequence& seq, double c, double s) {
  for (std::size_t t = 0; t < seq.frames; ++t)
    for (std::size_t v = 0; v < seq.joints; ++v) {
      const double x = seq.at(0, t, v);
      const double z = seq.at(2, t, v);
      seq.at(0, t, v) = c * x + s * z;
      seq.at(2, t, v) = -s * x + c * z;
    }
}

void require_xyz(const SkeletonSequence& seq, const char* op) {
  if (seq.channels != 3)
    throw std::invalid_argument(std::string(op) + " needs 3 coordinate channels, got " +
                                std::to_string(seq.channels));
}

}  // namespace

SkeletonSequence view_normalize(const SkeletonSequence& seq, std::size_t left_hip,
                                std::size_t right_hip, std::size_t root) {
  require_xyz(seq, "view_normalize");
  if (seq.frames == 0) throw std::invalid_argument("view_normalize: empty sequence");
  if (left_hip >= seq.joints || right_hip >= seq.joints || root >= seq.joints)
    throw std::out_of_range("view_normalize: joint index out of range");

  SkeletonSequence out = seq;
  for (std::size_t c = 0; c < 3; ++c) {
    const double origin = seq.at(c, 0, root);
    for (std::size_t t = 0; t < seq.frames; ++t)
      for (std::size_t v = 0; v < seq.joints; ++v) out.at(c, t, v) -= origin;
  }
  const double hx = seq.at(0, 0, right_hip) - seq.at(0, 0, left_hip);
  const double hz = seq.at(2, 0, right_hip) - seq.at(2, 0, left_hip);
  const double norm = std::hypot(hx, hz);
  if (!(norm >= 1e-8)) throw DegenerateOrientation();
  rotate_about_y(out, hx / norm, hz / norm);
  return out;
}

SkeletonSequence resample(const SkeletonSequence& seq, std::size_t target_frames) {
  if (seq.frames < 2) throw std::invalid_argument("resample needs at least 2 frames");
  if (target_frames < 2) throw std::invalid_argument("resample target must be at least 2 frames");
  SkeletonSequence out(seq.channels, target_frames, seq.joints, seq.label, seq.layout);
  const std::size_t T = seq.frames;
  for (std::size_t i = 0; i < target_frames; ++i) {
    const double pos = double(i) * double(T - 1) / double(target_frames - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
    double frac = pos - double(i0);
    if (i0 >= T - 1) {
      i0 = T - 1;
      frac = 0.0;
    }
    for (std::size_t c = 0; c < seq.channels; ++c)
      for (std::size_t v = 0; v < seq.joints; ++v) {
        const double a = seq.at(c, i0, v);
        out.at(c, i, v) = frac == 0.0 ? a : a + frac * (seq.at(c, i0 + 1, v) - a);
      }
  }
  return out;
}

void AugmentSpec::validate() const {
  if (factor < 1) throw std::invalid_argument("augmentation factor must be >= 1");
  if (rotation_range_deg < 0 || scale_range < 0 || noise_std < 0)
    throw std::invalid_argument("augmentation ranges must be non-negative");
  if (scale_range >= 1) throw std::invalid_argument("augmentation scale_range must be < 1");
}

std::vector<SkeletonSequence> augment(const SkeletonSequence& seq, const AugmentSpec& spec,
                                      std::size_t sample_index) {
  spec.validate();
  require_xyz(seq, "augment");
  std::vector<SkeletonSequence> out;
  out.reserve(static_cast<std::size_t>(spec.factor));
  out.push_back(seq);
  Rng rng = make_rng(spec.seed, sample_index);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int k = 1; k < spec.factor; ++k) {
    SkeletonSequence copy = seq;
    const double yaw = unit(rng) * spec.rotation_range_deg * std::numbers::pi / 180.0;
    const double s = 1.0 + unit(rng) * spec.scale_range;
    rotate_about_y(copy, std::cos(yaw), std::sin(yaw));
    for (double& x : copy.data) x = x * s + spec.noise_std * gauss(rng);
    out.push_back(std::move(copy));
  }
  return out;
}

LabeledDataset augment_dataset(const LabeledDataset& ds, const AugmentSpec& spec) {
  LabeledDataset out;
  out.class_names = ds.class_names;
  out.layout_tag = ds.layout_tag;
  out.items.reserve(ds.items.size() * static_cast<std::size_t>(std::max(spec.factor, 1)));
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const Sample& s = ds.items[i];
    auto copies = augment(s.sequence, spec, i);
    for (std::size_t k = 0; k < copies.size(); ++k) {
      Sample a;
      a.sequence = std::move(copies[k]);
      a.class_id = s.class_id;
      a.name = k == 0 ? s.name : s.name + "_aug" + std::to_string(k);
      out.items.push_back(std::move(a));
    }
  }
  return out;
}

Split split_dataset(const LabeledDataset& ds, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio <= 1.0))
    throw std::invalid_argument("train ratio must lie in (0, 1]");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const auto c = ds.items[i].class_id;
    if (c >= by_class.size()) throw std::invalid_argument("sample class id out of range");
    by_class[c].push_back(i);
  }
  std::vector<bool> in_train(ds.items.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.empty()) throw std::invalid_argument("empty class '" + ds.class_names[c] + "'");
    const std::size_t n = idx.size();
    const auto wanted = static_cast<std::size_t>(std::floor(train_ratio * double(n) + 1e-9));
    const std::size_t take = std::clamp<std::size_t>(wanted, 1, n);
    Rng rng = make_rng(seed, c);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < take; ++k) in_train[idx[k]] = true;
  }
  Split split;
  for (auto* part : {&split.train, &split.test}) {
    part->class_names = ds.class_names;
    part->layout_tag = ds.layout_tag;
  }
  for (std::size_t i = 0; i < ds.items.size(); ++i)
    (in_train[i] ? split.train : split.test).items.push_back(ds.items[i]);
  return split;
}

}  // namespace stt::prep
