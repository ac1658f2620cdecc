#include "stt/experiments/synth.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "stt/rng.hpp"

namespace stt::exp {

namespace {

using Vec3 = std::array<double, 3>;

// NTU 25-joint rest pose in metres, y up, subject facing +z, left side +x.
constexpr std::array<Vec3, 25> kNtuRest = {{
    {0.00, 0.00, 0.00},   {0.00, 0.25, 0.00},   {0.00, 0.52, 0.00},   {0.00, 0.65, 0.00},
    {0.18, 0.42, 0.00},   {0.22, 0.15, 0.00},   {0.24, -0.08, 0.00},  {0.24, -0.15, 0.00},
    {-0.18, 0.42, 0.00},  {-0.22, 0.15, 0.00},  {-0.24, -0.08, 0.00}, {-0.24, -0.15, 0.00},
    {0.09, -0.05, 0.00},  {0.10, -0.45, 0.00},  {0.10, -0.85, 0.00},  {0.10, -0.88, 0.10},
    {-0.09, -0.05, 0.00}, {-0.10, -0.45, 0.00}, {-0.10, -0.85, 0.00}, {-0.10, -0.88, 0.10},
    {0.00, 0.45, 0.00},   {0.24, -0.22, 0.00},  {0.21, -0.13, 0.03},  {-0.24, -0.22, 0.00},
    {-0.21, -0.13, 0.03},
}};

// Kinematic groups ordered from the attachment point outward.
const std::vector<std::vector<std::size_t>> kNtuGroups = {
    {4, 5, 6, 7, 21, 22},     // left arm
    {8, 9, 10, 11, 23, 24},   // right arm
    {12, 13, 14, 15},         // left leg
    {16, 17, 18, 19},         // right leg
    {1, 20, 2, 3},            // spine and head
};

struct Primitive {
  std::vector<std::size_t> joints;
  std::vector<Vec3> direction;  // per joint in `joints`, scaled by amplitude
  std::vector<double> phase;    // per joint in `joints`
  double frequency = 1.0;       // cycles per clip
};

struct Vocabulary {
  std::vector<Vec3> rest;
  std::vector<Primitive> primitives;
  std::vector<double> base;
};

Vocabulary make_vocabulary(const SynthSpec& spec) {
  Rng rng = make_rng(spec.seed, 0x5EED);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vocabulary voc;

  std::vector<std::vector<std::size_t>> groups;
  if (spec.joints == 25) {
    voc.rest.assign(kNtuRest.begin(), kNtuRest.end());
    groups = kNtuGroups;
  } else {
    for (std::size_t v = 0; v < spec.joints; ++v)
      voc.rest.push_back({unit(rng) - 0.5, unit(rng) - 0.5, unit(rng) - 0.5});
    const std::size_t n_groups = std::min<std::size_t>(4, spec.joints);
    groups.resize(n_groups);
    for (std::size_t v = 0; v < spec.joints; ++v) groups[v % n_groups].push_back(v);
  }

  for (std::size_t p = 0; p < spec.primitives; ++p) {
    Primitive prim;
    prim.joints = groups[std::size_t(unit(rng) * double(groups.size())) % groups.size()];
    prim.frequency = 0.5 + 2.5 * unit(rng);
    const double phase0 = 2.0 * std::numbers::pi * unit(rng);
    for (std::size_t depth = 0; depth < prim.joints.size(); ++depth) {
      Vec3 d{gauss(rng), gauss(rng), gauss(rng)};
      const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
      const double amp = 0.08 * (1.0 + 0.5 * double(depth));
      for (double& x : d) x *= amp / norm;
      prim.direction.push_back(d);
      prim.phase.push_back(phase0 + 0.3 * double(depth));
    }
    voc.primitives.push_back(std::move(prim));
    voc.base.push_back(0.5 + 0.5 * unit(rng));
  }
  return voc;
}

}  // namespace

void SynthSpec::validate() const {
  if (num_classes == 0 || samples_per_class == 0) throw ConfigError("synth: classes and samples must be positive");
  if (joints == 0) throw ConfigError("synth: joints must be positive");
  if (frames < 2) throw ConfigError("synth: frames must be at least 2");
  if (primitives == 0) throw ConfigError("synth: primitives must be positive");
  if (!(distance >= 0.0) || !(amplitude_jitter >= 0.0) || !(noise_std >= 0.0))
    throw ConfigError("synth: distance, amplitude_jitter and noise_std must be non-negative");
}

SynthSpec SynthSpec::from_kv(const KeyValues& kv) {
  SynthSpec s;
  s.num_classes = kv.get_uint("synth_classes", s.num_classes);
  s.samples_per_class = kv.get_uint("synth_samples_per_class", s.samples_per_class);
  s.joints = kv.get_uint("num_joints", s.joints);
  s.frames = kv.get_uint("num_frames", s.frames);
  s.primitives = kv.get_uint("synth_primitives", s.primitives);
  s.distance = kv.get_double("synth_distance", s.distance);
  s.amplitude_jitter = kv.get_double("synth_amplitude_jitter", s.amplitude_jitter);
  s.noise_std = kv.get_double("synth_noise_std", s.noise_std);
  s.class_offset = kv.get_uint("synth_class_offset", s.class_offset);
  s.seed = kv.get_uint("synth_seed", s.seed);
  s.validate();
  return s;
}

std::string SynthSpec::to_text() const {
  std::string out;
  out += "synth_classes=" + std::to_string(num_classes) + "\n";
  out += "synth_samples_per_class=" + std::to_string(samples_per_class) + "\n";
  out += "num_joints=" + std::to_string(joints) + "\n";
  out += "num_frames=" + std::to_string(frames) + "\n";
  out += "synth_primitives=" + std::to_string(primitives) + "\n";
  out += "synth_distance=" + format_double(distance) + "\n";
  out += "synth_amplitude_jitter=" + format_double(amplitude_jitter) + "\n";
  out += "synth_noise_std=" + format_double(noise_std) + "\n";
  out += "synth_class_offset=" + std::to_string(class_offset) + "\n";
  out += "synth_seed=" + std::to_string(seed) + "\n";
  return out;
}

prep::LabeledDataset synth_dataset(const SynthSpec& spec) {
  spec.validate();
  const Vocabulary voc = make_vocabulary(spec);
  const std::size_t P = voc.primitives.size(), T = spec.frames, V = spec.joints;
  prep::LabeledDataset ds;
  ds.layout_tag = V == 25 ? "ntu25" : "synth" + std::to_string(V);

  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    const std::size_t universe = spec.class_offset + k;
    ds.class_names.push_back("synth_" + std::to_string(universe));
    Rng crng = make_rng(spec.seed, 10000 + universe);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> weight(P);
    for (std::size_t p = 0; p < P; ++p) weight[p] = voc.base[p] + spec.distance * gauss(crng);

    for (std::size_t j = 0; j < spec.samples_per_class; ++j) {
      Rng srng = make_rng(mix_seed(spec.seed, 20000 + universe), j);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::normal_distribution<double> g(0.0, 1.0);
      const double shift = unit(srng);
      std::vector<double> jitter(P);
      for (double& x : jitter) x = 1.0 + spec.amplitude_jitter * g(srng);

      SkeletonSequence seq(3, T, V, static_cast<std::uint32_t>(k), ds.layout_tag);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v)
          for (std::size_t c = 0; c < 3; ++c) seq.at(c, t, v) = voc.rest[v][c];
      for (std::size_t p = 0; p < P; ++p) {
        const Primitive& prim = voc.primitives[p];
        const double a = weight[p] * jitter[p];
        for (std::size_t t = 0; t < T; ++t) {
          const double tau = double(t) / double(T) + shift;
          for (std::size_t i = 0; i < prim.joints.size(); ++i) {
            const double s = a * std::sin(2.0 * std::numbers::pi * prim.frequency * tau + prim.phase[i]);
            for (std::size_t c = 0; c < 3; ++c) seq.at(c, t, prim.joints[i]) += s * prim.direction[i][c];
          }
        }
      }
      if (spec.noise_std > 0)
        for (double& x : seq.data) x += spec.noise_std * g(srng);

      prep::Sample sample;
      sample.sequence = std::move(seq);
      sample.class_id = static_cast<std::uint32_t>(k);
      sample.name = std::to_string(k) + "_" + std::to_string(j);
      ds.items.push_back(std::move(sample));
    }
  }
  return ds;
}

}  // namespace stt::exp
