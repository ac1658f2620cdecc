#pragma once

// Reference implementations used only by tests. They are written for clarity
// and share no code with the library beyond its data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "stt/mocap/bvh.hpp"
#include "stt/nn/tensor.hpp"
#include "stt/rng.hpp"
#include "stt/sequence.hpp"

namespace oracle {

inline Eigen::Matrix3d rotation(char axis, double degrees) {
  const double r = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(r), s = std::sin(r);
  Eigen::Matrix3d m;
  switch (axis) {
    case 'X': m << 1, 0, 0, 0, c, -s, 0, s, c; break;
    case 'Y': m << c, 0, s, 0, 1, 0, -s, 0, c; break;
    default: m << c, -s, 0, s, c, 0, 0, 0, 1; break;
  }
  return m;
}

inline char axis_letter(stt::mocap::Channel ch) {
  switch (ch) {
    case stt::mocap::Channel::Xrotation:
    case stt::mocap::Channel::Xposition: return 'X';
    case stt::mocap::Channel::Yrotation:
    case stt::mocap::Channel::Yposition: return 'Y';
    default: return 'Z';
  }
}

// World position of every non-end-site joint at `frame`, computed by walking
// each joint's ancestor chain and multiplying the local transforms from the
// root down. No transform is reused between joints.
inline std::vector<Eigen::Vector3d> fk_chain_product(const stt::mocap::BvhDocument& doc, std::size_t frame) {
  const auto local = [&](std::size_t j) {
    const auto& joint = doc.joint(j);
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = joint.offset;
    std::size_t col = joint.is_end_site ? 0 : doc.channel_offset(j);
    for (auto ch : joint.channels) {
      const double v = doc.motion()(Eigen::Index(frame), Eigen::Index(col++));
      if (stt::mocap::is_rotation(ch))
        r = r * rotation(axis_letter(ch), v);
      else
        t[axis_letter(ch) - 'X'] += v;
    }
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = t;
    return m;
  };
  std::vector<Eigen::Vector3d> out;
  for (std::size_t j = 0; j < doc.joint_count(); ++j) {
    if (doc.joint(j).is_end_site) continue;
    std::vector<std::size_t> chain;
    for (std::optional<std::size_t> k = j; k; k = doc.joint(*k).parent) chain.push_back(*k);
    Eigen::Matrix4d world = Eigen::Matrix4d::Identity();
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) world = world * local(*it);
    out.push_back(world.topRightCorner<3, 1>());
  }
  return out;
}

// Random hierarchy with `joints` entries (some of them end sites) and random
// motion. The root carries position and rotation channels; a few other
// joints carry position channels too.
inline stt::mocap::BvhDocument random_skeleton(stt::Rng& rng, std::size_t joints, std::size_t frames) {
  using stt::mocap::Channel;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(-180.0, 180.0);
  std::bernoulli_distribution end_site(0.2), with_position(0.15);
  std::vector<stt::mocap::BvhJoint> js;
  std::vector<std::size_t> open;  // joints that may take children
  for (std::size_t j = 0; j < joints; ++j) {
    stt::mocap::BvhJoint b;
    b.name = "j" + std::to_string(j);
    std::array<Channel, 3> rot = {Channel::Xrotation, Channel::Yrotation, Channel::Zrotation};
    std::shuffle(rot.begin(), rot.end(), rng);
    if (j == 0) {
      b.channels = {Channel::Xposition, Channel::Yposition, Channel::Zposition, rot[0], rot[1], rot[2]};
      open.push_back(0);
    } else {
      b.parent = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
      b.offset = Eigen::Vector3d(u(rng), u(rng), u(rng)) * 20.0;
      if (j + 1 < joints && end_site(rng)) {
        b.is_end_site = true;
        b.name = js[*b.parent].name + "_End";
      } else {
        if (with_position(rng)) b.channels = {Channel::Xposition, Channel::Yposition, Channel::Zposition};
        b.channels.insert(b.channels.end(), rot.begin(), rot.end());
        open.push_back(j);
      }
    }
    js.push_back(std::move(b));
  }
  // Depth-first order: parents precede children and subtrees are contiguous.
  std::vector<std::vector<std::size_t>> kids(js.size());
  for (std::size_t j = 1; j < js.size(); ++j) kids[*js[j].parent].push_back(j);
  std::vector<std::size_t> order, stack = {0};
  while (!stack.empty()) {
    const std::size_t j = stack.back();
    stack.pop_back();
    order.push_back(j);
    for (auto it = kids[j].rbegin(); it != kids[j].rend(); ++it) stack.push_back(*it);
  }
  std::vector<std::size_t> new_index(js.size());
  for (std::size_t i = 0; i < order.size(); ++i) new_index[order[i]] = i;
  std::vector<stt::mocap::BvhJoint> sorted;
  std::size_t channels = 0;
  for (std::size_t old : order) {
    auto b = js[old];
    if (b.parent) b.parent = new_index[*b.parent];
    channels += b.channels.size();
    sorted.push_back(std::move(b));
  }
  stt::mocap::MotionMatrix motion{static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(channels)};
  for (Eigen::Index f = 0; f < motion.rows(); ++f) {
    Eigen::Index col = 0;
    for (const auto& b : sorted)
      for (auto ch : b.channels) motion(f, col++) = stt::mocap::is_rotation(ch) ? angle(rng) : 10.0 * u(rng);
  }
  return stt::mocap::BvhDocument(std::move(sorted), 1.0 / 30.0, std::move(motion));
}

// Linear interpolation of one scalar track at fractional index `x`.
inline double lerp_track(const std::vector<double>& track, double x) {
  const std::size_t n = track.size();
  if (x <= 0.0) return track.front();
  if (x >= double(n - 1)) return track.back();
  const std::size_t i = static_cast<std::size_t>(std::floor(x));
  const double w = x - double(i);
  return track[i] * (1.0 - w) + track[i + 1] * w;
}

inline stt::SkeletonSequence resample_scalar(const stt::SkeletonSequence& s, std::size_t target) {
  stt::SkeletonSequence out(s.channels, target, s.joints, s.label, s.layout);
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t v = 0; v < s.joints; ++v) {
      std::vector<double> track;
      for (std::size_t t = 0; t < s.frames; ++t) track.push_back(s.at(c, t, v));
      for (std::size_t t = 0; t < target; ++t)
        out.at(c, t, v) = lerp_track(track, target == 1 ? 0.0 : double(t) * double(s.frames - 1) / double(target - 1));
    }
  return out;
}

// Direct sliding-window temporal convolution with zero padding (K-1)/2.
template <class T>
stt::nn::Tensor<T> conv_sliding(const stt::nn::Tensor<T>& x, const stt::nn::Tensor<T>& w,
                                const stt::nn::Tensor<T>& b, std::size_t stride) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), Ti = x.dim(2), V = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2), pad = (K - 1) / 2;
  const std::size_t To = (Ti + stride - 1) / stride;
  stt::nn::Tensor<T> y({N, Co, To, V});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t v = 0; v < V; ++v) {
          double acc = b[o];
          for (std::size_t i = 0; i < Ci; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              const long src = long(t * stride + k) - long(pad);
              if (src < 0 || src >= long(Ti)) continue;
              acc += double(w.at({o, i, k})) * double(x.at({n, i, std::size_t(src), v}));
            }
          y.at({n, o, t, v}) = T(acc);
        }
  return y;
}

// Multi-head joint attention written as explicit loops over joint pairs.
// x [B, V, C], wq/wk/wv [C, H*d], wo [H*d, Co], bo [Co], pos [V, V],
// structure [V, V] (already summed over partitions).
struct AttentionOut {
  std::vector<double> out;      // [B, V, Co]
  std::vector<double> weights;  // [B, H, V, V]
};

template <class T>
AttentionOut attention_pairs(const stt::nn::Tensor<T>& x, const stt::nn::Tensor<T>& wq, const stt::nn::Tensor<T>& wk,
                             const stt::nn::Tensor<T>& wv, const stt::nn::Tensor<T>& wo,
                             const stt::nn::Tensor<T>& bo, const stt::nn::Tensor<T>& pos,
                             const std::vector<double>& structure, std::size_t H, std::size_t d, bool pre) {
  const std::size_t B = x.dim(0), V = x.dim(1), C = x.dim(2), Co = wo.dim(1);
  const auto project = [&](const stt::nn::Tensor<T>& w, std::size_t b, std::size_t v, std::size_t col) {
    double acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc += double(x.at({b, v, c})) * double(w.at({c, col}));
    return acc;
  };
  AttentionOut r;
  r.out.assign(B * V * Co, 0.0);
  r.weights.assign(B * H * V * V, 0.0);
  std::vector<double> heads(V * H * d);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < V; ++i) {
        std::vector<double> logit(V);
        for (std::size_t j = 0; j < V; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < d; ++e) dot += project(wq, b, i, h * d + e) * project(wk, b, j, h * d + e);
          logit[j] = dot / std::sqrt(double(d)) + double(pos.at({i, j})) + (pre ? structure[i * V + j] : 0.0);
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0;
        for (double& l : logit) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < V; ++j) {
          const double wgt = logit[j] / z;
          r.weights[((b * H + h) * V + i) * V + j] = wgt;
          const double mix = wgt + (pre ? 0.0 : structure[i * V + j]);
          for (std::size_t e = 0; e < d; ++e) {
            double& slot = heads[(i * H + h) * d + e];
            if (j == 0) slot = 0;
            slot += mix * project(wv, b, j, h * d + e);
          }
        }
      }
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t o = 0; o < Co; ++o) {
        double acc = bo[o];
        for (std::size_t k = 0; k < H * d; ++k) acc += heads[i * H * d + k] * double(wo.at({k, o}));
        r.out[(b * V + i) * Co + o] = acc;
      }
  }
  return r;
}

}  // namespace oracle
