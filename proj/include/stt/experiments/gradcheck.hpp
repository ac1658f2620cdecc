#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace stt::exp {

// Central finite differences against the analytic gradients, in double.
struct GradcheckOptions {
  std::size_t batch = 2;
  std::size_t channels = 8;
  std::size_t frames = 8;
  std::size_t joints = 5;
  double h = 1e-3;
  double tolerance = 1e-4;
  double min_pass_fraction = 0.99;
  double grad_floor = 1e-6;  // coordinates with smaller analytic gradients are not scored
  std::uint64_t seed = 3;
  // Test point: parameters ~ N(0, weight_scale^2), attention projections
  // ~ N(0, projection_scale^2 / fan_in), inputs ~ N(0, 1).
  double weight_scale = 4.0;
  double projection_scale = 0.5;
};

struct LayerReport {
  std::string layer;
  std::size_t coordinates = 0;
  std::size_t checked = 0;
  std::size_t passed = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]" of the largest error
  // Scored coordinates whose +-h stencil changes the sign of some relu input,
  // so the central difference straddles a kink; and how many of those failed.
  std::size_t kinked = 0;
  std::size_t failed_at_kink = 0;
  double seconds = 0.0;

  double pass_fraction() const { return checked == 0 ? 1.0 : double(passed) / double(checked); }
  bool ok(const GradcheckOptions& o) const { return pass_fraction() >= o.min_pass_fraction; }
};

// attention, attention_pre, tcn, batchnorm, fc, block, block_proj.
// "block" is one full attention block followed by pooling and the FC head
// with a cross-entropy loss; "block_proj" widens the channels and strides,
// which exercises both residual projections.
const std::vector<std::string>& gradcheck_layers();

// Throws std::invalid_argument for an unknown layer name.
LayerReport gradcheck_layer(const std::string& layer, const GradcheckOptions& opts = {});

}  // namespace stt::exp
