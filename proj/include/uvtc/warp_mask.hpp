#pragma once

// Bilinear backward warping and the flow/photometric reliability mask.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"

namespace uvtc {

inline constexpr double kInvalidError = std::numeric_limits<double>::infinity();

/// Precomputed bilinear taps of a backward warp: output pixel p samples the
/// target at p + flow(p). The same taps drive the adjoint used for gradients.
class WarpPlan {
 public:
  struct Tap {
    std::int32_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double w00 = 0, w01 = 0, w10 = 0, w11 = 0;  // w<row><col>
    bool valid = false;
  };

  WarpPlan() = default;

  explicit WarpPlan(const FlowField& flow) : height_(flow.height), width_(flow.width), taps_(flow.data.size() / 2) {
    parallel_for(0, height_, [&](std::ptrdiff_t y) {
      for (int x = 0; x < width_; ++x) {
        Tap& tap = taps_[static_cast<std::size_t>(y) * width_ + x];
        const double sx = x + static_cast<double>(flow.u(static_cast<int>(y), x));
        const double sy = static_cast<double>(y) + static_cast<double>(flow.v(static_cast<int>(y), x));
        if (!(sx >= 0.0 && sx <= width_ - 1 && sy >= 0.0 && sy <= height_ - 1)) continue;
        tap.x0 = static_cast<std::int32_t>(std::floor(sx));
        tap.y0 = static_cast<std::int32_t>(std::floor(sy));
        const double fx = sx - tap.x0;
        const double fy = sy - tap.y0;
        tap.x1 = std::min(tap.x0 + 1, width_ - 1);
        tap.y1 = std::min(tap.y0 + 1, height_ - 1);
        tap.w00 = (1 - fy) * (1 - fx);
        tap.w01 = (1 - fy) * fx;
        tap.w10 = fy * (1 - fx);
        tap.w11 = fy * fx;
        tap.valid = true;
      }
    });
  }

  int height() const { return height_; }
  int width() const { return width_; }
  const Tap& tap(std::size_t pixel) const { return taps_[pixel]; }

  BoolMap validity() const {
    BoolMap m(height_, width_);
    for (std::size_t i = 0; i < taps_.size(); ++i) m.data[i] = taps_[i].valid ? 1 : 0;
    return m;
  }

  /// Samples `target`; invalid pixels produce 0.
  template <int C>
  Raster<C> apply(const Raster<C>& target) const {
    check(target.height(), target.width());
    Raster<C> out(height_, width_);
    parallel_for(0, height_, [&](std::ptrdiff_t y) {
      for (int x = 0; x < width_; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * width_ + x;
        const Tap& t = taps_[p];
        if (!t.valid) continue;
        for (int c = 0; c < C; ++c)
          out[p * C + c] = t.w00 * target.at(t.y0, t.x0, c) + t.w01 * target.at(t.y0, t.x1, c) +
                           t.w10 * target.at(t.y1, t.x0, c) + t.w11 * target.at(t.y1, t.x1, c);
      }
    });
    return out;
  }

  /// Adds the transpose of apply() to `target_grad`: every output gradient is
  /// distributed onto its four source taps by the bilinear weights. Runs in
  /// pixel order so the accumulation is reproducible.
  template <int C>
  void accumulate_adjoint(const Raster<C>& out_grad, Raster<C>& target_grad) const {
    check(out_grad.height(), out_grad.width());
    check(target_grad.height(), target_grad.width());
    for (std::size_t p = 0; p < taps_.size(); ++p) {
      const Tap& t = taps_[p];
      if (!t.valid) continue;
      for (int c = 0; c < C; ++c) {
        const double g = out_grad[p * C + c];
        if (g == 0.0) continue;
        target_grad.at(t.y0, t.x0, c) += t.w00 * g;
        target_grad.at(t.y0, t.x1, c) += t.w01 * g;
        target_grad.at(t.y1, t.x0, c) += t.w10 * g;
        target_grad.at(t.y1, t.x1, c) += t.w11 * g;
      }
    }
  }

 private:
  void check(int h, int w) const {
    require(h == height_ && w == width_, Errc::size_mismatch,
            "warp resolution mismatch: flow " + std::to_string(height_) + "x" + std::to_string(width_) +
                " vs image " + std::to_string(h) + "x" + std::to_string(w));
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<Tap> taps_;
};

struct WarpResult {
  Frame frame;
  BoolMap valid;
};

/// output(x,y) = bilinear sample of `target` at (x+u, y+v); out-of-image
/// samples are invalid and produce 0.
inline WarpResult warp_backward(const Frame& target, const FlowField& flow) {
  const WarpPlan plan(flow);
  return {plan.apply(target), plan.validity()};
}

/// |base + Warp(other)|, sampling `other` along `base`. With base = F_bwd,t and
/// other = F_fwd,t-1 this is the forward/backward consistency error at t.
inline ScalarMap flow_consistency_error(const FlowField& base, const FlowField& other) {
  require(base.height == other.height && base.width == other.width, Errc::size_mismatch,
          "flow error map: flow resolutions differ");
  const WarpPlan plan(base);
  const VectorMap warped = plan.apply(other.to_raster());
  ScalarMap err(base.height, base.width);
  for (std::size_t p = 0; p < err.size(); ++p) {
    if (!plan.tap(p).valid) {
      err[p] = kInvalidError;
      continue;
    }
    const double du = base.data[2 * p] + warped[2 * p];
    const double dv = base.data[2 * p + 1] + warped[2 * p + 1];
    err[p] = std::sqrt(du * du + dv * dv);
  }
  return err;
}

inline ScalarMap flow_error_map(const FlowField& f_bwd_t, const FlowField& f_fwd_prev) {
  return flow_consistency_error(f_bwd_t, f_fwd_prev);
}

/// Channel-mean |I_t - Warp(I_{t+1})| with the warp driven by F_fwd,t.
inline ScalarMap rgb_error_map(const Frame& curr, const Frame& next, const FlowField& f_fwd_t) {
  require(curr.same_shape(next), Errc::size_mismatch, "rgb error map: frame resolutions differ");
  const WarpPlan plan(f_fwd_t);
  const Frame warped = plan.apply(next);
  ScalarMap err(curr.height(), curr.width());
  for (std::size_t p = 0; p < err.size(); ++p) {
    if (!plan.tap(p).valid) {
      err[p] = kInvalidError;
      continue;
    }
    double s = 0;
    for (int c = 0; c < 3; ++c) s += std::fabs(curr[3 * p + c] - warped[3 * p + c]);
    err[p] = s / 3.0;
  }
  return err;
}

enum class ThresholdMode { statistics, explicit_values };
enum class FlowErrorDirection { as_written, forward };

struct MaskConfig {
  double beta = 50.0;
  ThresholdMode xi_mode = ThresholdMode::statistics;
  std::optional<double> xi_flow;
  std::optional<double> xi_rgb;
  // Lower bounds on statistic-derived thresholds, so that an error-free frame
  // (mean = std = 0) still yields a confident mask instead of sigmoid(0).
  double xi_flow_min = 0.5;
  double xi_rgb_min = 0.1;
  FlowErrorDirection flow_error_direction = FlowErrorDirection::as_written;

  void validate() const {
    require(beta > 0 && std::isfinite(beta), Errc::config, "mask.beta must be positive");
    if (xi_mode == ThresholdMode::explicit_values)
      require(xi_flow.has_value() && xi_rgb.has_value(), Errc::config,
              "explicit threshold mode needs mask.xi_flow and mask.xi_rgb");
  }
};

struct ErrorStatistics {
  double mean = 0;
  double stddev = 0;
  std::size_t count = 0;
};

/// Mean and population standard deviation of the finite entries, summed in
/// index order.
inline ErrorStatistics finite_statistics(const ScalarMap& m) {
  ErrorStatistics s;
  double sum = 0;
  for (double v : m.values())
    if (std::isfinite(v)) {
      sum += v;
      ++s.count;
    }
  if (s.count == 0) return s;
  s.mean = sum / static_cast<double>(s.count);
  double sq = 0;
  for (double v : m.values())
    if (std::isfinite(v)) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(s.count));
  return s;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

using SoftMask = ScalarMap;

/// Resolves the two thresholds for a pair of error maps.
inline std::pair<double, double> mask_thresholds(const ScalarMap& e_flow, const ScalarMap& e_rgb,
                                                 const MaskConfig& cfg) {
  if (cfg.xi_mode == ThresholdMode::explicit_values) return {*cfg.xi_flow, *cfg.xi_rgb};
  const ErrorStatistics sf = finite_statistics(e_flow);
  const ErrorStatistics sr = finite_statistics(e_rgb);
  return {std::max(sf.mean + sf.stddev, cfg.xi_flow_min), std::max(sr.mean + sr.stddev, cfg.xi_rgb_min)};
}

/// M = sigmoid(beta(xi_flow - E_flow)) * sigmoid(beta(xi_rgb - E_rgb)).
/// Non-finite (sentinel) error entries give 0.
inline SoftMask soft_mask(const ScalarMap& e_flow, const ScalarMap& e_rgb, const MaskConfig& cfg) {
  require(e_flow.same_shape(e_rgb), Errc::size_mismatch, "soft mask: error maps differ in size");
  cfg.validate();
  const auto [xi_flow, xi_rgb] = mask_thresholds(e_flow, e_rgb, cfg);
  SoftMask m(e_flow.height(), e_flow.width());
  for (std::size_t p = 0; p < m.size(); ++p) {
    if (!std::isfinite(e_flow[p]) || !std::isfinite(e_rgb[p])) continue;
    m[p] = sigmoid(cfg.beta * (xi_flow - e_flow[p])) * sigmoid(cfg.beta * (xi_rgb - e_rgb[p]));
  }
  return m;
}

inline BoolMap binarize_mask(const SoftMask& m) {
  BoolMap b(m.height(), m.width());
  for (std::size_t p = 0; p < m.size(); ++p) b.data[p] = m[p] > 0.5 ? 1 : 0;
  return b;
}

/// Soft masks M_t for every adjacent pair (t, t+1), t in [0, T-2], from the
/// source video and its flows. fwd[t] maps t -> t+1; bwd[t] maps t -> t-1
/// (bwd[0] is unused). With the as-written direction the first frame has no
/// previous forward flow, so it uses the forward-direction check instead.
inline std::vector<SoftMask> compute_masks(const VideoVolume& source, const std::vector<FlowField>& fwd,
                                           const std::vector<FlowField>& bwd, const MaskConfig& cfg) {
  const int T = source.frames();
  require(T >= 2, Errc::invalid_argument, "masks need at least two frames");
  require(static_cast<int>(fwd.size()) >= T - 1, Errc::invalid_argument, "masks need T-1 forward flows");
  require(static_cast<int>(bwd.size()) >= T, Errc::invalid_argument, "masks need backward flows for frames 1..T-1");
  cfg.validate();
  std::vector<SoftMask> masks(static_cast<std::size_t>(T - 1));
  for (int t = 0; t < T - 1; ++t) {
    ScalarMap e_flow = (cfg.flow_error_direction == FlowErrorDirection::as_written && t > 0)
                           ? flow_error_map(bwd[static_cast<std::size_t>(t)], fwd[static_cast<std::size_t>(t - 1)])
                           : flow_consistency_error(fwd[static_cast<std::size_t>(t)], bwd[static_cast<std::size_t>(t + 1)]);
    const ScalarMap e_rgb = rgb_error_map(source[t], source[t + 1], fwd[static_cast<std::size_t>(t)]);
    masks[static_cast<std::size_t>(t)] = soft_mask(e_flow, e_rgb, cfg);
  }
  return masks;
}

}  // namespace uvtc
