#pragma once

// Tensor-level noise arithmetic for decayed multi-axis denoising: forward
// noising, the decaying blend weight and per-frame/channel statistics
// alignment of the spatiotemporal noise estimate.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"

namespace uvtc::noise {

inline constexpr double kDegenerateSigma = 1e-8;

struct GammaSchedule {
  double gamma_start = 0.2;
  double gamma_end = 0.002;
  int steps = 25;

  void validate() const {
    require(gamma_end > 0 && gamma_end <= gamma_start && gamma_start <= 1, Errc::config,
            "gamma schedule needs 0 < gamma_end <= gamma_start <= 1");
    require(steps >= 2, Errc::config, "gamma schedule needs at least 2 steps");
  }
};

/// Monotonically decreasing cumulative signal levels alpha_bar, one per step.
struct AlphaSchedule {
  std::vector<double> alpha_bar;

  void validate() const {
    for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
      require(alpha_bar[i] > 0 && alpha_bar[i] <= 1, Errc::invalid_argument, "alpha_bar must lie in (0,1]");
      if (i > 0) require(alpha_bar[i] <= alpha_bar[i - 1], Errc::invalid_argument, "alpha_bar must be non-increasing");
    }
  }
};

/// sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps.
inline Tensor4 forward_noise(const Tensor4& z0, const Tensor4& eps, double alpha_bar) {
  require(z0.same_shape(eps), Errc::size_mismatch, "forward_noise: shapes differ");
  require(alpha_bar > 0 && alpha_bar <= 1, Errc::invalid_argument, "forward_noise: alpha_bar must be in (0,1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1 - alpha_bar);
  Tensor4 out = z0;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(a * static_cast<double>(z0.data[i]) + b * static_cast<double>(eps.data[i]));
  return out;
}

/// gamma_start (gamma_end / gamma_start)^(i / (steps - 1)); exact endpoints.
inline double gamma_at(const GammaSchedule& s, int step_index) {
  s.validate();
  require(step_index >= 0 && step_index < s.steps, Errc::invalid_argument,
          "gamma_at: step " + std::to_string(step_index) + " outside [0," + std::to_string(s.steps) + ")");
  if (step_index == 0 || s.gamma_start == s.gamma_end) return s.gamma_start;
  if (step_index == s.steps - 1) return s.gamma_end;
  return s.gamma_start * std::pow(s.gamma_end / s.gamma_start, static_cast<double>(step_index) / (s.steps - 1));
}

struct PlaneStatistics {
  double mean = 0;
  double stddev = 0;
};

/// Mean and population standard deviation over H x W of one (frame, channel).
inline PlaneStatistics plane_statistics(const Tensor4& x, std::size_t t, std::size_t c) {
  const std::size_t n = x.plane();
  const float* p = x.data.data() + x.index(t, c, 0, 0);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += p[i];
  const double mean = sum / static_cast<double>(n);
  double sq = 0;
  for (std::size_t i = 0; i < n; ++i) sq += (p[i] - mean) * (p[i] - mean);
  return {mean, std::sqrt(sq / static_cast<double>(n))};
}

/// Standardizes every (frame, channel) plane of eps_yt and rescales it to the
/// mean and standard deviation of the matching eps_xy plane.
inline Tensor4 ain_align(const Tensor4& eps_yt, const Tensor4& eps_xy) {
  require(eps_yt.same_shape(eps_xy), Errc::size_mismatch, "ain_align: shapes differ");
  Tensor4 out = eps_yt;
  const std::size_t planes = static_cast<std::size_t>(eps_yt.shape[0]) * eps_yt.shape[1];
  std::vector<std::uint8_t> degenerate(planes, 0);
  parallel_for(0, static_cast<std::ptrdiff_t>(planes), [&](std::ptrdiff_t k) {
    const std::size_t t = static_cast<std::size_t>(k) / eps_yt.shape[1];
    const std::size_t c = static_cast<std::size_t>(k) % eps_yt.shape[1];
    const PlaneStatistics src = plane_statistics(eps_yt, t, c);
    const PlaneStatistics ref = plane_statistics(eps_xy, t, c);
    if (src.stddev <= kDegenerateSigma) {
      degenerate[static_cast<std::size_t>(k)] = 1;
      return;
    }
    const std::size_t base = eps_yt.index(t, c, 0, 0);
    for (std::size_t i = 0; i < eps_yt.plane(); ++i)
      out.data[base + i] =
          static_cast<float>(ref.stddev * ((eps_yt.data[base + i] - src.mean) / src.stddev) + ref.mean);
  });
  for (std::size_t k = 0; k < planes; ++k)
    require(!degenerate[k], Errc::degenerate_statistics,
            "ain_align: eps_yt frame " + std::to_string(k / eps_yt.shape[1]) + " channel " +
                std::to_string(k % eps_yt.shape[1]) + " has (near-)zero standard deviation");
  return out;
}

/// sqrt(gamma) eps_xy + sqrt(1 - gamma) AIN(eps_yt, eps_xy). With
/// swap_weights the two weights trade places.
inline Tensor4 combine_noise(const Tensor4& eps_xy, const Tensor4& eps_yt, double gamma, bool swap_weights = false) {
  require(gamma >= 0 && gamma <= 1, Errc::invalid_argument, "combine_noise: gamma must be in [0,1]");
  const Tensor4 aligned = ain_align(eps_yt, eps_xy);
  double w_xy = std::sqrt(gamma), w_yt = std::sqrt(1 - gamma);
  if (swap_weights) std::swap(w_xy, w_yt);
  Tensor4 out = eps_xy;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(w_xy * static_cast<double>(eps_xy.data[i]) + w_yt * static_cast<double>(aligned.data[i]));
  return out;
}

inline Tensor4 combine_noise(const Tensor4& eps_xy, const Tensor4& eps_yt, const GammaSchedule& sched, int step,
                             bool swap_weights = false) {
  return combine_noise(eps_xy, eps_yt, gamma_at(sched, step), swap_weights);
}

}  // namespace uvtc::noise
