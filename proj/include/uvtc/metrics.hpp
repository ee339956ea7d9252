#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/objectives.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"
#include "uvtc/warp_mask.hpp"

namespace uvtc::metrics {

/// Reported in place of an infinite PSNR.
inline constexpr double kPsnrIdentical = 99.0;

/// Mean over adjacent pairs of the mean SSIM between frame t and frame t+1
/// warped back along F_fwd,t, restricted to pixels that are set in the binary
/// mask and have a valid warp sample. In percent, clamped to [0, 100].
inline double warp_ssim(const VideoVolume& video, const std::vector<FlowField>& fwd,
                        const std::vector<BoolMap>& masks) {
  const int T = video.frames();
  require(T >= 2, Errc::invalid_argument, "warp_ssim needs at least two frames");
  require(static_cast<int>(fwd.size()) >= T - 1 && static_cast<int>(masks.size()) >= T - 1,
          Errc::invalid_argument, "warp_ssim needs T-1 flows and masks");
  std::vector<double> pair_mean(static_cast<std::size_t>(T - 1), 0.0);
  std::vector<std::uint8_t> pair_used(static_cast<std::size_t>(T - 1), 0);
  parallel_for(0, T - 1, [&](std::ptrdiff_t tt) {
    const int t = static_cast<int>(tt);
    const WarpPlan plan(fwd[static_cast<std::size_t>(t)]);
    const ScalarMap map = ssim_map(video[t], plan.apply(video[t + 1]));
    const BoolMap& m = masks[static_cast<std::size_t>(t)];
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < map.size(); ++p)
      if (m.data[p] && plan.tap(p).valid) {
        sum += map[p];
        ++count;
      }
    if (count > 0) {
      pair_mean[static_cast<std::size_t>(t)] = sum / static_cast<double>(count);
      pair_used[static_cast<std::size_t>(t)] = 1;
    }
  });
  double total = 0;
  int used = 0;
  for (int t = 0; t < T - 1; ++t)
    if (pair_used[static_cast<std::size_t>(t)]) {
      total += pair_mean[static_cast<std::size_t>(t)];
      ++used;
    }
  if (used == 0) return 0.0;
  return std::clamp(100.0 * total / used, 0.0, 100.0);
}

/// Mean over adjacent pairs of the soft-masked L1 between frame t and the
/// warped frame t+1 (the alignment term of both stages).
inline double warp_l1(const VideoVolume& video, const std::vector<FlowField>& fwd, const std::vector<SoftMask>& masks) {
  const int T = video.frames();
  require(T >= 2, Errc::invalid_argument, "warp_l1 needs at least two frames");
  require(static_cast<int>(fwd.size()) >= T - 1 && static_cast<int>(masks.size()) >= T - 1,
          Errc::invalid_argument, "warp_l1 needs T-1 flows and masks");
  std::vector<double> values(static_cast<std::size_t>(T - 1));
  parallel_for(0, T - 1, [&](std::ptrdiff_t tt) {
    const int t = static_cast<int>(tt);
    const WarpPlan plan(fwd[static_cast<std::size_t>(t)]);
    SoftMask weight = masks[static_cast<std::size_t>(t)];
    for (std::size_t p = 0; p < weight.size(); ++p)
      if (!plan.tap(p).valid) weight[p] = 0;
    values[static_cast<std::size_t>(t)] = l1_loss(video[t], plan.apply(video[t + 1]), &weight).value;
  });
  double sum = 0;
  for (double v : values) sum += v;
  return sum / (T - 1);
}

/// PSNR over the whole volume for [0,1] data; identical inputs give 99.
inline double psnr(const VideoVolume& a, const VideoVolume& b) {
  require(a.frames() == b.frames() && a.height() == b.height() && a.width() == b.width(), Errc::size_mismatch,
          "psnr: video shapes differ");
  double sq = 0;
  std::size_t n = 0;
  for (int t = 0; t < a.frames(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      const double d = a[t][i] - b[t][i];
      sq += d * d;
      ++n;
    }
  if (sq == 0) return kPsnrIdentical;
  return std::min(kPsnrIdentical, 10.0 * std::log10(static_cast<double>(n) / sq));
}

/// Mean per-frame SSIM.
inline double video_ssim(const VideoVolume& a, const VideoVolume& b) {
  require(a.frames() == b.frames(), Errc::size_mismatch, "video_ssim: frame counts differ");
  double sum = 0;
  for (int t = 0; t < a.frames(); ++t) sum += 1.0 - ssim_loss(a[t], b[t]).value;
  return sum / a.frames();
}

/// Largest difference between any two per-frame mean intensities.
inline double brightness_range(const VideoVolume& v) {
  double lo = 1e300, hi = -1e300;
  for (const auto& f : v.all()) {
    double s = 0;
    for (double x : f.values()) s += x;
    const double mean = s / static_cast<double>(f.size());
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
  }
  return hi - lo;
}

}  // namespace uvtc::metrics
