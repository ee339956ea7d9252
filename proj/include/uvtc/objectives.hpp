#pragma once

// Differentiable image losses with analytic gradients, and Adam.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"
#include "uvtc/warp_mask.hpp"

namespace uvtc {

/// Scalar loss and its gradient with respect to the first argument.
struct LossValue {
  double value = 0;
  Frame gradient;
};

namespace detail {
inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

inline void check_pair(const Frame& a, const Frame& b, const char* what) {
  require(a.same_shape(b), Errc::size_mismatch, std::string(what) + ": frame sizes differ");
}
}  // namespace detail

/// sum_p m_p sum_c |a-b| / (3 sum_p m_p). Without a mask every weight is 1.
/// A zero total weight gives loss 0 and gradient 0.
inline LossValue l1_loss(const Frame& a, const Frame& b, const SoftMask* mask = nullptr) {
  detail::check_pair(a, b, "l1_loss");
  if (mask)
    require(mask->height() == a.height() && mask->width() == a.width(), Errc::size_mismatch,
            "l1_loss: mask size differs");
  LossValue out{0.0, Frame(a.height(), a.width())};
  const std::size_t n = a.pixels();
  double weight = 0;
  for (std::size_t p = 0; p < n; ++p) weight += mask ? (*mask)[p] : 1.0;
  if (weight <= 0) return out;
  const double norm = 3.0 * weight;
  double sum = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double m = mask ? (*mask)[p] : 1.0;
    if (m == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a[3 * p + c] - b[3 * p + c];
      sum += m * std::fabs(d);
      out.gradient[3 * p + c] = m * detail::sign(d) / norm;
    }
  }
  out.value = sum / norm;
  return out;
}

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2. The
// window is truncated at the image border and renormalized, so the map covers
// every pixel and constant images have exactly zero local variance.

struct SsimParams {
  static constexpr int radius = 5;
  static constexpr int window = 2 * radius + 1;
  static constexpr double sigma = 1.5;
  static constexpr double c1 = 0.01 * 0.01;
  static constexpr double c2 = 0.03 * 0.03;
};

namespace detail {

inline const std::array<double, SsimParams::window>& gaussian_taps() {
  static const std::array<double, SsimParams::window> taps = [] {
    std::array<double, SsimParams::window> g{};
    double sum = 0;
    for (int k = -SsimParams::radius; k <= SsimParams::radius; ++k) {
      g[static_cast<std::size_t>(k + SsimParams::radius)] =
          std::exp(-(k * k) / (2.0 * SsimParams::sigma * SsimParams::sigma));
      sum += g[static_cast<std::size_t>(k + SsimParams::radius)];
    }
    for (auto& v : g) v /= sum;
    return g;
  }();
  return taps;
}

/// Single-channel plane with separable Gaussian filtering along x then y.
class GaussianFilter {
 public:
  GaussianFilter(int height, int width) : h_(height), w_(width), zx_(static_cast<std::size_t>(width)), zy_(static_cast<std::size_t>(height)) {
    const auto& g = gaussian_taps();
    for (int x = 0; x < w_; ++x) zx_[static_cast<std::size_t>(x)] = coverage(x, w_, g);
    for (int y = 0; y < h_; ++y) zy_[static_cast<std::size_t>(y)] = coverage(y, h_, g);
  }

  /// Normalized blur: out(p) = sum_q g(q-p) in(q) / Z(p).
  std::vector<double> blur(const std::vector<double>& in) const {
    std::vector<double> tmp = pass_x(in, true);
    return pass_y(tmp, true);
  }

  /// Transpose of blur().
  std::vector<double> blur_transpose(const std::vector<double>& in) const {
    std::vector<double> tmp = pass_y_transpose(in);
    return pass_x_transpose(tmp);
  }

 private:
  static double coverage(int p, int n, const std::array<double, SsimParams::window>& g) {
    double z = 0;
    for (int k = -SsimParams::radius; k <= SsimParams::radius; ++k)
      if (p + k >= 0 && p + k < n) z += g[static_cast<std::size_t>(k + SsimParams::radius)];
    return z;
  }

  std::vector<double> pass_x(const std::vector<double>& in, bool normalize) const {
    const auto& g = gaussian_taps();
    std::vector<double> out(in.size());
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        double s = 0;
        for (int k = -SsimParams::radius; k <= SsimParams::radius; ++k) {
          const int q = x + k;
          if (q >= 0 && q < w_) s += g[static_cast<std::size_t>(k + SsimParams::radius)] * in[idx(y, q)];
        }
        out[idx(y, x)] = normalize ? s / zx_[static_cast<std::size_t>(x)] : s;
      }
    return out;
  }

  std::vector<double> pass_y(const std::vector<double>& in, bool normalize) const {
    const auto& g = gaussian_taps();
    std::vector<double> out(in.size());
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        double s = 0;
        for (int k = -SsimParams::radius; k <= SsimParams::radius; ++k) {
          const int q = y + k;
          if (q >= 0 && q < h_) s += g[static_cast<std::size_t>(k + SsimParams::radius)] * in[idx(q, x)];
        }
        out[idx(y, x)] = normalize ? s / zy_[static_cast<std::size_t>(y)] : s;
      }
    return out;
  }

  // The kernel is symmetric, so the transpose of "filter then divide by Z" is
  // "divide by Z then filter".
  std::vector<double> pass_x_transpose(std::vector<double> in) const {
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) in[idx(y, x)] /= zx_[static_cast<std::size_t>(x)];
    return pass_x(in, false);
  }

  std::vector<double> pass_y_transpose(std::vector<double> in) const {
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) in[idx(y, x)] /= zy_[static_cast<std::size_t>(y)];
    return pass_y(in, false);
  }

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w_ + x; }

  int h_, w_;
  std::vector<double> zx_, zy_;
};

inline std::vector<double> channel_plane(const Frame& f, int c) {
  std::vector<double> plane(f.pixels());
  for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = f[3 * p + c];
  return plane;
}

inline void check_ssim_size(const Frame& a) {
  require(a.height() >= SsimParams::window && a.width() >= SsimParams::window, Errc::invalid_argument,
          "SSIM needs frames of at least 11x11 pixels");
}

/// Local SSIM statistics of one channel.
struct SsimChannel {
  std::vector<double> mu_a, mu_b, s_aa, s_bb, s_ab;

  double value(std::size_t p) const {
    const double va = s_aa[p] - mu_a[p] * mu_a[p];
    const double vb = s_bb[p] - mu_b[p] * mu_b[p];
    const double cov = s_ab[p] - mu_a[p] * mu_b[p];
    const double a1 = 2 * mu_a[p] * mu_b[p] + SsimParams::c1;
    const double a2 = 2 * cov + SsimParams::c2;
    const double b1 = mu_a[p] * mu_a[p] + mu_b[p] * mu_b[p] + SsimParams::c1;
    const double b2 = va + vb + SsimParams::c2;
    return a1 * a2 / (b1 * b2);
  }
};

inline SsimChannel ssim_channel(const GaussianFilter& filter, const std::vector<double>& a,
                                const std::vector<double>& b) {
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  return {filter.blur(a), filter.blur(b), filter.blur(aa), filter.blur(bb), filter.blur(ab)};
}

}  // namespace detail

/// Per-pixel SSIM averaged over the three channels.
inline ScalarMap ssim_map(const Frame& a, const Frame& b) {
  detail::check_pair(a, b, "ssim_map");
  detail::check_ssim_size(a);
  const detail::GaussianFilter filter(a.height(), a.width());
  std::array<detail::SsimChannel, 3> stats;
  parallel_for(0, 3, [&](std::ptrdiff_t c) {
    stats[static_cast<std::size_t>(c)] =
        detail::ssim_channel(filter, detail::channel_plane(a, static_cast<int>(c)), detail::channel_plane(b, static_cast<int>(c)));
  });
  ScalarMap map(a.height(), a.width());
  for (std::size_t p = 0; p < map.size(); ++p)
    map[p] = (stats[0].value(p) + stats[1].value(p) + stats[2].value(p)) / 3.0;
  return map;
}

/// 1 - mean SSIM, with gradient with respect to `a`.
inline LossValue ssim_loss(const Frame& a, const Frame& b) {
  detail::check_pair(a, b, "ssim_loss");
  detail::check_ssim_size(a);
  const detail::GaussianFilter filter(a.height(), a.width());
  const std::size_t n = a.pixels();
  const double dl_ds = -1.0 / (3.0 * static_cast<double>(n));
  LossValue out{0.0, Frame(a.height(), a.width())};
  std::array<double, 3> channel_sum{};
  parallel_for(0, 3, [&](std::ptrdiff_t cc) {
    const int c = static_cast<int>(cc);
    const std::vector<double> pa = detail::channel_plane(a, c);
    const std::vector<double> pb = detail::channel_plane(b, c);
    const detail::SsimChannel st = detail::ssim_channel(filter, pa, pb);
    std::vector<double> g_mu(n), g_aa(n), g_ab(n);
    double sum = 0;
    for (std::size_t p = 0; p < n; ++p) {
      const double ma = st.mu_a[p], mb = st.mu_b[p];
      const double a1 = 2 * ma * mb + SsimParams::c1;
      const double a2 = 2 * (st.s_ab[p] - ma * mb) + SsimParams::c2;
      const double b1 = ma * ma + mb * mb + SsimParams::c1;
      const double b2 = (st.s_aa[p] - ma * ma) + (st.s_bb[p] - mb * mb) + SsimParams::c2;
      const double denom = b1 * b2;
      const double s = a1 * a2 / denom;
      sum += s;
      g_mu[p] = dl_ds * ((2 * mb * a2 - 2 * mb * a1) / denom - s * (2 * ma * b2 - 2 * ma * b1) / denom);
      g_aa[p] = dl_ds * (-s / b2);
      // Written as 2 (a1/b1) / b2 so identical inputs cancel to an exact zero.
      g_ab[p] = dl_ds * (2 * (a1 / b1) / b2);
    }
    channel_sum[static_cast<std::size_t>(c)] = sum;
    const std::vector<double> t_mu = filter.blur_transpose(g_mu);
    const std::vector<double> t_aa = filter.blur_transpose(g_aa);
    const std::vector<double> t_ab = filter.blur_transpose(g_ab);
    for (std::size_t p = 0; p < n; ++p) out.gradient[3 * p + c] = t_mu[p] + 2 * pa[p] * t_aa[p] + pb[p] * t_ab[p];
  });
  out.value = 1.0 - (channel_sum[0] + channel_sum[1] + channel_sum[2]) / (3.0 * static_cast<double>(n));
  return out;
}

/// (1 - lambda_dssim) * L1 + lambda_dssim * (1 - SSIM) / 2.
inline LossValue photometric_loss(const Frame& a, const Frame& b, double lambda_dssim = 0.2) {
  LossValue l1 = l1_loss(a, b);
  if (lambda_dssim == 0.0) return l1;
  const LossValue ss = ssim_loss(a, b);
  LossValue out{(1 - lambda_dssim) * l1.value + lambda_dssim * 0.5 * ss.value, std::move(l1.gradient)};
  for (std::size_t i = 0; i < out.gradient.size(); ++i)
    out.gradient[i] = (1 - lambda_dssim) * out.gradient[i] + lambda_dssim * 0.5 * ss.gradient[i];
  return out;
}

/// Anisotropic total variation with forward differences:
/// mean |a(x+1,y) - a(x,y)| + mean |a(x,y+1) - a(x,y)|, each mean taken over
/// its 3*H*(W-1) resp. 3*(H-1)*W difference terms.
inline LossValue tv_loss(const Frame& a) {
  const int H = a.height(), W = a.width();
  LossValue out{0.0, Frame(H, W)};
  const double nx = W > 1 ? 3.0 * H * (W - 1) : 0.0;
  const double ny = H > 1 ? 3.0 * (H - 1) * W : 0.0;
  double sx = 0, sy = 0;
  // Each gradient entry is assembled from its own (up to four) neighbours and
  // written once.
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = a.at(y, x, c);
        double g = 0;
        if (x + 1 < W) {
          const double d = a.at(y, x + 1, c) - v;
          sx += std::fabs(d);
          g -= detail::sign(d) / nx;
        }
        if (x > 0) g += detail::sign(v - a.at(y, x - 1, c)) / nx;
        if (y + 1 < H) {
          const double d = a.at(y + 1, x, c) - v;
          sy += std::fabs(d);
          g -= detail::sign(d) / ny;
        }
        if (y > 0) g += detail::sign(v - a.at(y - 1, x, c)) / ny;
        out.gradient.at(y, x, c) = g;
      }
  if (W > 1) out.value += sx / nx;
  if (H > 1) out.value += sy / ny;
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t n, double learning_rate) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. When `touched` is given, only flagged
/// parameters (and their moments) change; the step counter is shared.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad,
                      std::span<const std::uint8_t> touched = {}) {
  require(params.size() == grad.size() && state.m.size() == params.size() && state.v.size() == params.size(),
          Errc::size_mismatch, "adam_step: parameter, gradient and moment sizes differ");
  require(touched.empty() || touched.size() == params.size(), Errc::size_mismatch, "adam_step: touched mask size");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  parallel_for(0, static_cast<std::ptrdiff_t>(params.size()), [&](std::ptrdiff_t ii) {
    const auto i = static_cast<std::size_t>(ii);
    if (!touched.empty() && !touched[i]) return;
    state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  });
}

/// Geometric interpolation from lr_start (epoch 0) to lr_end (epoch total-1).
inline double lr_schedule(int epoch, int total, double lr_start, double lr_end) {
  require(total >= 1 && epoch >= 0 && epoch < total, Errc::invalid_argument, "lr_schedule: epoch out of range");
  require(lr_start > 0 && lr_end > 0, Errc::invalid_argument, "lr_schedule: learning rates must be positive");
  if (total == 1 || lr_start == lr_end) return lr_start;
  if (epoch == total - 1) return lr_end;
  return lr_start * std::pow(lr_end / lr_start, static_cast<double>(epoch) / (total - 1));
}

}  // namespace uvtc
