#pragma once

// Fixtures and independent reference implementations shared by the unit and
// acceptance suites. Oracles here deliberately avoid the library's code paths
// (no WarpPlan, no separable filters, no CSR grouping).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "uvtc/uvtc.hpp"

namespace uvtc::testing {

namespace fs = std::filesystem;

inline Frame random_frame(int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Frame f(h, w);
  for (auto& v : f.values()) v = d(rng);
  return f;
}

inline FlowField random_flow(int h, int w, std::mt19937_64& rng, double magnitude) {
  std::uniform_real_distribution<double> d(-magnitude, magnitude);
  FlowField f(h, w);
  for (auto& v : f.data) v = static_cast<float>(d(rng));
  return f;
}

inline ScalarMap random_map(int h, int w, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  ScalarMap m(h, w);
  for (auto& v : m.values()) v = d(rng);
  return m;
}

/// Smooth deterministic texture in [lo, hi] used for static-scene fixtures.
inline Frame smooth_texture(int h, int w, double lo = 0.2, double hi = 0.7, double phase = 0.0) {
  Frame f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double s = 0.5 + 0.25 * std::sin(0.31 * x + 0.17 * y + phase + c) + 0.25 * std::cos(0.23 * y - 0.11 * x + 2 * c);
        f.at(y, x, c) = lo + (hi - lo) * s;
      }
  return f;
}

inline std::vector<FlowField> constant_flows(int count, int h, int w, float u, float v, FlowDirection dir) {
  std::vector<FlowField> flows;
  for (int i = 0; i < count; ++i) {
    flows.emplace_back(h, w, u, v);
    flows.back().direction = dir;
  }
  return flows;
}

inline std::vector<SoftMask> full_masks(int count, int h, int w) {
  return std::vector<SoftMask>(static_cast<std::size_t>(count), SoftMask(h, w, 1.0));
}

inline std::vector<BoolMap> full_binary(int count, int h, int w, bool v = true) {
  return std::vector<BoolMap>(static_cast<std::size_t>(count), BoolMap(h, w, v));
}

/// max |numeric - analytic| / max |analytic|.
inline double relative_error(const std::vector<double>& numeric, const std::vector<double>& analytic) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff = std::max(diff, std::fabs(numeric[i] - analytic[i]));
    scale = std::max(scale, std::fabs(analytic[i]));
  }
  return diff / std::max(scale, 1e-300);
}

/// Central differences of f at params, step h.
inline std::vector<double> central_differences(std::vector<double> params,
                                               const std::function<double(const std::vector<double>&)>& f,
                                               double h = 1e-4) {
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double up = f(params);
    params[i] = orig - h;
    const double down = f(params);
    params[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline std::vector<double> to_vector(const Frame& f) { return {f.values().begin(), f.values().end()}; }
inline Frame from_vector(const std::vector<double>& v, int h, int w) {
  Frame f(h, w);
  std::copy(v.begin(), v.end(), f.values().begin());
  return f;
}

// ---------------------------------------------------------------------------
// Oracles

/// Direct bilinear sample with explicit bounds test; returns false outside.
inline bool oracle_bilinear(const std::function<double(int, int)>& img, int h, int w, double sx, double sy,
                            double& out) {
  if (sx < 0 || sy < 0 || sx > w - 1 || sy > h - 1) return false;
  const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
  const double fx = sx - x0, fy = sy - y0;
  auto px = [&](int y, int x) { return img(std::min(y, h - 1), std::min(x, w - 1)); };
  out = (1 - fx) * (1 - fy) * px(y0, x0) + fx * (1 - fy) * px(y0, x0 + 1) + (1 - fx) * fy * px(y0 + 1, x0) +
        fx * fy * px(y0 + 1, x0 + 1);
  return true;
}

/// Scalar-loop rgb error map.
inline ScalarMap oracle_rgb_error(const Frame& curr, const Frame& next, const FlowField& flow) {
  const int h = curr.height(), w = curr.width();
  ScalarMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      bool ok = true;
      for (int c = 0; c < 3 && ok; ++c) {
        double v;
        ok = oracle_bilinear([&](int yy, int xx) { return next.at(yy, xx, c); }, h, w, x + static_cast<double>(flow.u(y, x)),
                             y + static_cast<double>(flow.v(y, x)), v);
        s += std::fabs(curr.at(y, x, c) - v);
      }
      out.at(y, x) = ok ? s / 3 : std::numeric_limits<double>::infinity();
    }
  return out;
}

/// Scalar-loop flow consistency error |base + sample(other at p + base)|.
inline ScalarMap oracle_flow_error(const FlowField& base, const FlowField& other) {
  const int h = base.height, w = base.width;
  ScalarMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double u, v;
      const double sx = x + static_cast<double>(base.u(y, x)), sy = y + static_cast<double>(base.v(y, x));
      const bool ok = oracle_bilinear([&](int yy, int xx) { return other.u(yy, xx); }, h, w, sx, sy, u) &&
                      oracle_bilinear([&](int yy, int xx) { return other.v(yy, xx); }, h, w, sx, sy, v);
      out.at(y, x) = ok ? std::hypot(base.u(y, x) + u, base.v(y, x) + v) : std::numeric_limits<double>::infinity();
    }
  return out;
}

/// Explicit 11x11 window SSIM with per-pixel renormalized truncated Gaussian.
inline ScalarMap oracle_ssim_map(const Frame& a, const Frame& b) {
  const int h = a.height(), w = a.width();
  double g[11];
  double gs = 0;
  for (int k = 0; k < 11; ++k) {
    g[k] = std::exp(-((k - 5) * (k - 5)) / (2 * 1.5 * 1.5));
    gs += g[k];
  }
  for (double& v : g) v /= gs;
  const double c1 = 1e-4, c2 = 9e-4;
  ScalarMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double total = 0;
      for (int c = 0; c < 3; ++c) {
        double z = 0, ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            const double wt = g[dy + 5] * g[dx + 5];
            const double va = a.at(yy, xx, c), vb = b.at(yy, xx, c);
            z += wt;
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        ma /= z;
        mb /= z;
        const double va = saa / z - ma * ma, vb = sbb / z - mb * mb, cov = sab / z - ma * mb;
        total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
      out.at(y, x) = total / 3;
    }
  return out;
}

/// Closed-form SSIM of two constant images (zero variances).
inline double constant_ssim(double a, double b) {
  const double c1 = 1e-4;
  return (2 * a * b + c1) / (a * a + b * b + c1);
}

/// Scalar flow-ID propagation: sequential loop, std::map collisions.
inline std::vector<std::int64_t> oracle_flow_ids(const std::vector<FlowField>& flows, const std::vector<BoolMap>& masks) {
  const int h = flows[0].height, w = flows[0].width, T = static_cast<int>(flows.size()) + 1;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(T) * h * w, -1);
  std::int64_t counter = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) ids[static_cast<std::size_t>(y) * w + x] = counter++;
  for (int t = 0; t + 1 < T; ++t) {
    std::map<std::pair<int, int>, std::int64_t> claim;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!masks[static_cast<std::size_t>(t)].at(y, x)) continue;
        const int qx = static_cast<int>(std::floor(x + static_cast<double>(flows[static_cast<std::size_t>(t)].u(y, x)) + 0.5));
        const int qy = static_cast<int>(std::floor(y + static_cast<double>(flows[static_cast<std::size_t>(t)].v(y, x)) + 0.5));
        if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
        const std::int64_t id = ids[(static_cast<std::size_t>(t) * h + y) * w + x];
        auto it = claim.find({qy, qx});
        if (it == claim.end() || id < it->second) claim[{qy, qx}] = id;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto it = claim.find({y, x});
        ids[(static_cast<std::size_t>(t + 1) * h + y) * w + x] = it == claim.end() ? counter++ : it->second;
      }
  }
  return ids;
}

/// Hash-map grouping of pixel colors by key tuple, in scan order.
struct OracleGrouping {
  std::size_t elements = 0;
  std::vector<std::array<double, 3>> pixel_means;  // per pixel: mean of its group
};

inline OracleGrouping oracle_group(const VideoVolume& video, const std::vector<std::int64_t>& flow_ids) {
  using Key = std::tuple<std::int64_t, int, int, int>;
  std::map<Key, std::pair<std::array<double, 3>, int>> groups;
  std::vector<Key> pixel_key;
  const int h = video.height(), w = video.width();
  for (int t = 0; t < video.frames(); ++t)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int q[3];
        for (int c = 0; c < 3; ++c) q[c] = std::clamp(static_cast<int>(std::floor(video[t].at(y, x, c) * 127 + 0.5)), 0, 127);
        const Key k{flow_ids[(static_cast<std::size_t>(t) * h + y) * w + x], q[0], q[1], q[2]};
        auto& g = groups[k];
        for (int c = 0; c < 3; ++c) g.first[static_cast<std::size_t>(c)] += video[t].at(y, x, c);
        ++g.second;
        pixel_key.push_back(k);
      }
  OracleGrouping out;
  out.elements = groups.size();
  for (const auto& k : pixel_key) {
    const auto& g = groups.at(k);
    out.pixel_means.push_back({g.first[0] / g.second, g.first[1] / g.second, g.first[2] / g.second});
  }
  return out;
}

/// Scalar combine: per (t, c) statistics and blend, straight from the formula.
inline std::vector<double> oracle_combine(const Tensor4& xy, const Tensor4& yt, double gamma) {
  std::vector<double> out(xy.data.size());
  const std::size_t n = xy.plane();
  for (std::size_t t = 0; t < xy.shape[0]; ++t)
    for (std::size_t c = 0; c < xy.shape[1]; ++c) {
      const std::size_t base = (t * xy.shape[1] + c) * n;
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mx += xy.data[base + i];
        my += yt.data[base + i];
      }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        vx += (xy.data[base + i] - mx) * (xy.data[base + i] - mx);
        vy += (yt.data[base + i] - my) * (yt.data[base + i] - my);
      }
      const double sx = std::sqrt(vx / n), sy = std::sqrt(vy / n);
      for (std::size_t i = 0; i < n; ++i) {
        const double aligned = sx * (yt.data[base + i] - my) / sy + mx;
        out[base + i] = std::sqrt(gamma) * xy.data[base + i] + std::sqrt(1 - gamma) * aligned;
      }
    }
  return out;
}

inline Tensor4 random_tensor(std::uint32_t t, std::uint32_t c, std::uint32_t h, std::uint32_t w, std::mt19937_64& rng,
                             double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> d(mean, stddev);
  Tensor4 out(t, c, h, w);
  for (auto& v : out.data) v = static_cast<float>(d(rng));
  return out;
}

// ---------------------------------------------------------------------------
// Video fixtures

/// Texture translating right by exactly one pixel per frame: frame t at
/// column x shows texture column x - t. New content enters on the left.
inline VideoVolume translating_texture(int T, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  const int tex_w = w + T;
  std::vector<double> tex(static_cast<std::size_t>(tex_w) * h * 3);
  for (auto& v : tex) v = d(rng);
  std::vector<Frame> frames;
  for (int t = 0; t < T; ++t) {
    Frame f(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          f.at(y, x, c) = tex[(static_cast<std::size_t>(y) * tex_w + (x - t + T)) * 3 + c];
    frames.push_back(std::move(f));
  }
  return VideoVolume(std::move(frames));
}

/// Static textured scene whose frame t is scaled by gains[t].
inline VideoVolume gain_flicker(const Frame& base, const std::vector<double>& gains) {
  std::vector<Frame> frames;
  for (double g : gains) {
    Frame f = base;
    for (auto& v : f.values()) v = std::clamp(v * g, 0.0, 1.0);
    frames.push_back(std::move(f));
  }
  return VideoVolume(std::move(frames));
}

/// Static scene with an independent additive offset in [-amp, amp] on a
/// square patch of every frame.
inline VideoVolume patch_flicker(const Frame& base, int T, double amp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-amp, amp);
  const int h = base.height(), w = base.width();
  std::vector<Frame> frames;
  for (int t = 0; t < T; ++t) {
    Frame f = base;
    const double offset = d(rng);
    for (int y = h / 4; y < 3 * h / 4; ++y)
      for (int x = w / 4; x < 3 * w / 4; ++x)
        for (int c = 0; c < 3; ++c) f.at(y, x, c) = std::clamp(f.at(y, x, c) + offset, 0.0, 1.0);
    frames.push_back(std::move(f));
  }
  return VideoVolume(std::move(frames));
}

// ---------------------------------------------------------------------------
// Finite-difference fixtures for the two stage objectives

/// Stage I objective (mean over all T entries) on random 16x16 frames with
/// random near-identity embeddings and fractional flows; returns the relative
/// error between the analytic and central-difference gradients over all
/// 12 T parameters.
inline double stage1_gradient_error(std::uint64_t seed, int T = 3) {
  std::mt19937_64 rng(seed);
  const int h = 16, w = 16;
  std::vector<Frame> frames;
  for (int t = 0; t < T; ++t) frames.push_back(random_frame(h, w, rng, 0.1, 0.9));
  const VideoVolume relit(std::move(frames));
  std::vector<FlowField> flows;
  std::vector<SoftMask> masks;
  for (int t = 0; t + 1 < T; ++t) {
    flows.push_back(random_flow(h, w, rng, 1.5));
    masks.push_back(random_map(h, w, rng, 0.2, 1.0));
  }
  // b offsets keep E_t I_t - I_t away from zero, so the photometric L1 has
  // no kink within one step.
  std::uniform_real_distribution<double> small(-0.02, 0.02), offset(0.08, 0.12);
  std::vector<AppearanceEmbedding> emb;
  for (int t = 0; t < T; ++t) {
    AppearanceEmbedding e = AppearanceEmbedding::identity(t);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) e.m[static_cast<std::size_t>(r * 4 + c)] += small(rng);
      e.m[static_cast<std::size_t>(r * 4 + 3)] = (t % 2 ? -1 : 1) * offset(rng);
    }
    emb.push_back(e);
  }
  StageOneConfig cfg;
  const auto plans = make_warp_plans(flows);
  std::vector<double> analytic(static_cast<std::size_t>(12 * T), 0.0);
  for (int t = 0; t < T; ++t) {
    const StageOneTerm term = stage1_loss(t, emb, relit, plans, masks, cfg);
    for (std::size_t k = 0; k < 12; ++k) {
      analytic[static_cast<std::size_t>(12 * t) + k] += term.grad_current[k] / T;
      if (t + 1 < T) analytic[static_cast<std::size_t>(12 * (t + 1)) + k] += term.grad_next[k] / T;
    }
  }
  std::vector<double> params;
  for (const auto& e : emb) params.insert(params.end(), e.m.begin(), e.m.end());
  const auto numeric = central_differences(params, [&](const std::vector<double>& p) {
    auto trial = emb;
    for (int t = 0; t < T; ++t) std::copy_n(p.begin() + 12 * t, 12, trial[static_cast<std::size_t>(t)].m.begin());
    return stage1_objective(trial, relit, plans, masks, cfg);
  });
  return relative_error(numeric, analytic);
}

/// Stage II objective on a 16x16x2 video whose pixels map onto a 5-element U
/// through an irregular index map, with a fractional flow and random soft
/// mask. Element colors are spread apart so L1 and TV differences between
/// distinct elements stay far from zero.
inline double stage2_gradient_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int T = 2, h = 16, w = 16, N = 5;
  std::vector<IndexKey> pixel_keys(static_cast<std::size_t>(T) * h * w);
  for (int t = 0; t < T; ++t)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        pixel_keys[(static_cast<std::size_t>(t) * h + y) * w + x].flow_id = ((x / 4) + 2 * (y / 5) + t) % N;
  auto keys = std::make_shared<const KeyVolume>(KeyVolume::from_pixel_keys(T, h, w, pixel_keys));
  UniqueVideoTensor u;
  u.keys = keys;
  u.values.assign(static_cast<std::size_t>(N) * 3, 0.0);
  std::vector<int> order{0, 1, 2, 3, 4};
  for (int c = 0; c < 3; ++c) {
    seeded_shuffle(order, rng);
    for (int e = 0; e < N; ++e) u.values[static_cast<std::size_t>(e * 3 + c)] = 0.1 + 0.2 * order[static_cast<std::size_t>(e)];
  }
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  for (auto& v : u.values) v += jitter(rng);
  std::vector<Frame> targets;
  for (int t = 0; t < T; ++t) targets.push_back(random_frame(h, w, rng));
  const VideoVolume target(std::move(targets));
  const std::vector<FlowField> flows{random_flow(h, w, rng, 1.5)};
  const std::vector<SoftMask> masks{random_map(h, w, rng, 0.2, 1.0)};
  StageTwoConfig cfg;
  const auto plans = make_warp_plans(flows);
  std::vector<double> analytic(u.values.size(), 0.0);
  for (int t = 0; t < T; ++t) {
    const StageTwoLoss l = stage2_loss(t, u, target, plans, masks, cfg);
    for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] += l.grad_u[i] / T;
  }
  const auto numeric = central_differences(u.values, [&](const std::vector<double>& p) {
    UniqueVideoTensor trial = u;
    trial.values = p;
    return stage2_objective(trial, target, plans, masks, cfg);
  });
  return relative_error(numeric, analytic);
}

inline fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("uvtc_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Writes a complete pipeline input set (source, relit, flows) plus a config
/// file, and returns the config path.
inline fs::path write_pipeline_fixture(const fs::path& dir, const VideoVolume& source, const VideoVolume& relit,
                                       const std::vector<FlowField>& fwd, const std::vector<FlowField>& bwd,
                                       const std::string& extra_config = "") {
  io::save_frame_sequence(dir / "source", source, 16);
  io::save_frame_sequence(dir / "relit", relit, 16);
  char name[64];
  for (std::size_t t = 0; t < fwd.size(); ++t) {
    std::snprintf(name, sizeof(name), "fwd_%06zu.flo", t);
    io::save_flo(dir / "flow" / name, fwd[t]);
  }
  for (std::size_t t = 1; t < bwd.size(); ++t) {
    std::snprintf(name, sizeof(name), "bwd_%06zu.flo", t);
    io::save_flo(dir / "flow" / name, bwd[t]);
  }
  const fs::path cfg = dir / "config.txt";
  std::ofstream out(cfg);
  out << "source_dir = " << (dir / "source").string() << "\n"
      << "relit_dir = " << (dir / "relit").string() << "\n"
      << "flow_fwd = " << (dir / "flow" / "fwd_%06d.flo").string() << "\n"
      << "flow_bwd = " << (dir / "flow" / "bwd_%06d.flo").string() << "\n"
      << "output_dir = " << (dir / "out").string() << "\n"
      << extra_config;
  return cfg;
}

inline std::vector<std::uint8_t> file_bytes(const fs::path& p) { return io::read_file_bytes(p); }

/// Byte-compares every regular file under two directory trees.
inline bool trees_identical(const fs::path& a, const fs::path& b, std::string* first_diff = nullptr) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) ++count_b;
  if (files.size() != count_b) {
    if (first_diff) *first_diff = "file count differs";
    return false;
  }
  for (const auto& rel : files) {
    if (!fs::exists(b / rel) || file_bytes(a / rel) != file_bytes(b / rel)) {
      if (first_diff) *first_diff = rel.string();
      return false;
    }
  }
  return true;
}

}  // namespace uvtc::testing
