#pragma once

// Unique Video Tensor: per-pixel index keys, gather/scatter between a video
// and its N x 3 canonical color vector, and Stage II optimization over it.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/exposure_stage.hpp"
#include "uvtc/objectives.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"
#include "uvtc/warp_mask.hpp"

namespace uvtc {

inline constexpr double kOutdoorVoxelSize = 0.05;
inline constexpr double kIndoorVoxelSize = 0.02;

// ---------------------------------------------------------------------------
// Key components

/// Flow IDs for all T x H x W pixels, row-major within each frame.
struct FlowIdVolume {
  int frames = 0, height = 0, width = 0;
  std::vector<std::int64_t> ids;
  std::int64_t next_id = 0;  // one past the largest assigned ID

  std::int64_t at(int t, int y, int x) const {
    return ids[(static_cast<std::size_t>(t) * height + y) * width + x];
  }
};

/// Nearest-integer rounding used for flow targets.
inline long long round_half_up(double v) { return static_cast<long long>(std::floor(v + 0.5)); }

/// Frame 0 takes IDs 0..HW-1. A pixel of frame t whose binary mask is set
/// passes its ID to the pixel of frame t+1 nearest to its forward-flow target;
/// when several sources land on one pixel the smallest ID wins. Pixels left
/// without an ID take fresh ones from a global counter in row-major order.
inline FlowIdVolume propagate_flow_ids(const std::vector<FlowField>& flows_fwd, const std::vector<BoolMap>& masks) {
  require(!flows_fwd.empty(), Errc::invalid_argument, "propagate_flow_ids needs at least one flow");
  require(flows_fwd.size() == masks.size(), Errc::size_mismatch,
          "propagate_flow_ids: " + std::to_string(flows_fwd.size()) + " flows vs " + std::to_string(masks.size()) +
              " masks");
  const int H = flows_fwd.front().height, W = flows_fwd.front().width;
  for (std::size_t i = 0; i < flows_fwd.size(); ++i)
    require(flows_fwd[i].height == H && flows_fwd[i].width == W && masks[i].height == H && masks[i].width == W,
            Errc::size_mismatch, "propagate_flow_ids: flow/mask resolution mismatch");
  FlowIdVolume vol;
  vol.frames = static_cast<int>(flows_fwd.size()) + 1;
  vol.height = H;
  vol.width = W;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  vol.ids.assign(plane * vol.frames, -1);
  for (std::size_t p = 0; p < plane; ++p) vol.ids[p] = static_cast<std::int64_t>(p);
  std::int64_t counter = static_cast<std::int64_t>(plane);

  constexpr std::int64_t kUnassigned = std::numeric_limits<std::int64_t>::max();
  std::vector<std::atomic<std::int64_t>> incoming(plane);
  for (int t = 0; t + 1 < vol.frames; ++t) {
    for (auto& slot : incoming) slot.store(kUnassigned, std::memory_order_relaxed);
    const FlowField& flow = flows_fwd[static_cast<std::size_t>(t)];
    const BoolMap& mask = masks[static_cast<std::size_t>(t)];
    const std::int64_t* src = vol.ids.data() + plane * t;
    parallel_for(0, H, [&](std::ptrdiff_t y) {
      for (int x = 0; x < W; ++x) {
        if (!mask.at(static_cast<int>(y), x)) continue;
        const long long qx = round_half_up(x + static_cast<double>(flow.u(static_cast<int>(y), x)));
        const long long qy = round_half_up(static_cast<double>(y) + static_cast<double>(flow.v(static_cast<int>(y), x)));
        if (qx < 0 || qx >= W || qy < 0 || qy >= H) continue;
        const std::int64_t id = src[static_cast<std::size_t>(y) * W + x];
        auto& slot = incoming[static_cast<std::size_t>(qy) * W + static_cast<std::size_t>(qx)];
        std::int64_t cur = slot.load(std::memory_order_relaxed);
        while (id < cur && !slot.compare_exchange_weak(cur, id, std::memory_order_relaxed)) {
        }
      }
    });
    std::int64_t* dst = vol.ids.data() + plane * (t + 1);
    for (std::size_t q = 0; q < plane; ++q) {
      const std::int64_t id = incoming[q].load(std::memory_order_relaxed);
      dst[q] = id == kUnassigned ? counter++ : id;
    }
  }
  vol.next_id = counter;
  return vol;
}

using QuantizedColor = std::array<std::uint8_t, 3>;

/// 7-bit codes floor(c * 127 + 0.5), clamped to [0, 127].
inline std::uint8_t quantize_channel(double c) {
  const double q = std::floor(c * 127.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 127.0));
}

inline std::vector<QuantizedColor> quantize_rgb(const Frame& frame) {
  std::vector<QuantizedColor> out(frame.pixels());
  for (std::size_t p = 0; p < out.size(); ++p)
    for (int c = 0; c < 3; ++c) out[p][static_cast<std::size_t>(c)] = quantize_channel(frame[3 * p + c]);
  return out;
}

using VoxelCoord = std::array<std::int64_t, 3>;

/// Voxel coordinates per pixel; entries with valid == 0 carry no voxel.
struct VoxelMap {
  int height = 0, width = 0;
  std::vector<VoxelCoord> coords;
  std::vector<std::uint8_t> valid;
};

/// Back-projects pixel (x, y) with depth d through K^-1 to camera space,
/// maps it to world space with the camera-to-world extrinsics and floors
/// world / voxel_size per axis. Pixel coordinates are integer positions.
inline VoxelMap voxelize(const DepthMap& depth, const CameraParams& cam, double voxel_size) {
  require(voxel_size > 0 && std::isfinite(voxel_size), Errc::invalid_argument, "voxel size must be positive");
  cam.validate();
  VoxelMap out;
  out.height = depth.height;
  out.width = depth.width;
  out.coords.assign(static_cast<std::size_t>(depth.height) * depth.width, VoxelCoord{0, 0, 0});
  out.valid.assign(out.coords.size(), 0);
  const double fx = cam.k(0, 0), skew = cam.k(0, 1), cx = cam.k(0, 2), fy = cam.k(1, 1), cy = cam.k(1, 2);
  parallel_for(0, depth.height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < depth.width; ++x) {
      if (!depth.is_valid(y, x)) continue;
      const double d = depth.at(y, x);
      const double yn = (y - cy) / fy;
      const double xn = (x - cx - skew * yn) / fx;
      const double cam_pt[3] = {xn * d, yn * d, d};
      const std::size_t p = static_cast<std::size_t>(y) * depth.width + x;
      for (int r = 0; r < 3; ++r) {
        const double w = cam.ext(r, 0) * cam_pt[0] + cam.ext(r, 1) * cam_pt[1] + cam.ext(r, 2) * cam_pt[2] + cam.ext(r, 3);
        out.coords[p][static_cast<std::size_t>(r)] = static_cast<std::int64_t>(std::floor(w / voxel_size));
      }
      out.valid[p] = 1;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Keys

/// kappa(x,y,t): flow ID, 7-bit color and an optional voxel. Pixels without a
/// voxel all carry the same "no voxel" marker, so they compare equal on that
/// component and can still merge through flow ID and color.
struct IndexKey {
  std::int64_t flow_id = 0;
  QuantizedColor qrgb{0, 0, 0};
  bool has_voxel = false;
  VoxelCoord voxel{0, 0, 0};

  bool operator==(const IndexKey&) const = default;
};

struct IndexKeyHash {
  std::size_t operator()(const IndexKey& k) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    };
    mix(static_cast<std::uint64_t>(k.flow_id));
    mix((std::uint64_t{k.qrgb[0]} << 16) | (std::uint64_t{k.qrgb[1]} << 8) | k.qrgb[2]);
    mix(k.has_voxel ? 1 : 0);
    for (auto v : k.voxel) mix(static_cast<std::uint64_t>(v));
    return static_cast<std::size_t>(h);
  }
};

/// Which components enter the key. Dropping a component can only merge
/// elements, never split them.
struct KeyOptions {
  bool use_flow_id = true;
  bool use_rgb = true;
  std::optional<double> voxel_size;  // voxel component only when set and depth is given
};

/// Dense element index per pixel, plus the distinct keys in first-occurrence
/// order and a CSR listing of each element's member pixels in scan order.
struct KeyVolume {
  int frames = 0, height = 0, width = 0;
  std::vector<IndexKey> keys;               // size N
  std::vector<std::uint32_t> index_map;     // size T*H*W, values in [0, N)
  std::vector<std::uint32_t> member_offsets;  // size N+1
  std::vector<std::uint32_t> members;         // pixel linear indices grouped by element

  std::size_t num_elements() const { return keys.size(); }
  std::size_t num_pixels() const { return index_map.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  /// N / (T H W) in percent.
  double compression_rate() const {
    return num_pixels() == 0 ? 0.0 : 100.0 * static_cast<double>(num_elements()) / static_cast<double>(num_pixels());
  }

  /// Assigns dense indices to distinct keys in (t, y, x) scan order and
  /// builds the member listing with a counting sort.
  static KeyVolume from_pixel_keys(int T, int H, int W, const std::vector<IndexKey>& pixel_keys) {
    require(pixel_keys.size() == static_cast<std::size_t>(T) * H * W, Errc::size_mismatch, "pixel key count");
    require(pixel_keys.size() < std::numeric_limits<std::uint32_t>::max(), Errc::dimension_overflow,
            "video too large for 32-bit element indices");
    KeyVolume kv;
    kv.frames = T;
    kv.height = H;
    kv.width = W;
    kv.index_map.resize(pixel_keys.size());
    std::unordered_map<IndexKey, std::uint32_t, IndexKeyHash> lookup;
    lookup.reserve(pixel_keys.size() / 2 + 1);
    for (std::size_t p = 0; p < pixel_keys.size(); ++p) {
      auto [it, inserted] = lookup.try_emplace(pixel_keys[p], static_cast<std::uint32_t>(kv.keys.size()));
      if (inserted) kv.keys.push_back(pixel_keys[p]);
      kv.index_map[p] = it->second;
    }
    kv.build_members();
    return kv;
  }

  void build_members() {
    member_offsets.assign(keys.size() + 1, 0);
    for (auto e : index_map) ++member_offsets[e + 1];
    for (std::size_t e = 0; e < keys.size(); ++e) member_offsets[e + 1] += member_offsets[e];
    members.resize(index_map.size());
    std::vector<std::uint32_t> cursor(member_offsets.begin(), member_offsets.end() - 1);
    for (std::size_t p = 0; p < index_map.size(); ++p) members[cursor[index_map[p]]++] = static_cast<std::uint32_t>(p);
  }
};

/// Optional depth input for voxel keys: one depth map and camera per frame.
struct DepthInput {
  std::vector<DepthMap> depth;
  std::vector<CameraParams> cameras;
};

/// kappa = (flow ID, 7-bit color of the SOURCE frame, optional voxel).
inline KeyVolume build_keys(const VideoVolume& source, const std::vector<FlowField>& flows_fwd,
                            const std::vector<BoolMap>& masks, const DepthInput* depth, const KeyOptions& opts) {
  const int T = source.frames(), H = source.height(), W = source.width();
  require(T >= 1, Errc::invalid_argument, "build_keys: empty video");
  std::optional<FlowIdVolume> ids;
  if (opts.use_flow_id && T > 1) {
    require(static_cast<int>(flows_fwd.size()) >= T - 1 && static_cast<int>(masks.size()) >= T - 1,
            Errc::invalid_argument, "build_keys: need T-1 forward flows and masks");
    ids = propagate_flow_ids(std::vector<FlowField>(flows_fwd.begin(), flows_fwd.begin() + (T - 1)),
                             std::vector<BoolMap>(masks.begin(), masks.begin() + (T - 1)));
    require(ids->height == H && ids->width == W, Errc::size_mismatch, "build_keys: flow resolution differs from video");
  }
  const bool use_voxel = opts.voxel_size.has_value() && depth != nullptr;
  if (use_voxel) {
    require(static_cast<int>(depth->depth.size()) >= T && static_cast<int>(depth->cameras.size()) >= T,
            Errc::invalid_argument, "build_keys: need one depth map and camera per frame");
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<IndexKey> pixel_keys(plane * T);
  parallel_for(0, T, [&](std::ptrdiff_t tt) {
    const int t = static_cast<int>(tt);
    std::vector<QuantizedColor> q;
    if (opts.use_rgb) q = quantize_rgb(source[t]);
    std::optional<VoxelMap> vox;
    if (use_voxel) {
      const DepthMap& d = depth->depth[static_cast<std::size_t>(t)];
      require(d.height == H && d.width == W, Errc::size_mismatch, "build_keys: depth resolution differs from video");
      vox = voxelize(d, depth->cameras[static_cast<std::size_t>(t)], *opts.voxel_size);
    }
    for (std::size_t p = 0; p < plane; ++p) {
      IndexKey& k = pixel_keys[plane * t + p];
      if (opts.use_flow_id) k.flow_id = ids ? ids->ids[plane * t + p] : static_cast<std::int64_t>(p);
      if (opts.use_rgb) k.qrgb = q[p];
      if (vox && vox->valid[p]) {
        k.has_voxel = true;
        k.voxel = vox->coords[p];
      }
    }
  });
  return KeyVolume::from_pixel_keys(T, H, W, pixel_keys);
}

// ---------------------------------------------------------------------------
// Gather / scatter

/// N x 3 canonical colors bound to the key volume they were gathered with.
struct UniqueVideoTensor {
  std::vector<double> values;  // N x 3, row-major
  std::shared_ptr<const KeyVolume> keys;

  std::size_t size() const { return values.size() / 3; }
};

/// U(n) = mean color of all member pixels of element n, summed in scan order.
inline UniqueVideoTensor gather(const VideoVolume& video, std::shared_ptr<const KeyVolume> keys) {
  require(keys != nullptr, Errc::invalid_argument, "gather: no key volume");
  require(video.frames() == keys->frames && video.height() == keys->height && video.width() == keys->width,
          Errc::size_mismatch, "gather: video shape differs from key volume");
  const std::size_t plane = keys->plane();
  UniqueVideoTensor u;
  u.values.assign(keys->num_elements() * 3, 0.0);
  parallel_for(0, static_cast<std::ptrdiff_t>(keys->num_elements()), [&](std::ptrdiff_t ee) {
    const auto e = static_cast<std::size_t>(ee);
    double sum[3] = {0, 0, 0};
    const std::uint32_t lo = keys->member_offsets[e], hi = keys->member_offsets[e + 1];
    for (std::uint32_t i = lo; i < hi; ++i) {
      const std::size_t p = keys->members[i];
      const Frame& f = video[static_cast<int>(p / plane)];
      for (int c = 0; c < 3; ++c) sum[c] += f[(p % plane) * 3 + static_cast<std::size_t>(c)];
    }
    const double count = hi - lo;
    for (int c = 0; c < 3; ++c) u.values[e * 3 + static_cast<std::size_t>(c)] = sum[c] / count;
  });
  u.keys = std::move(keys);
  return u;
}

inline Frame scatter_frame(const UniqueVideoTensor& u, int t) {
  const KeyVolume& kv = *u.keys;
  require(t >= 0 && t < kv.frames, Errc::invalid_argument, "scatter_frame: frame index out of range");
  Frame f(kv.height, kv.width);
  const std::size_t plane = kv.plane();
  const std::uint32_t* idx = kv.index_map.data() + plane * t;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) f[p * 3 + c] = u.values[static_cast<std::size_t>(idx[p]) * 3 + c];
  return f;
}

/// Every pixel takes its element's color.
inline VideoVolume scatter(const UniqueVideoTensor& u) {
  require(u.keys != nullptr, Errc::invalid_argument, "scatter: no key volume");
  std::vector<Frame> frames(static_cast<std::size_t>(u.keys->frames));
  parallel_for(0, u.keys->frames, [&](std::ptrdiff_t t) { frames[static_cast<std::size_t>(t)] = scatter_frame(u, static_cast<int>(t)); });
  return VideoVolume(std::move(frames));
}

// ---------------------------------------------------------------------------
// Stage II

struct StageTwoConfig {
  double lambda_u = 0.8;
  double lambda_tv = 0.01;
  int epochs = 70;
  int batch_size = 16;
  double lr = 0.05;
  std::optional<double> voxel_size;
  std::uint64_t seed = 0;

  void validate() const {
    require(lambda_u >= 0 && lambda_u <= 1, Errc::config, "stage2.lambda_u must be in [0,1]");
    require(lambda_tv >= 0, Errc::config, "stage2.lambda_tv must be >= 0");
    require(epochs >= 1, Errc::config, "stage2.epochs must be >= 1");
    require(batch_size >= 1, Errc::config, "stage2.batch_size must be >= 1");
    require(lr > 0, Errc::config, "stage2.lr must be positive");
    if (voxel_size) require(*voxel_size > 0, Errc::config, "stage2.voxel_size must be positive");
  }
};

/// Loss of one Stage II entry with gradients on the scattered frames t and t+1.
struct StageTwoTerm {
  double value = 0;
  Frame grad_current;
  std::optional<Frame> grad_next;
};

/// lambda_tv TV(S_t) + (1-lambda_u) (1 - SSIM(S_t, target_t))
///   + lambda_u L1_M(S_t, Warp(S_{t+1})), with S = scatter(U).
/// For t = T-1 the warp term is absent.
inline StageTwoTerm stage2_frame_loss(int t, const UniqueVideoTensor& u, const VideoVolume& target,
                                      const std::vector<WarpPlan>& fwd_plans, const std::vector<SoftMask>& masks,
                                      const StageTwoConfig& cfg) {
  const int T = target.frames();
  require(t >= 0 && t < T, Errc::invalid_argument, "stage2_loss: frame index out of range");
  const Frame current = scatter_frame(u, t);
  StageTwoTerm term;
  term.grad_current = Frame(current.height(), current.width());
  if (cfg.lambda_tv > 0) {
    const LossValue tv = tv_loss(current);
    term.value += cfg.lambda_tv * tv.value;
    for (std::size_t i = 0; i < tv.gradient.size(); ++i) term.grad_current[i] += cfg.lambda_tv * tv.gradient[i];
  }
  if (cfg.lambda_u < 1) {
    const LossValue ss = ssim_loss(current, target[t]);
    term.value += (1 - cfg.lambda_u) * ss.value;
    for (std::size_t i = 0; i < ss.gradient.size(); ++i) term.grad_current[i] += (1 - cfg.lambda_u) * ss.gradient[i];
  }
  if (t < T - 1 && cfg.lambda_u > 0) {
    require(t < static_cast<int>(fwd_plans.size()), Errc::missing_file,
            "missing forward flow for pair (" + std::to_string(t) + "," + std::to_string(t + 1) + ")");
    require(t < static_cast<int>(masks.size()), Errc::invalid_argument, "stage2_loss: missing mask");
    const WarpPlan& plan = fwd_plans[static_cast<std::size_t>(t)];
    const Frame next = scatter_frame(u, t + 1);
    const Frame warped = plan.apply(next);
    SoftMask weight = masks[static_cast<std::size_t>(t)];
    for (std::size_t p = 0; p < weight.size(); ++p)
      if (!plan.tap(p).valid) weight[p] = 0;
    const LossValue align = l1_loss(current, warped, &weight);
    term.value += cfg.lambda_u * align.value;
    Frame grad_warped(current.height(), current.width());
    for (std::size_t i = 0; i < align.gradient.size(); ++i) {
      term.grad_current[i] += cfg.lambda_u * align.gradient[i];
      grad_warped[i] = -cfg.lambda_u * align.gradient[i];
    }
    Frame grad_next(current.height(), current.width());
    plan.accumulate_adjoint(grad_warped, grad_next);
    term.grad_next = std::move(grad_next);
  }
  return term;
}

/// Sums pixel gradients of whole frames into element gradients. `frame_grads`
/// holds one (possibly empty) gradient frame per video frame; `touched`
/// receives 1 for elements with a member in a frame that has a gradient.
inline void reduce_to_elements(const KeyVolume& kv, const std::vector<std::optional<Frame>>& frame_grads,
                               std::vector<double>& grad_u, std::vector<std::uint8_t>* touched) {
  grad_u.assign(kv.num_elements() * 3, 0.0);
  if (touched) touched->assign(kv.num_elements() * 3, 0);
  const std::size_t plane = kv.plane();
  parallel_for(0, static_cast<std::ptrdiff_t>(kv.num_elements()), [&](std::ptrdiff_t ee) {
    const auto e = static_cast<std::size_t>(ee);
    double sum[3] = {0, 0, 0};
    bool hit = false;
    for (std::uint32_t i = kv.member_offsets[e]; i < kv.member_offsets[e + 1]; ++i) {
      const std::size_t p = kv.members[i];
      const auto& g = frame_grads[p / plane];
      if (!g) continue;
      hit = true;
      for (std::size_t c = 0; c < 3; ++c) sum[c] += (*g)[(p % plane) * 3 + c];
    }
    for (std::size_t c = 0; c < 3; ++c) {
      grad_u[e * 3 + c] = sum[c];
      if (touched) (*touched)[e * 3 + c] = hit ? 1 : 0;
    }
  });
}

/// Stage II loss of entry t with its gradient with respect to the U values.
struct StageTwoLoss {
  double value = 0;
  std::vector<double> grad_u;  // N x 3
};

inline StageTwoLoss stage2_loss(int t, const UniqueVideoTensor& u, const VideoVolume& target,
                                const std::vector<WarpPlan>& fwd_plans, const std::vector<SoftMask>& masks,
                                const StageTwoConfig& cfg) {
  StageTwoTerm term = stage2_frame_loss(t, u, target, fwd_plans, masks, cfg);
  std::vector<std::optional<Frame>> grads(static_cast<std::size_t>(target.frames()));
  grads[static_cast<std::size_t>(t)] = std::move(term.grad_current);
  if (term.grad_next) grads[static_cast<std::size_t>(t + 1)] = std::move(term.grad_next);
  StageTwoLoss out;
  out.value = term.value;
  reduce_to_elements(*u.keys, grads, out.grad_u, nullptr);
  return out;
}

inline StageTwoLoss stage2_loss(int t, const UniqueVideoTensor& u, const VideoVolume& target,
                                const std::vector<FlowField>& fwd_flows, const std::vector<SoftMask>& masks,
                                const StageTwoConfig& cfg) {
  return stage2_loss(t, u, target, make_warp_plans(fwd_flows), masks, cfg);
}

/// Mean of all T Stage II entries.
inline double stage2_objective(const UniqueVideoTensor& u, const VideoVolume& target,
                               const std::vector<WarpPlan>& plans, const std::vector<SoftMask>& masks,
                               const StageTwoConfig& cfg) {
  const int T = target.frames();
  std::vector<double> values(static_cast<std::size_t>(T));
  parallel_for(0, T, [&](std::ptrdiff_t t) {
    values[static_cast<std::size_t>(t)] = stage2_frame_loss(static_cast<int>(t), u, target, plans, masks, cfg).value;
  });
  double sum = 0;
  for (double v : values) sum += v;
  return sum / T;
}

struct StageTwoResult {
  UniqueVideoTensor uvt;
  VideoVolume output;  // scatter(U), clamped to [0,1]
  std::vector<double> loss_curve;
};

/// Initializes U by gathering the Stage I output, then runs Adam (fixed lr)
/// over shuffled batches of entries 0..T-1; each batch steps the elements
/// that have members in the frames it touched.
inline StageTwoResult run_stage2(const VideoVolume& aligned, std::shared_ptr<const KeyVolume> keys,
                                 const std::vector<FlowField>& fwd_flows, const std::vector<SoftMask>& masks,
                                 const StageTwoConfig& cfg) {
  cfg.validate();
  const int T = aligned.frames();
  require(T >= 2, Errc::invalid_argument, "stage 2 needs at least two frames");
  for (int t = 0; t + 1 < T; ++t)
    require(t < static_cast<int>(fwd_flows.size()), Errc::missing_file,
            "missing forward flow for pair (" + std::to_string(t) + "," + std::to_string(t + 1) + ")");
  require(static_cast<int>(masks.size()) >= T - 1, Errc::invalid_argument, "stage 2 needs T-1 masks");
  const std::vector<WarpPlan> plans = make_warp_plans(fwd_flows);

  StageTwoResult result;
  result.uvt = gather(aligned, std::move(keys));
  UniqueVideoTensor& u = result.uvt;
  AdamState adam(u.values.size(), cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> grad_u;
  std::vector<std::uint8_t> touched;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(T, cfg.batch_size, rng)) {
      std::vector<StageTwoTerm> terms(batch.size());
      parallel_for(0, static_cast<std::ptrdiff_t>(batch.size()), [&](std::ptrdiff_t i) {
        terms[static_cast<std::size_t>(i)] = stage2_frame_loss(batch[static_cast<std::size_t>(i)], u, aligned, plans, masks, cfg);
      });
      const double scale = 1.0 / static_cast<double>(batch.size());
      std::vector<std::optional<Frame>> frame_grads(static_cast<std::size_t>(T));
      auto add = [&](int t, const Frame& g) {
        auto& slot = frame_grads[static_cast<std::size_t>(t)];
        if (!slot) slot = Frame(g.height(), g.width());
        for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += scale * g[i];
      };
      for (std::size_t i = 0; i < batch.size(); ++i) {
        add(batch[i], terms[i].grad_current);
        if (terms[i].grad_next) add(batch[i] + 1, *terms[i].grad_next);
      }
      reduce_to_elements(*u.keys, frame_grads, grad_u, &touched);
      adam_step(adam, u.values, grad_u, touched);
    }
    result.loss_curve.push_back(stage2_objective(u, aligned, plans, masks, cfg));
  }
  result.output = scatter(u);
  for (auto& f : result.output.all()) f = clamp_unit(std::move(f));
  return result;
}

/// Builds keys from the SOURCE video (binarized masks, optional depth) and
/// runs Stage II on the aligned video with the same index map.
inline StageTwoResult run_stage2(const VideoVolume& aligned, const VideoVolume& source,
                                 const std::vector<FlowField>& fwd_flows, const std::vector<SoftMask>& masks,
                                 const DepthInput* depth, const StageTwoConfig& cfg) {
  require(aligned.frames() == source.frames() && aligned.height() == source.height() &&
              aligned.width() == source.width(),
          Errc::size_mismatch, "aligned and source videos differ in shape");
  std::vector<BoolMap> binary;
  for (const auto& m : masks) binary.push_back(binarize_mask(m));
  KeyOptions opts;
  opts.voxel_size = cfg.voxel_size;
  auto keys = std::make_shared<const KeyVolume>(build_keys(source, fwd_flows, binary, depth, opts));
  return run_stage2(aligned, std::move(keys), fwd_flows, masks, cfg);
}

}  // namespace uvtc
