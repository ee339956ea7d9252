#pragma once

// Stage I: per-frame 3x4 affine color transforms fitted so that adjacent
// frames agree after flow warping while each frame stays close to its input.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/objectives.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"
#include "uvtc/warp_mask.hpp"

namespace uvtc {

/// E = [A | b], row-major 3x4, mapping color c to A c + b.
struct AppearanceEmbedding {
  std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  int frame = 0;

  static AppearanceEmbedding identity(int frame_index) {
    AppearanceEmbedding e;
    e.frame = frame_index;
    return e;
  }

  double a(int r, int c) const { return m[static_cast<std::size_t>(r * 4 + c)]; }
  double b(int r) const { return m[static_cast<std::size_t>(r * 4 + 3)]; }

  /// Largest absolute deviation from [I | 0].
  double distance_from_identity() const {
    const AppearanceEmbedding id;
    double d = 0;
    for (std::size_t i = 0; i < 12; ++i) d = std::max(d, std::fabs(m[i] - id.m[i]));
    return d;
  }

  bool operator==(const AppearanceEmbedding&) const = default;
};

using EmbeddingGradient = std::array<double, 12>;

/// Per-pixel A c + b. The result is not clamped.
inline Frame apply_embedding(const AppearanceEmbedding& e, const Frame& frame) {
  Frame out(frame.height(), frame.width());
  for (std::size_t p = 0; p < frame.pixels(); ++p) {
    const double r = frame[3 * p], g = frame[3 * p + 1], b = frame[3 * p + 2];
    for (int i = 0; i < 3; ++i) out[3 * p + i] = e.a(i, 0) * r + e.a(i, 1) * g + e.a(i, 2) * b + e.b(i);
  }
  return out;
}

/// Pulls a gradient on the transformed frame back onto the 12 parameters:
/// dA_ij = sum_p G_i(p) c_j(p), db_i = sum_p G_i(p).
inline EmbeddingGradient embedding_gradient(const Frame& input, const Frame& out_grad) {
  require(input.same_shape(out_grad), Errc::size_mismatch, "embedding_gradient: size mismatch");
  EmbeddingGradient g{};
  for (std::size_t p = 0; p < input.pixels(); ++p) {
    const double c[4] = {input[3 * p], input[3 * p + 1], input[3 * p + 2], 1.0};
    for (int i = 0; i < 3; ++i) {
      const double gi = out_grad[3 * p + i];
      for (int j = 0; j < 4; ++j) g[static_cast<std::size_t>(i * 4 + j)] += gi * c[j];
    }
  }
  return g;
}

struct StageOneConfig {
  double lambda_e = 0.8;
  int epochs = 35;
  int batch_size = 16;
  double lr_start = 0.01;
  double lr_end = 0.001;
  double lambda_dssim = 0.2;
  MaskConfig mask;
  std::uint64_t seed = 0;

  void validate() const {
    require(lambda_e >= 0 && lambda_e <= 1, Errc::config, "stage1.lambda_e must be in [0,1]");
    require(epochs >= 1, Errc::config, "stage1.epochs must be >= 1");
    require(batch_size >= 1, Errc::config, "stage1.batch_size must be >= 1");
    require(lr_start > 0 && lr_end > 0, Errc::config, "stage1 learning rates must be positive");
    require(lambda_dssim >= 0 && lambda_dssim <= 1, Errc::config, "stage1.lambda_dssim must be in [0,1]");
    mask.validate();
  }
};

/// Seeded Fisher-Yates shuffle driven only by raw mt19937_64 output, so the
/// permutation is identical across standard library implementations.
inline void seeded_shuffle(std::vector<int>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do r = rng();
    while (r >= limit);
    std::swap(items[i - 1], items[static_cast<std::size_t>(r % bound)]);
  }
}

/// Splits a shuffled 0..count-1 into consecutive batches.
inline std::vector<std::vector<int>> shuffled_batches(int count, int batch_size, std::mt19937_64& rng) {
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  seeded_shuffle(order, rng);
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size))
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + static_cast<std::size_t>(batch_size))));
  return batches;
}

inline std::vector<WarpPlan> make_warp_plans(const std::vector<FlowField>& flows) {
  std::vector<WarpPlan> plans;
  plans.reserve(flows.size());
  for (const auto& f : flows) plans.emplace_back(f);
  return plans;
}

/// Loss of one Stage I entry with gradients for E_t and E_{t+1}.
struct StageOneTerm {
  double value = 0;
  EmbeddingGradient grad_current{};
  EmbeddingGradient grad_next{};
};

/// (1-lambda_e) L_photo(E_t I_t, I_t) + lambda_e L1_M(E_t I_t, Warp(E_{t+1} I_{t+1})).
/// For t = T-1 only the photometric part exists; it anchors the last frame.
inline StageOneTerm stage1_loss(int t, const std::vector<AppearanceEmbedding>& embeddings, const VideoVolume& relit,
                                const std::vector<WarpPlan>& fwd_plans, const std::vector<SoftMask>& masks,
                                const StageOneConfig& cfg) {
  const int T = relit.frames();
  require(t >= 0 && t < T, Errc::invalid_argument, "stage1_loss: frame index out of range");
  require(static_cast<int>(embeddings.size()) == T, Errc::size_mismatch, "stage1_loss: one embedding per frame");
  const Frame& input = relit[t];
  const Frame transformed = apply_embedding(embeddings[static_cast<std::size_t>(t)], input);
  const LossValue photo = photometric_loss(transformed, input, cfg.lambda_dssim);
  StageOneTerm term;
  term.value = (1 - cfg.lambda_e) * photo.value;
  Frame grad_t = photo.gradient;
  for (auto& g : grad_t.values()) g *= (1 - cfg.lambda_e);

  if (t < T - 1) {
    require(t < static_cast<int>(fwd_plans.size()), Errc::missing_file,
            "missing forward flow for pair (" + std::to_string(t) + "," + std::to_string(t + 1) + ")");
    require(t < static_cast<int>(masks.size()), Errc::invalid_argument, "stage1_loss: missing mask");
    const WarpPlan& plan = fwd_plans[static_cast<std::size_t>(t)];
    const Frame& next_input = relit[t + 1];
    const Frame next = apply_embedding(embeddings[static_cast<std::size_t>(t + 1)], next_input);
    const Frame warped = plan.apply(next);
    SoftMask weight = masks[static_cast<std::size_t>(t)];
    for (std::size_t p = 0; p < weight.size(); ++p)
      if (!plan.tap(p).valid) weight[p] = 0;
    const LossValue align = l1_loss(transformed, warped, &weight);
    term.value += cfg.lambda_e * align.value;
    Frame grad_warped(input.height(), input.width());
    for (std::size_t i = 0; i < grad_t.size(); ++i) {
      grad_t[i] += cfg.lambda_e * align.gradient[i];
      grad_warped[i] = -cfg.lambda_e * align.gradient[i];
    }
    Frame grad_next(input.height(), input.width());
    plan.accumulate_adjoint(grad_warped, grad_next);
    term.grad_next = embedding_gradient(next_input, grad_next);
  }
  term.grad_current = embedding_gradient(input, grad_t);
  return term;
}

/// Convenience overload building warp plans from flows.
inline StageOneTerm stage1_loss(int t, const std::vector<AppearanceEmbedding>& embeddings, const VideoVolume& relit,
                                const std::vector<FlowField>& fwd_flows, const std::vector<SoftMask>& masks,
                                const StageOneConfig& cfg) {
  return stage1_loss(t, embeddings, relit, make_warp_plans(fwd_flows), masks, cfg);
}

struct StageOneResult {
  std::vector<AppearanceEmbedding> embeddings;
  VideoVolume aligned;               // clamped to [0,1]
  std::vector<double> loss_curve;    // full objective after each epoch
};

/// Mean of all T Stage I entries at the current embeddings.
inline double stage1_objective(const std::vector<AppearanceEmbedding>& embeddings, const VideoVolume& relit,
                               const std::vector<WarpPlan>& plans, const std::vector<SoftMask>& masks,
                               const StageOneConfig& cfg) {
  const int T = relit.frames();
  std::vector<double> values(static_cast<std::size_t>(T));
  parallel_for(0, T, [&](std::ptrdiff_t t) {
    values[static_cast<std::size_t>(t)] = stage1_loss(static_cast<int>(t), embeddings, relit, plans, masks, cfg).value;
  });
  double sum = 0;
  for (double v : values) sum += v;
  return sum / T;
}

inline Frame clamp_unit(Frame f) {
  for (auto& v : f.values()) v = std::clamp(v, 0.0, 1.0);
  return f;
}

inline VideoVolume apply_embeddings(const std::vector<AppearanceEmbedding>& embeddings, const VideoVolume& relit,
                                    bool clamp = true) {
  require(static_cast<int>(embeddings.size()) == relit.frames(), Errc::size_mismatch,
          "one embedding per frame required");
  std::vector<Frame> frames(static_cast<std::size_t>(relit.frames()));
  parallel_for(0, relit.frames(), [&](std::ptrdiff_t t) {
    Frame f = apply_embedding(embeddings[static_cast<std::size_t>(t)], relit[static_cast<int>(t)]);
    frames[static_cast<std::size_t>(t)] = clamp ? clamp_unit(std::move(f)) : std::move(f);
  });
  return VideoVolume(std::move(frames));
}

/// Optimizes all embeddings with Adam: per epoch the T entries (pairs
/// 0..T-2 plus the anchor entry T-1) are shuffled into batches, each batch
/// takes one step on the embeddings it touches, and the learning rate follows
/// lr_schedule per epoch.
inline StageOneResult run_stage1(const VideoVolume& relit, const std::vector<FlowField>& fwd_flows,
                                 const std::vector<SoftMask>& masks, const StageOneConfig& cfg) {
  cfg.validate();
  const int T = relit.frames();
  require(T >= 2, Errc::invalid_argument, "stage 1 needs at least two frames");
  for (int t = 0; t + 1 < T; ++t)
    require(t < static_cast<int>(fwd_flows.size()), Errc::missing_file,
            "missing forward flow for pair (" + std::to_string(t) + "," + std::to_string(t + 1) + ")");
  require(static_cast<int>(masks.size()) >= T - 1, Errc::invalid_argument, "stage 1 needs T-1 masks");

  const std::vector<WarpPlan> plans = make_warp_plans(fwd_flows);
  std::vector<AppearanceEmbedding> embeddings;
  for (int t = 0; t < T; ++t) embeddings.push_back(AppearanceEmbedding::identity(t));

  std::vector<double> params(static_cast<std::size_t>(12 * T));
  for (int t = 0; t < T; ++t)
    std::copy(embeddings[static_cast<std::size_t>(t)].m.begin(), embeddings[static_cast<std::size_t>(t)].m.end(),
              params.begin() + 12 * t);
  AdamState adam(params.size(), cfg.lr_start);
  std::mt19937_64 rng(cfg.seed);
  StageOneResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = lr_schedule(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end);
    for (const auto& batch : shuffled_batches(T, cfg.batch_size, rng)) {
      std::vector<StageOneTerm> terms(batch.size());
      parallel_for(0, static_cast<std::ptrdiff_t>(batch.size()), [&](std::ptrdiff_t i) {
        terms[static_cast<std::size_t>(i)] = stage1_loss(batch[static_cast<std::size_t>(i)], embeddings, relit, plans, masks, cfg);
      });
      std::vector<double> grad(params.size(), 0.0);
      std::vector<std::uint8_t> touched(params.size(), 0);
      const double scale = 1.0 / static_cast<double>(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const int t = batch[i];
        for (std::size_t k = 0; k < 12; ++k) {
          grad[static_cast<std::size_t>(12 * t) + k] += scale * terms[i].grad_current[k];
          touched[static_cast<std::size_t>(12 * t) + k] = 1;
        }
        if (t + 1 < T)
          for (std::size_t k = 0; k < 12; ++k) {
            grad[static_cast<std::size_t>(12 * (t + 1)) + k] += scale * terms[i].grad_next[k];
            touched[static_cast<std::size_t>(12 * (t + 1)) + k] = 1;
          }
      }
      adam_step(adam, params, grad, touched);
      for (int t = 0; t < T; ++t)
        std::copy(params.begin() + 12 * t, params.begin() + 12 * (t + 1), embeddings[static_cast<std::size_t>(t)].m.begin());
    }
    result.loss_curve.push_back(stage1_objective(embeddings, relit, plans, masks, cfg));
  }
  result.aligned = apply_embeddings(embeddings, relit, /*clamp=*/true);
  result.embeddings = std::move(embeddings);
  return result;
}

/// Computes source-video masks, then runs Stage I on the relit video.
inline StageOneResult run_stage1(const VideoVolume& relit, const VideoVolume& source,
                                 const std::vector<FlowField>& fwd_flows, const std::vector<FlowField>& bwd_flows,
                                 const StageOneConfig& cfg) {
  require(relit.frames() == source.frames() && relit.height() == source.height() && relit.width() == source.width(),
          Errc::size_mismatch, "relit and source videos differ in shape");
  return run_stage1(relit, fwd_flows, compute_masks(source, fwd_flows, bwd_flows, cfg.mask), cfg);
}

// ---------------------------------------------------------------------------
// Embeddings text file: "<frame> m00 m01 ... m23" per line.

inline void save_embeddings(const std::filesystem::path& path, const std::vector<AppearanceEmbedding>& embeddings) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::missing_file, "cannot write " + path.string());
  char buf[32];
  for (const auto& e : embeddings) {
    out << e.frame;
    for (double v : e.m) {
      std::snprintf(buf, sizeof(buf), " %.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

inline std::vector<AppearanceEmbedding> load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::missing_file, "cannot open " + path.string());
  std::vector<AppearanceEmbedding> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    AppearanceEmbedding e;
    require(static_cast<bool>(fields >> e.frame), Errc::malformed_header, path.string() + ": bad frame index");
    for (auto& v : e.m) {
      std::string tok;
      require(static_cast<bool>(fields >> tok), Errc::malformed_header, path.string() + ": expected 12 values");
      v = std::strtod(tok.c_str(), nullptr);
    }
    require(e.frame == static_cast<int>(out.size()), Errc::malformed_header, path.string() + ": frames out of order");
    out.push_back(e);
  }
  return out;
}

}  // namespace uvtc
