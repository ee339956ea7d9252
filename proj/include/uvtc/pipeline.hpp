#pragma once

// End-to-end orchestration: configuration, input loading, the two
// optimization stages, metrics and the individual stage commands.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/exposure_stage.hpp"
#include "uvtc/media_io.hpp"
#include "uvtc/metrics.hpp"
#include "uvtc/multiaxis_noise.hpp"
#include "uvtc/parallel.hpp"
#include "uvtc/types.hpp"
#include "uvtc/uvt_core.hpp"
#include "uvtc/warp_mask.hpp"

namespace uvtc::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Flat "key = value" configuration

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& what = "config") {
    KeyValueConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, Errc::config, what + ":" + std::to_string(line_no) + ": expected key = value");
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static KeyValueConfig load(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), Errc::config, "cannot open config file " + path.string());
    return parse(in, path.string());
  }

  /// Applies a "key=value" override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos, Errc::config, "override must be key=value: " + assignment);
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    require(!key.empty(), Errc::config, "empty config key");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback = "") const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(values_.at(key), &used);
      require(used == values_.at(key).size(), Errc::config, "");
      return v;
    } catch (const std::exception&) {
      throw Error(Errc::config, "config key " + key + " is not a number: '" + values_.at(key) + "'");
    }
  }
  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(values_.at(key), &used);
      require(used == values_.at(key).size(), Errc::config, "");
      return v;
    } catch (const std::exception&) {
      throw Error(Errc::config, "config key " + key + " is not an integer: '" + values_.at(key) + "'");
    }
  }
  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = values_.at(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(Errc::config, "config key " + key + " is not a boolean: '" + v + "'");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

/// Every recognized configuration key with its default ("" = unset).
inline const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"source_dir", ""},
      {"source_pattern", R"((\d+)\.png)"},
      {"relit_dir", ""},
      {"relit_pattern", R"((\d+)\.png)"},
      {"flow_fwd", ""},
      {"flow_bwd", ""},
      {"depth", ""},
      {"cameras", ""},
      {"output_dir", "out"},
      {"seed", "0"},
      {"threads", "1"},
      {"dump_uvt", "false"},
      {"mask.beta", "50"},
      {"mask.xi_mode", "statistics"},
      {"mask.xi_flow", ""},
      {"mask.xi_rgb", ""},
      {"mask.xi_flow_min", "0.5"},
      {"mask.xi_rgb_min", "0.1"},
      {"mask.flow_error_direction", "as_written"},
      {"stage1.lambda_e", "0.8"},
      {"stage1.epochs", "35"},
      {"stage1.batch_size", "16"},
      {"stage1.lr_start", "0.01"},
      {"stage1.lr_end", "0.001"},
      {"stage1.lambda_dssim", "0.2"},
      {"stage2.lambda_u", "0.8"},
      {"stage2.lambda_tv", "0.01"},
      {"stage2.epochs", "70"},
      {"stage2.batch_size", "16"},
      {"stage2.lr", "0.05"},
      {"stage2.voxel_size", ""},
      {"stage2.embeddings", ""},
      {"metrics.warp_ssim", "true"},
      {"metrics.reconstruction", "true"},
      {"metrics.video_dir", ""},
      {"noise.eps_xy", ""},
      {"noise.eps_yt", ""},
      {"noise.output", ""},
      {"noise.step", "0"},
      {"noise.gamma_start", "0.2"},
      {"noise.gamma_end", "0.002"},
      {"noise.steps", "25"},
      {"noise.swap_weights", "false"},
  };
  return keys;
}

struct NoiseCombineConfig {
  std::string eps_xy, eps_yt, output;
  int step = 0;
  noise::GammaSchedule schedule;
  bool swap_weights = false;
};

struct PipelineConfig {
  std::string source_dir, source_pattern = R"((\d+)\.png)";
  std::string relit_dir, relit_pattern = R"((\d+)\.png)";
  std::string flow_fwd, flow_bwd;
  std::string depth, cameras;
  std::string output_dir = "out";
  std::string embeddings_path;  // stage2 input; defaults to <output_dir>/embeddings.txt
  std::string metrics_video_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  bool dump_uvt = false;
  bool metric_warp_ssim = true;
  bool metric_reconstruction = true;
  MaskConfig mask;
  StageOneConfig stage1;
  StageTwoConfig stage2;
  NoiseCombineConfig noise;

  static PipelineConfig from(const KeyValueConfig& kv) {
    std::map<std::string, std::string> known(config_keys().begin(), config_keys().end());
    for (const auto& [key, value] : kv.values())
      require(known.contains(key), Errc::config, "unknown config key: " + key);
    PipelineConfig c;
    c.source_dir = kv.str("source_dir");
    c.source_pattern = kv.str("source_pattern", c.source_pattern);
    c.relit_dir = kv.str("relit_dir");
    c.relit_pattern = kv.str("relit_pattern", c.relit_pattern);
    c.flow_fwd = kv.str("flow_fwd");
    c.flow_bwd = kv.str("flow_bwd");
    c.depth = kv.str("depth");
    c.cameras = kv.str("cameras");
    c.output_dir = kv.str("output_dir", c.output_dir);
    c.embeddings_path = kv.str("stage2.embeddings");
    c.metrics_video_dir = kv.str("metrics.video_dir");
    const long long seed = kv.integer("seed", 0);
    require(seed >= 0, Errc::config, "seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);
    c.threads = static_cast<int>(kv.integer("threads", 1));
    require(c.threads >= 1, Errc::config, "threads must be >= 1");
    c.dump_uvt = kv.boolean("dump_uvt", false);
    c.metric_warp_ssim = kv.boolean("metrics.warp_ssim", true);
    c.metric_reconstruction = kv.boolean("metrics.reconstruction", true);

    c.mask.beta = kv.real("mask.beta", c.mask.beta);
    const std::string mode = kv.str("mask.xi_mode", "statistics");
    require(mode == "statistics" || mode == "explicit", Errc::config, "mask.xi_mode must be statistics|explicit");
    c.mask.xi_mode = mode == "explicit" ? ThresholdMode::explicit_values : ThresholdMode::statistics;
    if (kv.has("mask.xi_flow") && !kv.str("mask.xi_flow").empty()) c.mask.xi_flow = kv.real("mask.xi_flow", 0);
    if (kv.has("mask.xi_rgb") && !kv.str("mask.xi_rgb").empty()) c.mask.xi_rgb = kv.real("mask.xi_rgb", 0);
    c.mask.xi_flow_min = kv.real("mask.xi_flow_min", c.mask.xi_flow_min);
    c.mask.xi_rgb_min = kv.real("mask.xi_rgb_min", c.mask.xi_rgb_min);
    const std::string dir = kv.str("mask.flow_error_direction", "as_written");
    require(dir == "as_written" || dir == "forward", Errc::config,
            "mask.flow_error_direction must be as_written|forward");
    c.mask.flow_error_direction = dir == "forward" ? FlowErrorDirection::forward : FlowErrorDirection::as_written;

    c.stage1.lambda_e = kv.real("stage1.lambda_e", c.stage1.lambda_e);
    c.stage1.epochs = static_cast<int>(kv.integer("stage1.epochs", c.stage1.epochs));
    c.stage1.batch_size = static_cast<int>(kv.integer("stage1.batch_size", c.stage1.batch_size));
    c.stage1.lr_start = kv.real("stage1.lr_start", c.stage1.lr_start);
    c.stage1.lr_end = kv.real("stage1.lr_end", c.stage1.lr_end);
    c.stage1.lambda_dssim = kv.real("stage1.lambda_dssim", c.stage1.lambda_dssim);
    c.stage1.mask = c.mask;
    c.stage1.seed = c.seed;

    c.stage2.lambda_u = kv.real("stage2.lambda_u", c.stage2.lambda_u);
    c.stage2.lambda_tv = kv.real("stage2.lambda_tv", c.stage2.lambda_tv);
    c.stage2.epochs = static_cast<int>(kv.integer("stage2.epochs", c.stage2.epochs));
    c.stage2.batch_size = static_cast<int>(kv.integer("stage2.batch_size", c.stage2.batch_size));
    c.stage2.lr = kv.real("stage2.lr", c.stage2.lr);
    if (kv.has("stage2.voxel_size") && !kv.str("stage2.voxel_size").empty())
      c.stage2.voxel_size = kv.real("stage2.voxel_size", kOutdoorVoxelSize);
    c.stage2.seed = c.seed + 1;

    c.noise.eps_xy = kv.str("noise.eps_xy");
    c.noise.eps_yt = kv.str("noise.eps_yt");
    c.noise.output = kv.str("noise.output");
    c.noise.step = static_cast<int>(kv.integer("noise.step", 0));
    c.noise.schedule.gamma_start = kv.real("noise.gamma_start", c.noise.schedule.gamma_start);
    c.noise.schedule.gamma_end = kv.real("noise.gamma_end", c.noise.schedule.gamma_end);
    c.noise.schedule.steps = static_cast<int>(kv.integer("noise.steps", c.noise.schedule.steps));
    c.noise.swap_weights = kv.boolean("noise.swap_weights", false);

    c.mask.validate();
    c.stage1.validate();
    c.stage2.validate();
    return c;
  }

  fs::path out() const { return fs::path(output_dir); }
  fs::path embeddings_file() const { return embeddings_path.empty() ? out() / "embeddings.txt" : fs::path(embeddings_path); }
};

// ---------------------------------------------------------------------------
// Inputs

struct Inputs {
  VideoVolume source;
  VideoVolume relit;
  std::vector<FlowField> fwd;  // fwd[t]: t -> t+1, t in [0, T-2]
  std::vector<FlowField> bwd;  // bwd[t]: t -> t-1, t in [1, T-1]; bwd[0] is a zero placeholder
  std::optional<DepthInput> depth;
  std::vector<SoftMask> masks;
  std::vector<BoolMap> binary_masks;
};

inline void require_key(const std::string& value, const std::string& key) {
  require(!value.empty(), Errc::config, "missing required config key: " + key);
}

inline FlowField load_flow_for(const std::string& pattern, int t, int from, int to, FlowDirection dir,
                               const VideoVolume& video) {
  const fs::path path = io::format_index(pattern, t);
  const std::string pair = "(" + std::to_string(from) + "," + std::to_string(to) + ")";
  const std::string kind = dir == FlowDirection::forward ? "forward" : "backward";
  require(fs::exists(path), Errc::missing_file, "missing " + kind + " flow for pair " + pair + ": " + path.string());
  FlowField f = io::load_flo(path);
  require(f.height == video.height() && f.width == video.width(), Errc::size_mismatch,
          kind + " flow for pair " + pair + " does not match the video resolution");
  f.direction = dir;
  f.frame_index = t;
  return f;
}

/// Loads the source video, its flows and optional depth, and derives masks.
/// The relit video is loaded when `with_relit` is set.
inline Inputs load_inputs(const PipelineConfig& cfg, bool with_relit) {
  require_key(cfg.source_dir, "source_dir");
  require_key(cfg.flow_fwd, "flow_fwd");
  require_key(cfg.flow_bwd, "flow_bwd");
  Inputs in;
  in.source = io::load_frame_sequence(cfg.source_dir, cfg.source_pattern);
  const int T = in.source.frames();
  if (with_relit) {
    require_key(cfg.relit_dir, "relit_dir");
    in.relit = io::load_frame_sequence(cfg.relit_dir, cfg.relit_pattern);
    require(in.relit.frames() == T && in.relit.height() == in.source.height() &&
                in.relit.width() == in.source.width(),
            Errc::size_mismatch, "relit video shape differs from source video");
  }
  for (int t = 0; t + 1 < T; ++t)
    in.fwd.push_back(load_flow_for(cfg.flow_fwd, t, t, t + 1, FlowDirection::forward, in.source));
  in.bwd.emplace_back(in.source.height(), in.source.width());
  in.bwd.front().direction = FlowDirection::backward;
  for (int t = 1; t < T; ++t)
    in.bwd.push_back(load_flow_for(cfg.flow_bwd, t, t, t - 1, FlowDirection::backward, in.source));

  if (!cfg.depth.empty()) {
    require_key(cfg.cameras, "cameras");
    DepthInput d;
    for (int t = 0; t < T; ++t) {
      const fs::path path = io::format_index(cfg.depth, t);
      require(fs::exists(path), Errc::missing_file, "missing depth for frame " + std::to_string(t) + ": " + path.string());
      d.depth.push_back(io::load_depth(path));
      require(d.depth.back().height == in.source.height() && d.depth.back().width == in.source.width(),
              Errc::size_mismatch, "depth for frame " + std::to_string(t) + " does not match the video resolution");
    }
    d.cameras = io::load_cameras(cfg.cameras);
    require(static_cast<int>(d.cameras.size()) >= T, Errc::invalid_argument,
            "camera file has " + std::to_string(d.cameras.size()) + " records for " + std::to_string(T) + " frames");
    in.depth = std::move(d);
  }
  in.masks = compute_masks(in.source, in.fwd, in.bwd, cfg.mask);
  for (const auto& m : in.masks) in.binary_masks.push_back(binarize_mask(m));
  return in;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::vector<std::pair<std::string, double>> entries;

  void add(std::string name, double value) { entries.emplace_back(std::move(name), value); }
  std::optional<double> get(const std::string& name) const {
    for (const auto& [k, v] : entries)
      if (k == name) return v;
    return std::nullopt;
  }
  std::string csv() const {
    std::string s = "metric,value\n";
    char buf[64];
    for (const auto& [k, v] : entries) {
      std::snprintf(buf, sizeof(buf), "%.10g", v);
      s += k + "," + buf + "\n";
    }
    return s;
  }
};

inline void write_text(const fs::path& path, const std::string& text) {
  io::write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline void write_loss_curve(const fs::path& path, const std::vector<double>& curve) {
  std::string s = "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, curve[i]);
    s += buf;
  }
  write_text(path, s);
}

/// Wraps a stage so that failures name it.
template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), stage + ": " + std::string(e.what()));
  } catch (const std::exception& e) {
    throw Error(Errc::internal, stage + ": " + std::string(e.what()));
  }
}

inline std::shared_ptr<const KeyVolume> keys_for(const PipelineConfig& cfg, const Inputs& in) {
  KeyOptions opts;
  opts.voxel_size = cfg.stage2.voxel_size;
  if (in.depth && !opts.voxel_size) opts.voxel_size = kOutdoorVoxelSize;
  return std::make_shared<const KeyVolume>(
      build_keys(in.source, in.fwd, in.binary_masks, in.depth ? &*in.depth : nullptr, opts));
}

inline void dump_uvt(const fs::path& dir, const UniqueVideoTensor& u) {
  const KeyVolume& kv = *u.keys;
  Tensor4 values(1, 1, static_cast<std::uint32_t>(u.size()), 3);
  for (std::size_t i = 0; i < u.values.size(); ++i) values.data[i] = static_cast<float>(u.values[i]);
  io::save_tensor4(dir / "uvt_values.tensor", values);
  // float32 holds element indices exactly only below 2^24
  if (kv.num_elements() <= (std::size_t{1} << 24)) {
    Tensor4 index(static_cast<std::uint32_t>(kv.frames), 1, static_cast<std::uint32_t>(kv.height),
                  static_cast<std::uint32_t>(kv.width));
    for (std::size_t i = 0; i < kv.index_map.size(); ++i) index.data[i] = static_cast<float>(kv.index_map[i]);
    io::save_tensor4(dir / "uvt_index.tensor", index);
  }
}

/// Metrics comparing relit, aligned and final videos plus UVT statistics.
inline MetricsReport final_report(const PipelineConfig& cfg, const Inputs& in, const VideoVolume& aligned,
                                  const VideoVolume& final_video, const std::shared_ptr<const KeyVolume>& keys) {
  MetricsReport r;
  r.add("frames", in.source.frames());
  r.add("height", in.source.height());
  r.add("width", in.source.width());
  if (cfg.metric_warp_ssim) {
    r.add("warp_ssim_relit", metrics::warp_ssim(in.relit, in.fwd, in.binary_masks));
    r.add("warp_ssim_aligned", metrics::warp_ssim(aligned, in.fwd, in.binary_masks));
    r.add("warp_ssim_final", metrics::warp_ssim(final_video, in.fwd, in.binary_masks));
  }
  r.add("warp_l1_relit", metrics::warp_l1(in.relit, in.fwd, in.masks));
  r.add("warp_l1_aligned", metrics::warp_l1(aligned, in.fwd, in.masks));
  r.add("warp_l1_final", metrics::warp_l1(final_video, in.fwd, in.masks));
  r.add("uvt_elements", static_cast<double>(keys->num_elements()));
  r.add("compression_rate", keys->compression_rate());
  if (cfg.metric_reconstruction) {
    const VideoVolume recon = scatter(gather(in.source, keys));
    r.add("recon_psnr", metrics::psnr(recon, in.source));
    r.add("recon_ssim", metrics::video_ssim(recon, in.source));
  }
  return r;
}

inline StageOneResult do_stage1(const PipelineConfig& cfg, const Inputs& in) {
  StageOneResult r = run_stage("stage1", [&] { return run_stage1(in.relit, in.fwd, in.masks, cfg.stage1); });
  run_stage("export", [&] {
    io::save_frame_sequence(cfg.out() / "aligned", r.aligned);
    save_embeddings(cfg.out() / "embeddings.txt", r.embeddings);
    write_loss_curve(cfg.out() / "loss_stage1.csv", r.loss_curve);
    return 0;
  });
  return r;
}

inline MetricsReport do_stage2(const PipelineConfig& cfg, const Inputs& in, const VideoVolume& aligned) {
  auto keys = run_stage("keys", [&] { return keys_for(cfg, in); });
  StageTwoResult r = run_stage("stage2", [&] { return run_stage2(aligned, keys, in.fwd, in.masks, cfg.stage2); });
  return run_stage("export", [&] {
    io::save_frame_sequence(cfg.out() / "final", r.output);
    write_loss_curve(cfg.out() / "loss_stage2.csv", r.loss_curve);
    if (cfg.dump_uvt) dump_uvt(cfg.out(), r.uvt);
    MetricsReport report = final_report(cfg, in, aligned, r.output, keys);
    write_text(cfg.out() / "metrics.csv", report.csv());
    return report;
  });
}

// ---------------------------------------------------------------------------
// Commands

/// Ingest, masks, Stage I, Stage II and export.
inline MetricsReport cmd_run(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  const Inputs in = run_stage("ingest", [&] { return load_inputs(cfg, true); });
  const StageOneResult s1 = do_stage1(cfg, in);
  return do_stage2(cfg, in, s1.aligned);
}

inline std::vector<double> cmd_stage1(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  const Inputs in = run_stage("ingest", [&] { return load_inputs(cfg, true); });
  return do_stage1(cfg, in).loss_curve;
}

/// Re-creates the Stage I output from the persisted embeddings, so a staged
/// run reproduces the monolithic one exactly.
inline MetricsReport cmd_stage2(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  const Inputs in = run_stage("ingest", [&] { return load_inputs(cfg, true); });
  const VideoVolume aligned = run_stage("ingest", [&] {
    const auto embeddings = load_embeddings(cfg.embeddings_file());
    require(static_cast<int>(embeddings.size()) == in.relit.frames(), Errc::size_mismatch,
            "embeddings file has " + std::to_string(embeddings.size()) + " frames, video has " +
                std::to_string(in.relit.frames()));
    return apply_embeddings(embeddings, in.relit, true);
  });
  return do_stage2(cfg, in, aligned);
}

/// Gathers and scatters the SOURCE video through its own keys and reports
/// compression and reconstruction quality.
inline MetricsReport cmd_reconstruct(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  const Inputs in = run_stage("ingest", [&] { return load_inputs(cfg, false); });
  auto keys = run_stage("keys", [&] { return keys_for(cfg, in); });
  return run_stage("reconstruct", [&] {
    const UniqueVideoTensor u = gather(in.source, keys);
    const VideoVolume recon = scatter(u);
    MetricsReport r;
    r.add("frames", in.source.frames());
    r.add("uvt_elements", static_cast<double>(keys->num_elements()));
    r.add("compression_rate", keys->compression_rate());
    r.add("recon_psnr", metrics::psnr(recon, in.source));
    r.add("recon_ssim", metrics::video_ssim(recon, in.source));
    write_text(cfg.out() / "reconstruct.csv", r.csv());
    if (cfg.dump_uvt) dump_uvt(cfg.out(), u);
    return r;
  });
}

/// Temporal-consistency metrics of a frame sequence (default: the final
/// output) and, when configured, of the relit input.
inline MetricsReport cmd_metrics(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  const bool with_relit = !cfg.relit_dir.empty();
  const Inputs in = run_stage("ingest", [&] { return load_inputs(cfg, with_relit); });
  const fs::path video_dir = cfg.metrics_video_dir.empty() ? cfg.out() / "final" : fs::path(cfg.metrics_video_dir);
  const VideoVolume video = run_stage("ingest", [&] { return io::load_frame_sequence(video_dir); });
  return run_stage("metrics", [&] {
    require(video.frames() == in.source.frames() && video.height() == in.source.height() &&
                video.width() == in.source.width(),
            Errc::size_mismatch, "evaluated video shape differs from source video");
    MetricsReport r;
    if (with_relit) {
      r.add("warp_ssim_input", metrics::warp_ssim(in.relit, in.fwd, in.binary_masks));
      r.add("warp_l1_input", metrics::warp_l1(in.relit, in.fwd, in.masks));
    }
    r.add("warp_ssim_output", metrics::warp_ssim(video, in.fwd, in.binary_masks));
    r.add("warp_l1_output", metrics::warp_l1(video, in.fwd, in.masks));
    write_text(cfg.out() / "metrics_eval.csv", r.csv());
    return r;
  });
}

/// Combines two noise tensors at one sampling step.
inline void cmd_noise_combine(const PipelineConfig& cfg) {
  set_num_threads(cfg.threads);
  require_key(cfg.noise.eps_xy, "noise.eps_xy");
  require_key(cfg.noise.eps_yt, "noise.eps_yt");
  require_key(cfg.noise.output, "noise.output");
  cfg.noise.schedule.validate();
  const Tensor4 xy = run_stage("ingest", [&] { return io::load_tensor4(cfg.noise.eps_xy); });
  const Tensor4 yt = run_stage("ingest", [&] { return io::load_tensor4(cfg.noise.eps_yt); });
  const Tensor4 out = run_stage("noise-combine", [&] {
    return noise::combine_noise(xy, yt, cfg.noise.schedule, cfg.noise.step, cfg.noise.swap_weights);
  });
  run_stage("export", [&] {
    io::save_tensor4(cfg.noise.output, out);
    return 0;
  });
}

/// CLI exit code for an error: 3 config, 2 bad input, 1 internal.
inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::config: return 3;
    case Errc::internal: return 1;
    default: return 2;
  }
}

}  // namespace uvtc::pipeline
