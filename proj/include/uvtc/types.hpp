#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uvtc/error.hpp"

namespace uvtc {

/// Dense row-major H x W x C image of doubles, channels interleaved.
template <int C>
class Raster {
 public:
  static constexpr int channels = C;

  Raster() = default;
  Raster(int height, int width, double fill = 0.0)
      : height_(height), width_(width), data_(checked_size(height, width), fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Raster& o) const { return height_ == o.height_ && width_ == o.width_; }

  double& at(int y, int x, int c = 0) { return data_[(static_cast<std::size_t>(y) * width_ + x) * C + c]; }
  double at(int y, int x, int c = 0) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * C + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool operator==(const Raster&) const = default;

 private:
  static std::size_t checked_size(int height, int width) {
    require(height > 0 && width > 0, Errc::invalid_argument, "raster dimensions must be positive");
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * C;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

using Frame = Raster<3>;
using ScalarMap = Raster<1>;
using VectorMap = Raster<2>;

/// Per-pixel booleans, row-major.
struct BoolMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BoolMap() = default;
  BoolMap(int h, int w, bool fill = false)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}
  bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  bool operator==(const BoolMap&) const = default;
};

/// Ordered frames of uniform resolution.
class VideoVolume {
 public:
  VideoVolume() = default;
  explicit VideoVolume(std::vector<Frame> frames) : frames_(std::move(frames)) {
    for (const auto& f : frames_)
      require(f.same_shape(frames_.front()), Errc::size_mismatch, "video frames have mixed resolutions");
  }
  VideoVolume(int frames, int height, int width, double fill = 0.0)
      : frames_(static_cast<std::size_t>(frames), Frame(height, width, fill)) {}

  int frames() const { return static_cast<int>(frames_.size()); }
  int height() const { return frames_.empty() ? 0 : frames_.front().height(); }
  int width() const { return frames_.empty() ? 0 : frames_.front().width(); }
  std::size_t pixels() const { return frames_.size() * (frames_.empty() ? 0 : frames_.front().pixels()); }

  Frame& operator[](int t) { return frames_[static_cast<std::size_t>(t)]; }
  const Frame& operator[](int t) const { return frames_[static_cast<std::size_t>(t)]; }
  std::vector<Frame>& all() { return frames_; }
  const std::vector<Frame>& all() const { return frames_; }

  bool operator==(const VideoVolume&) const = default;

 private:
  std::vector<Frame> frames_;
};

enum class FlowDirection { forward, backward };

/// Per-pixel displacement in pixels. Stored as float32 so the .flo payload
/// round-trips bit-exactly.
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // interleaved (u, v)
  FlowDirection direction = FlowDirection::forward;
  int frame_index = 0;

  FlowField() = default;
  FlowField(int h, int w, float u = 0.f, float v = 0.f) : height(h), width(w) {
    require(h > 0 && w > 0, Errc::invalid_argument, "flow dimensions must be positive");
    data.resize(static_cast<std::size_t>(h) * w * 2);
    for (std::size_t i = 0; i < data.size(); i += 2) {
      data[i] = u;
      data[i + 1] = v;
    }
  }

  float u(int y, int x) const { return data[(static_cast<std::size_t>(y) * width + x) * 2]; }
  float v(int y, int x) const { return data[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }
  void set(int y, int x, float du, float dv) {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 2;
    data[i] = du;
    data[i + 1] = dv;
  }

  VectorMap to_raster() const {
    VectorMap r(height, width);
    for (std::size_t i = 0; i < data.size(); ++i) r[i] = data[i];
    return r;
  }

  bool operator==(const FlowField&) const = default;
};

/// Depth in meters. `values` keeps the raw stored numbers so that savers can
/// reproduce the input; `valid` flags entries that are finite and positive.
struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool is_valid(int y, int x) const { return valid[static_cast<std::size_t>(y) * width + x] != 0; }

  void refresh_validity() {
    valid.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      valid[i] = (std::isfinite(values[i]) && values[i] > 0.f) ? 1 : 0;
  }
};

/// Pinhole intrinsics plus camera-to-world extrinsics for one frame.
struct CameraParams {
  std::array<double, 9> intrinsics{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 16> extrinsics{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  double k(int r, int c) const { return intrinsics[static_cast<std::size_t>(r * 3 + c)]; }
  double ext(int r, int c) const { return extrinsics[static_cast<std::size_t>(r * 4 + c)]; }

  void validate() const {
    require(k(1, 0) == 0 && k(2, 0) == 0 && k(2, 1) == 0, Errc::invalid_argument,
            "intrinsics must be upper-triangular");
    require(k(0, 0) > 0 && k(1, 1) > 0, Errc::invalid_argument, "focal lengths must be positive");
    require(ext(3, 0) == 0 && ext(3, 1) == 0 && ext(3, 2) == 0 && ext(3, 3) == 1, Errc::invalid_argument,
            "extrinsics last row must be [0,0,0,1]");
  }
};

/// Float32 tensor of shape (T, C, H, W), row-major.
struct Tensor4 {
  std::array<std::uint32_t, 4> shape{0, 0, 0, 0};
  std::vector<float> data;

  Tensor4() = default;
  Tensor4(std::uint32_t t, std::uint32_t c, std::uint32_t h, std::uint32_t w, float fill = 0.f)
      : shape{t, c, h, w}, data(static_cast<std::size_t>(t) * c * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(shape[2]) * shape[3]; }
  std::size_t index(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return ((t * shape[1] + c) * shape[2] + y) * shape[3] + x;
  }
  bool same_shape(const Tensor4& o) const { return shape == o.shape; }
  bool operator==(const Tensor4&) const = default;
};

}  // namespace uvtc
