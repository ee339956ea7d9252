#pragma once

// Loaders and savers for every external format the engine consumes:
// PNG frame sequences (8/16-bit), Middlebury .flo, PFM and 16-bit PNG depth,
// per-frame camera text records and the float32 tensor container.
//
// All binary formats are little-endian on disk regardless of the host.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "uvtc/error.hpp"
#include "uvtc/types.hpp"

namespace uvtc::io {

namespace fs = std::filesystem;

inline constexpr float kFloTag = 202021.25f;  // "PIEH" as little-endian bytes
inline constexpr char kTensorMagic[4] = {'T', 'N', 'S', 'R'};
inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 34;

// ---------------------------------------------------------------------------
// byte helpers

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::missing_file, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::missing_file, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::internal, "write failed for " + path.string());
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  float f32_big_endian() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  // Reads one whitespace-delimited ASCII token and consumes a single trailing
  // whitespace byte, as PFM headers require.
  std::string token() {
    while (pos_ < bytes_.size() && std::isspace(bytes_[pos_])) ++pos_;
    std::string tok;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_])) tok.push_back(static_cast<char>(bytes_[pos_++]));
    require(!tok.empty(), Errc::malformed_header, what_ + ": unexpected end of header");
    require(pos_ < bytes_.size(), Errc::malformed_header, what_ + ": header not terminated");
    ++pos_;
    return tok;
  }

 private:
  void need(std::size_t n) const {
    require(remaining() >= n, Errc::truncated, what_ + ": truncated payload");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void text(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void raw(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// ---------------------------------------------------------------------------
// Middlebury .flo

inline FlowField decode_flo(const std::vector<std::uint8_t>& bytes, const std::string& what = ".flo") {
  ByteReader in(bytes, what);
  require(in.remaining() >= 4, Errc::truncated, what + ": missing tag");
  const float tag = in.f32();
  require(tag == kFloTag, Errc::bad_magic, what + ": tag is not 202021.25");
  const std::int32_t width = in.i32();
  const std::int32_t height = in.i32();
  require(width > 0 && height > 0, Errc::malformed_header, what + ": non-positive dimensions");
  require(static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height) * 8 <= in.remaining(),
          Errc::truncated, what + ": truncated payload");
  FlowField flow(height, width);
  for (auto& value : flow.data) value = in.f32();
  require(in.remaining() == 0, Errc::size_mismatch, what + ": trailing bytes after payload");
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const float u = flow.u(y, x), v = flow.v(y, x);
      require(std::isfinite(u) && std::isfinite(v) && std::fabs(u) < width && std::fabs(v) < height,
              Errc::invalid_argument, what + ": flow vector non-finite or larger than the image");
    }
  return flow;
}

inline std::vector<std::uint8_t> encode_flo(const FlowField& flow) {
  ByteWriter out;
  out.f32(kFloTag);
  out.i32(flow.width);
  out.i32(flow.height);
  for (float v : flow.data) out.f32(v);
  return std::move(out.bytes());
}

inline FlowField load_flo(const fs::path& path) { return decode_flo(read_file_bytes(path), path.string()); }
inline void save_flo(const fs::path& path, const FlowField& flow) { write_file_bytes(path, encode_flo(flow)); }

// ---------------------------------------------------------------------------
// PFM grayscale depth ("Pf", negative scale = little-endian, rows bottom-up)

inline DepthMap decode_pfm(const std::vector<std::uint8_t>& bytes, const std::string& what = "pfm") {
  ByteReader in(bytes, what);
  const std::string magic = in.token();
  require(magic == "Pf", Errc::malformed_header, what + ": expected grayscale 'Pf' header, got '" + magic + "'");
  int width = 0, height = 0;
  double scale = 0;
  try {
    width = std::stoi(in.token());
    height = std::stoi(in.token());
    scale = std::stod(in.token());
  } catch (const std::logic_error&) {
    throw Error(Errc::malformed_header, what + ": unparsable header field");
  }
  require(width > 0 && height > 0, Errc::malformed_header, what + ": non-positive dimensions");
  require(scale != 0.0, Errc::malformed_header, what + ": zero scale");
  const std::uint64_t count = static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
  require(in.remaining() == count * 4, Errc::size_mismatch, what + ": payload size does not match header");
  const bool little = scale < 0;
  DepthMap depth;
  depth.width = width;
  depth.height = height;
  depth.values.resize(count);
  for (int row = height - 1; row >= 0; --row)
    for (int x = 0; x < width; ++x)
      depth.values[static_cast<std::size_t>(row) * width + x] = little ? in.f32() : in.f32_big_endian();
  depth.refresh_validity();
  return depth;
}

inline std::vector<std::uint8_t> encode_pfm(const DepthMap& depth) {
  ByteWriter out;
  out.text("Pf\n" + std::to_string(depth.width) + " " + std::to_string(depth.height) + "\n-1\n");
  for (int row = depth.height - 1; row >= 0; --row)
    for (int x = 0; x < depth.width; ++x) out.f32(depth.values[static_cast<std::size_t>(row) * depth.width + x]);
  return std::move(out.bytes());
}

inline DepthMap load_depth_pfm(const fs::path& path) { return decode_pfm(read_file_bytes(path), path.string()); }
inline void save_depth_pfm(const fs::path& path, const DepthMap& depth) { write_file_bytes(path, encode_pfm(depth)); }

// ---------------------------------------------------------------------------
// Tensor container: magic "TNSR", u32 rank (=4), 4 x u32 dims, float32 payload.

inline Tensor4 decode_tensor4(const std::vector<std::uint8_t>& bytes, const std::string& what = "tensor") {
  ByteReader in(bytes, what);
  char magic[4];
  in.raw(magic, 4);
  require(std::memcmp(magic, kTensorMagic, 4) == 0, Errc::bad_magic, what + ": not a tensor container");
  const std::uint32_t rank = in.u32();
  require(rank == 4, Errc::malformed_header, what + ": rank " + std::to_string(rank) + " != 4");
  Tensor4 tensor;
  std::uint64_t count = 1;
  for (auto& dim : tensor.shape) {
    dim = in.u32();
    require(dim > 0, Errc::malformed_header, what + ": zero-size dimension");
    count *= dim;
    require(count <= kMaxTensorElements, Errc::dimension_overflow, what + ": element count overflows");
  }
  require(in.remaining() >= count * 4, Errc::truncated, what + ": truncated payload");
  require(in.remaining() == count * 4, Errc::size_mismatch, what + ": trailing bytes after payload");
  tensor.data.resize(count);
  for (auto& v : tensor.data) v = in.f32();
  return tensor;
}

inline std::vector<std::uint8_t> encode_tensor4(const Tensor4& tensor) {
  std::uint64_t count = 1;
  for (auto dim : tensor.shape) {
    require(dim > 0, Errc::invalid_argument, "tensor has a zero-size dimension");
    count *= dim;
    require(count <= kMaxTensorElements, Errc::dimension_overflow, "tensor element count overflows");
  }
  require(count == tensor.data.size(), Errc::size_mismatch, "tensor payload does not match its shape");
  ByteWriter out;
  out.raw(kTensorMagic, 4);
  out.u32(4);
  for (auto dim : tensor.shape) out.u32(dim);
  for (float v : tensor.data) out.f32(v);
  return std::move(out.bytes());
}

inline Tensor4 load_tensor4(const fs::path& path) { return decode_tensor4(read_file_bytes(path), path.string()); }
inline void save_tensor4(const fs::path& path, const Tensor4& t) { write_file_bytes(path, encode_tensor4(t)); }

// ---------------------------------------------------------------------------
// PNG

/// Decoded PNG samples, row-major, interleaved, at the file's bit depth.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1 or 3
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;
};

/// Reads a PNG as gray (keep_gray) or RGB; alpha is dropped and palettes and
/// sub-byte depths are expanded. No gamma transform is applied.
inline PngImage read_png(const fs::path& path, bool keep_gray = false) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  require(fp != nullptr, Errc::missing_file, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw Error(Errc::internal, "libpng initialization failed");
  }
  png_bytep volatile buffer = nullptr;
  png_bytepp volatile rows = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    std::free(buffer);
    std::free(rows);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw Error(Errc::malformed_header, "invalid PNG " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool gray = (color_type & PNG_COLOR_MASK_COLOR) == 0;
  if (gray && !keep_gray) png_set_gray_to_rgb(png);
  if (!gray && keep_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer = static_cast<png_bytep>(std::malloc(row_bytes * height));
  rows = static_cast<png_bytepp>(std::malloc(sizeof(png_bytep) * height));
  if (!buffer || !rows) png_error(png, "out of memory");
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer + y * row_bytes;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  PngImage img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.channels = channels;
  img.bit_depth = depth;
  img.samples.resize(static_cast<std::size_t>(width) * height * channels);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    const std::size_t y = i / (static_cast<std::size_t>(width) * channels);
    const std::size_t off = i % (static_cast<std::size_t>(width) * channels);
    const png_bytep row = buffer + y * row_bytes;
    img.samples[i] = depth == 16 ? static_cast<std::uint16_t>((row[2 * off] << 8) | row[2 * off + 1]) : row[off];
  }
  std::free(buffer);
  std::free(rows);
  return img;
}

inline void write_png(const fs::path& path, const PngImage& img) {
  require(img.channels == 1 || img.channels == 3, Errc::invalid_argument, "PNG writer supports 1 or 3 channels");
  require(img.bit_depth == 8 || img.bit_depth == 16, Errc::invalid_argument, "PNG writer supports 8 or 16 bits");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::size_t bytes_per_sample = img.bit_depth / 8;
  const std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels * bytes_per_sample;
  std::vector<png_byte> buffer(row_bytes * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bytes_per_sample == 2) {
      buffer[2 * i] = static_cast<png_byte>(img.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<png_byte>(img.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<png_byte>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + y * row_bytes;

  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  require(fp != nullptr, Errc::missing_file, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error(Errc::internal, "PNG encode failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Frame load_frame_png(const fs::path& path) {
  const PngImage img = read_png(path);
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  Frame frame(img.height, img.width);
  for (std::size_t i = 0; i < img.samples.size(); ++i) frame[i] = std::clamp(img.samples[i] / scale, 0.0, 1.0);
  return frame;
}

/// Writes a frame clamped to [0,1] and rounded to the nearest code value.
inline void save_frame_png(const fs::path& path, const Frame& frame, int bit_depth = 8) {
  PngImage img;
  img.width = frame.width();
  img.height = frame.height();
  img.channels = 3;
  img.bit_depth = bit_depth;
  const double scale = bit_depth == 16 ? 65535.0 : 255.0;
  img.samples.resize(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double v = std::isfinite(frame[i]) ? std::clamp(frame[i], 0.0, 1.0) : 0.0;
    img.samples[i] = static_cast<std::uint16_t>(std::floor(v * scale + 0.5));
  }
  write_png(path, img);
}

/// 16-bit grayscale PNG in millimeters; zero means missing.
inline DepthMap load_depth_png16(const fs::path& path) {
  const PngImage img = read_png(path, /*keep_gray=*/true);
  require(img.bit_depth == 16, Errc::invalid_argument, path.string() + ": depth PNG must be 16-bit");
  DepthMap depth;
  depth.width = img.width;
  depth.height = img.height;
  depth.values.resize(img.samples.size());
  for (std::size_t i = 0; i < img.samples.size(); ++i) depth.values[i] = static_cast<float>(img.samples[i] / 1000.0);
  depth.refresh_validity();
  return depth;
}

/// Dispatches on extension: .pfm or 16-bit .png.
inline DepthMap load_depth(const fs::path& path) {
  if (path.extension() == ".png") return load_depth_png16(path);
  return load_depth_pfm(path);
}

// ---------------------------------------------------------------------------
// Frame sequences

/// Loads every file in `dir` whose name fully matches the regex `pattern`,
/// ordered by the numeric index in the name (first capture group if present,
/// otherwise the last run of digits).
inline VideoVolume load_frame_sequence(const fs::path& dir, const std::string& pattern = R"((\d+)\.png)") {
  require(fs::is_directory(dir), Errc::missing_file, "frame directory does not exist: " + dir.string());
  const std::regex re(pattern);
  const std::regex digits(R"((\d+)(?!.*\d))");
  std::map<long long, fs::path> ordered;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    std::smatch m;
    if (!std::regex_match(name, m, re)) continue;
    std::string number;
    if (m.size() > 1 && m[1].matched) {
      number = m[1].str();
    } else {
      std::smatch d;
      if (std::regex_search(name, d, digits)) number = d[1].str();
    }
    require(!number.empty(), Errc::invalid_argument, "no numeric index in frame name " + name);
    const long long index = std::stoll(number);
    require(!ordered.contains(index), Errc::invalid_argument, "duplicate frame index in " + dir.string());
    ordered.emplace(index, entry.path());
  }
  require(ordered.size() >= 2, Errc::invalid_argument,
          "need at least 2 frames in " + dir.string() + ", found " + std::to_string(ordered.size()));
  std::vector<Frame> frames;
  frames.reserve(ordered.size());
  for (const auto& [index, path] : ordered) {
    frames.push_back(load_frame_png(path));
    require(frames.back().same_shape(frames.front()), Errc::size_mismatch,
            "mixed resolutions in " + dir.string() + " at " + path.filename().string());
  }
  return VideoVolume(std::move(frames));
}

inline void save_frame_sequence(const fs::path& dir, const VideoVolume& video, int bit_depth = 8) {
  fs::create_directories(dir);
  char name[32];
  for (int t = 0; t < video.frames(); ++t) {
    std::snprintf(name, sizeof(name), "%06d.png", t);
    save_frame_png(dir / name, video[t], bit_depth);
  }
}

// ---------------------------------------------------------------------------
// Camera records: one line per frame, 9 intrinsic then 16 extrinsic numbers
// (both row-major). Blank lines and '#' comments are ignored.

inline std::vector<CameraParams> parse_cameras(std::istream& in, const std::string& what = "cameras") {
  std::vector<CameraParams> cams;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> numbers;
    double v;
    while (fields >> v) numbers.push_back(v);
    require(fields.eof(), Errc::malformed_header, what + ":" + std::to_string(line_no) + ": non-numeric field");
    if (numbers.empty()) continue;
    require(numbers.size() == 25, Errc::malformed_header,
            what + ":" + std::to_string(line_no) + ": expected 25 numbers, got " + std::to_string(numbers.size()));
    CameraParams cam;
    std::copy_n(numbers.begin(), 9, cam.intrinsics.begin());
    std::copy_n(numbers.begin() + 9, 16, cam.extrinsics.begin());
    cam.validate();
    cams.push_back(cam);
  }
  return cams;
}

inline std::vector<CameraParams> load_cameras(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::missing_file, "cannot open " + path.string());
  return parse_cameras(in, path.string());
}

inline void save_cameras(const fs::path& path, const std::vector<CameraParams>& cams) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& cam : cams) {
    for (double v : cam.intrinsics) out << v << ' ';
    for (std::size_t i = 0; i < cam.extrinsics.size(); ++i) out << cam.extrinsics[i] << (i + 1 < 16 ? ' ' : '\n');
  }
  const std::string s = out.str();
  write_file_bytes(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

/// Substitutes `index` into the first printf-style integer token ("%d" or
/// "%0Nd") of `pattern`.
inline std::string format_index(const std::string& pattern, long long index) {
  static const std::regex token(R"(%(0?)(\d*)d)");
  std::smatch m;
  require(std::regex_search(pattern, m, token), Errc::config, "pattern has no %d token: " + pattern);
  std::string number = std::to_string(index);
  const std::size_t width = m[2].length() ? std::stoul(m[2].str()) : 0;
  if (number.size() < width) number.insert(0, width - number.size(), m[1].length() ? '0' : ' ');
  return m.prefix().str() + number + m.suffix().str();
}

}  // namespace uvtc::io
