#pragma once

#include <stdexcept>
#include <string>

namespace uvtc {

enum class Errc {
  bad_magic,
  truncated,
  malformed_header,
  size_mismatch,
  dimension_overflow,
  missing_file,
  degenerate_statistics,
  invalid_argument,
  config,
  internal,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::bad_magic: return "BadMagic";
    case Errc::truncated: return "Truncated";
    case Errc::malformed_header: return "MalformedHeader";
    case Errc::size_mismatch: return "SizeMismatch";
    case Errc::dimension_overflow: return "DimensionOverflow";
    case Errc::missing_file: return "MissingFile";
    case Errc::degenerate_statistics: return "DegenerateStatistics";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::config: return "ConfigError";
    case Errc::internal: return "InternalError";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable error code alongside the message.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace uvtc
