#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>

namespace dspo {

namespace fs = std::filesystem;

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violated an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file could not be read, parsed or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or infinity.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace log {

enum class Level { debug, info, warn, error };

using Sink = std::function<void(Level, std::string_view)>;

inline const char* level_name(Level level) {
  switch (level) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink_slot() {
  static Sink s = [](Level level, std::string_view msg) {
    if (level == Level::debug) return;
    std::cerr << "[" << level_name(level) << "] " << msg << "\n";
  };
  return s;
}
}  // namespace detail

/// Replaces the global sink; returns the previous one so callers can restore it.
inline Sink set_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  Sink old = std::move(detail::sink_slot());
  detail::sink_slot() = std::move(sink);
  return old;
}

inline void write(Level level, std::string_view msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink_slot()) detail::sink_slot()(level, msg);
}

inline void debug(std::string_view msg) { write(Level::debug, msg); }
inline void info(std::string_view msg) { write(Level::info, msg); }
inline void warn(std::string_view msg) { write(Level::warn, msg); }
inline void error(std::string_view msg) { write(Level::error, msg); }

}  // namespace log

/// 64-bit FNV-1a, used for manifest and parameter fingerprints.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }

  std::uint64_t value() const { return state_; }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << state_;
    return os.str();
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_string(std::string_view s) { return Fnv1a().update(s).hex(); }

inline std::string hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 14];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace dspo
