#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace perturbkit {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct BackendError : Error {
  using Error::Error;
};

/// Raised when a training step produces a non-finite loss.
struct DivergenceError : BackendError {
  DivergenceError(const std::string& msg, int step, std::string remapping_id)
      : BackendError(msg), step(step), remapping_id(std::move(remapping_id)) {}
  int step = -1;
  std::string remapping_id;
};

// ---------------------------------------------------------------------------
// Deterministic seed derivation. Every random stream in the library is keyed
// off a user seed plus a fixed chain of indices so that parallel and serial
// execution orders produce identical streams.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base) { return splitmix64(base); }

template <typename... Rest>
uint64_t derive_seed(uint64_t base, uint64_t idx, Rest... rest) {
  return derive_seed(splitmix64(base ^ (0x9e3779b97f4a7c15ULL + idx)), rest...);
}

// ---------------------------------------------------------------------------
// Small string helpers.
// ---------------------------------------------------------------------------

std::vector<std::string> split_whitespace(const std::string& s);
std::string join(const std::vector<std::string>& parts, const std::string& sep);
std::string trim(const std::string& s);

/// Lowercase for ASCII; non-ASCII bytes pass through unchanged.
std::string ascii_lower(const std::string& s);

/// Shortest-faithful decimal rendering of a double (round-trips exactly).
std::string format_double(double v);

/// FNV-1a over bytes; used for config fingerprints.
uint64_t fnv1a64(const std::string& bytes);
std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// File I/O. All writes are atomic (temp file + rename).
// ---------------------------------------------------------------------------

std::string read_text_file(const std::string& path);
void write_text_file_atomic(const std::string& path, const std::string& content);
void write_binary_file_atomic(const std::string& path, const void* data, size_t size);
bool file_exists(const std::string& path);
void ensure_directory(const std::string& path);

}  // namespace perturbkit
