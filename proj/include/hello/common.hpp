#pragma once

#include <cstddef>
#include <cstdint>
#include <charconv>
#include <stdexcept>
#include <string>

namespace hello {

// Error taxonomy. Callers (and the CLI exit-code mapping) need to tell
// configuration mistakes apart from I/O failures and runtime divergence.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
// Corrupt or foreign file contents.
struct FormatError : IoError {
  using IoError::IoError;
};
// File shorter than its header promises.
struct TruncationError : IoError {
  using IoError::IoError;
};
// Divergence (non-finite loss) and other optimization failures.
struct TrainingError : Error {
  using Error::Error;
};
// A zero-norm embedding row that must not be normalized.
struct DegenerateEmbeddingError : ValidationError {
  using ValidationError::ValidationError;
};

inline uint64_t fnv1a64(const void* data, size_t n,
                        uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s,
                        uint64_t h = 14695981039346656037ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Locale-free, shortest round-trip float formatting. Keeps metric logs
// byte-identical across runs.
template <class T>
std::string num_str(T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace hello
