#ifndef CPCR_COMMON_HPP
#define CPCR_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cpcr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value; message names the offending field.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor dimensions incompatible with an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Dataset / file content problems (missing labels, bad class values, ...).
struct DataError : Error {
  using Error::Error;
};

struct ArgumentError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// splitmix64 finalizer; used to derive independent rng streams from
// (seed, site) pairs so that toggling one consumer never shifts another.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::string_view tag) {
  return hash_combine(a, fnv1a(tag));
}

}  // namespace cpcr

#endif  // CPCR_COMMON_HPP
