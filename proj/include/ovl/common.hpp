#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ovl {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

// ------------------------------------------------------------------ errors
//
// Every failure carries a stable kind so the CLI can map it to an exit code
// and a one-line machine-parseable reason.
enum class ErrorKind {
  invalid_argument,      // violated precondition / bad config
  vocabulary_exhausted,  // corpus generator cannot satisfy uniqueness
  io,                    // missing or unreadable/unwritable file
  malformed,             // file exists but does not parse
  context_overflow,
  out_of_vocab,
  divergence,            // non-finite training loss
  undefined_ratio,       // R = HR/RR with RR = 0
  flagged_fit,           // law fit unusable for prediction
  remote_timeout,
  remote_malformed,
  remote_retry_exhausted,
  remote_http,
  internal,
};

const char* error_kind_name(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::uint64_t step, const std::string& msg)
      : Error(ErrorKind::divergence, msg), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

class UndefinedRatioError : public Error {
 public:
  UndefinedRatioError(double rr, double hr, const std::string& msg)
      : Error(ErrorKind::undefined_ratio, msg), rr_(rr), hr_(hr) {}
  double rr() const { return rr_; }
  double hr() const { return hr_; }

 private:
  double rr_;
  double hr_;
};

// ------------------------------------------------------------------ rng
//
// SplitMix64. All randomness in the project flows through this generator and
// the helpers below so that corpora, checkpoints and result files are byte
// identical across runs regardless of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, bound) by rejection; bound > 0.
  std::uint64_t next_below(std::uint64_t bound) {
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % bound;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % bound;
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (no cached spare; two draws per call).
  double next_gaussian() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Deterministic seed derivation for independent substreams (per group, per
// sweep point, per epoch shuffle, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  Rng r(base ^ (tag + 1) * 0x9E3779B97F4A7C15ull);
  return r.next_u64();
}

// ------------------------------------------------------------------ hashing
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// ------------------------------------------------------------------ io
// Writes via a sibling temp file followed by rename so readers never observe
// a partial file.
void atomic_write_file(const std::filesystem::path& path,
                       const std::string& contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace ovl
