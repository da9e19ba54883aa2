#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dml {

std::uint64_t splitmix64(std::uint64_t x);

/// Seeded generator whose output sequence is fixed across standard libraries
/// (mt19937_64 bits mapped to doubles by hand; no std distributions).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n);
  bool chance(double p) { return uniform() < p; }
  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

/// 64-bit FNV-1a, optionally continuing from a previous digest.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);

std::string base64_encode(std::string_view bytes);
/// Throws dml::Error on characters outside the standard alphabet or bad padding.
std::string base64_decode(std::string_view text);

}  // namespace dml
