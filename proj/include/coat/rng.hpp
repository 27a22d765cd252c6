#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace coat {

// splitmix64. Used instead of std::random distributions so that every stream
// is reproducible bit-for-bit and derivable from (seed, tag, index) without
// carrying engine state through checkpoints.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

  // Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(6.283185307179586 * u2);
    have_spare_ = true;
    return r * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream from (seed, tag, indices...).
  // hash chaining keeps parallel and serial generation in agreement.
  static Rng derive(uint64_t seed, std::string_view tag) {
    return Rng(mix(seed, hash_tag(tag)));
  }
  static Rng derive(uint64_t seed, std::string_view tag, uint64_t a) {
    return Rng(mix(mix(seed, hash_tag(tag)), a));
  }
  static Rng derive(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
    return Rng(mix(mix(mix(seed, hash_tag(tag)), a), b));
  }

 private:
  static uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ULL;
    }
    return h;
  }
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    return z ^ (z >> 27);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace coat
