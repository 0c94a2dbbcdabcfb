#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <string_view>

namespace flowvi {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Deterministic random stream. Gaussian draws use an explicit Box-Muller
/// transform instead of std::normal_distribution so that sequences are
/// identical across standard libraries.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  /// Derive an independent stream from a master seed and a purpose tag.
  static RngStream derive(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t s = master ^ detail::fnv1a(tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    // A couple of splitmix rounds decorrelate nearby (master, index) pairs.
    detail::splitmix64(s);
    return RngStream(detail::splitmix64(s));
  }

  std::uint64_t u64() { return gen_(); }

  /// Uniform on (0, 1]; never returns 0 so log() stays finite.
  double uniform() {
    return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Modulo bias is irrelevant at the sizes used here (bootstrap indices).
    return gen_() % n;
  }

  void save(std::ostream& os) const {
    os << gen_ << '\n' << (has_cached_ ? 1 : 0) << '\n';
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", cached_);
    os << buf << '\n';
  }

  void restore(std::istream& is) {
    is >> gen_;
    int flag = 0;
    is >> flag;
    has_cached_ = flag != 0;
    std::string hex;
    is >> hex;
    cached_ = std::strtod(hex.c_str(), nullptr);
  }

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace flowvi
