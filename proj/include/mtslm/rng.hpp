#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtslm {

/// Anything that hands out uniform doubles in [0, 1). Generators and
/// samplers are templated on this so tests can script the draws.
template <class U>
concept UniformSource = requires(U& u) {
  { u.uniform() } -> std::convertible_to<double>;
};

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}

/// Seeded 64-bit Mersenne Twister with portable uniform/normal transforms.
/// std::*_distribution is implementation-defined, so the transforms are
/// written out here to keep draws identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1).
  double uniform_open() {
    for (;;) {
      const double u = uniform();
      if (u > 0.0) return u;
    }
  }

  /// Standard normal via the Marsaglia polar method (spare discarded so the
  /// state is fully captured by the engine).
  double normal() {
    for (;;) {
      const double a = 2.0 * uniform() - 1.0;
      const double b = 2.0 * uniform() - 1.0;
      const double s = a * a + b * b;
      if (s > 0.0 && s < 1.0) return a * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    for (;;) {
      const std::uint64_t x = engine_();
      if (x < limit) return x % n;
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw std::invalid_argument("Rng::set_state: malformed state");
  }

 private:
  std::mt19937_64 engine_;
};

/// Replays a fixed list of draws; throws when exhausted.
class ScriptedUniform {
 public:
  explicit ScriptedUniform(std::vector<double> draws) : draws_(std::move(draws)) {}
  double uniform() {
    if (next_ >= draws_.size())
      throw std::out_of_range("ScriptedUniform: draws exhausted");
    return draws_[next_++];
  }
  std::size_t consumed() const { return next_; }

 private:
  std::vector<double> draws_;
  std::size_t next_ = 0;
};

/// Fisher-Yates shuffle driven by Rng::below.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mtslm
