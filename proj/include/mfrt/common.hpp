#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfrt {

using i64 = std::int64_t;

/// Error raised for invalid shapes, dimensions or op arguments.
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Error raised for invalid configurations (model hyperparameters, files).
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Error raised for misuse of the library API (e.g. backward on a non-scalar).
struct usage_error : std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string strcat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <class Err = shape_error, class... Args>
void check(bool cond, const Args&... args) {
  if (!cond) throw Err(strcat(args...));
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Deterministic random source. Gaussian draws use an explicit Box-Muller
/// so that streams are bit-identical across standard library versions
/// (std::normal_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  i64 below(i64 n) { return static_cast<i64>(gen_() % static_cast<std::uint64_t>(n)); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Derives an independent stream, for per-module parameter init.
  Rng fork() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mfrt
