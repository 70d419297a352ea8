#pragma once

#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmssd {

// Error taxonomy. The CLI maps each family onto a distinct exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct MapDegenerateError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};

struct Coord {
  int x = 0;
  int y = 0;

  friend constexpr bool operator==(const Coord&, const Coord&) = default;
  friend constexpr auto operator<=>(const Coord&, const Coord&) = default;
};

inline constexpr int kNumActions = 5;

// Index order matches the network's output order.
enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3, Stay = 4 };

using ActionMask = std::array<bool, kNumActions>;

inline constexpr std::array<Coord, kNumActions> kActionDelta{{
    {0, -1},  // up
    {0, 1},   // down
    {-1, 0},  // left
    {1, 0},   // right
    {0, 0},   // stay
}};

constexpr Coord apply_action(Coord c, int action) {
  return {c.x + kActionDelta[static_cast<std::size_t>(action)].x,
          c.y + kActionDelta[static_cast<std::size_t>(action)].y};
}

inline const char* action_name(int action) {
  static constexpr std::array<const char*, kNumActions> names{"up", "down", "left", "right", "stay"};
  if (action < 0 || action >= kNumActions) return "?";
  return names[static_cast<std::size_t>(action)];
}

// Deterministic random source. The engine is mt19937_64 (bit-exact by the
// standard); the helpers below avoid std:: distributions, whose output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return r % n;
  }

  int below_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent child stream, derived deterministically from this one.
  Rng split() { return Rng(splitmix(engine_())); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dmssd

template <>
struct std::hash<dmssd::Coord> {
  std::size_t operator()(const dmssd::Coord& c) const noexcept {
    return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.x)) << 32) |
                                      static_cast<std::uint32_t>(c.y));
  }
};
