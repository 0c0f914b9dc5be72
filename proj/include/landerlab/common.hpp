#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace landerlab {

// Machine-readable failure categories. The service maps these to HTTP codes.
enum class ErrorCode {
  invalid_argument,
  not_found,
  conflict,
  precondition_failed,
  usage_error,
  corrupt_data,
  numerical_failure,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::precondition_failed: return "precondition_failed";
    case ErrorCode::usage_error: return "usage_error";
    case ErrorCode::corrupt_data: return "corrupt_data";
    case ErrorCode::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline constexpr std::size_t kObsDim = 10;
inline constexpr int kNumActions = 4;

// [x, y, vx, vy, theta, omega, left_contact, right_contact, main_on, side_on]
using Observation = std::array<double, kObsDim>;

namespace obs {
inline constexpr std::size_t x = 0, y = 1, vx = 2, vy = 3, theta = 4,
                             omega = 5, left_contact = 6, right_contact = 7,
                             main_on = 8, side_on = 9;
}

inline bool all_finite(const Observation& o) {
  for (double v : o)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double speed_of(const Observation& o) {
  return std::hypot(o[obs::vx], o[obs::vy]);
}

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
  return derive_seed(derive_seed(a, b), c);
}

inline std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c, std::uint64_t d) {
  return derive_seed(derive_seed(a, b, c), d);
}

// Uniform double in [0, 1) from the top 53 bits of a 64-bit engine draw.
// Independent of the standard library's distribution implementation.
template <class Engine>
double unit_uniform(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

template <class Engine>
double uniform(Engine& eng, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(eng);
}

}  // namespace landerlab
