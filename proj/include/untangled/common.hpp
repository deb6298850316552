#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace untangled {

template <int Dim>
using Vec = Eigen::Matrix<double, Dim, 1>;

template <int Dim>
using VecList = std::vector<Vec<Dim>>;

/// Vec<Dim> in a non-deduced context, so Eigen expressions bind to it.
template <int Dim>
using VecIn = std::type_identity_t<Vec<Dim>>;

/// Worker count: UNTANGLED_THREADS caps hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("UNTANGLED_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return n;
}

/// Runs body(i) for i in [0, n). Results must be written to per-index slots so
/// the outcome does not depend on scheduling. The first exception is rethrown.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t threads = 0) {
  if (threads == 0) threads = worker_count();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Uniform double in [0,1) derived from a 64-bit value.
inline double unit_from_bits(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Radical inverse of index in the given prime base (Halton coordinate).
inline double radical_inverse(std::uint64_t index, unsigned base) {
  double result = 0.0;
  double f = 1.0 / base;
  while (index > 0) {
    result += f * static_cast<double>(index % base);
    index /= base;
    f /= base;
  }
  return result;
}

inline double frac(double x) { return x - std::floor(x); }

}  // namespace detail

/// Halton sequence with a seed-dependent Cranley-Patterson rotation.
class RotatedHalton {
 public:
  explicit RotatedHalton(std::uint64_t seed) {
    for (std::size_t d = 0; d < shift_.size(); ++d) {
      shift_[d] = detail::unit_from_bits(detail::splitmix64(seed * 0x100000001b3ULL + d));
    }
  }

  /// Coordinate `dim` (< 4) of point `index` (1-based), in [0,1).
  double operator()(std::uint64_t index, std::size_t dim) const {
    static constexpr unsigned kBases[4] = {2, 3, 5, 7};
    return detail::frac(detail::radical_inverse(index, kBases[dim]) + shift_[dim]);
  }

 private:
  std::array<double, 4> shift_{};
};

}  // namespace untangled
