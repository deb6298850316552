#pragma once

// Schedules of weighted tent functionals f(gamma) = ∫ exp(-lambda t) phi(gamma(t)) dt.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"

namespace untangled {

/// phi(z) = amplitude * max(0, 1 - steepness |z - center|).
template <int Dim>
struct Tent {
  Vec<Dim> center;
  double steepness = 1.0;
  double amplitude = 1.0;

  double operator()(const Vec<Dim>& z) const {
    return amplitude * std::max(0.0, 1.0 - steepness * (z - center).norm());
  }
  double radius() const { return 1.0 / steepness; }
};

template <int Dim>
struct ScheduleEntry {
  double lambda;
  Tent<Dim> tent;
};

template <int Dim>
class FunctionalSchedule {
 public:
  FunctionalSchedule() = default;
  explicit FunctionalSchedule(std::vector<ScheduleEntry<Dim>> entries) : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
      if (!(e.lambda > 0.0) || !(e.tent.steepness > 0.0) || !(e.tent.amplitude > 0.0)) {
        throw ConfigError("schedule: lambda, steepness and amplitude must be positive");
      }
    }
  }

  /// Dyadic tents of levels 0..levels: level l splits every axis into 2^l cells,
  /// puts a tent at each cell midpoint with steepness 2^l / r, r the half of the
  /// shortest side. Tents g_1, g_2, ... are ordered by level, then
  /// lexicographically with axis 0 slowest. Rates mu_n = n are paired with
  /// tents along Cantor diagonals: (1,g1), (1,g2), (2,g1), (1,g3), (2,g2), ...
  static FunctionalSchedule dyadic(const SpatialDomain<Dim>& domain, std::size_t K, int levels = 3) {
    if (K == 0) throw ConfigError("selection.K must be at least 1");
    if (levels < 0) throw ConfigError("selection.levels must be nonnegative");
    const auto tents = dyadic_tents(domain, levels);
    std::vector<ScheduleEntry<Dim>> entries;
    entries.reserve(K);
    const std::size_t ng = tents.size();
    for (std::size_t diag = 2; entries.size() < K; ++diag) {
      for (std::size_t n = 1; n < diag && entries.size() < K; ++n) {
        const std::size_t i = diag - n;  // 1-based tent index
        if (i > ng) continue;
        entries.push_back({static_cast<double>(n), tents[i - 1]});
      }
      if (diag > K + ng + 2) break;
    }
    return FunctionalSchedule(std::move(entries));
  }

  static std::vector<Tent<Dim>> dyadic_tents(const SpatialDomain<Dim>& domain, int levels) {
    const Vec<Dim> side = domain.upper() - domain.lower();
    const double r = 0.5 * side.minCoeff();
    std::vector<Tent<Dim>> out;
    for (int l = 0; l <= levels; ++l) {
      const std::size_t cells = std::size_t{1} << l;
      std::size_t total = 1;
      for (int d = 0; d < Dim; ++d) total *= cells;
      for (std::size_t idx = 0; idx < total; ++idx) {
        Vec<Dim> c;
        std::size_t rem = idx;
        for (int d = Dim - 1; d >= 0; --d) {
          const std::size_t j = rem % cells;
          rem /= cells;
          c[d] = domain.lower()[d] + side[d] * (static_cast<double>(j) + 0.5) / static_cast<double>(cells);
        }
        out.push_back({c, static_cast<double>(cells) / r, 1.0});
      }
    }
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const ScheduleEntry<Dim>& operator[](std::size_t k) const { return entries_[k]; }
  const std::vector<ScheduleEntry<Dim>>& entries() const { return entries_; }

  /// First k entries.
  FunctionalSchedule truncated(std::size_t k) const {
    return FunctionalSchedule(std::vector<ScheduleEntry<Dim>>(entries_.begin(),
                                                              entries_.begin() + static_cast<std::ptrdiff_t>(std::min(k, entries_.size()))));
  }

  /// Same schedule with every tent amplitude multiplied by s.
  FunctionalSchedule scaled(double s) const {
    auto e = entries_;
    for (auto& x : e) x.tent.amplitude *= s;
    return FunctionalSchedule(std::move(e));
  }

  /// Distinct tent centres, in first-appearance order.
  VecList<Dim> centers() const {
    VecList<Dim> out;
    for (const auto& e : entries_) {
      bool seen = false;
      for (const auto& c : out) seen = seen || c == e.tent.center;
      if (!seen) out.push_back(e.tent.center);
    }
    return out;
  }

 private:
  std::vector<ScheduleEntry<Dim>> entries_;
};

/// Lexicographic comparison of score vectors where entries closer than a
/// relative 1e-9 count as equal. Negative: a ranks higher.
inline int compare_scores(std::span<const double> a, std::span<const double> b, double rel_tol = 1e-9) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t k = 0; k < n; ++k) {
    const double tol = rel_tol * std::max({std::abs(a[k]), std::abs(b[k]), 1e-300}) + 1e-15;
    if (a[k] > b[k] + tol) return -1;
    if (b[k] > a[k] + tol) return 1;
  }
  return 0;
}

}  // namespace untangled
