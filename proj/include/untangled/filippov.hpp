#pragma once

// Filippov envelope F(t,x): a convex set given by its support values over a
// finite direction set, built from the essential supremum of xi . b over
// shrinking balls.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"

namespace untangled {

template <int Dim>
class DirectionSet {
 public:
  /// d=1: {+1, -1}. d=2: n_dir equispaced angles starting at 0.
  static std::shared_ptr<const DirectionSet> make(std::size_t n_dir = 32) {
    auto set = std::shared_ptr<DirectionSet>(new DirectionSet());
    if constexpr (Dim == 1) {
      (void)n_dir;
      set->dirs_ = {Vec<1>(1.0), Vec<1>(-1.0)};
    } else if constexpr (Dim == 2) {
      if (n_dir < 3) throw ConfigError("envelope.n_dir must be at least 3");
      set->dirs_.reserve(n_dir);
      for (std::size_t i = 0; i < n_dir; ++i) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_dir);
        set->dirs_.emplace_back(std::cos(a), std::sin(a));
      }
    } else {
      static_assert(Dim == 1 || Dim == 2, "direction sets exist for d <= 2");
    }
    return set;
  }

  std::size_t size() const { return dirs_.size(); }
  const Vec<Dim>& operator[](std::size_t i) const { return dirs_[i]; }
  const VecList<Dim>& directions() const { return dirs_; }

  /// Index of a direction equal to xi up to 1e-12, if any.
  std::optional<std::size_t> find(const Vec<Dim>& xi) const {
    for (std::size_t i = 0; i < dirs_.size(); ++i) {
      if ((dirs_[i] - xi).norm() <= 1e-12) return i;
    }
    return std::nullopt;
  }

 private:
  DirectionSet() = default;
  VecList<Dim> dirs_;
};

/// Decreasing delta schedule {0.2, 0.1, 0.05, 0.025} times diam(Ω).
template <int Dim>
std::vector<double> default_delta_schedule(const SpatialDomain<Dim>& domain) {
  const double d = domain.diameter();
  return {0.2 * d, 0.1 * d, 0.05 * d, 0.025 * d};
}

template <int Dim>
struct EnvelopeParams {
  std::vector<double> delta_schedule;  // absolute radii, strictly decreasing
  std::size_t samples = 64;
  std::size_t n_dir = 32;
  std::uint64_t seed = 0;
  bool use_exact = true;  // analytic kinds report their exact supports

  double delta_final() const { return delta_schedule.back(); }

  void validate() const {
    if (delta_schedule.empty()) throw ConfigError("envelope.delta_schedule must not be empty");
    for (std::size_t i = 0; i < delta_schedule.size(); ++i) {
      if (!(delta_schedule[i] > 0.0)) throw ConfigError("envelope.delta_schedule entries must be positive");
      if (i > 0 && !(delta_schedule[i] < delta_schedule[i - 1])) {
        throw ConfigError("envelope.delta_schedule must be strictly decreasing");
      }
    }
    if (samples == 0) throw ConfigError("envelope.samples must be positive");
  }

  static EnvelopeParams defaults(const SpatialDomain<Dim>& domain) {
    EnvelopeParams p;
    p.delta_schedule = default_delta_schedule(domain);
    return p;
  }
};

namespace detail {

/// m quasi-random points of B_delta(x) ∩ Ω. Throws if none is found.
template <int Dim>
VecList<Dim> ball_samples(const SpatialDomain<Dim>& domain, const Vec<Dim>& x, double delta, std::size_t m,
                          std::uint64_t seed) {
  if (!(delta > 0.0)) throw ArgumentError("support_function: delta must be positive");
  if (m == 0) throw ArgumentError("support_function: m must be positive");
  if (!domain.contains(x)) throw DomainError("support_function: point outside domain");
  RotatedHalton seq(seed);
  VecList<Dim> pts;
  pts.reserve(m);
  if constexpr (Dim == 1) {
    // The intersection is an interval; sample it directly.
    const double lo = std::max(x[0] - delta, domain.lower()[0]);
    const double hi = std::min(x[0] + delta, domain.upper()[0]);
    for (std::size_t i = 1; i <= m; ++i) pts.emplace_back(lo + (hi - lo) * seq(i, 0));
  } else {
    const std::size_t budget = 64 * m;
    for (std::size_t i = 1; i <= budget && pts.size() < m; ++i) {
      Vec<Dim> y;
      const double r = delta * std::sqrt(seq(i, 0));
      const double a = 2.0 * std::numbers::pi * seq(i, 1);
      y[0] = x[0] + r * std::cos(a);
      y[1] = x[1] + r * std::sin(a);
      if (domain.contains(y)) pts.push_back(y);
    }
  }
  if (pts.empty()) throw NumericalError("support_function: no sample landed in B_delta(x) ∩ Ω");
  return pts;
}

/// Sample sets for a decreasing schedule, nested so that the set for a
/// larger radius contains every point drawn for the smaller ones: the sampled
/// h_delta is then nonincreasing along the schedule by construction.
template <int Dim>
std::vector<VecList<Dim>> nested_ball_samples(const SpatialDomain<Dim>& domain, const Vec<Dim>& x,
                                              const std::vector<double>& schedule, std::size_t m,
                                              std::uint64_t seed) {
  std::vector<VecList<Dim>> out(schedule.size());
  VecList<Dim> acc;
  for (std::size_t i = schedule.size(); i-- > 0;) {
    auto fresh = ball_samples(domain, x, schedule[i], m, seed + 0x9e37ULL * i);
    acc.insert(acc.end(), fresh.begin(), fresh.end());
    out[i] = acc;
  }
  return out;
}

}  // namespace detail

/// h_delta(t,x,xi) approximated by the max of xi . b over m quasi-random points
/// of B_delta(x) ∩ Ω. Deterministic in seed.
template <int Dim>
double support_function(const VelocityField<Dim>& field, double t, const VecIn<Dim>& x, const VecIn<Dim>& xi,
                        double delta, std::size_t m, std::uint64_t seed) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& y : detail::ball_samples(field.domain(), x, delta, m, seed)) {
    best = std::max(best, xi.dot(field.eval(t, y)));
  }
  return best;
}

struct EssentialSupport {
  double value = 0.0;
  std::vector<double> trace;  // h_delta along the schedule
  bool monotonicity_warning = false;
  bool exact = false;
};

inline constexpr double kMonotoneSlack = 1e-9;

/// h(t,x,xi) read off at the last radius of the schedule. A rise of more than
/// 1e-9 between consecutive radii sets the warning flag.
template <int Dim>
EssentialSupport essential_support(const VelocityField<Dim>& field, double t, const VecIn<Dim>& x,
                                   const VecIn<Dim>& xi, const std::vector<double>& delta_schedule,
                                   std::size_t m, std::uint64_t seed, bool use_exact = false) {
  EnvelopeParams<Dim> p;
  p.delta_schedule = delta_schedule;
  p.samples = m;
  p.validate();
  EssentialSupport out;
  out.exact = use_exact;
  std::vector<VecList<Dim>> sets;
  for (std::size_t i = 0; i < delta_schedule.size(); ++i) {
    std::optional<double> h;
    if (use_exact) h = field.exact_support(t, x, xi, delta_schedule[i]);
    if (!h) {
      out.exact = false;
      if (sets.empty()) sets = detail::nested_ball_samples(field.domain(), Vec<Dim>(x), delta_schedule, m, seed);
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& y : sets[i]) best = std::max(best, xi.dot(field.eval(t, y)));
      h = best;
    }
    if (!out.trace.empty() && *h > out.trace.back() + kMonotoneSlack) out.monotonicity_warning = true;
    out.trace.push_back(*h);
  }
  out.value = out.trace.back();
  return out;
}

/// Polyhedral outer approximation {v : xi_i . v <= h_i for all i}.
template <int Dim>
class FilippovEnvelope {
 public:
  FilippovEnvelope(double t, Vec<Dim> x, std::shared_ptr<const DirectionSet<Dim>> dirs, std::vector<double> support,
                   double delta_used, std::size_t samples_per_ball, bool monotonicity_warning = false)
      : t_(t),
        x_(std::move(x)),
        dirs_(std::move(dirs)),
        support_(std::move(support)),
        delta_used_(delta_used),
        samples_per_ball_(samples_per_ball),
        monotonicity_warning_(monotonicity_warning) {
    if (support_.size() != dirs_->size()) throw ArgumentError("envelope: support table size mismatch");
    for (double h : support_) {
      if (!std::isfinite(h)) throw NumericalError("envelope: non-finite support value");
    }
    build_geometry();
  }

  double t() const { return t_; }
  const Vec<Dim>& x() const { return x_; }
  const DirectionSet<Dim>& directions() const { return *dirs_; }
  const std::vector<double>& support() const { return support_; }
  double support(std::size_t i) const { return support_[i]; }
  double delta_used() const { return delta_used_; }
  std::size_t samples_per_ball() const { return samples_per_ball_; }
  bool monotonicity_warning() const { return monotonicity_warning_; }

  /// Vertices of the polygon (d=2) or the interval endpoints [lo, hi] (d=1).
  const VecList<Dim>& vertices() const { return vertices_; }

  double scale() const {
    double s = 1.0;
    for (double h : support_) s = std::max(s, std::abs(h));
    return s;
  }

 private:
  void build_geometry() {
    const double tol = 1e-11 * scale();
    if constexpr (Dim == 1) {
      double hi = support_[0];
      double lo = -support_[1];
      if (lo > hi + tol) throw NumericalError("envelope: inconsistent support table (empty interval)");
      if (lo > hi) lo = hi = 0.5 * (lo + hi);
      vertices_ = {Vec<1>(lo), Vec<1>(hi)};
    } else {
      // Clip a bounding square by each half-plane. Singleton envelopes may
      // vanish under round-off; those are clipped again slightly relaxed.
      auto poly = clip(0.0);
      if (poly.empty()) poly = clip(tol);
      if (poly.empty()) throw NumericalError("envelope: inconsistent support table (empty polygon)");
      for (const auto& v : poly) vertices_.push_back(v);
    }
  }

  std::vector<Vec<2>> clip(double relax) const {
    const double r = 4.0 * scale();
    std::vector<Vec<2>> poly = {Vec<2>(-r, -r), Vec<2>(r, -r), Vec<2>(r, r), Vec<2>(-r, r)};
    if constexpr (Dim == 2) {
      for (std::size_t i = 0; i < support_.size() && !poly.empty(); ++i) {
        const Vec<2>& n = (*dirs_)[i];
        const double h = support_[i] + relax;
        std::vector<Vec<2>> next;
        next.reserve(poly.size() + 1);
        for (std::size_t k = 0; k < poly.size(); ++k) {
          const Vec<2>& a = poly[k];
          const Vec<2>& b = poly[(k + 1) % poly.size()];
          const double fa = n.dot(a) - h;
          const double fb = n.dot(b) - h;
          if (fa <= 0.0) next.push_back(a);
          if ((fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0)) next.push_back(a + (fa / (fa - fb)) * (b - a));
        }
        poly = std::move(next);
      }
    }
    return poly;
  }

  double t_;
  Vec<Dim> x_;
  std::shared_ptr<const DirectionSet<Dim>> dirs_;
  std::vector<double> support_;
  double delta_used_;
  std::size_t samples_per_ball_;
  bool monotonicity_warning_;
  VecList<Dim> vertices_;
};

/// F(t,x) from the schedule. Sampled kinds evaluate b once per ball sample and
/// reuse the values for every direction.
template <int Dim>
FilippovEnvelope<Dim> filippov_envelope(const VelocityField<Dim>& field, double t, const VecIn<Dim>& x,
                                        std::shared_ptr<const DirectionSet<Dim>> dirs,
                                        const EnvelopeParams<Dim>& params) {
  if (!field.domain().contains(x)) throw DomainError("filippov_envelope: point outside domain");
  const std::size_t nd = dirs->size();
  std::vector<double> h(nd, 0.0);
  std::vector<double> prev(nd, std::numeric_limits<double>::infinity());
  bool warning = false;
  std::vector<VecList<Dim>> sets;
  for (std::size_t di = 0; di < params.delta_schedule.size(); ++di) {
    const double delta = params.delta_schedule[di];
    bool have = false;
    if (params.use_exact) {
      have = true;
      for (std::size_t i = 0; i < nd && have; ++i) {
        auto e = field.exact_support(t, x, (*dirs)[i], delta);
        if (e) h[i] = *e;
        else have = false;
      }
    }
    if (!have) {
      if (sets.empty()) {
        sets = detail::nested_ball_samples(field.domain(), Vec<Dim>(x), params.delta_schedule, params.samples,
                                           params.seed);
      }
      std::fill(h.begin(), h.end(), -std::numeric_limits<double>::infinity());
      for (const auto& y : sets[di]) {
        const Vec<Dim> b = field.eval(t, y);
        for (std::size_t i = 0; i < nd; ++i) h[i] = std::max(h[i], (*dirs)[i].dot(b));
      }
    }
    for (std::size_t i = 0; i < nd; ++i) {
      if (h[i] > prev[i] + kMonotoneSlack) warning = true;
    }
    prev = h;
  }
  return FilippovEnvelope<Dim>(t, x, std::move(dirs), std::move(h), params.delta_schedule.back(), params.samples,
                               warning);
}

/// max(0, max_i (xi_i . y - h_i)).
template <int Dim>
double set_distance(const FilippovEnvelope<Dim>& env, const VecIn<Dim>& y) {
  double d = 0.0;
  const auto& dirs = env.directions();
  for (std::size_t i = 0; i < dirs.size(); ++i) d = std::max(d, dirs[i].dot(y) - env.support(i));
  return d;
}

template <int Dim>
bool membership(const FilippovEnvelope<Dim>& env, const VecIn<Dim>& v, double tol) {
  return set_distance(env, v) <= tol;
}

/// Euclidean projection onto the polyhedral envelope.
template <int Dim>
Vec<Dim> project_to_envelope(const FilippovEnvelope<Dim>& env, const VecIn<Dim>& y) {
  const auto& vs = env.vertices();
  if constexpr (Dim == 1) {
    return Vec<1>(std::clamp(y[0], vs[0][0], vs[1][0]));
  } else {
    if (set_distance(env, y) == 0.0) return y;
    Vec<Dim> best = vs[0];
    double best_d = (y - best).squaredNorm();
    for (std::size_t k = 0; k < vs.size(); ++k) {
      const Vec<Dim>& a = vs[k];
      const Vec<Dim>& b = vs[(k + 1) % vs.size()];
      const Vec<Dim> ab = b - a;
      const double len2 = ab.squaredNorm();
      const double u = len2 > 0.0 ? std::clamp((y - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const Vec<Dim> p = a + u * ab;
      const double d = (y - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = p;
      }
    }
    return best;
  }
}

/// An element of argmax_{v in F} xi . v; ties across vertices are averaged so
/// the result lies in the middle of a supporting face.
template <int Dim>
Vec<Dim> extreme_velocity(const FilippovEnvelope<Dim>& env, const VecIn<Dim>& xi) {
  const auto& vs = env.vertices();
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& v : vs) best = std::max(best, xi.dot(v));
  const double tol = 1e-12 * env.scale();
  Vec<Dim> sum = Vec<Dim>::Zero();
  double count = 0.0;
  for (const auto& v : vs) {
    if (xi.dot(v) >= best - tol) {
      sum += v;
      count += 1.0;
    }
  }
  return sum / count;
}

}  // namespace untangled
