#pragma once

// Spatial domains, time grids and velocity fields with admissibility checks.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"

namespace untangled {

/// Closed axis-aligned box.
template <int Dim>
class SpatialDomain {
 public:
  SpatialDomain(Vec<Dim> lower, Vec<Dim> upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
    for (int i = 0; i < Dim; ++i) {
      if (!(lower_[i] < upper_[i]) || !std::isfinite(lower_[i]) || !std::isfinite(upper_[i])) {
        throw ConfigError("domain: lower[" + std::to_string(i) + "] must be < upper[" +
                          std::to_string(i) + "]");
      }
    }
  }

  const Vec<Dim>& lower() const { return lower_; }
  const Vec<Dim>& upper() const { return upper_; }

  bool contains(const Vec<Dim>& x) const {
    for (int i = 0; i < Dim; ++i) {
      if (!(x[i] >= lower_[i] && x[i] <= upper_[i])) return false;
    }
    return true;
  }

  Vec<Dim> clamp(const Vec<Dim>& x) const { return x.cwiseMax(lower_).cwiseMin(upper_); }
  Vec<Dim> center() const { return 0.5 * (lower_ + upper_); }
  double diameter() const { return (upper_ - lower_).norm(); }
  double volume() const { return (upper_ - lower_).prod(); }

  /// Euclidean distance from x to the box (0 inside).
  double distance(const Vec<Dim>& x) const { return (x - clamp(x)).norm(); }

 private:
  Vec<Dim> lower_;
  Vec<Dim> upper_;
};

/// Strictly increasing time nodes t_0 < ... < t_n.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.size() < 2) throw ConfigError("time grid needs at least one step");
    for (std::size_t k = 0; k + 1 < nodes_.size(); ++k) {
      if (!(nodes_[k] < nodes_[k + 1])) throw ConfigError("time grid nodes must be strictly increasing");
    }
  }

  static TimeGrid uniform(double t_start, double t_end, std::size_t n_steps) {
    if (n_steps == 0) throw ConfigError("time.n_steps must be positive");
    if (!(t_end > t_start)) throw ConfigError("time.t_end must exceed time.t_start");
    std::vector<double> nodes(n_steps + 1);
    for (std::size_t k = 0; k <= n_steps; ++k) {
      nodes[k] = t_start + (t_end - t_start) * static_cast<double>(k) / static_cast<double>(n_steps);
    }
    nodes.back() = t_end;
    return TimeGrid(std::move(nodes));
  }

  std::size_t n_steps() const { return nodes_.size() - 1; }
  double t_start() const { return nodes_.front(); }
  double t_end() const { return nodes_.back(); }
  double operator[](std::size_t k) const { return nodes_[k]; }
  double step(std::size_t k) const { return nodes_[k + 1] - nodes_[k]; }
  double max_step() const {
    double h = 0.0;
    for (std::size_t k = 0; k < n_steps(); ++k) h = std::max(h, step(k));
    return h;
  }
  const std::vector<double>& nodes() const { return nodes_; }

  /// Index of the node equal to t up to a relative 1e-9 of the smallest step.
  std::optional<std::size_t> index_of(double t) const {
    const auto it = std::lower_bound(nodes_.begin(), nodes_.end(), t);
    const double tol = 1e-9 * min_step();
    std::optional<std::size_t> best;
    for (auto cand : {it, it == nodes_.begin() ? it : std::prev(it)}) {
      if (cand == nodes_.end()) continue;
      if (std::abs(*cand - t) <= tol) best = static_cast<std::size_t>(cand - nodes_.begin());
    }
    return best;
  }

  std::size_t require_index(double t) const {
    if (auto k = index_of(t)) return *k;
    std::ostringstream msg;
    msg << "time " << t << " is not a grid node";
    throw ArgumentError(msg.str());
  }

 private:
  double min_step() const {
    double h = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n_steps(); ++k) h = std::min(h, step(k));
    return h;
  }

  std::vector<double> nodes_;
};

enum class FieldKind {
  Constant,
  Sqrt,
  Sign1d,
  CompressiveSign,
  Rotating2d,
  MollifiedSign1d,
  Linear,
  Quadratic,
  GridSampled,
};

inline std::string_view field_kind_name(FieldKind kind) {
  switch (kind) {
    case FieldKind::Constant: return "constant";
    case FieldKind::Sqrt: return "sqrt";
    case FieldKind::Sign1d: return "sign1d";
    case FieldKind::CompressiveSign: return "compressive-sign";
    case FieldKind::Rotating2d: return "rotating-2d";
    case FieldKind::MollifiedSign1d: return "mollified-sign1d";
    case FieldKind::Linear: return "linear";
    case FieldKind::Quadratic: return "quadratic";
    case FieldKind::GridSampled: return "grid";
  }
  return "?";
}

inline FieldKind parse_field_kind(std::string_view id) {
  for (auto k : {FieldKind::Constant, FieldKind::Sqrt, FieldKind::Sign1d, FieldKind::CompressiveSign,
                 FieldKind::Rotating2d, FieldKind::MollifiedSign1d, FieldKind::Linear,
                 FieldKind::Quadratic, FieldKind::GridSampled}) {
    if (field_kind_name(k) == id) return k;
  }
  throw ConfigError("field.kind: unknown registry id '" + std::string(id) + "'");
}

/// Immutable velocity field b(t,x) on a box, with a declared constant growth
/// bound |b(t,x)| <= growth_c (1 + |x|).
///
/// Registry (params in brackets):
///   constant [v_1..v_d]       b = v
///   sqrt []                   b = 2 sqrt(max(x,0))                (1D)
///   sign1d []                 b = +1 for x <= 0, -1 for x > 0    (1D)
///   compressive-sign []       b = -sign(x), b(0) = 0             (1D)
///   rotating-2d [omega]       b = omega (-x_2, x_1)              (2D)
///   mollified-sign1d [eps]    compressive sign convolved with the box kernel
///                             of half-width eps: b = -clamp(x/eps, -1, 1)
///   linear [a]                b = a x
///   quadratic [a]             b = a x^2                          (1D)
///   grid                      multilinear interpolation of node values
template <int Dim>
class VelocityField {
 public:
  static VelocityField make(std::string_view kind_id, std::vector<double> params,
                            std::optional<double> growth_c, SpatialDomain<Dim> domain) {
    const FieldKind kind = parse_field_kind(kind_id);
    if (kind == FieldKind::GridSampled) {
      throw ConfigError("field.kind: grid fields are built with VelocityField::grid_sampled");
    }
    VelocityField f(kind, std::move(params), std::move(domain));
    f.validate();
    f.growth_c_ = growth_c ? *growth_c : f.default_growth_c();
    if (!(f.growth_c_ >= 0.0) || !std::isfinite(f.growth_c_)) {
      throw ConfigError("field.growth_c must be a nonnegative number");
    }
    return f;
  }

  /// Multilinear interpolant of values on a uniform node lattice over the
  /// domain; `counts[i]` nodes along axis i (axis 0 varies fastest).
  static VelocityField grid_sampled(SpatialDomain<Dim> domain, std::array<std::size_t, Dim> counts,
                                    VecList<Dim> values, double growth_c) {
    std::size_t total = 1;
    for (auto c : counts) {
      if (c < 2) throw ConfigError("grid field needs at least 2 nodes per axis");
      total *= c;
    }
    if (values.size() != total) throw ConfigError("grid field: value count does not match lattice");
    VelocityField f(FieldKind::GridSampled, {}, std::move(domain));
    f.counts_ = counts;
    f.grid_values_ = std::move(values);
    f.growth_c_ = growth_c;
    return f;
  }

  FieldKind kind() const { return kind_; }
  std::string_view kind_name() const { return field_kind_name(kind_); }
  const std::vector<double>& params() const { return params_; }
  double growth_c() const { return growth_c_; }
  const SpatialDomain<Dim>& domain() const { return domain_; }

  Vec<Dim> eval(double t, const Vec<Dim>& x) const {
    if (!domain_.contains(x)) {
      std::ostringstream msg;
      msg << "eval_velocity: point (" << x.transpose() << ") outside domain";
      throw DomainError(msg.str());
    }
    return eval_unchecked(t, x);
  }

  /// b(t,x) without the domain check (x may lie anywhere for analytic kinds).
  Vec<Dim> eval_unchecked(double /*t*/, const Vec<Dim>& x) const {
    Vec<Dim> v;
    switch (kind_) {
      case FieldKind::Constant:
        for (int i = 0; i < Dim; ++i) v[i] = params_[static_cast<std::size_t>(i)];
        return v;
      case FieldKind::Sqrt:
        v[0] = 2.0 * std::sqrt(std::max(x[0], 0.0));
        return v;
      case FieldKind::Sign1d:
        v[0] = x[0] <= 0.0 ? 1.0 : -1.0;
        return v;
      case FieldKind::CompressiveSign:
        v[0] = x[0] > 0.0 ? -1.0 : (x[0] < 0.0 ? 1.0 : 0.0);
        return v;
      case FieldKind::Rotating2d:
        if constexpr (Dim == 2) {
          v[0] = -params_[0] * x[1];
          v[1] = params_[0] * x[0];
        }
        return v;
      case FieldKind::MollifiedSign1d:
        v[0] = -std::clamp(x[0] / params_[0], -1.0, 1.0);
        return v;
      case FieldKind::Linear:
        return params_[0] * x;
      case FieldKind::Quadratic:
        v[0] = params_[0] * x[0] * x[0];
        return v;
      case FieldKind::GridSampled:
        return interpolate(x);
    }
    return v;
  }

  /// Exact essential supremum of xi . b over B_delta(x) ∩ Ω when it has a closed
  /// form for this kind; nullopt otherwise (callers fall back to sampling).
  std::optional<double> exact_support(double t, const Vec<Dim>& x, const Vec<Dim>& xi,
                                      double delta) const {
    if (kind_ == FieldKind::Constant) return xi.dot(eval_unchecked(t, x));
    if constexpr (Dim == 2) {
      if (kind_ == FieldKind::Rotating2d) {
        // xi . b(y) = eta . y with eta = omega (xi_2, -xi_1): a linear function
        // maximised over the disk clipped to the box.
        const Vec<2> eta = params_[0] * Vec<2>(xi[1], -xi[0]);
        const auto& lo = domain_.lower();
        const auto& hi = domain_.upper();
        auto inside = [&](const Vec<2>& y) {
          return y[0] >= lo[0] && y[0] <= hi[0] && y[1] >= lo[1] && y[1] <= hi[1];
        };
        double best = -std::numeric_limits<double>::infinity();
        const double en = eta.norm();
        const Vec<2> top = en > 0.0 ? Vec<2>(x + delta * eta / en) : x;
        if (inside(top)) best = eta.dot(top);
        for (int i = 0; i < 2; ++i) {
          const int j = 1 - i;
          for (double c : {lo[i], hi[i]}) {
            const double h2 = delta * delta - (c - x[i]) * (c - x[i]);
            if (h2 < 0.0) continue;
            const double a = std::max(x[j] - std::sqrt(h2), lo[j]);
            const double b = std::min(x[j] + std::sqrt(h2), hi[j]);
            if (a > b) continue;
            for (double s : {a, b}) {
              Vec<2> y;
              y[i] = c;
              y[j] = s;
              best = std::max(best, eta.dot(y));
            }
          }
        }
        return best;
      }
    }
    if constexpr (Dim == 1) {
      const double lo = std::max(x[0] - delta, domain_.lower()[0]);
      const double hi = std::min(x[0] + delta, domain_.upper()[0]);
      const double s = xi[0];
      auto at = [&](double y) { return s * eval_unchecked(t, Vec<1>(y))[0]; };
      switch (kind_) {
        case FieldKind::Sqrt:
        case FieldKind::MollifiedSign1d:
        case FieldKind::Linear:
          // Monotone and continuous: the supremum sits at an endpoint.
          return std::max(at(lo), at(hi));
        case FieldKind::Quadratic: {
          double m = std::max(at(lo), at(hi));
          if (lo <= 0.0 && hi >= 0.0) m = std::max(m, 0.0);
          return m;
        }
        case FieldKind::Sign1d:
        case FieldKind::CompressiveSign: {
          // b = +1 on {y < 0}, -1 on {y > 0}; the point y = 0 is null.
          const bool has_left = lo < 0.0 && lo < hi;
          const bool has_right = hi > 0.0 && lo < hi;
          double m = -std::numeric_limits<double>::infinity();
          if (has_left) m = std::max(m, s);
          if (has_right) m = std::max(m, -s);
          return m;
        }
        default:
          return std::nullopt;
      }
    }
    return std::nullopt;
  }

 private:
  VelocityField(FieldKind kind, std::vector<double> params, SpatialDomain<Dim> domain)
      : kind_(kind), params_(std::move(params)), domain_(std::move(domain)) {}

  void require_params(std::size_t n) const {
    if (params_.size() != n) {
      throw ConfigError("field.params: '" + std::string(kind_name()) + "' expects " + std::to_string(n) +
                        " parameter(s), got " + std::to_string(params_.size()));
    }
  }

  void require_dim(int d) const {
    if (Dim != d) {
      throw ConfigError("field.kind: '" + std::string(kind_name()) + "' requires dimension " +
                        std::to_string(d));
    }
  }

  void validate() const {
    switch (kind_) {
      case FieldKind::Constant: require_params(static_cast<std::size_t>(Dim)); break;
      case FieldKind::Sqrt:
      case FieldKind::Sign1d:
      case FieldKind::CompressiveSign:
        require_dim(1);
        require_params(0);
        break;
      case FieldKind::Rotating2d:
        require_dim(2);
        require_params(1);
        break;
      case FieldKind::MollifiedSign1d:
        require_dim(1);
        require_params(1);
        if (!(params_[0] > 0.0)) throw ConfigError("field.params: mollification width must be positive");
        break;
      case FieldKind::Linear: require_params(1); break;
      case FieldKind::Quadratic:
        require_dim(1);
        require_params(1);
        break;
      case FieldKind::GridSampled: break;
    }
    for (double p : params_) {
      if (!std::isfinite(p)) throw ConfigError("field.params must be finite");
    }
  }

  double default_growth_c() const {
    switch (kind_) {
      case FieldKind::Constant: {
        double n = 0.0;
        for (double p : params_) n += p * p;
        return std::sqrt(n);
      }
      case FieldKind::Sqrt:  // 2 sqrt(x) <= 1 + x
      case FieldKind::Sign1d:
      case FieldKind::CompressiveSign:
      case FieldKind::MollifiedSign1d:
        return 1.0;
      case FieldKind::Rotating2d:
      case FieldKind::Linear:
        return std::abs(params_[0]);
      case FieldKind::Quadratic: {
        // |a| x^2 / (1 + |x|) is increasing in |x|; take its value at the far corner.
        const double r = std::max(std::abs(domain_.lower()[0]), std::abs(domain_.upper()[0]));
        return std::abs(params_[0]) * r * r / (1.0 + r);
      }
      case FieldKind::GridSampled: return 0.0;
    }
    return 0.0;
  }

  Vec<Dim> interpolate(const Vec<Dim>& x) const {
    std::array<std::size_t, Dim> base{};
    std::array<double, Dim> frac{};
    for (int i = 0; i < Dim; ++i) {
      const auto n = counts_[static_cast<std::size_t>(i)];
      const double h = (domain_.upper()[i] - domain_.lower()[i]) / static_cast<double>(n - 1);
      double u = (std::clamp(x[i], domain_.lower()[i], domain_.upper()[i]) - domain_.lower()[i]) / h;
      auto cell = static_cast<std::size_t>(std::floor(u));
      if (cell >= n - 1) cell = n - 2;
      base[static_cast<std::size_t>(i)] = cell;
      frac[static_cast<std::size_t>(i)] = u - static_cast<double>(cell);
    }
    Vec<Dim> v = Vec<Dim>::Zero();
    for (unsigned corner = 0; corner < (1u << Dim); ++corner) {
      double w = 1.0;
      std::size_t idx = 0;
      std::size_t stride = 1;
      for (int i = 0; i < Dim; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const bool up = (corner >> i) & 1u;
        w *= up ? frac[ui] : 1.0 - frac[ui];
        idx += (base[ui] + (up ? 1 : 0)) * stride;
        stride *= counts_[ui];
      }
      if (w != 0.0) v += w * grid_values_[idx];
    }
    return v;
  }

  FieldKind kind_;
  std::vector<double> params_;
  SpatialDomain<Dim> domain_;
  double growth_c_ = 0.0;
  std::array<std::size_t, Dim> counts_{};
  VecList<Dim> grid_values_;
};

template <int Dim>
Vec<Dim> eval_velocity(const VelocityField<Dim>& field, double t, const VecIn<Dim>& x) {
  return field.eval(t, x);
}

/// True iff v lies in the tangent cone of the box at x (weakly inward on
/// every active face, up to tol).
template <int Dim>
bool tangent_cone_admissible(const SpatialDomain<Dim>& domain, const VecIn<Dim>& x, const VecIn<Dim>& v,
                             double tol) {
  if (!domain.contains(x)) throw DomainError("tangent_cone_admissible: point outside domain");
  for (int i = 0; i < Dim; ++i) {
    if (x[i] == domain.lower()[i] && v[i] < -tol) return false;
    if (x[i] == domain.upper()[i] && v[i] > tol) return false;
  }
  return true;
}

/// Euclidean projection of v onto the tangent cone of the box at x.
template <int Dim>
Vec<Dim> tangent_clamp(const SpatialDomain<Dim>& domain, const VecIn<Dim>& x, Vec<Dim> v) {
  for (int i = 0; i < Dim; ++i) {
    if (x[i] == domain.lower()[i] && v[i] < 0.0) v[i] = 0.0;
    if (x[i] == domain.upper()[i] && v[i] > 0.0) v[i] = 0.0;
  }
  return v;
}

struct FieldDiagnostics {
  std::size_t growth_violations = 0;
  double osl_modulus_estimate = std::numeric_limits<double>::quiet_NaN();
  std::size_t tangent_violations = 0;
};

template <int Dim>
struct SpaceTimeSample {
  double t;
  Vec<Dim> x;
};

/// Counts samples violating |b| <= growth_c (1+|x|) (relative slack 1e-12), and
/// boundary samples where b leaves the tangent cone.
template <int Dim>
FieldDiagnostics check_growth(const VelocityField<Dim>& field, const std::vector<SpaceTimeSample<Dim>>& samples) {
  FieldDiagnostics diag;
  for (const auto& s : samples) {
    const Vec<Dim> b = field.eval(s.t, s.x);
    const double bound = field.growth_c() * (1.0 + s.x.norm());
    if (b.norm() > bound * (1.0 + 1e-12)) ++diag.growth_violations;
    if (!tangent_cone_admissible(field.domain(), s.x, b, 0.0)) ++diag.tangent_violations;
  }
  return diag;
}

/// max over pairs of <b(t,y) - b(t,x), y - x> / |y - x|^2.
template <int Dim>
double estimate_osl_modulus(const VelocityField<Dim>& field, double t,
                            const std::vector<std::pair<Vec<Dim>, Vec<Dim>>>& pairs) {
  if (pairs.empty()) throw ArgumentError("estimate_osl_modulus: empty pair list");
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& [x, y] : pairs) {
    const Vec<Dim> d = y - x;
    const double n2 = d.squaredNorm();
    if (n2 == 0.0) throw ArgumentError("estimate_osl_modulus: coincident pair");
    worst = std::max(worst, (field.eval(t, y) - field.eval(t, x)).dot(d) / n2);
  }
  return worst;
}

/// Latin hypercube over [t0,t1] x Ω: n stratified samples, each coordinate
/// hitting every stratum once.
template <int Dim>
std::vector<SpaceTimeSample<Dim>> latin_hypercube(std::size_t n, const SpatialDomain<Dim>& domain,
                                                  double t0, double t1, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<std::size_t>> perms(Dim + 1);
  for (auto& p : perms) {
    p.resize(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    std::shuffle(p.begin(), p.end(), rng);
  }
  std::vector<SpaceTimeSample<Dim>> out(n);
  const auto nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].t = t0 + (t1 - t0) * (static_cast<double>(perms[0][i]) + unit(rng)) / nn;
    for (int d = 0; d < Dim; ++d) {
      const double u = (static_cast<double>(perms[static_cast<std::size_t>(d) + 1][i]) + unit(rng)) / nn;
      out[i].x[d] = domain.lower()[d] + (domain.upper()[d] - domain.lower()[d]) * u;
    }
    out[i].x = domain.clamp(out[i].x);
  }
  return out;
}

}  // namespace untangled
