#pragma once

// Particle push-forward of an initial measure along a flow map: histograms,
// Dirac atoms, weak continuity residual and near incompressibility.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"
#include "untangled/select.hpp"

namespace untangled {

template <int Dim>
struct ParticleEnsemble {
  VecList<Dim> points;
  std::vector<double> weights;
  double total_mass = 0.0;  // in-order sum of weights, fixed at construction

  std::size_t size() const { return points.size(); }

  /// Cell midpoints of a regular grid with `per_axis` cells on each axis of
  /// the box [lower, upper]; equal weights summing to approximately its volume.
  static ParticleEnsemble uniform(const Vec<Dim>& lower, const Vec<Dim>& upper, std::size_t per_axis) {
    if (per_axis == 0) throw ConfigError("density.particles must be positive");
    for (int d = 0; d < Dim; ++d) {
      if (!(lower[d] < upper[d])) throw ConfigError("density.region: lower must be < upper");
    }
    std::size_t n = 1;
    for (int d = 0; d < Dim; ++d) n *= per_axis;
    const double w = (upper - lower).prod() / static_cast<double>(n);
    ParticleEnsemble e;
    e.points.reserve(n);
    for (std::size_t idx = 0; idx < n; ++idx) {
      Vec<Dim> p;
      std::size_t rem = idx;
      for (int d = Dim - 1; d >= 0; --d) {
        const std::size_t j = rem % per_axis;
        rem /= per_axis;
        p[d] = lower[d] + (upper[d] - lower[d]) * (static_cast<double>(j) + 0.5) / static_cast<double>(per_axis);
      }
      e.points.push_back(p);
    }
    e.weights.assign(n, w);
    e.total_mass = ordered_sum(e.weights);
    return e;
  }

  static ParticleEnsemble point_masses(VecList<Dim> points, std::vector<double> weights) {
    if (points.size() != weights.size()) throw ConfigError("density: points and weights differ in length");
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("density: weights must be positive");
    }
    ParticleEnsemble e;
    e.points = std::move(points);
    e.weights = std::move(weights);
    e.total_mass = ordered_sum(e.weights);
    return e;
  }

  static double ordered_sum(const std::vector<double>& w) {
    double s = 0.0;
    for (double v : w) s += v;
    return s;
  }
};

template <int Dim>
struct Atom {
  Vec<Dim> location;
  double mass = 0.0;
  std::size_t count = 0;
};

template <int Dim>
struct DensitySnapshot {
  double t = 0.0;
  Vec<Dim> bin_lower;
  Vec<Dim> bin_upper;
  std::size_t bins_per_axis = 0;
  std::vector<double> bin_mass;  // axis 0 varies slowest
  std::vector<Atom<Dim>> atoms;
  std::size_t clusters = 0;         // distinct particle clusters at merge_tol
  double particle_mass_sum = 0.0;   // in-order sum of all particle weights

  double cell_volume() const {
    return ((bin_upper - bin_lower) / static_cast<double>(bins_per_axis)).prod();
  }

  Vec<Dim> cell_center(std::size_t idx) const {
    Vec<Dim> c;
    std::size_t rem = idx;
    for (int d = Dim - 1; d >= 0; --d) {
      const std::size_t j = rem % bins_per_axis;
      rem /= bins_per_axis;
      c[d] = bin_lower[d] + (bin_upper[d] - bin_lower[d]) * (static_cast<double>(j) + 0.5) /
                                static_cast<double>(bins_per_axis);
    }
    return c;
  }

  double atom_mass() const {
    double m = 0.0;
    for (const auto& a : atoms) m += a.mass;
    return m;
  }

  double binned_mass() const {
    double m = 0.0;
    for (double v : bin_mass) m += v;
    return m;
  }
};

template <int Dim>
struct PushForwardOptions {
  std::size_t bins = 20;                 // per axis
  std::optional<Vec<Dim>> bin_lower;     // default: domain box
  std::optional<Vec<Dim>> bin_upper;
  double merge_tol = 0.0;                // 0: flow's funnel merge_tol
  std::size_t atom_min_count = 0;        // 0: max(2, ceil(0.01 N))
};

/// Flow seed index of every particle (seeded at the grid's start time).
template <int Dim>
std::vector<std::size_t> particle_seed_indices(const FlowMap<Dim>& flow, const ParticleEnsemble<Dim>& ens) {
  std::vector<std::size_t> idx(ens.size());
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto j = flow.find(flow.grid().t_start(), ens.points[i], 0.0);
    if (!j) throw ArgumentError("push_forward: particle seed missing from flow");
    idx[i] = *j;
  }
  return idx;
}

namespace detail {

/// Single-linkage clusters at distance tol; returns a cluster id per point,
/// ids numbered in order of first appearance.
template <int Dim>
std::vector<std::size_t> cluster_points(const VecList<Dim>& pts, double tol) {
  const std::size_t n = pts.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto root = [&](std::size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pts[a][0] < pts[b][0] || (pts[a][0] == pts[b][0] && a < b);
  });
  for (std::size_t oi = 0; oi < n; ++oi) {
    const std::size_t i = order[oi];
    for (std::size_t oj = oi + 1; oj < n; ++oj) {
      const std::size_t j = order[oj];
      if (pts[j][0] - pts[i][0] > tol) break;
      if ((pts[j] - pts[i]).norm() <= tol) {
        const std::size_t ri = root(i);
        const std::size_t rj = root(j);
        if (ri != rj) parent[std::max(ri, rj)] = std::min(ri, rj);
      }
    }
  }
  std::vector<std::size_t> id(n);
  std::vector<std::size_t> label(n, std::numeric_limits<std::size_t>::max());
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = root(i);
    if (label[r] == std::numeric_limits<std::size_t>::max()) label[r] = next++;
    id[i] = label[r];
  }
  return id;
}

}  // namespace detail

/// Particles moved to X(t, 0, x_i); large clusters become atoms, the rest is
/// binned. Weights are never rescaled.
template <int Dim>
DensitySnapshot<Dim> push_forward(const FlowMap<Dim>& flow, const ParticleEnsemble<Dim>& ens,
                                  const std::vector<std::size_t>& seed_idx, double t,
                                  const PushForwardOptions<Dim>& opt = {}) {
  if (seed_idx.size() != ens.size()) throw ArgumentError("push_forward: seed index list size mismatch");
  if (opt.bins == 0) throw ConfigError("density.bins must be positive");
  const std::size_t k = flow.grid().require_index(t);
  const std::size_t n = ens.size();

  VecList<Dim> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = flow.state_at_node(seed_idx[i], k);

  DensitySnapshot<Dim> snap;
  snap.t = flow.grid()[k];
  snap.bins_per_axis = opt.bins;
  const SpatialDomain<Dim>* dom = flow.field() ? &flow.field()->domain() : nullptr;
  if (opt.bin_lower && opt.bin_upper) {
    snap.bin_lower = *opt.bin_lower;
    snap.bin_upper = *opt.bin_upper;
  } else if (dom) {
    snap.bin_lower = dom->lower();
    snap.bin_upper = dom->upper();
  } else {
    throw ArgumentError("push_forward: no bin box and no domain");
  }
  snap.particle_mass_sum = ParticleEnsemble<Dim>::ordered_sum(ens.weights);

  double tol = opt.merge_tol;
  if (tol <= 0.0) tol = flow.params().funnel.merge_tol;
  if (tol <= 0.0 && dom) tol = 1e-8 * dom->diameter();
  const std::size_t min_count =
      opt.atom_min_count > 0 ? opt.atom_min_count
                             : std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(n))));

  const auto cid = detail::cluster_points(pos, tol);
  std::size_t nclusters = 0;
  for (auto c : cid) nclusters = std::max(nclusters, c + 1);
  snap.clusters = nclusters;
  std::vector<std::size_t> count(nclusters, 0);
  for (auto c : cid) ++count[c];

  std::vector<std::optional<std::size_t>> atom_of(nclusters);
  std::vector<Vec<Dim>> moment;
  std::size_t total_bins = 1;
  for (int d = 0; d < Dim; ++d) total_bins *= opt.bins;
  snap.bin_mass.assign(total_bins, 0.0);
  const Vec<Dim> h = (snap.bin_upper - snap.bin_lower) / static_cast<double>(opt.bins);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = cid[i];
    const double w = ens.weights[i];
    if (count[c] >= min_count) {
      if (!atom_of[c]) {
        atom_of[c] = snap.atoms.size();
        snap.atoms.push_back({Vec<Dim>::Zero(), 0.0, 0});
        moment.push_back(Vec<Dim>::Zero());
      }
      auto& a = snap.atoms[*atom_of[c]];
      a.mass += w;
      a.count += 1;
      moment[*atom_of[c]] += w * pos[i];
      continue;
    }
    std::size_t flat = 0;
    for (int d = 0; d < Dim; ++d) {
      const double u = std::floor((pos[i][d] - snap.bin_lower[d]) / h[d]);
      const auto j = static_cast<std::size_t>(std::clamp(u, 0.0, static_cast<double>(opt.bins - 1)));
      flat = flat * opt.bins + j;
    }
    snap.bin_mass[flat] += w;
  }
  for (std::size_t a = 0; a < snap.atoms.size(); ++a) snap.atoms[a].location = moment[a] / snap.atoms[a].mass;
  return snap;
}

template <int Dim>
DensitySnapshot<Dim> push_forward(const FlowMap<Dim>& flow, const ParticleEnsemble<Dim>& ens, double t,
                                  const PushForwardOptions<Dim>& opt = {}) {
  return push_forward(flow, ens, particle_seed_indices(flow, ens), t, opt);
}

/// psi(t,z) = amplitude * beta((t - tc)/rt) * beta(|z - c|/r), beta(u) = (1-u^2)^2
/// on |u| < 1: a C^1 bump compactly supported in space-time.
template <int Dim>
struct SpaceTimeBump {
  double t_center = 0.0;
  double t_radius = 1.0;
  Vec<Dim> center;
  double radius = 1.0;
  double amplitude = 1.0;

  double value(double t, const Vec<Dim>& z) const {
    const double tau = (t - t_center) / t_radius;
    const double rho2 = (z - center).squaredNorm() / (radius * radius);
    if (std::abs(tau) >= 1.0 || rho2 >= 1.0) return 0.0;
    return amplitude * sq(1.0 - tau * tau) * sq(1.0 - rho2);
  }

  /// (d/dt psi, grad_z psi)
  std::pair<double, Vec<Dim>> derivatives(double t, const Vec<Dim>& z) const {
    const double tau = (t - t_center) / t_radius;
    const double rho2 = (z - center).squaredNorm() / (radius * radius);
    if (std::abs(tau) >= 1.0 || rho2 >= 1.0) return {0.0, Vec<Dim>::Zero()};
    const double bt = sq(1.0 - tau * tau);
    const double bz = sq(1.0 - rho2);
    const double dbt = -4.0 * tau * (1.0 - tau * tau) / t_radius;
    const Vec<Dim> dbz = (-4.0 * (1.0 - rho2) / (radius * radius)) * (z - center);
    return {amplitude * dbt * bz, amplitude * bt * dbz};
  }

 private:
  static double sq(double v) { return v * v; }
};

/// max over test functions of |sum_i w_i ∫ (psi_t + v . grad psi)(t, X(t,0,x_i)) dt|,
/// with v the path's own discrete velocity and the midpoint rule per step.
template <int Dim>
double continuity_residual(const FlowMap<Dim>& flow, const ParticleEnsemble<Dim>& ens,
                           const std::vector<std::size_t>& seed_idx, const std::vector<SpaceTimeBump<Dim>>& tests) {
  double worst = 0.0;
  for (const auto& psi : tests) {
    double total = 0.0;
    for (std::size_t i = 0; i < ens.size(); ++i) {
      const auto& tr = flow.selected(seed_idx[i]);
      double acc = 0.0;
      for (std::size_t k = 0; k + 1 < tr.size(); ++k) {
        const double dt = tr.times[k + 1] - tr.times[k];
        const Vec<Dim> v = (tr.states[k + 1] - tr.states[k]) / dt;
        const double tm = 0.5 * (tr.times[k] + tr.times[k + 1]);
        const Vec<Dim> zm = 0.5 * (tr.states[k] + tr.states[k + 1]);
        const auto [pt, grad] = psi.derivatives(tm, zm);
        acc += dt * (pt + v.dot(grad));
      }
      total += ens.weights[i] * acc;
    }
    worst = std::max(worst, std::abs(total));
  }
  return worst;
}

struct IncompressibilityReport {
  bool ok = false;
  double worst_ratio = 1.0;
};

/// Every nonempty bin density over the reference density must lie in
/// [1/c_bound, c_bound]; any atom fails the check.
template <int Dim>
IncompressibilityReport near_incompressibility(const std::vector<DensitySnapshot<Dim>>& snapshots, double c_bound,
                                               double reference_density) {
  IncompressibilityReport rep;
  rep.ok = true;
  for (const auto& s : snapshots) {
    if (!s.atoms.empty()) {
      rep.ok = false;
      rep.worst_ratio = std::numeric_limits<double>::infinity();
      continue;
    }
    const double vol = s.cell_volume();
    for (double m : s.bin_mass) {
      if (m <= 0.0) continue;
      const double r = m / vol / reference_density;
      rep.worst_ratio = std::max(rep.worst_ratio, std::max(r, 1.0 / r));
    }
  }
  if (rep.worst_ratio > c_bound) rep.ok = false;
  return rep;
}

}  // namespace untangled
