#pragma once

// Solution funnel of gamma' ∈ F(t, gamma) approximated by a beam of branching
// forward Euler paths.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"
#include "untangled/filippov.hpp"
#include "untangled/schedule.hpp"

namespace untangled {

template <int Dim>
struct Trajectory {
  double start_time = 0.0;
  std::vector<double> times;
  VecList<Dim> states;

  std::size_t size() const { return times.size(); }
  const Vec<Dim>& start_point() const { return states.front(); }
  const Vec<Dim>& end_point() const { return states.back(); }
  double end_time() const { return times.back(); }

  /// Position of node t in `times` (tolerance 1e-9 of the smallest step).
  std::optional<std::size_t> index_of(double t) const {
    double h = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < times.size(); ++k) h = std::min(h, times[k + 1] - times[k]);
    const double tol = std::isfinite(h) ? 1e-9 * h : 1e-12 * std::max(1.0, std::abs(t));
    const auto it = std::lower_bound(times.begin(), times.end(), t - tol);
    if (it != times.end() && std::abs(*it - t) <= tol) return static_cast<std::size_t>(it - times.begin());
    return std::nullopt;
  }

  const Vec<Dim>& at(double t) const {
    auto k = index_of(t);
    if (!k) throw ArgumentError("trajectory: time is not a node of the trajectory");
    return states[*k];
  }
};

template <int Dim>
struct FunnelParams {
  EnvelopeParams<Dim> envelope;
  std::size_t branch_factor = 2;
  std::size_t beam_width = 16;
  double merge_tol = 0.0;  // 0: 1e-8 diam(Ω)
  double resid_tol = 0.0;  // 0: 10 dt growth_c

  /// Copy with defaults filled in for the given field and grid.
  FunnelParams resolved(const VelocityField<Dim>& field, const TimeGrid& grid) const {
    FunnelParams p = *this;
    if (p.envelope.delta_schedule.empty()) p.envelope.delta_schedule = default_delta_schedule(field.domain());
    p.envelope.validate();
    if (p.beam_width == 0) throw ConfigError("funnel.beam_width must be positive");
    if (p.merge_tol < 0.0) throw ConfigError("funnel.merge_tol must be nonnegative");
    if (p.resid_tol < 0.0) throw ConfigError("funnel.resid_tol must be nonnegative");
    if (p.merge_tol == 0.0) p.merge_tol = 1e-8 * field.domain().diameter();
    if (p.resid_tol == 0.0) p.resid_tol = 10.0 * grid.max_step() * field.growth_c() + 1e-9;
    return p;
  }
};

template <int Dim>
struct Funnel {
  double seed_time = 0.0;
  Vec<Dim> seed_point;
  std::vector<Trajectory<Dim>> members;
  std::vector<double> residuals;  // inclusion residual of each member
  std::size_t beam_width = 0;
  std::size_t branch_factor = 0;

  std::size_t size() const { return members.size(); }
};

/// Extra inputs steering the beam. With a ranking schedule, duplicates keep
/// the path whose partial score vector ranks higher and pruning always keeps
/// the top-ranked paths. Anchors are points the integrator tries to land on
/// exactly whenever the required velocity lies in the envelope.
template <int Dim>
struct BranchingOptions {
  const FunctionalSchedule<Dim>* ranking = nullptr;
  VecList<Dim> anchors;
};

namespace detail {

template <int Dim>
VecList<Dim> branch_directions(std::size_t bf) {
  VecList<Dim> out;
  for (std::size_t i = 0; i < bf; ++i) {
    if constexpr (Dim == 1) {
      out.emplace_back(i % 2 == 0 ? 1.0 : -1.0);
    } else {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(bf);
      out.emplace_back(std::cos(a), std::sin(a));
    }
  }
  return out;
}

inline std::vector<double> discount_row(const std::vector<double>& lambdas, double t) {
  std::vector<double> out(lambdas.size());
  for (std::size_t e = 0; e < lambdas.size(); ++e) out[e] = std::exp(-lambdas[e] * t);
  return out;
}

}  // namespace detail

/// Residual max_k dist((x_{k+1} - x_k) / dt, F(t_k, x_k)).
template <int Dim>
double inclusion_residual(const Trajectory<Dim>& traj, const VelocityField<Dim>& field,
                          const EnvelopeParams<Dim>& params) {
  auto dirs = DirectionSet<Dim>::make(params.n_dir);
  double r = 0.0;
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const auto env = filippov_envelope(field, traj.times[k], traj.states[k], dirs, params);
    const Vec<Dim> v = (traj.states[k + 1] - traj.states[k]) / (traj.times[k + 1] - traj.times[k]);
    r = std::max(r, set_distance(env, v));
  }
  return r;
}

template <int Dim>
Funnel<Dim> integrate_branching(const VelocityField<Dim>& field, const FunnelParams<Dim>& raw_params, double s,
                                const VecIn<Dim>& x, const TimeGrid& grid, const BranchingOptions<Dim>& options = {}) {
  const FunnelParams<Dim> params = raw_params.resolved(field, grid);
  const auto& domain = field.domain();
  if (!domain.contains(x)) throw DomainError("integrate_branching: seed point outside domain");
  const std::size_t k0 = grid.require_index(s);
  const std::size_t n = grid.n_steps();
  auto dirs = DirectionSet<Dim>::make(params.envelope.n_dir);
  const auto branch_dirs = detail::branch_directions<Dim>(params.branch_factor);

  const FunctionalSchedule<Dim>* rank = options.ranking;
  std::vector<double> lambdas;
  if (rank) {
    for (const auto& e : rank->entries()) lambdas.push_back(e.lambda);
  }
  const std::size_t nk = lambdas.size();
  // Entries share tents; each distinct tent is evaluated once per point.
  std::vector<Tent<Dim>> tents;
  std::vector<std::size_t> tent_of(nk);
  for (std::size_t e = 0; e < nk; ++e) {
    const auto& te = (*rank)[e].tent;
    std::size_t j = 0;
    while (j < tents.size() && !(tents[j].center == te.center && tents[j].steepness == te.steepness &&
                                 tents[j].amplitude == te.amplitude)) {
      ++j;
    }
    if (j == tents.size()) tents.push_back(te);
    tent_of[e] = j;
  }
  std::vector<double> tent_val(tents.size());
  // Writes disc[e] * tent_e(y) to out[e].
  auto integrand = [&](const std::vector<double>& disc, const Vec<Dim>& y, double* out) {
    for (std::size_t j = 0; j < tents.size(); ++j) tent_val[j] = tents[j](y);
    for (std::size_t e = 0; e < nk; ++e) out[e] = disc[e] * tent_val[tent_of[e]];
  };

  struct Node {
    std::size_t parent;
    Vec<Dim> state;
    double resid;
  };
  struct Live {
    std::size_t node;
    double length;
  };
  struct Candidate {
    std::size_t parent_live;
    Vec<Dim> state;
    double resid;
    double length;
  };
  // Score vectors and last integrand rows live in flat buffers, nk per path.
  std::vector<double> live_score, live_g, cand_score, cand_g;
  auto score_of = [&](std::size_t i) { return std::span<const double>(cand_score.data() + i * nk, nk); };

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<Node> arena;
  arena.push_back({kNone, x, 0.0});
  std::vector<Live> live;
  live.push_back({0, 0.0});
  live_score.assign(nk, 0.0);
  live_g.assign(nk, 0.0);
  if (rank) integrand(detail::discount_row(lambdas, grid[k0]), x, live_g.data());

  const double snap = 1e-12 * domain.diameter();
  std::vector<Candidate> cand;
  for (std::size_t k = k0; k < n; ++k) {
    const double t = grid[k];
    const double dt = grid.step(k);
    const auto disc_next = detail::discount_row(lambdas, grid[k + 1]);
    cand.clear();
    cand_score.clear();
    cand_g.clear();

    for (std::size_t p = 0; p < live.size(); ++p) {
      const Vec<Dim> xk = arena[live[p].node].state;
      const auto env = filippov_envelope(field, t, xk, dirs, params.envelope);
      const std::size_t first = cand.size();
      auto push = [&](const VecIn<Dim>& y) {
        for (std::size_t i = first; i < cand.size(); ++i) {
          if (cand[i].state == y) return;
        }
        const Vec<Dim> v = (y - xk) / dt;
        const double r = set_distance(env, v);
        if (r > params.resid_tol) return;
        cand.push_back({p, y, std::max(r, arena[live[p].node].resid), live[p].length + (y - xk).norm()});
        if (rank) {
          const std::size_t off = cand_g.size();
          cand_g.resize(off + nk);
          cand_score.resize(off + nk);
          integrand(disc_next, y, cand_g.data() + off);
          for (std::size_t e = 0; e < nk; ++e) {
            cand_score[off + e] = live_score[p * nk + e] + 0.5 * dt * (live_g[p * nk + e] + cand_g[off + e]);
          }
        }
      };
      auto try_velocity = [&](Vec<Dim> v) {
        v = tangent_clamp(domain, xk, v);
        Vec<Dim> y = xk + dt * v;
        if (!domain.contains(y)) {
          if (domain.distance(y) > snap) return;
          y = domain.clamp(y);
        }
        push(y);
      };

      try_velocity(project_to_envelope(env, field.eval(t, xk)));
      try_velocity(project_to_envelope(env, Vec<Dim>::Zero()));
      for (const auto& xi : branch_dirs) try_velocity(extreme_velocity(env, xi));

      if (!options.anchors.empty()) {
        double reach = 0.0;
        for (const auto& v : env.vertices()) reach = std::max(reach, v.norm());
        reach = dt * reach * (1.0 + 1e-12) + snap;
        const double tol = 1e-10 * env.scale();
        for (const auto& a : options.anchors) {
          if ((a - xk).norm() > reach || !domain.contains(a)) continue;
          const Vec<Dim> v = (a - xk) / dt;
          if (set_distance(env, v) > tol) continue;
          if (!tangent_cone_admissible(domain, xk, v, 0.0)) continue;
          push(a);
        }
      }
    }
    if (cand.empty()) {
      throw InfeasibleError("integrate_branching: every branch left the domain at t=" + std::to_string(t));
    }

    // Merge candidates closer than merge_tol. The survivor ranks higher, or on
    // a tie has the shorter path.
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      bool merged = false;
      for (auto& j : kept) {
        if ((cand[i].state - cand[j].state).norm() <= params.merge_tol) {
          const int cmp = rank ? compare_scores(score_of(i), score_of(j)) : 0;
          if (cmp < 0 || (cmp == 0 && cand[i].length < cand[j].length - params.merge_tol)) j = i;
          merged = true;
          break;
        }
      }
      if (!merged) kept.push_back(i);
    }

    // Prune to the beam: top-ranked first, then farthest-point spread.
    std::vector<std::size_t> chosen;
    if (kept.size() <= params.beam_width) {
      chosen = kept;
    } else {
      std::vector<bool> taken(kept.size(), false);
      std::size_t reserved = 1;
      std::vector<std::size_t> order(kept.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      if (rank) {
        reserved = std::max<std::size_t>(1, params.beam_width / 4);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          return compare_scores(score_of(kept[a]), score_of(kept[b])) < 0;
        });
      }
      for (std::size_t r = 0; r < reserved && r < order.size(); ++r) {
        taken[order[r]] = true;
        chosen.push_back(kept[order[r]]);
      }
      std::vector<double> dist(kept.size(), std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < kept.size(); ++i) {
        for (auto c : chosen) dist[i] = std::min(dist[i], (cand[kept[i]].state - cand[c].state).norm());
      }
      while (chosen.size() < params.beam_width) {
        std::size_t best = kNone;
        for (std::size_t i = 0; i < kept.size(); ++i) {
          if (!taken[i] && (best == kNone || dist[i] > dist[best])) best = i;
        }
        if (best == kNone) break;
        taken[best] = true;
        chosen.push_back(kept[best]);
        for (std::size_t i = 0; i < kept.size(); ++i) {
          dist[i] = std::min(dist[i], (cand[kept[i]].state - cand[kept[best]].state).norm());
        }
      }
      std::sort(chosen.begin(), chosen.end());
    }

    std::vector<Live> next;
    next.reserve(chosen.size());
    live_score.resize(chosen.size() * nk);
    live_g.resize(chosen.size() * nk);
    for (std::size_t q = 0; q < chosen.size(); ++q) {
      const auto& c = cand[chosen[q]];
      arena.push_back({live[c.parent_live].node, c.state, c.resid});
      next.push_back({arena.size() - 1, c.length});
      std::copy_n(cand_score.begin() + static_cast<std::ptrdiff_t>(chosen[q] * nk), nk,
                  live_score.begin() + static_cast<std::ptrdiff_t>(q * nk));
      std::copy_n(cand_g.begin() + static_cast<std::ptrdiff_t>(chosen[q] * nk), nk,
                  live_g.begin() + static_cast<std::ptrdiff_t>(q * nk));
    }
    live = std::move(next);
  }

  Funnel<Dim> f;
  f.seed_time = grid[k0];
  f.seed_point = x;
  f.beam_width = params.beam_width;
  f.branch_factor = params.branch_factor;
  for (const auto& l : live) {
    Trajectory<Dim> tr;
    tr.start_time = grid[k0];
    tr.times.assign(grid.nodes().begin() + static_cast<std::ptrdiff_t>(k0), grid.nodes().end());
    tr.states.resize(tr.times.size());
    std::size_t node = l.node;
    for (std::size_t i = tr.times.size(); i-- > 0;) {
      tr.states[i] = arena[node].state;
      node = arena[node].parent;
    }
    f.members.push_back(std::move(tr));
    f.residuals.push_back(arena[l.node].resid);
  }
  return f;
}

/// gamma on [start, s] followed by eta on (s, T].
template <int Dim>
Trajectory<Dim> splice(const Trajectory<Dim>& gamma, const Trajectory<Dim>& eta, double s, double merge_tol) {
  const auto ks = gamma.index_of(s);
  if (!ks) throw ArgumentError("splice: s is not a node of gamma");
  if (eta.times.empty() || std::abs(eta.start_time - gamma.times[*ks]) > 1e-9 * std::max(1.0, std::abs(s))) {
    throw ArgumentError("splice: eta must start at s");
  }
  if ((gamma.states[*ks] - eta.start_point()).norm() > merge_tol) {
    throw ArgumentError("splice: gamma(s) and eta(s) differ by more than merge_tol");
  }
  Trajectory<Dim> out;
  out.start_time = gamma.start_time;
  out.times.assign(gamma.times.begin(), gamma.times.begin() + static_cast<std::ptrdiff_t>(*ks + 1));
  out.states.assign(gamma.states.begin(), gamma.states.begin() + static_cast<std::ptrdiff_t>(*ks + 1));
  out.times.insert(out.times.end(), eta.times.begin() + 1, eta.times.end());
  out.states.insert(out.states.end(), eta.states.begin() + 1, eta.states.end());
  return out;
}

/// Tail of gamma from node s.
template <int Dim>
Trajectory<Dim> restrict_from(const Trajectory<Dim>& gamma, double s) {
  const auto ks = gamma.index_of(s);
  if (!ks) throw ArgumentError("restrict: s is not a node in the trajectory's range");
  Trajectory<Dim> out;
  out.start_time = gamma.times[*ks];
  out.times.assign(gamma.times.begin() + static_cast<std::ptrdiff_t>(*ks), gamma.times.end());
  out.states.assign(gamma.states.begin() + static_cast<std::ptrdiff_t>(*ks), gamma.states.end());
  return out;
}

/// Tolerance for the growth bound: envelopes read b on balls of radius delta,
/// which inflates the admissible speed by growth_c * delta.
inline double gronwall_tolerance(double growth_c, double horizon, double delta_final) {
  return delta_final * std::expm1(growth_c * horizon) + 1e-9;
}

/// Number of states with |gamma(t)| > (|x| + c (t-s)) exp(c (t-s)) + tol.
template <int Dim>
std::size_t gronwall_violations(const Trajectory<Dim>& traj, double growth_c, double tol) {
  std::size_t v = 0;
  const double r0 = traj.start_point().norm();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double dt = traj.times[k] - traj.start_time;
    const double bound = (r0 + growth_c * dt) * std::exp(growth_c * dt) + tol;
    if (traj.states[k].norm() > bound) ++v;
  }
  return v;
}

/// Largest discrete speed |x_{k+1} - x_k| / dt.
template <int Dim>
double max_speed(const Trajectory<Dim>& traj) {
  double s = 0.0;
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    s = std::max(s, (traj.states[k + 1] - traj.states[k]).norm() / (traj.times[k + 1] - traj.times[k]));
  }
  return s;
}

}  // namespace untangled
