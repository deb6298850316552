#pragma once

// Selection by iterated maximization over the funnel, flow maps on seed sets,
// and the semigroup / untangledness certificates.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"
#include "untangled/funnel.hpp"
#include "untangled/schedule.hpp"

namespace untangled {

/// Trapezoid rule for ∫ exp(-lambda t) phi(gamma(t)) dt over the trajectory's nodes.
template <int Dim>
double functional_value(const Trajectory<Dim>& gamma, double lambda, const Tent<Dim>& phi) {
  double sum = 0.0;
  double prev = std::exp(-lambda * gamma.times[0]) * phi(gamma.states[0]);
  for (std::size_t k = 0; k + 1 < gamma.size(); ++k) {
    const double next = std::exp(-lambda * gamma.times[k + 1]) * phi(gamma.states[k + 1]);
    sum += 0.5 * (gamma.times[k + 1] - gamma.times[k]) * (prev + next);
    prev = next;
  }
  return sum;
}

/// Lexicographic order on sampled states, used as the final tie-break.
template <int Dim>
bool canonical_less(const Trajectory<Dim>& a, const Trajectory<Dim>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t k = 0; k < n; ++k) {
    for (int d = 0; d < Dim; ++d) {
      if (a.states[k][d] < b.states[k][d]) return true;
      if (b.states[k][d] < a.states[k][d]) return false;
    }
  }
  return a.size() < b.size();
}

struct SelectionResult {
  std::size_t index = 0;            // position in funnel.members
  std::size_t singleton_stage = 0;  // number of stages used; 0 for a one-member funnel
  bool tie_broken = false;          // survivors remained after the last stage
  std::vector<std::size_t> survivors_per_stage;
};

/// Filters the funnel stage by stage, keeping members within tie_tol (relative
/// to the stage's value range) of the stage maximum.
template <int Dim>
SelectionResult iterated_argmax(const Funnel<Dim>& funnel, const FunctionalSchedule<Dim>& schedule,
                                double tie_tol = 1e-9) {
  if (funnel.members.empty()) throw ArgumentError("iterated_argmax: empty funnel");
  if (schedule.empty()) throw ArgumentError("iterated_argmax: empty schedule");
  SelectionResult res;
  std::vector<std::size_t> alive(funnel.members.size());
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
  if (alive.size() == 1) {
    res.index = 0;
    return res;
  }
  std::vector<double> vals;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    vals.resize(alive.size());
    for (std::size_t i = 0; i < alive.size(); ++i) {
      vals[i] = functional_value(funnel.members[alive[i]], schedule[k].lambda, schedule[k].tent);
    }
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    const double cut = *hi - tie_tol * (*hi - *lo);
    std::vector<std::size_t> next;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      if (vals[i] >= cut) next.push_back(alive[i]);
    }
    alive = std::move(next);
    res.survivors_per_stage.push_back(alive.size());
    if (alive.size() == 1) {
      res.index = alive[0];
      res.singleton_stage = k + 1;
      return res;
    }
  }
  res.tie_broken = true;
  res.singleton_stage = schedule.size();
  res.index = *std::min_element(alive.begin(), alive.end(), [&](std::size_t a, std::size_t b) {
    return canonical_less(funnel.members[a], funnel.members[b]);
  });
  return res;
}

template <int Dim>
struct FlowParams {
  FunnelParams<Dim> funnel;
  std::size_t K = 32;
  int levels = 3;
  double tie_tol = 1e-9;
  bool ranked_beam = true;  // steer dedup and pruning by the schedule
  bool anchors = true;      // let paths land exactly on tent centres
};

template <int Dim>
struct FlowSeed {
  double s;
  Vec<Dim> x;
};

/// Selected trajectories X(., s, x) on a finite seed set.
template <int Dim>
class FlowMap {
 public:
  FlowMap(TimeGrid grid, FlowParams<Dim> params, FunctionalSchedule<Dim> schedule,
          std::shared_ptr<const VelocityField<Dim>> field)
      : grid_(std::move(grid)), params_(std::move(params)), schedule_(std::move(schedule)), field_(std::move(field)) {}

  const TimeGrid& grid() const { return grid_; }
  const FlowParams<Dim>& params() const { return params_; }
  const FunctionalSchedule<Dim>& schedule() const { return schedule_; }
  const VelocityField<Dim>* field() const { return field_.get(); }
  std::shared_ptr<const VelocityField<Dim>> field_ptr() const { return field_; }

  std::size_t size() const { return seeds_.size(); }
  const FlowSeed<Dim>& seed(std::size_t i) const { return seeds_[i]; }
  const Trajectory<Dim>& selected(std::size_t i) const { return selected_[i]; }
  double residual(std::size_t i) const { return residuals_[i]; }
  const SelectionResult& selection(std::size_t i) const { return selection_[i]; }
  std::size_t funnel_size(std::size_t i) const { return funnel_sizes_[i]; }
  std::size_t seed_index_in_grid(std::size_t i) const { return seed_k_[i]; }

  double max_residual() const {
    double r = 0.0;
    for (double v : residuals_) r = std::max(r, v);
    return r;
  }

  /// X(t, s_i, x_i) for a grid node t >= s_i.
  const Vec<Dim>& state(std::size_t i, double t) const { return selected_[i].at(t); }
  const Vec<Dim>& state_at_node(std::size_t i, std::size_t k) const {
    if (k < seed_k_[i]) throw ArgumentError("flow: time precedes the seed time");
    return selected_[i].states[k - seed_k_[i]];
  }

  /// Seed with start time s nearest to x within snap_tol.
  std::optional<std::size_t> find(double s, const Vec<Dim>& x, double snap_tol) const {
    const auto k = grid_.index_of(s);
    if (!k) return std::nullopt;
    if (auto e = exact_.find(key(*k, x)); e != exact_.end()) return e->second;
    if (snap_tol <= 0.0) return std::nullopt;
    const auto it = by_time_.find(*k);
    if (it == by_time_.end()) return std::nullopt;
    std::optional<std::size_t> best;
    double best_d = std::numeric_limits<double>::infinity();
    for (auto i : it->second) {
      const double d = (seeds_[i].x - x).norm();
      if (d <= snap_tol && d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

  void add(FlowSeed<Dim> seed, Trajectory<Dim> traj, double residual, SelectionResult sel, std::size_t funnel_size) {
    const std::size_t k = grid_.require_index(seed.s);
    by_time_[k].push_back(seeds_.size());
    exact_.emplace(key(k, seed.x), seeds_.size());
    seed_k_.push_back(k);
    seeds_.push_back(std::move(seed));
    selected_.push_back(std::move(traj));
    residuals_.push_back(residual);
    selection_.push_back(std::move(sel));
    funnel_sizes_.push_back(funnel_size);
  }

 private:
  using Key = std::pair<std::size_t, std::array<double, Dim>>;
  static Key key(std::size_t k, const Vec<Dim>& x) {
    std::array<double, Dim> a{};
    for (int d = 0; d < Dim; ++d) a[static_cast<std::size_t>(d)] = x[d];
    return {k, a};
  }

  TimeGrid grid_;
  FlowParams<Dim> params_;
  FunctionalSchedule<Dim> schedule_;
  std::shared_ptr<const VelocityField<Dim>> field_;
  std::vector<FlowSeed<Dim>> seeds_;
  std::vector<std::size_t> seed_k_;
  std::vector<Trajectory<Dim>> selected_;
  std::vector<double> residuals_;
  std::vector<SelectionResult> selection_;
  std::vector<std::size_t> funnel_sizes_;
  std::map<std::size_t, std::vector<std::size_t>> by_time_;
  std::map<Key, std::size_t> exact_;
};

/// Appends the selected trajectory of every seed not already present.
template <int Dim>
void extend_flow(FlowMap<Dim>& flow, const std::vector<FlowSeed<Dim>>& seeds) {
  if (!flow.field()) throw ArgumentError("extend_flow: flow has no field attached");
  std::vector<FlowSeed<Dim>> fresh;
  std::set<std::pair<double, std::array<double, Dim>>> pending;
  for (const auto& sd : seeds) {
    if (flow.find(sd.s, sd.x, 0.0)) continue;
    std::array<double, Dim> a{};
    for (int d = 0; d < Dim; ++d) a[static_cast<std::size_t>(d)] = sd.x[d];
    if (pending.emplace(sd.s, a).second) fresh.push_back(sd);
  }
  const auto& field = *flow.field();
  const auto& schedule = flow.schedule();
  const auto& params = flow.params();
  BranchingOptions<Dim> opts;
  if (params.ranked_beam) opts.ranking = &schedule;
  if (params.anchors) opts.anchors = schedule.centers();

  std::vector<Funnel<Dim>> funnels(fresh.size());
  std::vector<SelectionResult> picks(fresh.size());
  parallel_for(fresh.size(), [&](std::size_t i) {
    funnels[i] = integrate_branching(field, params.funnel, fresh[i].s, fresh[i].x, flow.grid(), opts);
    picks[i] = iterated_argmax(funnels[i], schedule, params.tie_tol);
  });
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    const auto idx = picks[i].index;
    flow.add(fresh[i], std::move(funnels[i].members[idx]), funnels[i].residuals[idx], picks[i], funnels[i].size());
  }
}

template <int Dim>
FlowMap<Dim> build_flow(const VelocityField<Dim>& field, const std::vector<FlowSeed<Dim>>& seeds,
                        const TimeGrid& grid, const FlowParams<Dim>& params) {
  auto schedule = FunctionalSchedule<Dim>::dyadic(field.domain(), params.K, params.levels);
  FlowMap<Dim> flow(grid, params, std::move(schedule), std::make_shared<const VelocityField<Dim>>(field));
  for (const auto& sd : seeds) {
    if (!field.domain().contains(sd.x)) throw DomainError("build_flow: seed outside domain");
    grid.require_index(sd.s);
  }
  extend_flow(flow, seeds);
  return flow;
}

template <int Dim>
struct SemigroupTriple {
  double r, s, t;
  Vec<Dim> x;
};

struct SemigroupReport {
  double max_defect = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// max |X(t,r,x) - X(t,s,X(s,r,x))|; intermediate points snap to seeds.
template <int Dim>
SemigroupReport check_semigroup(const FlowMap<Dim>& flow, const std::vector<SemigroupTriple<Dim>>& triples,
                                double snap_tol) {
  SemigroupReport rep;
  for (const auto& tr : triples) {
    if (!(tr.r <= tr.s && tr.s <= tr.t)) throw ArgumentError("check_semigroup: need r <= s <= t");
    const auto i = flow.find(tr.r, tr.x, snap_tol);
    if (!i) {
      ++rep.skipped;
      continue;
    }
    const Vec<Dim> y = flow.state(*i, tr.s);
    const auto j = flow.find(tr.s, y, snap_tol);
    if (!j) {
      ++rep.skipped;
      continue;
    }
    rep.max_defect = std::max(rep.max_defect, (flow.state(*i, tr.t) - flow.state(*j, tr.t)).norm());
    ++rep.evaluated;
  }
  return rep;
}

/// Seeds (r, x) and (s, X(s,r,x)) that make every triple snap exactly.
template <int Dim>
std::vector<FlowSeed<Dim>> semigroup_seeds(FlowMap<Dim>& flow, const std::vector<SemigroupTriple<Dim>>& triples) {
  std::vector<FlowSeed<Dim>> first;
  for (const auto& tr : triples) first.push_back({tr.r, tr.x});
  extend_flow(flow, first);
  std::vector<FlowSeed<Dim>> second;
  for (const auto& tr : triples) {
    const auto i = flow.find(tr.r, tr.x, 0.0);
    second.push_back({tr.s, flow.state(*i, tr.s)});
  }
  return second;
}

/// r, s, t drawn from n equispaced grid nodes (r <= s <= t) for every point.
template <int Dim>
std::vector<SemigroupTriple<Dim>> triple_grid(const TimeGrid& grid, std::size_t n, const VecList<Dim>& points) {
  std::vector<double> ts;
  const std::size_t steps = grid.n_steps();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = n == 1 ? 0 : (i * steps) / (n - 1);
    if (ts.empty() || grid[k] != ts.back()) ts.push_back(grid[k]);
  }
  std::vector<SemigroupTriple<Dim>> out;
  for (const auto& x : points) {
    for (std::size_t a = 0; a < ts.size(); ++a) {
      for (std::size_t b = a; b < ts.size(); ++b) {
        for (std::size_t c = b; c < ts.size(); ++c) out.push_back({ts[a], ts[b], ts[c], x});
      }
    }
  }
  return out;
}

struct UntangledReport {
  std::size_t violations = 0;
  double worst_resep = 0.0;
  std::size_t merged_pairs = 0;
};

/// For every pair of the given seeds sharing a start time: once the two flow lines come
/// within merge_tol, their later separation must stay below resep_tol.
template <int Dim>
UntangledReport check_untangled(const FlowMap<Dim>& flow, const std::vector<std::size_t>& seeds, double merge_tol,
                                double resep_tol) {
  UntangledReport rep;
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i : seeds) groups[flow.seed_index_in_grid(i)].push_back(i);
  for (const auto& [k0, ids] : groups) {
    for (std::size_t a = 0; a < ids.size(); ++a) {
      const auto& ga = flow.selected(ids[a]).states;
      for (std::size_t b = a + 1; b < ids.size(); ++b) {
        const auto& gb = flow.selected(ids[b]).states;
        bool merged = false;
        double worst = 0.0;
        for (std::size_t k = 0; k < ga.size(); ++k) {
          const double d = (ga[k] - gb[k]).norm();
          if (!merged && d <= merge_tol) merged = true;
          if (merged) worst = std::max(worst, d);
        }
        if (merged) {
          ++rep.merged_pairs;
          rep.worst_resep = std::max(rep.worst_resep, worst);
          if (worst > resep_tol) ++rep.violations;
        }
      }
    }
  }
  return rep;
}

template <int Dim>
UntangledReport check_untangled(const FlowMap<Dim>& flow, double merge_tol, double resep_tol) {
  std::vector<std::size_t> all(flow.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return check_untangled(flow, all, merge_tol, resep_tol);
}

/// Hand-built flow whose lines cross: seeds -a and +a move toward each other
/// at unit speed, meet at t = a and pass through. Not a selection; used to
/// check that the untangledness checker fires.
inline FlowMap<1> tangled_fixture(const TimeGrid& grid, double a = 0.5) {
  FlowMap<1> flow(grid, FlowParams<1>{}, FunctionalSchedule<1>{}, nullptr);
  for (double sign : {-1.0, 1.0}) {
    Trajectory<1> tr;
    tr.start_time = grid.t_start();
    tr.times = grid.nodes();
    for (double t : tr.times) tr.states.emplace_back(sign * a - sign * (t - grid.t_start()));
    flow.add({grid.t_start(), Vec<1>(sign * a)}, std::move(tr), 0.0, SelectionResult{}, 1);
  }
  return flow;
}

}  // namespace untangled
