#pragma once

// Scenario runner: builds field, flow, density, transport and Galerkin stages
// from a config, checks certificates and writes CSV/JSON artifacts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "untangled/config.hpp"
#include "untangled/density.hpp"
#include "untangled/field.hpp"
#include "untangled/filippov.hpp"
#include "untangled/funnel.hpp"
#include "untangled/galerkin.hpp"
#include "untangled/select.hpp"
#include "untangled/transport.hpp"

namespace untangled {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitViolation = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Error raised inside a pipeline stage, tagged with the stage name.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& message, int exit_code)
      : Error("[" + stage + "] " + message), stage_(stage), exit_code_(exit_code) {}

  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

/// Exit code of an exception escaping a command.
inline int exit_code_of(const std::exception& e) {
  if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  return kExitNumerical;
}

/// One certificate or invariant: value with optional bounds.
struct Check {
  std::string name;
  double value = 0.0;
  std::optional<double> min;
  std::optional<double> max;
  bool pass = false;
};

inline Check make_check(std::string name, double value, std::optional<double> min, std::optional<double> max) {
  const bool pass = std::isfinite(value) && (!min || value >= *min) && (!max || value <= *max);
  return {std::move(name), value, min, max, pass};
}

struct RunReport {
  std::string scenario;
  std::string command;
  std::vector<Check> checks;
  std::vector<std::string> manifest;                  // files written, in order
  std::vector<std::pair<std::string, double>> timings;  // wall-clock seconds per stage

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
  int exit_code() const { return passed() ? kExitOk : kExitViolation; }

  const Check* find(const std::string& name) const {
    for (const auto& c : checks) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }

  /// Deterministic part of the report; timings live in their own file.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["scenario"] = scenario;
    j["command"] = command;
    j["passed"] = passed();
    j["checks"] = nlohmann::json::object();
    for (const auto& c : checks) {
      nlohmann::json e;
      e["value"] = c.value;
      if (c.min) e["min"] = *c.min;
      if (c.max) e["max"] = *c.max;
      e["pass"] = c.pass;
      j["checks"][c.name] = e;
    }
    j["manifest"] = manifest;
    return j;
  }
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string num(std::size_t v) { return std::to_string(v); }

/// CSV text with a header row and '.' decimals.
class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) { line(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw ArgumentError("csv: row width differs from header");
    line(cells);
  }

  const std::string& text() const { return text_; }

 private:
  void line(const std::vector<std::string>& cells) {
    if (width_ == 0) width_ = cells.size();
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  std::string text_;
  std::size_t width_ = 0;
};

template <int Dim>
Vec<Dim> to_vec(const std::vector<double>& p) {
  Vec<Dim> v;
  for (int d = 0; d < Dim; ++d) v[d] = p[static_cast<std::size_t>(d)];
  return v;
}

template <int Dim>
std::vector<std::string> coord_names(const std::string& prefix) {
  std::vector<std::string> out;
  for (int d = 0; d < Dim; ++d) out.push_back(prefix + std::to_string(d + 1));
  return out;
}

template <int Dim>
void append_coords(std::vector<std::string>& row, const Vec<Dim>& x) {
  for (int d = 0; d < Dim; ++d) row.push_back(num(x[d]));
}

/// Piecewise-linear interpolant through (t_k, v_k), constant outside.
inline std::function<double(double)> piecewise_linear(std::shared_ptr<const std::vector<double>> t,
                                                      std::vector<double> v) {
  return [t = std::move(t), v = std::move(v)](double s) {
    const auto& ts = *t;
    if (s <= ts.front()) return v.front();
    if (s >= ts.back()) return v.back();
    const auto k = static_cast<std::size_t>(std::upper_bound(ts.begin(), ts.end(), s) - ts.begin()) - 1;
    const double a = (s - ts[k]) / (ts[k + 1] - ts[k]);
    return (1.0 - a) * v[k] + a * v[k + 1];
  };
}

inline std::vector<double> row_of(const Eigen::MatrixXd& m, Eigen::Index j) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index k = 0; k < m.cols(); ++k) out[static_cast<std::size_t>(k)] = m(j, k);
  return out;
}

inline std::vector<double> trapezoid_weights(const std::vector<double>& t) {
  std::vector<double> w(t.size(), 0.0);
  for (std::size_t k = 0; k + 1 < t.size(); ++k) {
    w[k] += 0.5 * (t[k + 1] - t[k]);
    w[k + 1] += 0.5 * (t[k + 1] - t[k]);
  }
  return w;
}

}  // namespace detail

/// Output directory plus the list of files written into it.
class Artifacts {
 public:
  explicit Artifacts(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ConfigError("output_dir '" + dir_.string() + "' cannot be created: " + ec.message());
  }

  const fs::path& dir() const { return dir_; }

  void write(const std::string& name, const std::string& content, RunReport& report) {
    std::ofstream f(dir_ / name, std::ios::binary | std::ios::trunc);
    f << content;
    f.close();
    if (!f) throw NumericalError("cannot write artifact '" + (dir_ / name).string() + "'");
    if (std::find(report.manifest.begin(), report.manifest.end(), name) == report.manifest.end()) {
      report.manifest.push_back(name);
    }
  }

 private:
  fs::path dir_;
};

/// Runs body as the named stage: adds its wall-clock time to the report and
/// tags escaping errors with the stage.
template <typename Body>
decltype(auto) run_stage(const std::string& stage, RunReport& report, Body&& body) {
  struct Timer {
    const std::string& stage;
    RunReport& report;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    ~Timer() {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (auto& [name, total] : report.timings) {
        if (name == stage) {
          total += s;
          return;
        }
      }
      report.timings.emplace_back(stage, s);
    }
  } timer{stage, report};
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw StageError(stage, e.what(), kExitConfig);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), kExitNumerical);
  }
}

/// Shared state of one scenario: field, grid, selected flow and the stage
/// results the certificates read.
template <int Dim>
class Pipeline {
 public:
  Pipeline(const ScenarioConfig& cfg, RunReport& report) : cfg_(cfg), report_(report) {}

  const ScenarioConfig& config() const { return cfg_; }
  const VelocityField<Dim>& field() const { return *field_; }
  const TimeGrid& grid() const { return *grid_; }
  const FlowMap<Dim>& flow() const { return *flow_; }
  const FunnelParams<Dim>& funnel_params() const { return resolved_; }
  const std::vector<std::size_t>& seed_ids() const { return seed_ids_; }
  const ParticleEnsemble<Dim>& ensemble() const { return *ens_; }
  const std::vector<std::size_t>& particle_ids() const { return particle_ids_; }
  const std::vector<DensitySnapshot<Dim>>& snapshots() const { return snapshots_; }
  const CharacteristicSolution& transport_solution() const { return *transport_; }
  const PulledBackProblem& pulled_back() const { return *pulled_; }
  double merge_tol() const { return resolved_.merge_tol; }
  double resep_tol() const { return cfg_.resep_factor * resolved_.merge_tol; }

  /// Field, grid, funnel parameters and seed sets.
  void setup(bool with_particles) {
    run_stage("field", report_, [&] {
      SpatialDomain<Dim> domain(detail::to_vec<Dim>(cfg_.lower), detail::to_vec<Dim>(cfg_.upper));
      field_ = std::make_shared<const VelocityField<Dim>>(
          VelocityField<Dim>::make(cfg_.field_kind, cfg_.field_params, cfg_.growth_c, domain));
      grid_ = TimeGrid::uniform(cfg_.t_start, cfg_.t_end, cfg_.steps);
      params_.funnel.envelope.delta_schedule = cfg_.delta_schedule;
      params_.funnel.envelope.samples = cfg_.samples;
      params_.funnel.envelope.n_dir = cfg_.n_dir;
      params_.funnel.envelope.seed = cfg_.seed;
      params_.funnel.envelope.use_exact = cfg_.use_exact;
      params_.funnel.branch_factor = cfg_.branch_factor;
      params_.funnel.beam_width = cfg_.beam_width;
      params_.funnel.merge_tol = cfg_.merge_tol;
      params_.funnel.resid_tol = cfg_.resid_tol;
      params_.K = cfg_.K;
      params_.levels = cfg_.levels;
      params_.tie_tol = cfg_.tie_tol;
      resolved_ = params_.funnel.resolved(*field_, *grid_);
      params_.funnel = resolved_;

      for (std::size_t i = 0; i < cfg_.seed_points.size(); ++i) {
        const Vec<Dim> x = detail::to_vec<Dim>(cfg_.seed_points[i]);
        if (!domain.contains(x)) throw ConfigError("seeds.points[" + std::to_string(i) + "] lies outside the domain");
        seed_points_.push_back(x);
      }
      if (cfg_.seeds_per_axis > 0) {
        const auto mid = ParticleEnsemble<Dim>::uniform(domain.lower(), domain.upper(), cfg_.seeds_per_axis);
        seed_points_.insert(seed_points_.end(), mid.points.begin(), mid.points.end());
      }
      if (with_particles && cfg_.density) {
        const Vec<Dim> lo = detail::to_vec<Dim>(cfg_.region_lower);
        const Vec<Dim> hi = detail::to_vec<Dim>(cfg_.region_upper);
        if (!domain.contains(lo) || !domain.contains(hi)) throw ConfigError("density.region must lie in the domain");
        ens_ = ParticleEnsemble<Dim>::uniform(lo, hi, cfg_.particles);
      }
    });
  }

  /// Selected flow from every seed point and particle.
  void select() {
    run_stage("select", report_, [&] {
      std::vector<FlowSeed<Dim>> seeds;
      for (const auto& x : seed_points_) seeds.push_back({grid_->t_start(), x});
      if (ens_) {
        for (const auto& x : ens_->points) seeds.push_back({grid_->t_start(), x});
      }
      flow_ = build_flow(*field_, seeds, *grid_, params_);
      for (const auto& x : seed_points_) {
        const std::size_t i = *flow_->find(grid_->t_start(), x, 0.0);
        if (std::find(seed_ids_.begin(), seed_ids_.end(), i) == seed_ids_.end()) seed_ids_.push_back(i);
      }
      if (ens_) particle_ids_ = particle_seed_indices(*flow_, *ens_);
    });
  }

  void write_trajectories(Artifacts& out) {
    run_stage("write", report_, [&] {
      auto header = std::vector<std::string>{"seed", "t"};
      for (const auto& n : detail::coord_names<Dim>("x")) header.push_back(n);
      detail::Csv csv(header);
      for (std::size_t j = 0; j < seed_ids_.size(); ++j) {
        const auto& tr = flow_->selected(seed_ids_[j]);
        for (std::size_t k = 0; k < tr.size(); ++k) {
          std::vector<std::string> row{detail::num(j), detail::num(tr.times[k])};
          detail::append_coords<Dim>(row, tr.states[k]);
          csv.row(row);
        }
      }
      out.write("trajectories.csv", csv.text(), report_);
    });
  }

  /// Semigroup defect over an n x n x n triple grid at the configured points.
  Check semigroup_check(std::size_t levels) {
    return run_stage("semigroup", report_, [&] {
      VecList<Dim> pts;
      for (const auto& p : cfg_.semigroup_points) pts.push_back(detail::to_vec<Dim>(p));
      if (pts.empty()) pts = seed_points_;
      const auto triples = triple_grid(*grid_, levels, pts);
      extend_flow(*flow_, semigroup_seeds(*flow_, triples));
      const auto rep = check_semigroup(*flow_, triples, 0.0);
      if (rep.skipped > 0) throw NumericalError("semigroup: intermediate points did not snap to seeds");
      return make_check("semigroup_defect", rep.max_defect, std::nullopt,
                        2.0 * grid_->max_step() * field_->growth_c() + 1e-12);
    });
  }

  Check untangled_check() {
    return run_stage("untangled", report_, [&] {
      UntangledReport rep;
      if (cfg_.fixture == "tangled") {
        if constexpr (Dim == 1) {
          rep = check_untangled(tangled_fixture(*grid_), merge_tol(), resep_tol());
        }
      } else {
        rep = check_untangled(*flow_, seed_ids_, merge_tol(), resep_tol());
      }
      return make_check("untangled_violations", static_cast<double>(rep.violations), std::nullopt, 0.0);
    });
  }

  Check inclusion_check() const {
    return make_check("inclusion_residual_max", flow_->max_residual(), std::nullopt, resolved_.resid_tol);
  }

  /// Growth bound over every trajectory the flow holds.
  Check gronwall_check() const {
    const double c = field_->growth_c();
    const double tol = gronwall_tolerance(c, grid_->t_end() - grid_->t_start(), resolved_.envelope.delta_final());
    std::size_t v = 0;
    for (std::size_t i = 0; i < flow_->size(); ++i) v += gronwall_violations(flow_->selected(i), c, tol);
    return make_check("gronwall_violations", static_cast<double>(v), std::nullopt, 0.0);
  }

  std::vector<double> snapshot_times() const {
    std::vector<double> ts = cfg_.snapshots;
    if (ts.empty()) {
      for (std::size_t q = 0; q <= 4; ++q) {
        ts.push_back(grid_->nodes()[q * grid_->n_steps() / 4]);
      }
    }
    for (double t : ts) {
      if (!grid_->index_of(t)) throw ConfigError("density.snapshots: t = " + detail::num(t) + " is not a time node");
    }
    return ts;
  }

  /// Push-forward snapshots; returns the mass drift certificate.
  Check density_stage(Artifacts& out) {
    return run_stage("density", report_, [&] {
      PushForwardOptions<Dim> opt;
      opt.bins = cfg_.bins;
      opt.atom_min_count = cfg_.atom_threshold;
      double drift = 0.0;
      for (double t : snapshot_times()) {
        snapshots_.push_back(push_forward(*flow_, *ens_, particle_ids_, t, opt));
        drift = std::max(drift, std::abs(snapshots_.back().particle_mass_sum - ens_->total_mass));
      }

      auto header = std::vector<std::string>{"t", "bin"};
      for (const auto& n : detail::coord_names<Dim>("lower")) header.push_back(n);
      for (const auto& n : detail::coord_names<Dim>("upper")) header.push_back(n);
      header.push_back("mass");
      detail::Csv bins(header);
      auto aheader = std::vector<std::string>{"t", "atom"};
      for (const auto& n : detail::coord_names<Dim>("x")) aheader.push_back(n);
      aheader.push_back("mass");
      aheader.push_back("count");
      detail::Csv atoms(aheader);
      for (const auto& s : snapshots_) {
        const Vec<Dim> h = (s.bin_upper - s.bin_lower) / static_cast<double>(s.bins_per_axis);
        for (std::size_t b = 0; b < s.bin_mass.size(); ++b) {
          Vec<Dim> lo;
          std::size_t rem = b;
          for (int d = Dim - 1; d >= 0; --d) {
            lo[d] = s.bin_lower[d] + h[d] * static_cast<double>(rem % s.bins_per_axis);
            rem /= s.bins_per_axis;
          }
          std::vector<std::string> row{detail::num(s.t), detail::num(b)};
          detail::append_coords<Dim>(row, lo);
          detail::append_coords<Dim>(row, Vec<Dim>(lo + h));
          row.push_back(detail::num(s.bin_mass[b]));
          bins.row(row);
        }
        for (std::size_t a = 0; a < s.atoms.size(); ++a) {
          std::vector<std::string> row{detail::num(s.t), detail::num(a)};
          detail::append_coords<Dim>(row, s.atoms[a].location);
          row.push_back(detail::num(s.atoms[a].mass));
          row.push_back(detail::num(s.atoms[a].count));
          atoms.row(row);
        }
      }
      out.write("density.csv", bins.text(), report_);
      out.write("atoms.csv", atoms.text(), report_);
      return make_check("mass_drift", drift, std::nullopt, 0.0);
    });
  }

  /// Explicit solution along the seed flow lines.
  void transport_stage(Artifacts* out) {
    run_stage("transport", report_, [&] {
      c_ = ScalarField<Dim>::make(cfg_.c.kind, cfg_.c.params, "transport.c");
      f_ = ScalarField<Dim>::make(cfg_.f.kind, cfg_.f.params, "transport.f");
      u0_ = ScalarField<Dim>::make(cfg_.u0.kind, cfg_.u0.params, "transport.u0");
      pulled_ = pull_back_data(*c_, *f_, *u0_, *flow_, seed_ids_);
      const double need = std::max(0.0, -pulled_->C.minCoeff());
      lambda_ = cfg_.lambda_shift.value_or(need);
      if (lambda_ < need) {
        throw ConfigError("transport.lambda_shift must be at least " + detail::num(need) + " for this data");
      }
      transport_ = unshift(solve_characteristic_ode(shift_zeroth_order(*pulled_, lambda_)), lambda_);
      if (!transport_->U.allFinite()) throw NumericalError("transport: non-finite solution");
      if (!out) return;
      auto header = std::vector<std::string>{"seed", "t"};
      for (const auto& n : detail::coord_names<Dim>("x")) header.push_back(n);
      header.push_back("U");
      detail::Csv csv(header);
      for (std::size_t j = 0; j < seed_ids_.size(); ++j) {
        const auto& tr = flow_->selected(seed_ids_[j]);
        for (std::size_t k = 0; k < tr.size(); ++k) {
          std::vector<std::string> row{detail::num(j), detail::num(tr.times[k])};
          detail::append_coords<Dim>(row, tr.states[k]);
          row.push_back(detail::num(transport_->U(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k))));
          csv.row(row);
        }
      }
      out->write("transport.csv", csv.text(), report_);
    });
  }

  /// Relative gap between the shifted and the direct explicit solution.
  Check shift_round_trip_check() const {
    const auto direct = solve_characteristic_ode(*pulled_);
    const double lambda = lambda_ + 1.0;
    const auto back = unshift(solve_characteristic_ode(shift_zeroth_order(*pulled_, lambda)), lambda);
    const double scale = std::max(1.0, direct.U.cwiseAbs().maxCoeff());
    return make_check("shift_round_trip", (back.U - direct.U).cwiseAbs().maxCoeff() / scale, std::nullopt, 1e-10);
  }

  /// Galerkin system on the first seed flow lines with `cells` time cells.
  GalerkinSystem galerkin_system(std::size_t cells) const {
    const std::size_t n = std::min(cfg_.galerkin_nodes, seed_ids_.size());
    auto times = std::make_shared<const std::vector<double>>(pulled_->times);
    std::vector<NodeData> data;
    for (std::size_t j = 0; j < n; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      data.push_back({detail::piecewise_linear(times, detail::row_of(pulled_->C, jj)),
                      detail::piecewise_linear(times, detail::row_of(pulled_->F, jj)), pulled_->U0(jj),
                      1.0 / static_cast<double>(n)});
    }
    return assemble_system(TimeMesh::uniform(cfg_.t_start, cfg_.t_end, cells), data, cfg_.quadrature,
                           cfg_.raw_hats ? TrialBasis::RawHats : TrialBasis::AdjointImage);
  }

  /// ||U_h - U_explicit||_{L^2(Q)} with the explicit solution interpolated
  /// linearly in time.
  double galerkin_vs_explicit(const GalerkinSystem& sys, const GalerkinSolution& sol) const {
    auto times = std::make_shared<const std::vector<double>>(transport_->times);
    double acc = 0.0;
    for (std::size_t j = 0; j < sys.nodes.size(); ++j) {
      const auto ref = detail::piecewise_linear(times, detail::row_of(transport_->U, static_cast<Eigen::Index>(j)));
      double node = 0.0;
      for (std::size_t q = 0; q < sys.hats.t.size(); ++q) {
        const double e = sol.samples[j](static_cast<Eigen::Index>(q)) - ref(sys.hats.t[q]);
        node += sys.hats.w[q] * e * e;
      }
      acc += sys.nodes[j].weight * node;
    }
    return std::sqrt(acc);
  }

  /// inf-sup, residual identity and orthogonality for the configured mesh.
  std::vector<Check> galerkin_stage(Artifacts* out) {
    return run_stage("galerkin", report_, [&] {
      const auto sys = galerkin_system(cfg_.cells);
      const auto sol = solve(sys);
      std::vector<Check> checks;
      checks.push_back(make_check("inf_sup", discrete_inf_sup(sys), 1.0 - 1e-8, 1.0 + 1e-12));

      std::mt19937_64 rng(cfg_.seed);
      std::normal_distribution<double> g;
      double worst = 0.0;
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<Eigen::VectorXd> W, diff;
        for (std::size_t j = 0; j < sys.nodes.size(); ++j) {
          const Eigen::VectorXd c =
              Eigen::VectorXd::NullaryExpr(static_cast<Eigen::Index>(sys.dofs()), [&]() { return g(rng); });
          W.push_back(trial_samples(sys, j, c));
          diff.push_back(sol.samples[j] - W.back());
        }
        worst = std::max(worst, std::abs(residual_norm(sys, W) - l2_norm(sys, diff)));
      }
      checks.push_back(make_check("residual_identity_defect", worst, std::nullopt, 1e-8));
      checks.push_back(make_check("galerkin_orthogonality", galerkin_orthogonality_defect(sys, sol), std::nullopt, 1e-12));
      galerkin_error_ = galerkin_vs_explicit(sys, sol);

      if (out) {
        detail::Csv csv({"node", "t", "U_h", "U_explicit"});
        auto times = std::make_shared<const std::vector<double>>(transport_->times);
        for (std::size_t j = 0; j < sys.nodes.size(); ++j) {
          const auto ref = detail::piecewise_linear(times, detail::row_of(transport_->U, static_cast<Eigen::Index>(j)));
          for (std::size_t q = 0; q < sys.hats.t.size(); ++q) {
            csv.row({detail::num(j), detail::num(sys.hats.t[q]), detail::num(sol.samples[j](static_cast<Eigen::Index>(q))),
                     detail::num(ref(sys.hats.t[q]))});
          }
        }
        out->write("galerkin.csv", csv.text(), report_);
      }
      return checks;
    });
  }

  double galerkin_error() const { return galerkin_error_; }

  // Invariant suite used by verify.

  std::vector<Check> field_and_envelope_checks() {
    return run_stage("envelope", report_, [&] {
      const auto samples = latin_hypercube(64, field_->domain(), cfg_.t_start, cfg_.t_end, cfg_.seed);
      const auto diag = check_growth(*field_, samples);
      auto dirs = DirectionSet<Dim>::make(resolved_.envelope.n_dir);
      double dist = 0.0;
      std::size_t warnings = 0;
      for (const auto& s : samples) {
        const auto env = filippov_envelope(*field_, s.t, s.x, dirs, resolved_.envelope);
        dist = std::max(dist, set_distance(env, field_->eval(s.t, s.x)) / env.scale());
        if (env.monotonicity_warning()) ++warnings;
      }
      return std::vector<Check>{
          make_check("field_growth_violations", static_cast<double>(diag.growth_violations), std::nullopt, 0.0),
          make_check("envelope_contains_field", dist, std::nullopt, 1e-9),
          make_check("envelope_monotone_in_delta", static_cast<double>(warnings), std::nullopt, 0.0)};
    });
  }

  /// Largest gap between the selected seed curves and the curves selected
  /// with each alternative schedule length.
  Check stability_check() {
    return run_stage("stability", report_, [&] {
      std::vector<FlowSeed<Dim>> seeds;
      for (const auto& x : seed_points_) seeds.push_back({grid_->t_start(), x});
      double worst = 0.0;
      for (std::size_t K : cfg_.stability_K) {
        auto p = params_;
        p.K = K;
        const auto alt = build_flow(*field_, seeds, *grid_, p);
        for (std::size_t j = 0; j < seed_ids_.size(); ++j) {
          const auto& a = flow_->selected(seed_ids_[j]).states;
          const auto& b = alt.selected(*alt.find(grid_->t_start(), flow_->seed(seed_ids_[j]).x, 0.0)).states;
          for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, (a[k] - b[k]).norm());
        }
      }
      return make_check("selection_stability", worst, std::nullopt, resep_tol());
    });
  }

  Check continuity_check() {
    return run_stage("density", report_, [&] {
      const Vec<Dim> lo = detail::to_vec<Dim>(cfg_.region_lower);
      const Vec<Dim> hi = detail::to_vec<Dim>(cfg_.region_upper);
      const double r = 0.25 * (hi - lo).minCoeff();
      const double tc = 0.5 * (cfg_.t_start + cfg_.t_end);
      const double tr = 0.3 * (cfg_.t_end - cfg_.t_start);
      const Vec<Dim> mid = 0.5 * (lo + hi);
      const std::vector<SpaceTimeBump<Dim>> tests = {{tc, tr, mid, 2.0 * r, 1.0},
                                                     {tc, tr, Vec<Dim>(mid + 0.5 * r * Vec<Dim>::Ones()), r, 1.0}};
      const double res = continuity_residual(*flow_, *ens_, particle_ids_, tests);
      const double n = static_cast<double>(ens_->size());
      return make_check("continuity_residual", res, std::nullopt,
                        3.0 * ens_->total_mass * (grid_->max_step() + 1.0 / std::sqrt(n)));
    });
  }

 private:
  const ScenarioConfig& cfg_;
  RunReport& report_;
  std::shared_ptr<const VelocityField<Dim>> field_;
  std::optional<TimeGrid> grid_;
  FlowParams<Dim> params_;
  FunnelParams<Dim> resolved_;
  VecList<Dim> seed_points_;
  std::optional<ParticleEnsemble<Dim>> ens_;
  std::optional<FlowMap<Dim>> flow_;
  std::vector<std::size_t> seed_ids_;
  std::vector<std::size_t> particle_ids_;
  std::vector<DensitySnapshot<Dim>> snapshots_;
  std::optional<ScalarField<Dim>> c_, f_, u0_;
  std::optional<PulledBackProblem> pulled_;
  std::optional<CharacteristicSolution> transport_;
  double lambda_ = 0.0;
  double galerkin_error_ = 0.0;
};

namespace detail {

inline void write_report(Artifacts& out, RunReport& report) {
  nlohmann::json t = nlohmann::json::object();
  for (const auto& [stage, s] : report.timings) t[stage] = s;
  out.write(report.command + "_timings.json", t.dump(2) + "\n", report);
  out.write(report.command + ".json", report.to_json().dump(2) + "\n", report);
}

/// Runs body, writing the report even when a stage fails so that partial
/// artifacts stay listed.
template <typename Body>
RunReport with_report(const ScenarioConfig& cfg, const std::string& command, const fs::path& dir, Body&& body) {
  RunReport report;
  report.scenario = cfg.id;
  report.command = command;
  Artifacts out(dir);
  try {
    body(out, report);
  } catch (const StageError& e) {
    report.checks.push_back({"stage_error:" + e.stage(), 1.0, std::nullopt, 0.0, false});
    try {
      write_report(out, report);
    } catch (...) {
    }
    throw;
  }
  write_report(out, report);
  return report;
}

template <int Dim>
void run_pipeline(Pipeline<Dim>& p, Artifacts& out, RunReport& report, bool verify) {
  const auto& cfg = p.config();
  p.setup(true);
  p.select();
  p.write_trajectories(out);
  if (verify) {
    for (auto& c : p.field_and_envelope_checks()) report.checks.push_back(c);
  }
  report.checks.push_back(p.semigroup_check(cfg.semigroup_levels));
  report.checks.push_back(p.untangled_check());
  if (verify && !cfg.stability_K.empty()) report.checks.push_back(p.stability_check());
  if (cfg.density) {
    report.checks.push_back(p.density_stage(out));
    if (verify) report.checks.push_back(p.continuity_check());
  }
  if (cfg.transport) {
    p.transport_stage(&out);
    if (verify) report.checks.push_back(p.shift_round_trip_check());
  }
  if (cfg.galerkin) {
    for (auto& c : p.galerkin_stage(&out)) {
      if (verify || c.name != "galerkin_orthogonality") report.checks.push_back(c);
    }
  }
  report.checks.push_back(p.inclusion_check());
  report.checks.push_back(p.gronwall_check());
}

/// Classical flow of the box-mollified compressive sign field from every
/// particle: RK4 with `sub` substeps per grid step.
inline FlowMap<1> mollified_flow(double eps, const SpatialDomain<1>& domain, const TimeGrid& grid,
                                 const VecList<1>& points, std::size_t sub = 8) {
  const auto field = VelocityField<1>::make("mollified-sign1d", {eps}, std::nullopt, domain);
  FlowMap<1> flow(grid, FlowParams<1>{}, FunctionalSchedule<1>{}, nullptr);
  for (const auto& x0 : points) {
    Trajectory<1> tr;
    tr.start_time = grid.t_start();
    tr.times = grid.nodes();
    Vec<1> x = x0;
    tr.states.push_back(x);
    for (std::size_t k = 0; k < grid.n_steps(); ++k) {
      const double h = grid.step(k) / static_cast<double>(sub);
      double t = grid[k];
      for (std::size_t s = 0; s < sub; ++s) {
        const Vec<1> k1 = field.eval(t, x);
        const Vec<1> k2 = field.eval(t + 0.5 * h, domain.clamp(x + 0.5 * h * k1));
        const Vec<1> k3 = field.eval(t + 0.5 * h, domain.clamp(x + 0.5 * h * k2));
        const Vec<1> k4 = field.eval(t + h, domain.clamp(x + h * k3));
        x = domain.clamp(x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        t += h;
      }
      tr.states.push_back(x);
    }
    flow.add({grid.t_start(), x0}, std::move(tr), 0.0, SelectionResult{}, 1);
  }
  return flow;
}

/// 1D Wasserstein-1 distance between two equal-weight particle clouds.
inline double wasserstein1(std::vector<double> a, std::vector<double> b, double weight) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return weight * s;
}

inline void study_flow_section(const ScenarioConfig& cfg, Artifacts& out, RunReport& report) {
  ScenarioConfig sub = cfg;
  sub.density = true;
  sub.particles = cfg.study_particles;
  Pipeline<1> p(sub, report);
  p.setup(true);
  p.select();
  const auto& ens = p.ensemble();
  const auto& ids = p.particle_ids();
  const auto& grid = p.grid();
  const auto omega = trapezoid_weights(grid.nodes());
  const auto snap_times = p.snapshot_times();

  std::optional<ScalarField<1>> c, f, u0;
  std::optional<CharacteristicSolution> base;
  std::vector<SpaceTimeProbe<1>> probes;
  if (cfg.transport) {
    c = ScalarField<1>::make(cfg.c.kind, cfg.c.params, "transport.c");
    f = ScalarField<1>::make(cfg.f.kind, cfg.f.params, "transport.f");
    u0 = ScalarField<1>::make(cfg.u0.kind, cfg.u0.params, "transport.u0");
    const double T0 = cfg.t_start, T = cfg.t_end - cfg.t_start;
    for (const auto& b : {SpaceTimeBump<1>{T0 + 0.5 * T, 0.45 * T, Vec<1>(0.0), 0.5, 1.0},
                          SpaceTimeBump<1>{T0 + 0.7 * T, 0.25 * T, Vec<1>(0.3), 0.3, 1.0}}) {
      probes.push_back([b](double t, const Vec<1>& z) { return b.value(t, z); });
    }
  }
  auto explicit_probe = [&](const FlowMap<1>& flow, const std::vector<std::size_t>& idx) {
    const auto data = pull_back_data(*c, *f, *u0, flow, idx);
    const double lambda = std::max(0.0, -data.C.minCoeff());
    const auto sol = unshift(solve_characteristic_ode(shift_zeroth_order(data, lambda)), lambda);
    return assemble_flow_solution(sol, flow, idx, ens.weights, probes);
  };

  std::vector<double> ref_probe;
  if (cfg.transport) ref_probe = run_stage("transport", report, [&] { return explicit_probe(p.flow(), ids); });

  detail::Csv csv({"epsilon", "flow_l1_error", "density_w1_error", "transport_probe_error"});
  std::vector<double> errors;
  run_stage("study_flow", report, [&] {
    for (double eps : cfg.epsilons) {
      const auto cl = mollified_flow(eps, p.field().domain(), grid, ens.points);
      std::vector<std::size_t> cl_ids(ens.size());
      for (std::size_t i = 0; i < cl_ids.size(); ++i) cl_ids[i] = i;
      double l1 = 0.0;
      for (std::size_t i = 0; i < ens.size(); ++i) {
        const auto& a = p.flow().selected(ids[i]).states;
        const auto& b = cl.selected(i).states;
        double acc = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) acc += omega[k] * std::abs(a[k][0] - b[k][0]);
        l1 += ens.weights[i] * acc;
      }
      double w1 = 0.0;
      for (double t : snap_times) {
        const std::size_t k = *grid.index_of(t);
        std::vector<double> xa(ens.size()), xb(ens.size());
        for (std::size_t i = 0; i < ens.size(); ++i) {
          xa[i] = p.flow().state_at_node(ids[i], k)[0];
          xb[i] = cl.state_at_node(i, k)[0];
        }
        w1 = std::max(w1, wasserstein1(xa, xb, ens.weights.front()));
      }
      double probe_err = 0.0;
      if (cfg.transport) {
        const auto v = explicit_probe(cl, cl_ids);
        for (std::size_t q = 0; q < v.size(); ++q) probe_err = std::max(probe_err, std::abs(v[q] - ref_probe[q]));
      }
      errors.push_back(l1);
      csv.row({num(eps), num(l1), num(w1), cfg.transport ? num(probe_err) : std::string("nan")});
    }
  });
  out.write("study_flow.csv", csv.text(), report);
  std::size_t bad = 0;
  for (std::size_t i = 1; i < errors.size(); ++i) {
    if (!(errors[i] < errors[i - 1])) ++bad;
  }
  report.checks.push_back(make_check("flow_l1_nonincreasing_rows", static_cast<double>(bad), std::nullopt, 0.0));
}

template <int Dim>
void study_galerkin_section(const ScenarioConfig& cfg, Artifacts& out, RunReport& report) {
  ScenarioConfig sub = cfg;
  sub.density = false;
  Pipeline<Dim> p(sub, report);
  p.setup(false);
  p.select();
  p.transport_stage(nullptr);
  detail::Csv csv({"cells", "dtau", "l2_error", "ratio", "observed_rate"});
  double min_ratio = std::numeric_limits<double>::infinity();
  run_stage("study_galerkin", report, [&] {
    double prev = 0.0, prev_dtau = 0.0;
    for (std::size_t i = 0; i < cfg.galerkin_cells.size(); ++i) {
      const std::size_t cells = cfg.galerkin_cells[i];
      const auto sys = p.galerkin_system(cells);
      const double err = p.galerkin_vs_explicit(sys, solve(sys));
      const double dtau = (cfg.t_end - cfg.t_start) / static_cast<double>(cells);
      std::string ratio = "nan", rate = "nan";
      if (i > 0) {
        const double r = prev / err;
        min_ratio = std::min(min_ratio, r);
        ratio = num(r);
        rate = num(std::log(r) / std::log(prev_dtau / dtau));
      }
      csv.row({num(cells), num(dtau), num(err), ratio, rate});
      prev = err;
      prev_dtau = dtau;
    }
  });
  out.write("study_galerkin.csv", csv.text(), report);
  if (cfg.galerkin_cells.size() > 1) report.checks.push_back(make_check("galerkin_min_ratio", min_ratio, 1.8, std::nullopt));
}

template <int Dim>
nlohmann::json envelope_dump(const ScenarioConfig& cfg, double t, const std::vector<double>& x) {
  RunReport scratch;
  Pipeline<Dim> p(cfg, scratch);
  p.setup(false);
  if (static_cast<int>(x.size()) != Dim) {
    throw ConfigError("--at needs t and " + std::to_string(Dim) + " coordinate(s)");
  }
  const Vec<Dim> xv = to_vec<Dim>(x);
  return run_stage("envelope", scratch, [&] {
    const auto& params = p.funnel_params().envelope;
    auto dirs = DirectionSet<Dim>::make(params.n_dir);
    const auto env = filippov_envelope(p.field(), t, xv, dirs, params);
    nlohmann::json j;
    j["scenario"] = cfg.id;
    j["t"] = t;
    j["x"] = x;
    j["delta_final"] = env.delta_used();
    j["samples_per_ball"] = env.samples_per_ball();
    j["exact"] = params.use_exact;
    j["monotonicity_warning"] = env.monotonicity_warning();
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < env.directions().size(); ++i) {
      const auto& xi = env.directions()[i];
      rows.push_back({{"direction", std::vector<double>(xi.data(), xi.data() + Dim)}, {"support", env.support(i)}});
    }
    j["supports"] = rows;
    nlohmann::json verts = nlohmann::json::array();
    for (const auto& v : env.vertices()) verts.push_back(std::vector<double>(v.data(), v.data() + Dim));
    j["vertices"] = verts;
    j["field_value"] = [&] {
      const Vec<Dim> b = p.field().eval(t, xv);
      return std::vector<double>(b.data(), b.data() + Dim);
    }();
    return j;
  });
}

}  // namespace detail

/// Full pipeline with the run certificates.
inline RunReport run_scenario(const ScenarioConfig& cfg, const fs::path& dir) {
  return detail::with_report(cfg, "run", dir, [&](Artifacts& out, RunReport& report) {
    if (cfg.dimension == 1) {
      Pipeline<1> p(cfg, report);
      detail::run_pipeline(p, out, report, false);
    } else {
      Pipeline<2> p(cfg, report);
      detail::run_pipeline(p, out, report, false);
    }
  });
}

/// Pipeline plus every module's invariant suite.
inline RunReport verify_scenario(const ScenarioConfig& cfg, const fs::path& dir) {
  return detail::with_report(cfg, "verify", dir, [&](Artifacts& out, RunReport& report) {
    if (cfg.dimension == 1) {
      Pipeline<1> p(cfg, report);
      detail::run_pipeline(p, out, report, true);
    } else {
      Pipeline<2> p(cfg, report);
      detail::run_pipeline(p, out, report, true);
    }
  });
}

/// Mollification table against the selected flow and Galerkin refinement
/// table against the explicit solution.
inline RunReport convergence_study(const ScenarioConfig& cfg, const fs::path& dir) {
  return detail::with_report(cfg, "study", dir, [&](Artifacts& out, RunReport& report) {
    if (!cfg.epsilons.empty()) detail::study_flow_section(cfg, out, report);
    if (!cfg.galerkin_cells.empty()) {
      if (cfg.dimension == 1) detail::study_galerkin_section<1>(cfg, out, report);
      else detail::study_galerkin_section<2>(cfg, out, report);
    }
  });
}

/// Envelope at (t, x) as JSON.
inline nlohmann::json envelope_at(const ScenarioConfig& cfg, double t, const std::vector<double>& x) {
  return cfg.dimension == 1 ? detail::envelope_dump<1>(cfg, t, x) : detail::envelope_dump<2>(cfg, t, x);
}

}  // namespace untangled
