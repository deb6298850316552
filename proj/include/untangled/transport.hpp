#pragma once

// ∂_t U + C U = F along flow lines: data pull-back, zeroth-order shift and the
// explicit exponential-integrator solution.

#include <cmath>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "untangled/common.hpp"
#include "untangled/density.hpp"
#include "untangled/errors.hpp"
#include "untangled/field.hpp"
#include "untangled/select.hpp"

namespace untangled {

/// Scalar data c(t,z), f(t,z), u0(z) from a small registry (params in brackets):
///   constant [v]             v
///   linear_t [a, b]          a + b t
///   product_tz [a]           a t z_1
///   square [a]               a |z|^2
///   trig [a, b, w, p]        a + b sin(w t + p + z_1 + ... + z_d)
///   sign [a]                 a sign(z_1)
template <int Dim>
class ScalarField {
 public:
  enum class Kind { Constant, LinearT, ProductTZ, Square, Trig, Sign };

  static ScalarField make(std::string_view kind, std::vector<double> params, std::string_view what = "scalar") {
    struct Entry {
      std::string_view name;
      Kind kind;
      std::size_t n;
    };
    static constexpr Entry table[] = {{"constant", Kind::Constant, 1}, {"linear_t", Kind::LinearT, 2},
                                      {"product_tz", Kind::ProductTZ, 1}, {"square", Kind::Square, 1},
                                      {"trig", Kind::Trig, 4},          {"sign", Kind::Sign, 1}};
    for (const auto& e : table) {
      if (e.name != kind) continue;
      if (params.size() != e.n) {
        throw ConfigError(std::string(what) + ".params: '" + std::string(kind) + "' expects " + std::to_string(e.n) +
                          " parameter(s)");
      }
      for (double p : params) {
        if (!std::isfinite(p)) throw ConfigError(std::string(what) + ".params must be finite");
      }
      ScalarField f;
      f.kind_ = e.kind;
      f.name_ = std::string(kind);
      f.params_ = std::move(params);
      return f;
    }
    throw ConfigError(std::string(what) + ".kind: unknown registry id '" + std::string(kind) + "'");
  }

  static ScalarField constant(double v) { return make("constant", {v}); }

  const std::string& name() const { return name_; }
  const std::vector<double>& params() const { return params_; }

  double operator()(double t, const Vec<Dim>& z) const {
    const auto& p = params_;
    switch (kind_) {
      case Kind::Constant: return p[0];
      case Kind::LinearT: return p[0] + p[1] * t;
      case Kind::ProductTZ: return p[0] * t * z[0];
      case Kind::Square: return p[0] * z.squaredNorm();
      case Kind::Trig: return p[0] + p[1] * std::sin(p[2] * t + p[3] + z.sum());
      case Kind::Sign: return z[0] > 0.0 ? p[0] : (z[0] < 0.0 ? -p[0] : 0.0);
    }
    return 0.0;
  }

 private:
  Kind kind_ = Kind::Constant;
  std::string name_;
  std::vector<double> params_;
};

/// Samples of C, F along each flow line, arrays [seed x time].
struct PulledBackProblem {
  std::vector<double> times;
  Eigen::MatrixXd C;
  Eigen::MatrixXd F;
  Eigen::VectorXd U0;
  double lambda_shift = 0.0;

  std::size_t seeds() const { return static_cast<std::size_t>(C.rows()); }
  std::size_t nodes() const { return times.size(); }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(times.size());
    if (times.size() < 2) throw ArgumentError("transport: need at least two time nodes");
    if (C.cols() != n || F.cols() != n || F.rows() != C.rows() || U0.size() != C.rows()) {
      throw ArgumentError("transport: inconsistent array shapes");
    }
    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
      if (!(times[k] < times[k + 1])) throw ArgumentError("transport: times must increase");
    }
  }
};

struct CharacteristicSolution {
  std::vector<double> times;
  Eigen::MatrixXd U;
  Eigen::MatrixXd I;  // ∫_0^t C dr
};

/// C[j,k] = c(t_k, X(t_k,0,x_j)), F likewise, U0[j] = u0(0, x_j), for the
/// given flow seeds (all starting at the grid's first node).
template <int Dim>
PulledBackProblem pull_back_data(const ScalarField<Dim>& c, const ScalarField<Dim>& f, const ScalarField<Dim>& u0,
                                 const FlowMap<Dim>& flow, const std::vector<std::size_t>& seed_idx) {
  const auto& grid = flow.grid();
  PulledBackProblem p;
  p.times = grid.nodes();
  const auto ns = static_cast<Eigen::Index>(seed_idx.size());
  const auto nt = static_cast<Eigen::Index>(p.times.size());
  p.C.resize(ns, nt);
  p.F.resize(ns, nt);
  p.U0.resize(ns);
  for (Eigen::Index j = 0; j < ns; ++j) {
    const std::size_t i = seed_idx[static_cast<std::size_t>(j)];
    if (flow.seed_index_in_grid(i) != 0) throw ArgumentError("pull_back_data: seed does not start at t_start");
    const auto& tr = flow.selected(i);
    for (Eigen::Index k = 0; k < nt; ++k) {
      const auto& z = tr.states[static_cast<std::size_t>(k)];
      const double t = p.times[static_cast<std::size_t>(k)];
      p.C(j, k) = c(t, z);
      p.F(j, k) = f(t, z);
      if (!std::isfinite(p.C(j, k)) || !std::isfinite(p.F(j, k))) {
        throw NumericalError("pull_back_data: non-finite data along a flow line");
      }
    }
    p.U0(j) = u0(p.times[0], tr.states[0]);
  }
  return p;
}

/// C + lambda, F exp(-lambda t). Requires lambda >= max(0, -min C).
inline PulledBackProblem shift_zeroth_order(const PulledBackProblem& p, double lambda) {
  p.validate();
  const double need = std::max(0.0, -p.C.minCoeff());
  if (!(lambda >= need)) {
    throw ArgumentError("shift_zeroth_order: lambda=" + std::to_string(lambda) + " below required " +
                        std::to_string(need));
  }
  if (lambda == 0.0) return p;
  PulledBackProblem q = p;
  q.C.array() += lambda;
  for (std::size_t k = 0; k < p.times.size(); ++k) {
    q.F.col(static_cast<Eigen::Index>(k)) *= std::exp(-lambda * p.times[k]);
  }
  q.lambda_shift = p.lambda_shift + lambda;
  return q;
}

/// Undo a shift by lambda: U exp(lambda t).
inline CharacteristicSolution unshift(const CharacteristicSolution& s, double lambda) {
  CharacteristicSolution out = s;
  for (std::size_t k = 0; k < s.times.size(); ++k) {
    const double g = std::exp(lambda * s.times[k]);
    out.U.col(static_cast<Eigen::Index>(k)) *= g;
    out.I.col(static_cast<Eigen::Index>(k)).array() -= lambda * (s.times[k] - s.times[0]);
  }
  return out;
}

/// Trapezoid rule for I and for the Duhamel integral, written step by step:
///   U_{k+1} = U_k e^{-dI} + dt/2 (F_k e^{-dI} + F_{k+1}),  dI = dt/2 (C_k + C_{k+1}).
/// Only increments of I are exponentiated, so large |I| cannot overflow. The
/// step commutes with the zeroth-order shift: shifting, solving and unshifting
/// reproduces the direct solve to rounding.
inline CharacteristicSolution solve_characteristic_ode(const PulledBackProblem& p) {
  p.validate();
  CharacteristicSolution s;
  s.times = p.times;
  const auto ns = p.C.rows();
  const auto nt = p.C.cols();
  s.U.resize(ns, nt);
  s.I.resize(ns, nt);
  parallel_for(static_cast<std::size_t>(ns), [&](std::size_t js) {
    const auto j = static_cast<Eigen::Index>(js);
    double u = p.U0(j);
    double I = 0.0;
    s.U(j, 0) = u;
    s.I(j, 0) = 0.0;
    for (Eigen::Index k = 0; k + 1 < nt; ++k) {
      const double dt = p.times[static_cast<std::size_t>(k + 1)] - p.times[static_cast<std::size_t>(k)];
      const double dI = 0.5 * dt * (p.C(j, k) + p.C(j, k + 1));
      const double decay = std::exp(-dI);
      u = u * decay + 0.5 * dt * (p.F(j, k) * decay + p.F(j, k + 1));
      I += dI;
      s.U(j, k + 1) = u;
      s.I(j, k + 1) = I;
    }
  });
  return s;
}

template <int Dim>
using SpaceTimeProbe = std::function<double(double, const Vec<Dim>&)>;

/// sum_j w_j sum_k omega_k U[j,k] phi(t_k, X(t_k,0,x_j)) with trapezoid weights
/// omega_k: the right side of the flow-solution identity.
template <int Dim>
std::vector<double> assemble_flow_solution(const CharacteristicSolution& sol, const FlowMap<Dim>& flow,
                                           const std::vector<std::size_t>& seed_idx,
                                           const std::vector<double>& weights,
                                           const std::vector<SpaceTimeProbe<Dim>>& probes) {
  if (static_cast<std::size_t>(sol.U.rows()) != seed_idx.size() || weights.size() != seed_idx.size()) {
    throw ArgumentError("assemble_flow_solution: seed lists differ");
  }
  const std::size_t nt = sol.times.size();
  std::vector<double> omega(nt, 0.0);
  for (std::size_t k = 0; k + 1 < nt; ++k) {
    const double h = sol.times[k + 1] - sol.times[k];
    omega[k] += 0.5 * h;
    omega[k + 1] += 0.5 * h;
  }
  std::vector<double> out(probes.size(), 0.0);
  for (std::size_t q = 0; q < probes.size(); ++q) {
    double total = 0.0;
    for (std::size_t j = 0; j < seed_idx.size(); ++j) {
      const auto& tr = flow.selected(seed_idx[j]);
      double acc = 0.0;
      for (std::size_t k = 0; k < nt; ++k) {
        acc += omega[k] * sol.U(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) *
               probes[q](sol.times[k], tr.states[k]);
      }
      total += weights[j] * acc;
    }
    out[q] = total;
  }
  return out;
}

}  // namespace untangled
