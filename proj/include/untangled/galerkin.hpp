#pragma once

// Space-time Petrov-Galerkin scheme for ∂_t U + C U = F with test space of
// time hats vanishing at T and trial space B*(test). The operator has no
// spatial derivative, so the system is block diagonal over spatial nodes.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "untangled/common.hpp"
#include "untangled/errors.hpp"

namespace untangled {

class TimeMesh {
 public:
  explicit TimeMesh(std::vector<double> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.size() < 2) throw ConfigError("galerkin mesh needs at least one cell");
    for (std::size_t k = 0; k + 1 < nodes_.size(); ++k) {
      if (!(nodes_[k] < nodes_[k + 1])) throw ConfigError("galerkin mesh nodes must be strictly increasing");
    }
  }
  static TimeMesh uniform(double t0, double t1, std::size_t cells) {
    if (cells == 0) throw ConfigError("galerkin.cells must be positive");
    std::vector<double> n(cells + 1);
    for (std::size_t k = 0; k <= cells; ++k) n[k] = t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(cells);
    n.back() = t1;
    return TimeMesh(std::move(n));
  }
  std::size_t cells() const { return nodes_.size() - 1; }
  double operator[](std::size_t k) const { return nodes_[k]; }
  double t0() const { return nodes_.front(); }
  double t1() const { return nodes_.back(); }
  const std::vector<double>& nodes() const { return nodes_; }

 private:
  std::vector<double> nodes_;
};

/// Gauss-Legendre points and weights on [-1, 1].
struct GaussRule {
  std::vector<double> points;
  std::vector<double> weights;

  static GaussRule legendre(std::size_t n) {
    // Golub-Welsch: eigenvalues of the Jacobi matrix.
    if (n == 0) throw ConfigError("galerkin.quadrature must be at least 1");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t k = 1; k < n; ++k) {
      const double b = static_cast<double>(k) / std::sqrt(4.0 * static_cast<double>(k * k) - 1.0);
      J(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = b;
      J(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(k)) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    GaussRule r;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
      r.points.push_back(es.eigenvalues()(i));
      const double v0 = es.eigenvectors()(0, i);
      r.weights.push_back(2.0 * v0 * v0);
    }
    return r;
  }
};

enum class TrialBasis {
  AdjointImage,  // u_n = B* v_n
  RawHats,       // u_n = v_n (mismatched pairing)
};

/// Data along one spatial node: C(t), F(t), initial value and the node's
/// spatial weight in L^2(Q).
struct NodeData {
  std::function<double(double)> C;
  std::function<double(double)> F;
  double U0 = 0.0;
  double weight = 1.0;
};

/// Hat values on the quadrature grid. Quadrature point q sits in cell
/// cell[q]; the hats at the cell's left and right node are the only nonzero
/// test functions there (the right one is absent in the last cell).
struct HatTable {
  std::vector<double> t, w;  // points and weights (Jacobian included)
  std::vector<std::size_t> cell;
  std::vector<double> left, right;              // hat values
  std::vector<double> left_slope, right_slope;  // hat derivatives
};

inline HatTable make_hat_table(const TimeMesh& mesh, const GaussRule& rule) {
  HatTable h;
  for (std::size_t c = 0; c < mesh.cells(); ++c) {
    const double a = mesh[c], b = mesh[c + 1], len = b - a;
    for (std::size_t i = 0; i < rule.points.size(); ++i) {
      const double t = a + 0.5 * len * (rule.points[i] + 1.0);
      h.t.push_back(t);
      h.w.push_back(0.5 * len * rule.weights[i]);
      h.cell.push_back(c);
      h.left.push_back((b - t) / len);
      h.right.push_back((t - a) / len);
      h.left_slope.push_back(-1.0 / len);
      h.right_slope.push_back(1.0 / len);
    }
  }
  return h;
}

/// B* v_m = -v_m' + C v_m at the quadrature points, for hat m (m < cells).
inline std::vector<double> apply_adjoint(const TimeMesh& mesh, const GaussRule& rule, std::size_t m,
                                         const std::function<double(double)>& C) {
  if (m >= mesh.cells()) throw ArgumentError("apply_adjoint: hat index out of range");
  const auto h = make_hat_table(mesh, rule);
  std::vector<double> out(h.t.size(), 0.0);
  for (std::size_t q = 0; q < h.t.size(); ++q) {
    const std::size_t c = h.cell[q];
    double v = 0.0, dv = 0.0;
    if (c == m) {
      v = h.left[q];
      dv = h.left_slope[q];
    } else if (c + 1 == m) {
      v = h.right[q];
      dv = h.right_slope[q];
    }
    out[q] = -dv + C(h.t[q]) * v;
  }
  return out;
}

struct NodeSystem {
  Eigen::MatrixXd G;   // <B*v_m, B*v_n>
  Eigen::MatrixXd P;   // P(m,n) = <u_n, B*v_m>
  Eigen::MatrixXd MU;  // <u_m, u_n>
  Eigen::VectorXd load;
  std::vector<double> adj_left, adj_right;      // B* of the two active hats
  std::vector<double> trial_left, trial_right;  // trial functions on the same pattern
  Eigen::LLT<Eigen::MatrixXd> G_llt;
  double weight = 1.0;
};

struct GalerkinSystem {
  TimeMesh mesh;
  GaussRule rule;
  TrialBasis basis = TrialBasis::AdjointImage;
  HatTable hats;
  std::vector<NodeSystem> nodes;

  std::size_t dofs() const { return mesh.cells(); }
  std::size_t quad_points() const { return hats.t.size(); }
};

/// Per node Gram matrix, pairing, trial mass and load; G must be SPD.
inline GalerkinSystem assemble_system(const TimeMesh& mesh, const std::vector<NodeData>& data,
                                      std::size_t quadrature = 2, TrialBasis basis = TrialBasis::AdjointImage) {
  GalerkinSystem sys{mesh, GaussRule::legendre(quadrature), basis, {}, {}};
  sys.hats = make_hat_table(mesh, sys.rule);
  const auto& h = sys.hats;
  const std::size_t M = mesh.cells();
  const auto Mi = static_cast<Eigen::Index>(M);
  sys.nodes.resize(data.size());
  parallel_for(data.size(), [&](std::size_t j) {
    const auto& d = data[j];
    NodeSystem& ns = sys.nodes[j];
    ns.weight = d.weight;
    const std::size_t Q = h.t.size();
    ns.adj_left.resize(Q);
    ns.adj_right.resize(Q);
    ns.trial_left.resize(Q);
    ns.trial_right.resize(Q);
    ns.G = Eigen::MatrixXd::Zero(Mi, Mi);
    ns.P = Eigen::MatrixXd::Zero(Mi, Mi);
    ns.MU = Eigen::MatrixXd::Zero(Mi, Mi);
    ns.load = Eigen::VectorXd::Zero(Mi);
    for (std::size_t q = 0; q < Q; ++q) {
      const double c = d.C(h.t[q]);
      const double f = d.F ? d.F(h.t[q]) : 0.0;
      const std::size_t cell = h.cell[q];
      const bool has_right = cell + 1 < M;
      ns.adj_left[q] = -h.left_slope[q] + c * h.left[q];
      ns.adj_right[q] = has_right ? -h.right_slope[q] + c * h.right[q] : 0.0;
      if (basis == TrialBasis::AdjointImage) {
        ns.trial_left[q] = ns.adj_left[q];
        ns.trial_right[q] = ns.adj_right[q];
      } else {
        ns.trial_left[q] = h.left[q];
        ns.trial_right[q] = has_right ? h.right[q] : 0.0;
      }
      const auto L = static_cast<Eigen::Index>(cell);
      const auto R = L + 1;
      const double w = h.w[q];
      const double aL = ns.adj_left[q], aR = ns.adj_right[q];
      const double uL = ns.trial_left[q], uR = ns.trial_right[q];
      ns.G(L, L) += w * aL * aL;
      ns.P(L, L) += w * uL * aL;
      ns.MU(L, L) += w * uL * uL;
      ns.load(L) += w * f * h.left[q];
      if (has_right) {
        ns.G(L, R) += w * aL * aR;
        ns.G(R, L) += w * aR * aL;
        ns.G(R, R) += w * aR * aR;
        ns.P(L, R) += w * uR * aL;
        ns.P(R, L) += w * uL * aR;
        ns.P(R, R) += w * uR * aR;
        ns.MU(L, R) += w * uL * uR;
        ns.MU(R, L) += w * uR * uL;
        ns.MU(R, R) += w * uR * uR;
        ns.load(R) += w * f * h.right[q];
      }
    }
    ns.load(0) += d.U0;  // trace term: only the hat at t0 is nonzero there
    ns.G_llt.compute(ns.G);
    if (ns.G_llt.info() != Eigen::Success) throw NumericalError("assemble_system: Gram matrix not positive definite");
  });
  return sys;
}

struct GalerkinSolution {
  std::vector<Eigen::VectorXd> coeffs;  // trial coefficients per node
  std::vector<Eigen::VectorXd> samples; // U_h at the quadrature points per node
};

/// Trial function with the given coefficients, sampled at the quadrature points.
inline Eigen::VectorXd trial_samples(const GalerkinSystem& sys, std::size_t j, const Eigen::VectorXd& c) {
  const auto& ns = sys.nodes[j];
  const auto& h = sys.hats;
  const std::size_t M = sys.dofs();
  Eigen::VectorXd s(static_cast<Eigen::Index>(h.t.size()));
  for (std::size_t q = 0; q < h.t.size(); ++q) {
    const std::size_t cell = h.cell[q];
    double v = c(static_cast<Eigen::Index>(cell)) * ns.trial_left[q];
    if (cell + 1 < M) v += c(static_cast<Eigen::Index>(cell + 1)) * ns.trial_right[q];
    s(static_cast<Eigen::Index>(q)) = v;
  }
  return s;
}

/// <W, B* v_m> for every test hat m, by quadrature.
inline Eigen::VectorXd pair_with_tests(const GalerkinSystem& sys, std::size_t j, const Eigen::VectorXd& W) {
  const auto& ns = sys.nodes[j];
  const auto& h = sys.hats;
  const std::size_t M = sys.dofs();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(M));
  for (std::size_t q = 0; q < h.t.size(); ++q) {
    const std::size_t cell = h.cell[q];
    const double wq = h.w[q] * W(static_cast<Eigen::Index>(q));
    out(static_cast<Eigen::Index>(cell)) += wq * ns.adj_left[q];
    if (cell + 1 < M) out(static_cast<Eigen::Index>(cell + 1)) += wq * ns.adj_right[q];
  }
  return out;
}

/// Solves P c = load per node.
inline GalerkinSolution solve(const GalerkinSystem& sys) {
  GalerkinSolution sol;
  sol.coeffs.resize(sys.nodes.size());
  sol.samples.resize(sys.nodes.size());
  parallel_for(sys.nodes.size(), [&](std::size_t j) {
    const auto& ns = sys.nodes[j];
    Eigen::VectorXd c;
    if (sys.basis == TrialBasis::AdjointImage) {
      c = ns.G_llt.solve(ns.load);
    } else {
      c = ns.P.partialPivLu().solve(ns.load);
    }
    const double rel = (ns.P * c - ns.load).norm() / std::max(ns.load.norm(), 1e-300);
    if (!std::isfinite(rel) || (ns.load.norm() > 0.0 && rel > 1e-9)) {
      throw NumericalError("galerkin solve: linear system residual too large");
    }
    sol.coeffs[j] = std::move(c);
    sol.samples[j] = trial_samples(sys, j, sol.coeffs[j]);
  });
  return sol;
}

/// sqrt(sum_j weight_j ∫ s_j^2) by the system's quadrature.
inline double l2_norm(const GalerkinSystem& sys, const std::vector<Eigen::VectorXd>& samples) {
  double acc = 0.0;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    double node = 0.0;
    for (std::size_t q = 0; q < sys.hats.w.size(); ++q) {
      const double v = samples[j](static_cast<Eigen::Index>(q));
      node += sys.hats.w[q] * v * v;
    }
    acc += sys.nodes[j].weight * node;
  }
  return std::sqrt(acc);
}

/// Dual norm of the residual l - b(W, .) over the test space: solve
/// G r = l - b(W, .) per node and return sqrt(sum_j weight_j r^T G r).
inline double residual_norm(const GalerkinSystem& sys, const std::vector<Eigen::VectorXd>& W_samples) {
  if (W_samples.size() != sys.nodes.size()) throw ArgumentError("residual_norm: one sample vector per node required");
  double acc = 0.0;
  for (std::size_t j = 0; j < sys.nodes.size(); ++j) {
    const auto& ns = sys.nodes[j];
    const Eigen::VectorXd rhs = ns.load - pair_with_tests(sys, j, W_samples[j]);
    const Eigen::VectorXd r = ns.G_llt.solve(rhs);
    acc += ns.weight * r.dot(ns.G * r);
  }
  return std::sqrt(std::max(acc, 0.0));
}

/// Smallest singular value of L_V^{-1} P L_U^{-T}, min over nodes; the
/// trial norm is L^2 and the test norm is ||B* v||.
inline double discrete_inf_sup(const GalerkinSystem& sys) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& ns : sys.nodes) {
    const Eigen::MatrixXd LV = ns.G_llt.matrixL();
    Eigen::LLT<Eigen::MatrixXd> mu(ns.MU);
    if (mu.info() != Eigen::Success) throw NumericalError("discrete_inf_sup: trial mass matrix not SPD");
    const Eigen::MatrixXd LU = mu.matrixL();
    Eigen::MatrixXd X = LV.triangularView<Eigen::Lower>().solve(ns.P);
    X = LU.triangularView<Eigen::Lower>().solve(X.transpose()).transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X);
    worst = std::min(worst, svd.singularValues().minCoeff());
  }
  return worst;
}

/// Test coefficients of the Riesz representer V_U: G v = P c.
inline Eigen::VectorXd trial_to_test(const GalerkinSystem& sys, std::size_t j, const Eigen::VectorXd& U_coeffs) {
  const auto& ns = sys.nodes[j];
  return ns.G_llt.solve(ns.P * U_coeffs);
}

/// max over nodes of |l - P c|_inf / max(|l|_inf, 1).
inline double galerkin_orthogonality_defect(const GalerkinSystem& sys, const GalerkinSolution& sol) {
  double d = 0.0;
  for (std::size_t j = 0; j < sys.nodes.size(); ++j) {
    const auto& ns = sys.nodes[j];
    const double scale = std::max(ns.load.cwiseAbs().maxCoeff(), 1.0);
    d = std::max(d, (ns.load - ns.P * sol.coeffs[j]).cwiseAbs().maxCoeff() / scale);
  }
  return d;
}

/// ||v||_{L^2} and ||B* v||_{L^2} of the test function with coefficients v.
inline std::pair<double, double> test_norms(const GalerkinSystem& sys, std::size_t j, const Eigen::VectorXd& v) {
  const auto& ns = sys.nodes[j];
  const auto& h = sys.hats;
  const std::size_t M = sys.dofs();
  double l2 = 0.0, graph = 0.0;
  for (std::size_t q = 0; q < h.t.size(); ++q) {
    const std::size_t cell = h.cell[q];
    double val = v(static_cast<Eigen::Index>(cell)) * h.left[q];
    double adj = v(static_cast<Eigen::Index>(cell)) * ns.adj_left[q];
    if (cell + 1 < M) {
      val += v(static_cast<Eigen::Index>(cell + 1)) * h.right[q];
      adj += v(static_cast<Eigen::Index>(cell + 1)) * ns.adj_right[q];
    }
    l2 += h.w[q] * val * val;
    graph += h.w[q] * adj * adj;
  }
  return {std::sqrt(l2), std::sqrt(graph)};
}

}  // namespace untangled
