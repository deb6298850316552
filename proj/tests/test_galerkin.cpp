#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "untangled/galerkin.hpp"
#include "untangled/transport.hpp"

using namespace untangled;

namespace {

NodeData node(std::function<double(double)> C, std::function<double(double)> F, double U0, double weight = 1.0) {
  return {std::move(C), std::move(F), U0, weight};
}

std::function<double(double)> constant(double v) {
  return [v](double) { return v; };
}

// ||U_h - u||_{L^2(0,T)} at the system's quadrature points, single node.
double l2_error(const GalerkinSystem& sys, const Eigen::VectorXd& samples, const std::function<double(double)>& u) {
  double acc = 0.0;
  for (std::size_t q = 0; q < sys.hats.t.size(); ++q) {
    const double e = samples(static_cast<Eigen::Index>(q)) - u(sys.hats.t[q]);
    acc += sys.hats.w[q] * e * e;
  }
  return std::sqrt(acc);
}

Eigen::VectorXd random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  return Eigen::VectorXd::NullaryExpr(static_cast<Eigen::Index>(n), [&]() { return g(rng); });
}

}  // namespace

TEST(GaussRule, IntegratesPolynomialsExactly) {
  for (std::size_t n : {1u, 2u, 3u, 5u}) {
    auto r = GaussRule::legendre(n);
    for (std::size_t p = 0; p < 2 * n; ++p) {
      double q = 0.0;
      for (std::size_t i = 0; i < n; ++i) q += r.weights[i] * std::pow(r.points[i], static_cast<double>(p));
      const double exact = p % 2 == 1 ? 0.0 : 2.0 / static_cast<double>(p + 1);
      EXPECT_NEAR(q, exact, 1e-14) << n << " " << p;
    }
  }
  EXPECT_THROW(GaussRule::legendre(0), ConfigError);
}

TEST(ApplyAdjoint, HatSlopesWithoutCoefficient) {
  auto mesh = TimeMesh::uniform(0.0, 1.0, 4);
  auto rule = GaussRule::legendre(2);
  auto out = apply_adjoint(mesh, rule, 2, constant(0.0));
  // Hat at tau_2 rises on cell 1 (B* = -1/dt) and falls on cell 2 (B* = +1/dt).
  for (std::size_t q = 0; q < out.size(); ++q) {
    const std::size_t cell = q / 2;
    const double expect = cell == 1 ? -4.0 : (cell == 2 ? 4.0 : 0.0);
    EXPECT_DOUBLE_EQ(out[q], expect);
  }
  EXPECT_THROW(apply_adjoint(mesh, rule, 4, constant(0.0)), ArgumentError);
}

TEST(ApplyAdjoint, OneCellUnitCoefficient) {
  const double T = 2.0;
  auto mesh = TimeMesh::uniform(0.0, T, 1);
  auto rule = GaussRule::legendre(3);
  auto out = apply_adjoint(mesh, rule, 0, constant(1.0));
  auto h = make_hat_table(mesh, rule);
  for (std::size_t q = 0; q < out.size(); ++q) EXPECT_NEAR(out[q], 1.0 / T + (1.0 - h.t[q] / T), 1e-15);
}

TEST(Assemble, GramIndependentOfGaussOrderForConstantC) {
  auto mesh = TimeMesh::uniform(0.0, 1.0, 6);
  auto a = assemble_system(mesh, {node(constant(1.7), constant(0.0), 0.0)}, 2);
  auto b = assemble_system(mesh, {node(constant(1.7), constant(0.0), 0.0)}, 4);
  EXPECT_LE((a.nodes[0].G - b.nodes[0].G).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Assemble, SingleCellGram) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 1), {node(constant(0.0), constant(0.0), 0.0)});
  ASSERT_EQ(sys.nodes[0].G.rows(), 1);
  EXPECT_NEAR(sys.nodes[0].G(0, 0), 1.0, 1e-15);
}

TEST(Assemble, TraceLoad) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 5), {node(constant(0.3), constant(0.0), 1.0)});
  EXPECT_EQ(sys.nodes[0].load(0), 1.0);
  for (Eigen::Index m = 1; m < 5; ++m) EXPECT_EQ(sys.nodes[0].load(m), 0.0);
}

TEST(Assemble, IdenticalBlocksForNodeIndependentData) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 7),
                             {node(constant(0.5), constant(2.0), 1.0), node(constant(0.5), constant(2.0), 1.0)});
  EXPECT_EQ(sys.nodes[0].G, sys.nodes[1].G);
  EXPECT_EQ(sys.nodes[0].load, sys.nodes[1].load);
}

TEST(Assemble, RejectsBadMesh) {
  EXPECT_THROW(TimeMesh::uniform(0.0, 1.0, 0), ConfigError);
  EXPECT_THROW(TimeMesh({0.0, 0.5, 0.5, 1.0}), ConfigError);
}

TEST(Solve, DecayConvergesFirstOrder) {
  std::vector<double> err;
  for (std::size_t cells : {8u, 16u, 32u, 64u}) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, cells), {node(constant(1.0), constant(0.0), 1.0)});
    auto sol = solve(sys);
    err.push_back(l2_error(sys, sol.samples[0], [](double t) { return std::exp(-t); }));
  }
  for (std::size_t i = 0; i + 1 < err.size(); ++i) EXPECT_GE(std::log2(err[i] / err[i + 1]), 0.9);
}

TEST(Solve, RecoversTrialSpaceSolution) {
  // U = B*(alpha (T - t)) = alpha (1 + c (T - t)) lies in the trial space.
  const double c = 0.8, alpha = 1.3, T = 1.5;
  auto exact = [&](double t) { return alpha * (1.0 + c * (T - t)); };
  auto sys = assemble_system(TimeMesh::uniform(0.0, T, 9),
                             {node(constant(c), [&](double t) { return c * c * alpha * (T - t); }, exact(0.0))});
  auto sol = solve(sys);
  EXPECT_LE(l2_error(sys, sol.samples[0], exact), 1e-10);
}

TEST(Solve, ZeroDataZeroSolution) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 5), {node(constant(2.0), constant(0.0), 0.0)});
  auto sol = solve(sys);
  EXPECT_EQ(sol.coeffs[0].cwiseAbs().maxCoeff(), 0.0);
}

TEST(Solve, RawHatsSolvedByLu) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 8), {node(constant(1.0), constant(0.0), 1.0)}, 2,
                             TrialBasis::RawHats);
  auto sol = solve(sys);
  EXPECT_LE(galerkin_orthogonality_defect(sys, sol), 1e-12);
}

TEST(ResidualNorm, VanishesAtDiscreteSolution) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 12),
                             {node([](double t) { return 1.0 + t; }, [](double t) { return std::sin(3 * t); }, 0.5)});
  auto sol = solve(sys);
  EXPECT_LE(residual_norm(sys, sol.samples), 1e-12);
}

TEST(ResidualNorm, ZeroTrialVectorGivesSolutionNorm) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 12),
                             {node(constant(0.7), [](double t) { return t; }, 1.0, 0.5),
                              node(constant(0.2), constant(1.0), -1.0, 1.5)});
  auto sol = solve(sys);
  std::vector<Eigen::VectorXd> zero(2, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sys.quad_points())));
  EXPECT_NEAR(residual_norm(sys, zero), l2_norm(sys, sol.samples), 1e-12);
}

TEST(ResidualNorm, EqualsErrorForRandomTrialVectors) {
  std::mt19937_64 rng(3);
  for (std::size_t cells : {4u, 16u, 64u}) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, 2.0, cells),
                               {node([](double t) { return 1.0 + 0.5 * std::cos(t); }, [](double t) { return std::exp(-t); }, 1.0),
                                node(constant(0.0), constant(1.0), 0.0, 0.3)});
    auto sol = solve(sys);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Eigen::VectorXd> W, diff;
      for (std::size_t j = 0; j < 2; ++j) {
        W.push_back(trial_samples(sys, j, random_vector(cells, rng)));
        diff.push_back(sol.samples[j] - W.back());
      }
      EXPECT_NEAR(residual_norm(sys, W), l2_norm(sys, diff), 1e-8);
    }
  }
}

TEST(InfSup, OptimalForConstantCoefficient) {
  for (std::size_t cells : {4u, 16u, 64u, 256u}) {
    for (double c : {0.0, 1.0, 5.0}) {
      auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, cells), {node(constant(c), constant(0.0), 1.0)});
      EXPECT_NEAR(discrete_inf_sup(sys), 1.0, 1e-10) << cells << " " << c;
    }
  }
}

TEST(InfSup, RawHatsOneCellBelowOne) {
  // One cell, C = 0: u = v = 1 - t, B*v = 1. Pairing 1/2, |u| = 1/sqrt(3), |B*v| = 1.
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 1), {node(constant(0.0), constant(0.0), 1.0)}, 2,
                             TrialBasis::RawHats);
  EXPECT_NEAR(discrete_inf_sup(sys), std::sqrt(3.0) / 2.0, 1e-12);
  EXPECT_LT(discrete_inf_sup(sys), 1.0);
}

TEST(InfSup, StaysOptimalUnderRefinement) {
  for (std::size_t cells = 2; cells <= 128; cells *= 2) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, cells),
                               {node([](double t) { return 2.0 + std::sin(5 * t); }, constant(0.0), 1.0)});
    const double b = discrete_inf_sup(sys);
    EXPECT_GE(b, 1.0 - 1e-8);
    EXPECT_LE(b, 1.0 + 1e-12);
  }
}

TEST(TrialToTest, AdjointImageOfHatMapsBack) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 6), {node(constant(1.2), constant(0.0), 0.0)});
  for (Eigen::Index m = 0; m < 6; ++m) {
    Eigen::VectorXd e = Eigen::VectorXd::Unit(6, m);
    EXPECT_LE((trial_to_test(sys, 0, e) - e).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TrialToTest, IsometryAndLinearity) {
  std::mt19937_64 rng(5);
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 10),
                             {node([](double t) { return 0.5 + t * t; }, constant(0.0), 0.0)});
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd u1 = random_vector(10, rng), u2 = random_vector(10, rng);
    const Eigen::VectorXd v1 = trial_to_test(sys, 0, u1);
    const double l2u = l2_norm(sys, {trial_samples(sys, 0, u1)});
    EXPECT_NEAR(test_norms(sys, 0, v1).second, l2u, 1e-10 * std::max(1.0, l2u));
    const Eigen::VectorXd lhs = trial_to_test(sys, 0, 2.0 * u1 - 0.5 * u2);
    const Eigen::VectorXd rhs = 2.0 * v1 - 0.5 * trial_to_test(sys, 0, u2);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, lhs.cwiseAbs().maxCoeff()));
  }
}

TEST(GalerkinProperty, OrthogonalityDefect) {
  auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, 32),
                             {node([](double t) { return 1.0 + t; }, [](double t) { return std::cos(t); }, 2.0),
                              node(constant(3.0), constant(-1.0), 0.0)});
  EXPECT_LE(galerkin_orthogonality_defect(sys, solve(sys)), 1e-12);
}

TEST(GalerkinProperty, QuasiOptimal) {
  const auto exact = [](double t) { return std::exp(-t) + 0.5 * std::sin(2 * t); };
  // U' + U = F for the exact solution above.
  const auto F = [](double t) { return std::cos(2 * t) + 0.5 * std::sin(2 * t); };
  for (std::size_t cells : {4u, 8u, 16u}) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, cells), {node(constant(1.0), F, 1.0)}, 4);
    auto sol = solve(sys);
    // Best L^2 approximation from the trial space: MU c = <u, trial>.
    const auto& ns = sys.nodes[0];
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cells));
    for (std::size_t q = 0; q < sys.hats.t.size(); ++q) {
      const std::size_t c = sys.hats.cell[q];
      const double wu = sys.hats.w[q] * exact(sys.hats.t[q]);
      rhs(static_cast<Eigen::Index>(c)) += wu * ns.trial_left[q];
      if (c + 1 < cells) rhs(static_cast<Eigen::Index>(c + 1)) += wu * ns.trial_right[q];
    }
    const Eigen::VectorXd best = ns.MU.ldlt().solve(rhs);
    const double best_err = l2_error(sys, trial_samples(sys, 0, best), exact);
    const double err = l2_error(sys, sol.samples[0], exact);
    EXPECT_LE(err, (1.0 + 1.0 / discrete_inf_sup(sys)) * best_err + 1e-14) << cells;
  }
}

TEST(GalerkinProperty, PoincareBoundOnBasis) {
  const double T = 1.7;
  for (double c : {0.0, 0.5, 4.0}) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, T, 12), {node(constant(c), constant(0.0), 0.0)}, 3);
    for (Eigen::Index m = 0; m < 12; ++m) {
      const auto [l2, graph] = test_norms(sys, 0, Eigen::VectorXd::Unit(12, m));
      EXPECT_LE(l2, 2.0 * T * graph);
    }
  }
}

TEST(GalerkinProperty, AgreesWithCharacteristics) {
  const auto C = [](double t) { return 1.0 + 0.5 * std::sin(2.0 * t); };
  const auto F = [](double t) { return std::cos(3.0 * t); };
  // Fine characteristic reference, interpolated linearly to the Gauss points.
  const std::size_t nref = 20000;
  PulledBackProblem p;
  p.times = TimeGrid::uniform(0.0, 1.0, nref).nodes();
  p.C.resize(1, static_cast<Eigen::Index>(nref + 1));
  p.F.resize(1, static_cast<Eigen::Index>(nref + 1));
  for (std::size_t k = 0; k <= nref; ++k) {
    p.C(0, static_cast<Eigen::Index>(k)) = C(p.times[k]);
    p.F(0, static_cast<Eigen::Index>(k)) = F(p.times[k]);
  }
  p.U0 = Eigen::VectorXd::Constant(1, 1.0);
  const auto ref = solve_characteristic_ode(p);
  auto reference = [&](double t) {
    const double s = t * static_cast<double>(nref);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(s), nref - 1);
    const double a = s - static_cast<double>(k);
    return (1 - a) * ref.U(0, static_cast<Eigen::Index>(k)) + a * ref.U(0, static_cast<Eigen::Index>(k + 1));
  };
  std::vector<double> err;
  for (std::size_t cells : {8u, 16u, 32u, 64u}) {
    auto sys = assemble_system(TimeMesh::uniform(0.0, 1.0, cells), {node(C, F, 1.0)});
    err.push_back(l2_error(sys, solve(sys).samples[0], reference));
  }
  for (std::size_t i = 0; i + 1 < err.size(); ++i) EXPECT_GE(std::log2(err[i] / err[i + 1]), 0.9);
}
