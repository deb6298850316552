#include <gtest/gtest.h>

#include <cmath>

#include "untangled/field.hpp"

using namespace untangled;

namespace {

SpatialDomain<1> line(double lo, double hi) { return {Vec<1>(lo), Vec<1>(hi)}; }
SpatialDomain<2> box2(double lo, double hi) { return {Vec<2>(lo, lo), Vec<2>(hi, hi)}; }

// Distance from y to the box, computed coordinate by coordinate.
double box_distance(const SpatialDomain<2>& d, const Vec<2>& y) {
  double s = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double e = std::max({d.lower()[i] - y[i], 0.0, y[i] - d.upper()[i]});
    s += e * e;
  }
  return std::sqrt(s);
}

}  // namespace

TEST(SpatialDomain, RejectsDegenerateBox) {
  EXPECT_THROW(line(1.0, 1.0), ConfigError);
  EXPECT_THROW(line(2.0, 1.0), ConfigError);
}

TEST(SpatialDomain, ContainsIsClosedBox) {
  auto d = box2(-1, 1);
  EXPECT_TRUE(d.contains(Vec<2>(-1, 1)));
  EXPECT_TRUE(d.contains(Vec<2>(0, 0)));
  EXPECT_FALSE(d.contains(Vec<2>(1.0 + 1e-15, 0)));
}

TEST(TimeGrid, UniformEndsExactly) {
  auto g = TimeGrid::uniform(0.0, 1.0, 3);
  ASSERT_EQ(g.nodes().size(), 4u);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[3], 1.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_LT(g[k], g[k + 1]);
  EXPECT_EQ(g.index_of(1.0 / 3.0).value(), 1u);
  EXPECT_FALSE(g.index_of(0.5).has_value());
  EXPECT_THROW(g.require_index(0.5), ArgumentError);
  EXPECT_THROW(TimeGrid::uniform(0.0, 1.0, 0), ConfigError);
  EXPECT_THROW(TimeGrid({0.0, 0.5, 0.5}), ConfigError);
}

TEST(EvalVelocity, ConstantField) {
  auto f = VelocityField<2>::make("constant", {1.0, 0.0}, std::nullopt, box2(-1, 1));
  for (double t : {0.0, 0.3}) {
    const Vec<2> v = f.eval(t, Vec<2>(0.2, -0.7));
    EXPECT_EQ(v[0], 1.0);
    EXPECT_EQ(v[1], 0.0);
  }
}

TEST(EvalVelocity, SignFieldIsPlusOneAtZero) {
  auto f = VelocityField<1>::make("sign1d", {}, 1.0, line(-1, 1));
  EXPECT_EQ(f.eval(0.0, Vec<1>(0.0))[0], 1.0);
  EXPECT_EQ(f.eval(0.0, Vec<1>(1e-12))[0], -1.0);
}

TEST(EvalVelocity, SqrtField) {
  auto f = VelocityField<1>::make("sqrt", {}, 1.0, line(-5, 5));
  EXPECT_DOUBLE_EQ(f.eval(0.0, Vec<1>(4.0))[0], 4.0);
  EXPECT_EQ(f.eval(0.0, Vec<1>(-1.0))[0], 0.0);
}

TEST(EvalVelocity, Errors) {
  EXPECT_THROW(VelocityField<1>::make("vortex", {}, 1.0, line(-1, 1)), ConfigError);
  EXPECT_THROW(VelocityField<1>::make("constant", {1.0, 2.0}, 1.0, line(-1, 1)), ConfigError);
  EXPECT_THROW(VelocityField<1>::make("rotating-2d", {1.0}, 1.0, line(-1, 1)), ConfigError);
  EXPECT_THROW(VelocityField<1>::make("mollified-sign1d", {0.0}, 1.0, line(-1, 1)), ConfigError);
  auto f = VelocityField<1>::make("sign1d", {}, 1.0, line(-1, 1));
  EXPECT_THROW(f.eval(0.0, Vec<1>(1.5)), DomainError);
}

TEST(EvalVelocity, MollifiedSignIsBoxKernelAverage) {
  // Average of -sign over [x - eps, x + eps], by midpoint sums.
  const double eps = 0.1;
  auto f = VelocityField<1>::make("mollified-sign1d", {eps}, 1.0, line(-1, 1));
  for (double x : {-0.3, -0.05, 0.0, 0.02, 0.09, 0.5}) {
    const int n = 200000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double y = x - eps + 2 * eps * (i + 0.5) / n;
      acc += y > 0 ? -1.0 : (y < 0 ? 1.0 : 0.0);
    }
    EXPECT_NEAR(f.eval(0.0, Vec<1>(x))[0], acc / n, 1e-4) << x;
  }
}

TEST(EvalVelocity, GridFieldReproducesBilinearData) {
  auto d = box2(-1, 1);
  std::array<std::size_t, 2> counts{5, 4};
  VecList<2> vals;
  auto g = [](double x, double y) { return Vec<2>(1 + 2 * x - y + 0.5 * x * y, -x); };
  for (std::size_t j = 0; j < counts[1]; ++j) {
    for (std::size_t i = 0; i < counts[0]; ++i) {
      const double x = -1 + 2.0 * i / (counts[0] - 1);
      const double y = -1 + 2.0 * j / (counts[1] - 1);
      vals.push_back(g(x, y));
    }
  }
  auto f = VelocityField<2>::grid_sampled(d, counts, vals, 10.0);
  for (auto p : {Vec<2>(0.13, -0.77), Vec<2>(1.0, 1.0), Vec<2>(-1.0, 0.4)}) {
    EXPECT_NEAR((f.eval(0.0, p) - g(p[0], p[1])).norm(), 0.0, 1e-12);
  }
}

TEST(EvalVelocity, Deterministic) {
  auto f = VelocityField<2>::make("rotating-2d", {1.3}, std::nullopt, box2(-1, 1));
  const Vec<2> x(0.123456789, -0.987654321);
  const Vec<2> a = f.eval(0.5, x);
  const Vec<2> b = f.eval(0.5, x);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
}

TEST(TangentCone, InteriorAcceptsAnything) {
  auto d = box2(-1, 1);
  EXPECT_TRUE(tangent_cone_admissible(d, Vec<2>(0.2, 0.1), Vec<2>(-100, 100), 0.0));
}

TEST(TangentCone, OutwardOnUpperFaceRejected) {
  auto d = box2(-1, 1);
  EXPECT_FALSE(tangent_cone_admissible(d, Vec<2>(1.0, 0.0), Vec<2>(1.0, 0.0), 1e-12));
  EXPECT_TRUE(tangent_cone_admissible(d, Vec<2>(1.0, 0.0), Vec<2>(0.0, 1.0), 1e-12));
}

TEST(TangentCone, CornerMatchesLiminfDefinition) {
  auto d = box2(-1, 1);
  const Vec<2> x(-1, -1);
  for (auto v : {Vec<2>(1, 1), Vec<2>(-1, 1), Vec<2>(0, 1), Vec<2>(1, -0.5)}) {
    double liminf = std::numeric_limits<double>::infinity();
    for (int k = 10; k < 40; ++k) {
      const double lam = std::ldexp(1.0, -k);
      liminf = std::min(liminf, box_distance(d, x + lam * v) / lam);
    }
    EXPECT_EQ(tangent_cone_admissible(d, x, v, 0.0), liminf < 1e-9) << v.transpose();
  }
}

TEST(TangentCone, OutsidePointIsError) {
  auto d = box2(-1, 1);
  EXPECT_THROW(tangent_cone_admissible(d, Vec<2>(2, 0), Vec<2>(0, 0), 0.0), DomainError);
}

TEST(TangentCone, ZeroVectorAlwaysTangent) {
  auto d = box2(-1, 2);
  for (const auto& s : latin_hypercube<2>(500, d, 0, 1, 3)) {
    EXPECT_TRUE(tangent_cone_admissible(d, s.x, Vec<2>::Zero(), 0.0));
  }
  for (auto x : {Vec<2>(-1, -1), Vec<2>(2, 0.5), Vec<2>(2, 2)}) {
    EXPECT_TRUE(tangent_cone_admissible(d, x, Vec<2>::Zero(), 0.0));
  }
}

TEST(CheckGrowth, ConstantAndSignAdmissible) {
  auto c = VelocityField<2>::make("constant", {3.0, 4.0}, 5.0, box2(-2, 2));
  EXPECT_EQ(check_growth(c, latin_hypercube<2>(1000, c.domain(), 0, 1, 1)).growth_violations, 0u);
  auto s = VelocityField<1>::make("sign1d", {}, 1.0, line(-1, 1));
  EXPECT_EQ(check_growth(s, latin_hypercube<1>(1000, s.domain(), 0, 1, 1)).growth_violations, 0u);
}

TEST(CheckGrowth, QuadraticWithUnitBoundViolates) {
  auto q = VelocityField<1>::make("quadratic", {1.0}, 1.0, line(-4, 4));
  std::vector<SpaceTimeSample<1>> samples = {{0.0, Vec<1>(0.5)}, {0.0, Vec<1>(3.0)}};
  const auto diag = check_growth(q, samples);
  EXPECT_GE(diag.growth_violations, 1u);
  // 9 > 1 * (1 + 3): the point x = 3 is the only violation.
  EXPECT_EQ(diag.growth_violations, 1u);
}

TEST(CheckGrowth, RegistryFieldsPassLatinHypercube) {
  std::vector<VelocityField<1>> ones = {
      VelocityField<1>::make("constant", {-0.7}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("sqrt", {}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("sign1d", {}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("compressive-sign", {}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("mollified-sign1d", {0.05}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("linear", {-2.0}, std::nullopt, line(-3, 3)),
      VelocityField<1>::make("quadratic", {0.5}, std::nullopt, line(-3, 3)),
  };
  for (const auto& f : ones) {
    EXPECT_EQ(check_growth(f, latin_hypercube<1>(10000, f.domain(), 0, 1, 7)).growth_violations, 0u)
        << f.kind_name();
  }
  auto rot = VelocityField<2>::make("rotating-2d", {2.0}, std::nullopt, box2(-1, 1));
  EXPECT_EQ(check_growth(rot, latin_hypercube<2>(10000, rot.domain(), 0, 1, 7)).growth_violations, 0u);
}

TEST(CheckGrowth, TangentViolationsCountedOnFaces) {
  auto c = VelocityField<1>::make("constant", {1.0}, 1.0, line(-1, 1));
  std::vector<SpaceTimeSample<1>> samples = {{0.0, Vec<1>(1.0)}, {0.0, Vec<1>(-1.0)}, {0.0, Vec<1>(0.0)}};
  EXPECT_EQ(check_growth(c, samples).tangent_violations, 1u);
}

TEST(OslModulus, LinearContraction) {
  auto f = VelocityField<1>::make("linear", {-1.0}, std::nullopt, line(-2, 2));
  std::vector<std::pair<Vec<1>, Vec<1>>> pairs = {{Vec<1>(-1.0), Vec<1>(0.5)}, {Vec<1>(0.1), Vec<1>(1.9)}};
  EXPECT_DOUBLE_EQ(estimate_osl_modulus(f, 0.0, pairs), -1.0);
}

TEST(OslModulus, CompressiveSignNegativeAcrossZero) {
  auto f = VelocityField<1>::make("compressive-sign", {}, 1.0, line(-1, 1));
  for (double a : {0.01, 0.3, 0.9}) {
    std::vector<std::pair<Vec<1>, Vec<1>>> pairs = {{Vec<1>(-a), Vec<1>(a)}};
    // <(-1) - (+1), 2a> / (2a)^2 = -1/a
    EXPECT_DOUBLE_EQ(estimate_osl_modulus(f, 0.0, pairs), -1.0 / a);
  }
}

TEST(OslModulus, SqrtBlowsUpNearZero) {
  auto f = VelocityField<1>::make("sqrt", {}, 1.0, line(-1, 1));
  double prev = 0.0;
  for (double a : {0.5, 0.1, 0.01, 1e-4}) {
    std::vector<std::pair<Vec<1>, Vec<1>>> pairs = {{Vec<1>(0.0), Vec<1>(a)}};
    const double q = estimate_osl_modulus(f, 0.0, pairs);
    EXPECT_NEAR(q, 2.0 / std::sqrt(a), 1e-9 * q);
    EXPECT_GT(q, prev);
    prev = q;
  }
}

TEST(OslModulus, CoincidentPairIsError) {
  auto f = VelocityField<1>::make("sqrt", {}, 1.0, line(-1, 1));
  std::vector<std::pair<Vec<1>, Vec<1>>> pairs = {{Vec<1>(0.2), Vec<1>(0.2)}};
  EXPECT_THROW(estimate_osl_modulus(f, 0.0, pairs), ArgumentError);
}

TEST(LatinHypercube, StratifiedInEveryCoordinate) {
  auto d = box2(0, 1);
  const std::size_t n = 64;
  auto s = latin_hypercube<2>(n, d, 0.0, 1.0, 11);
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<int> hits(n, 0);
    for (const auto& p : s) {
      const double u = axis == 0 ? p.t : p.x[axis - 1];
      ++hits[std::min<std::size_t>(n - 1, static_cast<std::size_t>(u * n))];
    }
    for (int h : hits) EXPECT_EQ(h, 1);
  }
}
