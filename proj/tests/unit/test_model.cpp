#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "entlab/model.hpp"

using namespace entlab;

TEST(ReferenceDensity, PointValues) {
  const ReferenceMeasure m{Potential::quadratic(1, 1.0)};
  const std::vector<Vec> pts{{0, 0, 0}, {1, 0, 0}};
  const auto q = eval_reference_density(m, pts);
  EXPECT_DOUBLE_EQ(q[0], 1.0);
  EXPECT_NEAR(q[1], 0.367879441171, 1e-12);
}

TEST(ReferenceDensity, TotalMassByQuadrature) {
  const ReferenceMeasure m{Potential::quadratic(1, 1.0)};
  // exp(-2 psi) directly: density() rejects the underflow far out in the tails
  auto f = [&](double x) { return std::exp(-2.0 * m.potential.value(Vec{x, 0, 0})); };
  const double inf = std::numeric_limits<double>::infinity();
  const double z = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, -inf, inf, 15, 1e-12);
  EXPECT_NEAR(z, std::sqrt(std::numbers::pi), 1e-9);
}

TEST(ReferenceDensity, LogMatchesPotential) {
  const ReferenceMeasure m{Potential::double_well(2, 1.0, 0.25, 50.0)};
  for (const Vec& x : box_samples(2, -3, 3, 13)) EXPECT_NEAR(std::log(m.density(x)) + 2 * m.potential.value(x), 0, 1e-12);
}

TEST(ReferenceDensity, NegativePotentialRejected) {
  const auto bad = Potential::custom(
      1, [](const Vec& x) { return -x[0] * x[0]; }, [](const Vec& x) { return Vec{-2 * x[0], 0, 0}; }, {}, 10.0);
  const ReferenceMeasure m{bad};
  EXPECT_THROW(m.density(Vec{1, 0, 0}), Error);
}

TEST(DriftCondition, ConvexQuadraticPasses) {
  const auto pts = box_samples(1, -10, 10, 2001);
  EXPECT_TRUE(check_drift_condition(Potential::quadratic(1, 1.0), 0.1, 1.0, pts).pass);
}

TEST(DriftCondition, DoubleWellPasses) {
  const auto pts = box_samples(1, -10, 10, 2001);
  const auto r = check_drift_condition(Potential::double_well(1, 1.0, 0.25, 1e4), 2.0, 2.0, pts);
  EXPECT_TRUE(r.pass);
  // dense-scan oracle: x psi'(x) + C x^2 = x^2 (x^2 - 1 + 2) > 0 for |x| >= 2
  EXPECT_NEAR(r.lhs, 5.0, 1e-9);
}

TEST(DriftCondition, NegativeSurrogateErrors) {
  const auto bad = Potential::custom(
      1, [](const Vec& x) { return -x[0] * x[0]; }, [](const Vec& x) { return Vec{-2 * x[0], 0, 0}; }, {}, 10.0);
  const auto pts = box_samples(1, -5, 5, 101);
  try {
    check_drift_condition(bad, 1.0, 1.0, pts);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("psi must be nonnegative"), std::string::npos);
  }
}

TEST(DriftCondition, EmptyGridErrors) {
  EXPECT_THROW(check_drift_condition(Potential::quadratic(1, 1.0), 1.0, 1.0, {}), Error);
}

TEST(Curvature, QuadraticConstant) {
  EXPECT_DOUBLE_EQ(curvature_lower_bound(Potential::quadratic(1, 1.0), box_samples(1, -3, 3, 11)), 1.0);
  EXPECT_DOUBLE_EQ(curvature_lower_bound(Potential::quadratic(2, 0.5), box_samples(2, -3, 3, 11)), 0.5);
}

TEST(Curvature, DoubleWellMinimumAtOrigin) {
  // psi = (x^2-1)^2/4 has psi'' = 3x^2 - 1, minimum -1 at x = 0
  const double k = curvature_lower_bound(Potential::double_well(1, 1.0, 0.0, 1e3), box_samples(1, -2, 2, 401));
  EXPECT_NEAR(k, -1.0, 1e-12);
}

TEST(Curvature, FiniteDifferenceHessianForCustom) {
  const auto pot = Potential::custom(
      2, [](const Vec& x) { return x[0] * x[0] * x[0] * x[0] / 4 + x[1] * x[1]; },
      [](const Vec& x) { return Vec{x[0] * x[0] * x[0], 2 * x[1], 0}; }, {}, 100.0);
  const Mat h = pot.hessian(Vec{1.5, -0.3, 0});
  EXPECT_NEAR(h[0][0], 3 * 1.5 * 1.5, 1e-6);
  EXPECT_NEAR(h[1][1], 2.0, 1e-6);
  EXPECT_NEAR(h[0][1], 0.0, 1e-6);
}

TEST(Bump, ExactlyZeroOutsideSupport) {
  const auto b = Perturbation::bump(2, 0.7, 1.0, Vec{0.5, -0.5, 0}, 0.0);
  for (const Vec& x : box_samples(2, -3, 3, 61)) {
    if (norm(x - b.center()) < b.radius()) continue;
    EXPECT_EQ(b.potential(x), 0.0);
    const Vec f = b.field(x);
    EXPECT_EQ(f[0], 0.0);
    EXPECT_EQ(f[1], 0.0);
    EXPECT_EQ(b.divergence(x), 0.0);
  }
}

TEST(Bump, FieldIsGradientAndDivergenceMatchesDifferences) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(-0.85, 0.85);
  for (int d = 1; d <= 3; ++d) {
    const auto b = Perturbation::bump(d, 0.5, 1.3, Vec{0.2, 0.1, -0.1}, 0.0);
    const double h = 1e-4;
    for (int trial = 0; trial < 50; ++trial) {
      Vec x{};
      for (int a = 0; a < d; ++a) x[a] = b.center()[a] + 1.3 * u(gen) / std::sqrt(d);
      double div_fd = 0.0;
      const Vec f = b.field(x);
      for (int a = 0; a < d; ++a) {
        Vec xp = x, xm = x;
        xp[a] += h;
        xm[a] -= h;
        div_fd += (b.field(xp)[a] - b.field(xm)[a]) / (2 * h);
        const double grad_fd = (b.potential(xp) - b.potential(xm)) / (2 * h);
        EXPECT_NEAR(f[a], grad_fd, 1e-6 * std::max(1.0, std::abs(f[a])));
      }
      const double div = b.divergence(x);
      // relative to the divergence scale c / r^2 of the bump
      EXPECT_LT(std::abs(div - div_fd), 1e-6 * std::max(std::abs(div), 0.5 / (1.3 * 1.3))) << "d=" << d;
    }
  }
}

TEST(Bump, ActivationIsStrict) {
  const auto b = Perturbation::bump(1, 1.0, 1.0, Vec{}, 0.5);
  EXPECT_FALSE(b.active(0.5));
  EXPECT_TRUE(b.active(0.5000001));
}

TEST(LinearGrowth, QuadraticWithinDeclaredConstant) {
  EXPECT_TRUE(check_linear_growth(Potential::quadratic(1, 2.0), box_samples(1, -50, 50, 1001)).pass);
  EXPECT_FALSE(check_linear_growth(Potential::double_well(1, 1.0, 0.0, 5.0), box_samples(1, -6, 6, 101)).pass);
}

TEST(PerturbationBounds, BumpSupremum) {
  const auto b = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.0);
  const auto bd = perturbation_bounds(b, Potential::quadratic(1, 1.0));
  EXPECT_NEAR(bd.max_potential, 0.5 * std::exp(-1.0), 1e-12);
  EXPECT_GT(bd.max_field, 0.0);
}
