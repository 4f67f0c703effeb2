#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "entlab/fpe.hpp"
#include "../support/oracles.hpp"

using namespace entlab;

namespace {

GridDensity stationary_ou(const GridSpec& g) {
  return discretize(g, [](const Vec& x) { return std::exp(-x[0] * x[0]) / std::sqrt(std::numbers::pi); });
}

double l1_to_gaussian(const GridDensity& p, double m, double s2) {
  double acc = 0.0;
  for (std::size_t k = 0; k < p.values.size(); ++k)
    acc += std::abs(p.values[k] - oracle::normal_pdf(p.grid.center(k)[0], m, s2));
  return acc * p.grid.cell_volume();
}

}  // namespace

TEST(Fpe, StationaryDensityStaysPut) {
  const auto g = GridSpec::line(-6, 6, 512);
  const auto p0 = stationary_ou(g);
  const double h = g.spacing(0);
  const auto sol = solve_fpe(p0, Potential::quadratic(1, 1.0), nullptr, 0.9 * h * h / 2, 1.0 - std::fmod(1.0, 0.9 * h * h / 2));
  double worst = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, std::abs(sol.snapshots.back().values[k] - p0.values[k]));
  EXPECT_LT(worst, 1e-4);
}

TEST(Fpe, OrnsteinUhlenbeckVarianceRelaxation) {
  const auto g = GridSpec::line(-6, 6, 512);
  const auto p0 = gaussian_density(g, Vec{}, 0.25);
  const double dt = 1.0 / 4000;
  FpeOptions opts;
  opts.record_every = 2000;
  const auto sol = solve_fpe(p0, Potential::quadratic(1, 1.0), nullptr, dt, 1.0, opts);
  ASSERT_EQ(sol.snapshots.size(), 3u);
  for (const auto& s : sol.snapshots) EXPECT_LT(l1_to_gaussian(s, 0.0, oracle::ou_var(0.25, s.time)), 5e-3) << s.time;
}

TEST(Fpe, ZeroHorizonReturnsInitial) {
  const auto g = GridSpec::line(-6, 6, 64);
  const auto p0 = gaussian_density(g, Vec{}, 0.5);
  const auto sol = solve_fpe(p0, Potential::quadratic(1, 1.0), nullptr, 1e-3, 0.0);
  ASSERT_EQ(sol.snapshots.size(), 1u);
  EXPECT_EQ(sol.snapshots[0].values, p0.values);
}

TEST(Fpe, CflViolationNamesBound) {
  const auto g = GridSpec::line(-6, 6, 512);
  const auto p0 = gaussian_density(g, Vec{}, 0.5);
  try {
    solve_fpe(p0, Potential::quadratic(1, 1.0), nullptr, 1e-2, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("h^2/(2d)"), std::string::npos);
  }
}

TEST(Fpe, UnnormalizedInitialRejected) {
  const auto g = GridSpec::line(-6, 6, 64);
  auto p0 = gaussian_density(g, Vec{}, 0.5);
  p0.values[10] += 1.0;
  EXPECT_THROW(solve_fpe(p0, Potential::quadratic(1, 1.0), nullptr, 1e-3, 0.1), Error);
}

TEST(Fpe, MassAndPositivityWithPerturbation) {
  const auto g = GridSpec::line(-6, 6, 256);
  const auto pot = Potential::quadratic(1, 1.0);
  const auto pert = Perturbation::bump(1, 2.0, 1.0, Vec{0.3, 0, 0}, 0.05);
  const auto p0 = gaussian_density(g, Vec{1.0, 0, 0}, 0.2);
  const double dt = 5e-4;
  int steps = 0;
  double worst_drift = 0.0, min_val = 1.0;
  FpeOptions opts;
  opts.observer = [&](const GridDensity& p) {
    worst_drift = std::max(worst_drift, std::abs(p.mass() - 1.0));
    min_val = std::min(min_val, p.min_value());
    ++steps;
  };
  solve_fpe(p0, pot, &pert, dt, 0.5, opts);
  EXPECT_LT(worst_drift, 1e-12 * steps + 1e-14);
  EXPECT_GE(min_val, -1e-12);
}

TEST(Fpe, TwoDimensionalIsotropicRelaxation) {
  const auto g = GridSpec::square(-4, 4, 64);
  const auto p0 = gaussian_density(g, Vec{}, 0.25);
  const auto sol = solve_fpe(p0, Potential::quadratic(2, 1.0), nullptr, 1.0 / 400, 1.0);
  const auto& p = sol.snapshots.back();
  const double s2 = oracle::ou_var(0.25, 1.0);
  double l1 = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const Vec x = g.center(k);
    l1 += std::abs(p.values[k] - oracle::normal_pdf(x[0], 0, s2) * oracle::normal_pdf(x[1], 0, s2));
  }
  EXPECT_LT(l1 * g.cell_volume(), 5e-3);
}

TEST(StationaryResidual, SmallAndSecondOrder) {
  const ReferenceMeasure m{Potential::quadratic(1, 1.0)};
  const double r512 = stationary_residual(m, GridSpec::line(-6, 6, 512));
  const double r1024 = stationary_residual(m, GridSpec::line(-6, 6, 1024));
  EXPECT_LT(r512, 1e-3);
  EXPECT_NEAR(r512 / r1024, 4.0, 4.0 * 0.3);
}

TEST(StationaryResidual, NonStationaryGaussianDetected) {
  const auto g = GridSpec::line(-6, 6, 512);
  std::vector<double> u(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) u[k] = std::exp(-0.5 * g.center(k)[0] * g.center(k)[0]);
  EXPECT_GT(operator_residual(g, Potential::quadratic(1, 1.0), u), 0.1);
}

TEST(Score, GaussianIsLinear) {
  const auto g = GridSpec::line(-6, 6, 512);
  const auto p = gaussian_density(g, Vec{}, 0.5);
  const auto s = score_field(p);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double x = g.center(k)[0];
    if (std::abs(x) <= 3) {
      EXPECT_NEAR(s[k][0], -2 * x, 1e-2);
    }
  }
  EXPECT_NEAR(score_at(p, s, Vec{0.123, 0, 0})[0], -0.246, 1e-2);
  EXPECT_THROW(score_at(p, s, Vec{6.5, 0, 0}), Error);
}

TEST(Score, UniformInteriorIsZero) {
  const auto g = GridSpec::line(-6, 6, 128);
  const auto p = discretize(g, [](const Vec& x) { return std::abs(x[0]) < 2 ? 0.25 : 0.0; });
  const auto s = score_field(p);
  for (std::size_t k = 0; k < g.size(); ++k)
    if (std::abs(g.center(k)[0]) < 1.8) {
      EXPECT_EQ(s[k][0], 0.0);
    }
}

TEST(Score, BimodalSignChange) {
  const auto g = GridSpec::line(-6, 6, 1024);
  const auto p = discretize(g, [](const Vec& x) {
    return 0.5 * oracle::normal_pdf(x[0], -1, 0.04) + 0.5 * oracle::normal_pdf(x[0], 1, 0.04);
  });
  const auto s = score_field(p);
  // analytic mixture score is odd; positive just right of 0, negative just left
  EXPECT_GT(score_at(p, s, Vec{0.2, 0, 0})[0], 0.0);
  EXPECT_LT(score_at(p, s, Vec{-0.2, 0, 0})[0], 0.0);
  EXPECT_NEAR(score_at(p, s, Vec{0.0, 0, 0})[0], 0.0, 1e-9);
  // tanh form of the mixture score at x = 0.5: -(x - tanh(x/0.04))/0.04
  EXPECT_NEAR(score_at(p, s, Vec{0.5, 0, 0})[0], -(0.5 - std::tanh(0.5 / 0.04)) / 0.04, 0.05);
}
