#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "entlab/entropy.hpp"
#include "entlab/rng.hpp"
#include "../support/oracles.hpp"

using namespace entlab;

namespace {

const ReferenceMeasure kOu{Potential::quadratic(1, 1.0)};

GridSpec default_grid() { return GridSpec::line(-6, 6, 512); }

std::vector<double> gaussian_samples(std::size_t n, double m, double s2, std::uint64_t seed) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z;
    gaussian_block(seed, Stream::initial, i, 0, 1, &z);
    out[i] = m + std::sqrt(s2) * z;
  }
  return out;
}

}  // namespace

TEST(RelativeEntropy, ClosedForms) {
  const auto g = default_grid();
  EXPECT_NEAR(relative_entropy(gaussian_density(g, Vec{}, 0.5), kOu), -std::log(std::sqrt(std::numbers::pi)), 1e-6);
  EXPECT_NEAR(relative_entropy(gaussian_density(g, Vec{1, 0, 0}, 0.5), kOu), 1 - 0.5 * std::log(std::numbers::pi), 1e-6);
  EXPECT_NEAR(relative_entropy(gaussian_density(g, Vec{}, 0.25), kOu), -0.5 * std::log(2 * std::numbers::pi * 0.25) - 0.25,
              1e-6);
}

TEST(FisherInformation, ClosedForms) {
  const auto g = default_grid();
  EXPECT_LT(fisher_information(gaussian_density(g, Vec{}, 0.5), kOu), 1e-4);
  EXPECT_NEAR(fisher_information(gaussian_density(g, Vec{}, 0.25), kOu), 1.0, 1e-3);
  EXPECT_NEAR(fisher_information(gaussian_density(g, Vec{1, 0, 0}, 0.5), kOu), 4.0, 4e-3);
}

TEST(FisherInformation, ZeroIffFlatLikelihood) {
  const auto g = default_grid();
  for (double s2 : {0.5, 0.499, 0.45, 0.3}) {
    const auto p = gaussian_density(g, Vec{}, s2);
    const double I = fisher_information(p, kOu);
    std::vector<Vec> pts;
    for (double x = -2; x <= 2; x += 0.1) pts.push_back(Vec{x, 0, 0});
    const auto l = likelihood_ratio(p, kOu, pts);
    double mean = 0, dev = 0;
    for (double v : l) mean += v / l.size();
    for (double v : l) dev = std::max(dev, std::abs(v - mean) / mean);
    EXPECT_EQ(I < 1e-4, dev < 1e-2) << s2;
  }
}

TEST(LikelihoodRatio, StationaryIsConstant) {
  const auto g = default_grid();
  const auto p = gaussian_density(g, Vec{}, 0.5);
  std::vector<Vec> pts;
  for (double x = -5.9; x <= 5.9; x += 0.37) pts.push_back(Vec{x, 0, 0});
  for (double l : likelihood_ratio(p, kOu, pts)) {
    EXPECT_NEAR(l, 1 / std::sqrt(std::numbers::pi), 1e-3);
    EXPECT_NEAR(std::log(l), -0.5 * std::log(std::numbers::pi), 2e-3);
  }
  const std::vector<Vec> off{{6.5, 0, 0}};
  EXPECT_THROW(likelihood_ratio(p, kOu, off), Error);
}

TEST(FreeEnergy, HalfRelativeEntropyAndMinimizer) {
  const auto g = default_grid();
  const double fmin = free_energy(gaussian_density(g, Vec{}, 0.5), kOu.potential);
  EXPECT_NEAR(fmin, -0.5 * std::log(std::sqrt(std::numbers::pi)), 1e-6);
  const auto p = gaussian_density(g, Vec{}, 0.25);
  EXPECT_NEAR(free_energy(p, kOu.potential), 0.5 * relative_entropy(p, kOu), 1e-12);
  EXPECT_GT(free_energy(p, kOu.potential), fmin);
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> um(-1.5, 1.5), us(0.1, 1.5);
  for (int i = 0; i < 50; ++i) {
    const auto q = gaussian_density(g, Vec{um(gen), 0, 0}, us(gen));
    EXPECT_GE(free_energy(q, kOu.potential) - fmin, -1e-9);
  }
}

TEST(GaussianOracle, SweepOnGrid) {
  // wide box so that the (m, s2) = (2, 2) tails are not truncated; spacing matches 512 cells on [-6, 6]
  const auto g = GridSpec::line(-12, 12, 1024);
  for (double m : {-2.0, -1.0, 0.0, 0.5, 1.0, 2.0})
    for (double s2 : {0.1, 0.25, 0.5, 1.0, 1.5, 2.0}) {
      const auto p = gaussian_density(g, Vec{m, 0, 0}, s2);
      const double H = relative_entropy(p, kOu), I = fisher_information(p, kOu);
      const double Ho = oracle::gaussian_H(m * m, s2), Io = oracle::gaussian_I(m, s2);
      EXPECT_LT(std::abs(H - Ho) / std::max(std::abs(Ho), 1.0), 1e-3) << m << " " << s2;
      EXPECT_LT(std::abs(I - Io) / std::max(std::abs(Io), 1.0), 1e-3) << m << " " << s2;
    }
}

TEST(SampleEstimators, GaussianOracles) {
  const auto a = gaussian_samples(100000, 0.0, 0.5, 3);
  EXPECT_NEAR(sample_entropy_estimators(a, 1, kOu).H, -0.5 * std::log(std::numbers::pi), 0.02);
  const auto b = gaussian_samples(100000, 1.0, 0.5, 4);
  const auto eb = sample_entropy_estimators(b, 1, kOu);
  EXPECT_NEAR(eb.H, 1 - 0.5 * std::log(std::numbers::pi), 0.03);
  EXPECT_NEAR(eb.I, 4.0, 0.4);
}

TEST(SampleEstimators, TwoDimensional) {
  const ReferenceMeasure m2{Potential::quadratic(2, 1.0)};
  std::vector<double> pts(2 * 20000);
  for (std::size_t i = 0; i < 20000; ++i) gaussian_block(9, Stream::initial, i, 0, 2, &pts[2 * i]);
  for (double& v : pts) v *= std::sqrt(0.5);
  EXPECT_NEAR(sample_entropy_estimators(pts, 2, m2).H, oracle::gaussian_H(0, 0.5, 1, 2), 0.05);
}

TEST(SampleEstimators, DegenerateInputs) {
  std::vector<double> one{0.5};
  EXPECT_THROW(sample_entropy_estimators(one, 1, kOu), Error);
  std::vector<double> dup(2000, 0.25);
  for (std::size_t i = 0; i < 1000; ++i) dup[i] = -1.0 + 0.002 * i;
  const auto e = sample_entropy_estimators(dup, 1, kOu);
  EXPECT_TRUE(std::isfinite(e.H));
}

TEST(EntropyTracker, MonotoneAlongUnperturbedRun) {
  const auto g = default_grid();
  const auto p0 = gaussian_density(g, Vec{1, 0, 0}, 0.25);
  EntropyTracker tr(g, kOu.potential, nullptr);
  FpeOptions opts;
  opts.observer = std::ref(tr);
  solve_fpe(p0, kOu.potential, nullptr, 2.5e-4, 1.0, opts);
  const auto& r = tr.report();
  for (std::size_t k = 1; k < r.size(); ++k) {
    EXPECT_LE(r.H[k], r.H[k - 1] + 1e-3);
    EXPECT_GE(r.I[k], 0.0);
  }
}
