#include <gtest/gtest.h>

#include <cmath>

#include "entlab/dissipation.hpp"
#include "../support/oracles.hpp"

using namespace entlab;

namespace {

const Potential kOu = Potential::quadratic(1, 1.0);
const GridSpec kLine = GridSpec::line(-6, 6, 512);

EntropyReport tracked_run(const GridDensity& p0, double dt, double T = 1.0) {
  EntropyTracker tr(p0.grid, kOu, nullptr);
  FpeOptions fo;
  fo.record_every = 1 << 30;
  fo.observer = std::ref(tr);
  solve_fpe(p0, kOu, nullptr, dt, T, fo);
  return tr.take();
}

FpeSolution run(const GridDensity& p0, PerturbationRef pert, double T = 1.0) {
  FpeOptions fo;
  fo.record_every = 4;
  return solve_fpe(p0, kOu, pert, 2.5e-4, T, fo);
}

GridDensity stationary() {
  auto p = discretize(kLine, [](const Vec& x) { return std::exp(-x[0] * x[0]); });
  normalize(p);
  return p;
}

}  // namespace

TEST(DeBruijn, GaussianOracleIdentity) {
  // sigma_t^2 = 0.3 from sigma_0^2 = 0.25 at e^{-2t} = 0.8
  const double t = -0.5 * std::log(0.8);
  const double s2 = oracle::ou_var(0.25, t);
  ASSERT_NEAR(s2, 0.3, 1e-12);
  const double dH = (-0.5 / s2 + 1.0) * (-2.0 * (s2 - 0.5));
  EXPECT_NEAR(dH, -0.5 * oracle::gaussian_I(0.0, s2), 1e-12);

  const auto rep = tracked_run(gaussian_density(kLine, Vec{}, 0.25), 2.5e-4, 0.2);
  const auto i = static_cast<std::size_t>(std::llround(t / 2.5e-4));
  const double fd = (rep.H[i + 1] - rep.H[i - 1]) / (rep.times[i + 1] - rep.times[i - 1]);
  const double s2i = oracle::ou_var(0.25, rep.times[i]);
  EXPECT_LT(std::abs(fd - (-0.5 * oracle::gaussian_I(0.0, s2i))) / std::max(oracle::gaussian_I(0.0, s2i), 1.0), 0.02);
  EXPECT_LT(std::abs(rep.I[i] - oracle::gaussian_I(0.0, s2i)), 1e-3);
}

TEST(DeBruijn, TransientRunPasses) {
  const auto r = de_bruijn_check(tracked_run(gaussian_density(kLine, Vec{}, 0.25), 2.5e-4));
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.rel_gap, 0.02);
}

TEST(DeBruijn, StationaryStartIsFlat) {
  const auto rep = tracked_run(stationary(), 2.5e-4);
  const auto r = de_bruijn_check(rep);
  EXPECT_LT(*r.find("max_abs_gap"), 1e-4);
  EXPECT_LT(rep.I.back(), 1e-4);
}

TEST(DeBruijn, GapHalvesWithTimeStepAcrossSweep) {
  for (double s0 : {0.1, 0.25, 1.0}) {
    const auto p0 = gaussian_density(kLine, Vec{}, s0);
    const auto r = de_bruijn_refinement(tracked_run(p0, 2.5e-4), tracked_run(p0, 1.25e-4));
    EXPECT_TRUE(r.pass) << "s0=" << s0 << " ratio " << r.lhs;
  }
}

TEST(DeBruijn, TooFewSamples) {
  EntropyReport rep;
  rep.times = {0.0, 0.1};
  rep.H = {1.0, 0.9};
  rep.I = {1.0, 1.0};
  EXPECT_THROW(de_bruijn_check(rep), Error);
}

TEST(DisplacementIdentity, UnperturbedAndBump) {
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto free = run(p0, nullptr);
  const auto a = displacement_identity_check(free, kOu, nullptr, 0.0, 1.0);
  EXPECT_LT(a.rel_gap, 0.01);
  const auto pert = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.25);
  const auto bumped = run(p0, &pert);
  const auto b = displacement_identity_check(bumped, kOu, &pert, 0.25, 0.75);
  EXPECT_TRUE(b.pass) << b.rel_gap;
  EXPECT_NE(*b.find("perturbation_term"), 0.0);
}

TEST(DisplacementIdentity, ZeroWindowAndReversedWindow) {
  const auto pert = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.25);
  const auto sol = run(gaussian_density(kLine, Vec{}, 0.25), &pert, 0.5);
  const auto r = displacement_identity_check(sol, kOu, &pert, 0.3, 0.3);
  EXPECT_EQ(r.lhs, 0.0);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_THROW(displacement_identity_check(sol, kOu, &pert, 0.4, 0.3), Error);
}

TEST(PerturbedDerivative, ScoreTermMatchesIntegrationByParts) {
  const auto pert = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.0);
  const auto p = gaussian_density(kLine, Vec{}, 0.25);
  EXPECT_NEAR(perturbation_score_term(p, kOu, pert), -perturbation_rate(p, kOu, pert), 1e-4);
}

TEST(PerturbedDerivative, BumpAndUnperturbed) {
  const std::vector<double> deltas{0.1, 0.05, 0.025};
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto pert = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.0);
  const auto r = perturbed_derivative_check(run(p0, &pert, 0.1), kOu, &pert, 0.0, deltas);
  EXPECT_TRUE(r.pass) << r.rel_gap;
  EXPECT_GT(*r.find("perturbation_term"), 0.0);
  // beta = 0 reduces to the de Bruijn derivative at t0
  const auto u = perturbed_derivative_check(run(p0, nullptr, 0.1), kOu, nullptr, 0.0, deltas);
  EXPECT_TRUE(u.pass);
  EXPECT_NEAR(u.rhs, -0.5 * oracle::gaussian_I(0.0, 0.25), 1e-3);
}

TEST(PerturbedDerivative, FarAwayBumpHasNoEffect) {
  const std::vector<double> deltas{0.1, 0.05, 0.025};
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto far = Perturbation::bump(1, 0.5, 1.0, Vec{10.0, 0, 0}, 0.0);
  const auto free = run(p0, nullptr, 0.1);
  const auto r = perturbed_derivative_check(free, kOu, &far, 0.0, deltas);
  const auto u = perturbed_derivative_check(free, kOu, nullptr, 0.0, deltas);
  EXPECT_LT(std::abs(*r.find("perturbation_term")), 1e-8);
  EXPECT_NEAR(r.lhs, u.lhs, 1e-12);
}

TEST(PerturbedDerivative, OneWindowRejected) {
  const auto sol = run(gaussian_density(kLine, Vec{}, 0.25), nullptr, 0.1);
  const std::vector<double> one{0.05};
  EXPECT_THROW(perturbed_derivative_check(sol, kOu, nullptr, 0.0, one), Error);
}

TEST(Girsanov, NoPerturbationMeansUnitRatio) {
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto a = run(p0, nullptr, 0.5);
  const auto b = run(p0, nullptr, 0.5);
  const auto r = girsanov_ratio_checks(a, b, kOu, nullptr);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(*r.find("ratio_min"), 1.0);
  EXPECT_EQ(*r.find("ratio_max"), 1.0);
}

TEST(Girsanov, EnvelopeAndAmplitudeScaling) {
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto free = run(p0, nullptr);
  const auto bump = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.5);
  const auto twice = Perturbation::bump(1, 1.0, 1.0, Vec{}, 0.5);
  const auto r1 = girsanov_ratio_checks(run(p0, &bump), free, kOu, &bump);
  const auto r2 = girsanov_ratio_checks(run(p0, &twice), free, kOu, &twice);
  EXPECT_TRUE(r1.pass);
  EXPECT_TRUE(r2.pass);
  EXPECT_TRUE(std::isfinite(*r1.find("deviation_slope_bound")));
  EXPECT_GT(*r1.find("ratio_min"), 0.0);
  const double growth = r2.lhs / r1.lhs;
  EXPECT_GT(growth, 1.0);
  EXPECT_LT(growth, 2.2);
}

TEST(Girsanov, PathDensityBoundedWithUnitMean) {
  const auto bump = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.5);
  SimOptions so;
  so.record_paths = true;
  const auto fwd = simulate_forward(EnsembleState::gaussian(4000, 1, Vec{}, 0.25, 17), kOu, nullptr, 0.01, 1.0, so);
  const auto led = girsanov_ledger(*fwd.paths, bump, kOu);
  for (double z : led.max_abs_log_z) ASSERT_LE(z, led.constants.bound());
  std::vector<double> z(led.log_z.size());
  for (std::size_t p = 0; p < z.size(); ++p) z[p] = std::exp(led.log_z[p]);
  const auto ms = mean_stderr(z);
  EXPECT_LT(std::abs(ms.mean - 1.0), 4.0 * ms.stderr_);
}

TEST(Girsanov, GradientGapGrowsFasterThanLinear) {
  const auto p0 = gaussian_density(kLine, Vec{}, 0.25);
  const auto bump = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.5);
  const std::vector<double> windows{0.05, 0.1, 0.2};
  const double k = gradient_gap_exponent(run(p0, &bump), run(p0, nullptr), kOu, 0.5, windows);
  EXPECT_GT(k, 1.5);
}

TEST(ForwardDefect, StationaryTransientAndNegativeControl) {
  EXPECT_LT(std::abs(forward_defect_check(stationary(), kOu).lhs), 1e-4);
  const auto sol = run(gaussian_density(kLine, Vec{}, 0.25), nullptr, 0.3);
  const auto& p = sol.at(0.3);
  const auto r = forward_defect_check(p, kOu);
  EXPECT_TRUE(r.pass);
  const double I = *r.find("fisher");
  EXPECT_LT(std::abs(r.lhs), 1e-3 * I);
  DefectOptions o;
  o.drop_potential_term = true;
  const auto bad = forward_defect_check(p, kOu, o);
  EXPECT_FALSE(bad.pass);
  EXPECT_GE(std::abs(bad.lhs), 0.5 * I);
}

TEST(Consistency, GridAndMonteCarloAgree) {
  const auto sol = run(gaussian_density(kLine, Vec{}, 0.25), nullptr, 0.5);
  const auto& p = sol.at(0.5);
  const auto res = simulate_forward(EnsembleState::gaussian(100000, 1, Vec{}, 0.25, 23), kOu, nullptr, 1e-3, 0.5);
  const auto R = log_likelihood_field(p, kOu);
  const auto G = log_likelihood_gradient(p, kOu);
  std::vector<double> r, g;
  std::vector<double> gx(G.size());
  for (std::size_t k = 0; k < G.size(); ++k) gx[k] = G[k][0];
  for (double x : res.final_state.positions) {
    r.push_back(interpolate(kLine, R, Vec{x}));
    const double d = interpolate(kLine, gx, Vec{x});
    g.push_back(d * d);
  }
  const auto mr = mean_stderr(r);
  const auto mg = mean_stderr(g);
  const ReferenceMeasure m{kOu};
  EXPECT_LT(std::abs(mr.mean - relative_entropy(p, m)), 3.0 * mr.stderr_);
  EXPECT_LT(std::abs(mg.mean - fisher_information(p, m)), 3.0 * mg.stderr_);
}
