#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "entlab/reversal.hpp"
#include "../support/oracles.hpp"

using namespace entlab;

namespace {

const Potential kOu = Potential::quadratic(1, 1.0);

FpeSolution ou_solution(const GridDensity& p0, double T = 1.0, PerturbationRef pert = nullptr) {
  FpeOptions fo;
  fo.record_every = 4;
  return solve_fpe(p0, kOu, pert, 2.5e-4, T, fo);
}

GridDensity stationary(const GridSpec& g) {
  auto p = discretize(g, [](const Vec& x) { return std::exp(-x[0] * x[0]); });
  normalize(p);
  return p;
}

const GridSpec kLine = GridSpec::line(-6, 6, 512);

// Backward samples started at reversed time `start` from the matching FPE snapshot.
EnsembleState reversed_start(const FpeSolution& sol, double start, std::size_t n, std::uint64_t seed) {
  const double s = sol.horizon() - start;
  const auto idx = static_cast<std::size_t>(std::llround(s / sol.interval()));
  return EnsembleState::from_points(1, sample_grid_density(sol.snapshots.at(idx), n, seed), seed, start);
}

BackwardOptions window(double start, double stop = -1.0, bool record = false) {
  BackwardOptions o;
  o.start = start;
  o.stop = stop;
  o.record_paths = record;
  return o;
}

}  // namespace

TEST(ScoreTable, MatchesGaussianScore) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  for (double s : {0.0, 0.31, 0.5, 1.0}) {
    const double var = oracle::ou_var(0.25, s);
    for (double x : {-1.3, 0.2, 0.9}) EXPECT_NEAR(table.score(Vec{x}, s)[0], -x / var, 5e-3) << "s=" << s << " x=" << x;
  }
}

TEST(ScoreTable, StationaryGradientVanishes) {
  const auto sol = ou_solution(stationary(kLine));
  const ScoreTable table(sol, kOu);
  for (double x : {-2.0, -0.4, 0.0, 1.7}) EXPECT_LT(std::abs(table.eval(Vec{x}, 0.7).gradR[0]), 1e-4);
}

TEST(ScoreTable, MissingSnapshotRejected) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25), 0.5);
  const ScoreTable table(sol, kOu);
  EXPECT_THROW(table.eval(Vec{0.0}, 0.75), Error);
}

TEST(Backward, OneStepMeanUpdate) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const double x = 0.7, dt = 0.01;
  const auto res = simulate_backward(EnsembleState::from_points(1, {x}, 13), table, nullptr, dt, window(0.0, dt));
  double xi[1];
  gaussian_block(13, Stream::backward_noise, 0, 0, 1, xi);
  const double mean_step = res.final_state.positions[0] - std::sqrt(dt) * xi[0];
  const double exact = x + (-x / oracle::ou_var(0.25, 1.0) + x) * dt;
  EXPECT_NEAR(mean_step, exact, 1e-5);
}

TEST(Backward, BeyondHorizonRejected) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto s = EnsembleState::from_points(1, {0.0}, 1);
  EXPECT_THROW(simulate_backward(s, table, nullptr, 0.01, window(0.0, 1.5)), Error);
  EXPECT_THROW(simulate_backward(s, table, nullptr, 0.01, window(-0.1)), Error);
}

TEST(Backward, RecoversInitialVariance) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto res = simulate_backward(reversed_start(sol, 0.0, 40000, 5), table, nullptr, 2e-3);
  const auto ms = mean_stderr(res.final_state.positions);
  EXPECT_NEAR(ms.variance, 0.25, 0.25 * 4.0 * std::sqrt(2.0 / 40000));
  EXPECT_LT(std::abs(ms.mean), 4.0 * ms.stderr_);
}

TEST(Reconstruction, StationaryTransientAndDoubleWellPass) {
  {
    const auto sol = ou_solution(stationary(kLine));
    const ScoreTable table(sol, kOu);
    const auto init = EnsembleState::from_points(1, sample_grid_density(sol.snapshots.front(), 20000, 3), 3);
    EXPECT_TRUE(reconstruction_check(init, kOu, nullptr, 2e-3, 1.0, table).pass);
  }
  {
    const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
    const ScoreTable table(sol, kOu);
    const auto init = EnsembleState::gaussian(20000, 1, Vec{}, 0.25, 4);
    EXPECT_TRUE(reconstruction_check(init, kOu, nullptr, 2e-3, 1.0, table).pass);
  }
  {
    const auto dw = Potential::double_well(1, 1.0, 0.0, 4.0);
    const auto g = GridSpec::line(-4, 4, 400);
    FpeOptions fo;
    fo.record_every = 10;
    auto p0 = gaussian_density(g, Vec{}, 0.5);
    normalize(p0);
    const auto sol = solve_fpe(p0, dw, nullptr, 1e-4, 1.0, fo);
    const ScoreTable table(sol, dw);
    const auto init = EnsembleState::gaussian(20000, 1, Vec{}, 0.5, 5);
    EXPECT_TRUE(reconstruction_check(init, dw, nullptr, 2e-3, 1.0, table).pass);
  }
}

TEST(Reconstruction, DroppingScoreBreaksTerminalIndependence) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto init = EnsembleState::gaussian(20000, 1, Vec{}, 0.25, 4);
  const auto r = reconstruction_check(init, kOu, nullptr, 2e-3, 1.0, table, {.score_correction = false});
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(*r.find("variance_pass"), 1.0);
  EXPECT_EQ(*r.find("terminal_corr_pass"), 0.0);
}

TEST(Reconstruction, BundleAndStreamingAgree) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto init = EnsembleState::gaussian(500, 1, Vec{}, 0.25, 9);
  SimOptions so;
  so.record_paths = true;
  const auto fwd = simulate_forward(init, kOu, nullptr, 0.02, 1.0, so);
  const auto rec = reconstruct_backward_brownian(*fwd.paths, table);
  ASSERT_EQ(rec.increments.size(), 500u * 50u);
  const auto streamed = reconstruction_check(init, kOu, nullptr, 0.02, 1.0, table);
  EXPECT_EQ(rec.report.metrics, streamed.metrics);
  // last reversed increment comes from the first forward step
  const double x1 = fwd.paths->state(0, 1)[0];
  EXPECT_DOUBLE_EQ(rec.increments[49], -fwd.paths->increment(0, 0)[0] - table.score(Vec{x1}, 0.02)[0] * 0.02);
}

TEST(Reconstruction, InsufficientSampleAndMissingNoise) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  try {
    reconstruction_check(EnsembleState::from_points(1, {0.1}, 1), kOu, nullptr, 0.01, 1.0, table);
    FAIL() << "expected insufficient sample";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "insufficient sample");
  }
  SimOptions so;
  so.record_paths = true;
  auto fwd = simulate_forward(EnsembleState::gaussian(10, 1, Vec{}, 0.25, 1), kOu, nullptr, 0.1, 1.0, so);
  fwd.paths->noise.clear();
  EXPECT_THROW(reconstruct_backward_brownian(*fwd.paths, table), Error);
}

TEST(ItoSums, ConstantIntegrandTelescopes) {
  const std::vector<double> x{0.3, -0.1, 0.8, 0.25};
  const std::vector<double> one(4, 1.0);
  EXPECT_EQ(backward_ito_sum(one, x), ((-0.1 - 0.3) + (0.8 - -0.1)) + (0.25 - 0.8));
  EXPECT_NEAR(backward_ito_sum(one, x), 0.25 - 0.3, 1e-15);
}

TEST(ItoSums, BackwardMinusForwardIsQuadraticVariation) {
  const std::size_t n = 100000, steps = 100;
  const double dt = 1.0 / steps;
  std::vector<double> diff(n), path(steps + 1);
  double xi[1];
  for (std::size_t p = 0; p < n; ++p) {
    path[0] = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
      gaussian_block(77, Stream::forward_noise, p, static_cast<std::uint32_t>(k), 1, xi);
      path[k + 1] = path[k] + std::sqrt(dt) * xi[0];
    }
    const double b = backward_ito_sum(path, path), f = forward_ito_sum(path, path);
    // 1/2 X_T^2 brackets the two sums symmetrically
    EXPECT_NEAR(b + f, path.back() * path.back(), 1e-9);
    diff[p] = b - f;
  }
  const auto ms = mean_stderr(diff);
  EXPECT_LT(std::abs(ms.mean - 1.0), 3.0 * ms.stderr_);
}

TEST(ItoSums, BadInputsRejected) {
  const std::vector<double> empty, two{1.0, 2.0}, three{1.0, 2.0, 3.0};
  EXPECT_THROW(backward_ito_sum(empty, empty), Error);
  EXPECT_THROW(backward_ito_sum(two, three), Error);
}

TEST(Ledger, BookkeepingIsExact) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto bwd = simulate_backward(reversed_start(sol, 0.0, 300, 2), table, nullptr, 0.01, window(0.0, -1.0, true));
  const auto led = decompose_entropy_process(*bwd.paths, table, nullptr, {0.0, 0.5, 1.0});
  ASSERT_EQ(led.residual.size(), 300u * 100u);
  for (std::size_t i = 0; i < led.residual.size(); ++i) ASSERT_EQ(led.residual[i], led.dR[i] - led.dM[i] - led.dF[i]);
  const auto& end = led.at(1.0);
  const auto& begin = led.at(0.0);
  for (std::size_t p = 0; p < led.paths; ++p)
    EXPECT_NEAR(end.R[p] - begin.R[p], end.M[p] + end.F[p] + end.residual[p], 1e-12);
}

TEST(Ledger, StationaryLedgerVanishes) {
  const auto sol = ou_solution(stationary(kLine));
  const ScoreTable table(sol, kOu);
  const auto bwd = simulate_backward(reversed_start(sol, 0.0, 500, 2), table, nullptr, 0.01, window(0.0, -1.0, true));
  const auto led = decompose_entropy_process(*bwd.paths, table, nullptr, {0.0, 1.0});
  for (std::size_t i = 0; i < led.dR.size(); ++i) {
    ASSERT_LT(std::abs(led.dR[i]), 1e-5);
    ASSERT_LT(std::abs(led.dM[i]), 1e-5);
    ASSERT_LT(std::abs(led.dF[i]), 1e-9);
  }
}

TEST(Ledger, MeanResidualIsSmall) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const double dt = 1e-3;
  const auto led = backward_ledger(reversed_start(sol, 0.0, 20000, 6), table, nullptr, dt, {}, {0.0, 1.0});
  double res = 0.0, fisher = 0.0;
  for (const auto& st : led.steps) {
    res += st.residual;
    fisher += 2.0 * st.dF / dt;
  }
  res /= static_cast<double>(led.steps.size());
  fisher /= static_cast<double>(led.steps.size());
  EXPECT_LT(std::abs(res), 5e-3 * dt * fisher);
}

TEST(Ledger, PerturbationTermOnlyInsideSupport) {
  const auto pert = Perturbation::bump(1, 0.5, 1.0, Vec{}, 0.0);
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.5), 1.0, &pert);
  const ScoreTable table(sol, kOu);
  const auto bwd = simulate_backward(reversed_start(sol, 0.0, 200, 8), table, &pert, 0.02, window(0.0, -1.0, true));
  const PathBundle& b = *bwd.paths;
  const auto led = decompose_entropy_process(b, table, &pert, {0.0});
  std::size_t inside = 0, outside = 0;
  for (std::size_t p = 0; p < b.paths; ++p)
    for (std::size_t k = 0; k < b.steps; ++k) {
      const Vec x = b.state(p, k);
      const Vec g = table.eval(x, 1.0 - b.time(k)).gradR;
      const double extra = led.dF[p * b.steps + k] - 0.5 * norm2(g) * b.dt;
      if (std::abs(x[0]) < 1.0) {
        ++inside;
        EXPECT_NEAR(extra, perturbation_drift_term(pert, kOu, x) * b.dt, 1e-15);
      } else {
        ++outside;
        EXPECT_NEAR(extra, 0.0, 1e-15);
      }
    }
  EXPECT_GT(inside, 100u);
  EXPECT_GT(outside, 100u);
}

TEST(Martingale, PassesAndNegativeControlFails) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{1.0, 0, 0}, 0.25));
  const ScoreTable table(sol, kOu);
  std::vector<double> cps;
  for (int k = 0; k <= 10; ++k) cps.push_back(0.1 * k);
  const auto led = backward_ledger(reversed_start(sol, 0.0, 20000, 12), table, nullptr, 1e-2, {}, cps);
  const auto good = martingale_test(led);
  EXPECT_TRUE(good.pass) << "z=" << *good.find("max_coefficient_z") << " iso=" << *good.find("isometry_rel_gap");
  const auto bad = martingale_test(led, {.substitute_entropy_increments = true});
  EXPECT_FALSE(bad.pass);
  EXPECT_EQ(*bad.find("orthogonality_pass"), 0.0);
}

TEST(Martingale, StationaryIsTrivial) {
  const auto sol = ou_solution(stationary(kLine));
  const ScoreTable table(sol, kOu);
  const auto led = backward_ledger(reversed_start(sol, 0.0, 10000, 1), table, nullptr, 0.05, {}, {0.0, 0.5, 1.0});
  const auto r = martingale_test(led);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.lhs, 1e-10);
}

TEST(Martingale, InsufficientSample) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto led = backward_ledger(reversed_start(sol, 0.0, 10, 1), table, nullptr, 0.1, {}, {0.0, 1.0});
  try {
    martingale_test(led);
    FAIL() << "expected insufficient sample";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient sample"), std::string::npos);
  }
}

TEST(Displacement, TransientBinsAgree) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto led = backward_ledger(reversed_start(sol, 0.5, 40000, 21), table, nullptr, 2e-3, window(0.5), {0.5, 1.0});
  const auto r = trajectorial_displacement_check(led, 0.5, 0.0);
  EXPECT_TRUE(r.pass) << r.rel_gap;
  EXPECT_GT(*r.find("bins_used"), 40.0);
}

TEST(Displacement, StationaryBothSidesVanish) {
  const auto sol = ou_solution(stationary(kLine));
  const ScoreTable table(sol, kOu);
  const auto led = backward_ledger(reversed_start(sol, 0.5, 5000, 2), table, nullptr, 0.01, window(0.5), {0.5, 1.0});
  const auto r = trajectorial_displacement_check(led, 0.5, 0.0);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(std::abs(r.lhs), 1e-6);
  EXPECT_LT(std::abs(r.rhs), 1e-9);
}

TEST(Displacement, EmptyWindowRejected) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25));
  const ScoreTable table(sol, kOu);
  const auto led = backward_ledger(reversed_start(sol, 0.5, 100, 2), table, nullptr, 0.05, window(0.5), {0.5, 1.0});
  try {
    trajectorial_displacement_check(led, 0.8, 0.2);
    FAIL() << "expected empty window";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty reversed window");
  }
}

TEST(Rate, GapsShrinkTowardTarget) {
  const auto sol = ou_solution(gaussian_density(kLine, Vec{1.0, 0, 0}, 0.5));
  const ScoreTable table(sol, kOu);
  const std::vector<double> deltas{0.2, 0.1, 0.05, 0.025};
  std::vector<double> cps{1.0};
  for (double d : deltas) cps.push_back(1.0 - d);
  const auto led = backward_ledger(reversed_start(sol, 0.75, 50000, 31), table, nullptr, 1e-3, window(0.75), cps);
  const auto r = trajectorial_rate_check(led, 0.0, deltas, kOu, nullptr);
  EXPECT_TRUE(r.pass) << "final gap " << r.lhs << " allowed " << r.tolerance;
  EXPECT_NEAR(*r.find("half_fisher_at_t0"), 2.0, 0.02);
}

TEST(Rate, StationaryGapsAtNoiseFloor) {
  const auto sol = ou_solution(stationary(kLine));
  const ScoreTable table(sol, kOu);
  const std::vector<double> deltas{0.2, 0.1, 0.05};
  const auto led = backward_ledger(reversed_start(sol, 0.75, 5000, 3), table, nullptr, 5e-3, window(0.75),
                                   {0.8, 0.9, 0.95, 1.0});
  const auto r = trajectorial_rate_check(led, 0.0, deltas, kOu, nullptr);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.lhs, 1e-6);
}

TEST(Rate, PerturbedTargetIncludesDriftTerm) {
  const auto pert = Perturbation::bump(1, 0.5, 2.0, Vec{}, 0.5);
  const auto sol = ou_solution(gaussian_density(kLine, Vec{}, 0.25), 1.0, &pert);
  const ScoreTable table(sol, kOu);
  const std::vector<double> deltas{0.2, 0.1, 0.05, 0.025};
  const auto led = backward_ledger(reversed_start(sol, 0.25, 50000, 41), table, &pert, 1e-3, window(0.25),
                                   {0.3, 0.4, 0.45, 0.475, 0.5});
  const auto with = trajectorial_rate_check(led, 0.5, deltas, kOu, &pert);
  const auto without = trajectorial_rate_check(led, 0.5, deltas, kOu, nullptr);
  EXPECT_TRUE(with.pass) << "final gap " << with.lhs << " allowed " << with.tolerance;
  EXPECT_GT(without.lhs, 3.0 * with.lhs);
}
