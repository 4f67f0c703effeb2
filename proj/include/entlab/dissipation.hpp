#ifndef ENTLAB_DISSIPATION_HPP
#define ENTLAB_DISSIPATION_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/entropy.hpp"
#include "entlab/fpe.hpp"
#include "entlab/grid.hpp"
#include "entlab/model.hpp"
#include "entlab/simulate.hpp"

namespace entlab {

namespace detail {

inline void require_uniform(std::span<const double> t) {
  const double step = t[1] - t[0];
  require(step > 0.0, "time samples must increase");
  for (std::size_t i = 1; i + 1 < t.size(); ++i)
    if (std::abs((t[i + 1] - t[i]) - step) > 1e-9 * std::max(1.0, std::abs(t[i])))
      fail(ErrorKind::precondition, "time samples must be uniformly spaced");
}

inline double rel_to(double gap, double scale) { return scale > 0.0 ? gap / scale : (gap == 0.0 ? 0.0 : gap); }

}  // namespace detail

// Value at 0 of the least-squares polynomial of degree min(n - 1, 2) through (x, y).
inline double extrapolate_to_zero(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "extrapolation needs at least two points");
  const int deg = std::min<int>(static_cast<int>(x.size()) - 1, 2);
  Eigen::MatrixXd A(x.size(), deg + 1);
  Eigen::VectorXd b(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = 1.0;
    for (int k = 0; k <= deg; ++k, v *= x[i]) A(i, k) = v;
    b(i) = y[i];
  }
  return A.colPivHouseholderQr().solve(b)(0);
}

struct DeBruijnOptions {
  double t_min = 0.1;
  double t_max = std::numeric_limits<double>::infinity();
  double tolerance = 0.02;
};

// Centred difference of H against -I/2 at interior samples; gaps are scaled by max(I, 1).
inline CheckReport de_bruijn_check(const EntropyReport& rep, const DeBruijnOptions& opts = {}) {
  if (rep.size() < 3) fail(ErrorKind::precondition, "de Bruijn check needs at least three time samples");
  detail::require_uniform(rep.times);
  CheckReport r;
  r.name = "de_bruijn";
  r.anchor = "classical entropy dissipation identity";
  r.tolerance = opts.tolerance;
  double worst = -1.0, worst_abs = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 1; i + 1 < rep.size(); ++i) {
    const double t = rep.times[i];
    if (t < opts.t_min - 1e-12 || t > opts.t_max + 1e-12) continue;
    const double dH = (rep.H[i + 1] - rep.H[i - 1]) / (rep.times[i + 1] - rep.times[i - 1]);
    const double rhs = -0.5 * rep.I[i];
    const double gap = std::abs(dH - rhs);
    const double rel = gap / std::max(rep.I[i], 1.0);
    worst_abs = std::max(worst_abs, gap);
    if (rel > worst) {
      worst = rel;
      r.lhs = dH;
      r.rhs = rhs;
      r.metric("worst_time", t);
    }
    ++used;
  }
  require(used > 0, "no interior time samples in the requested range");
  r.abs_gap = std::abs(r.lhs - r.rhs);
  r.rel_gap = worst;
  r.pass = worst < opts.tolerance;
  r.metric("max_abs_gap", worst_abs);
  r.metric("samples", static_cast<double>(used));
  return r;
}

// Coarse/fine comparison of a gap; passes when the fine gap is smaller by `min_ratio`.
inline CheckReport refinement_report(const std::string& name, const std::string& anchor, double coarse_gap,
                                     double fine_gap, double min_ratio) {
  CheckReport r;
  r.name = name;
  r.anchor = anchor;
  r.lhs = fine_gap > 0.0 ? coarse_gap / fine_gap : std::numeric_limits<double>::infinity();
  r.rhs = 2.0;
  set_gap(r);
  r.tolerance = min_ratio;
  r.refinement_slope = std::log2(r.lhs);
  r.pass = r.lhs >= min_ratio;
  r.metric("coarse_gap", coarse_gap);
  r.metric("fine_gap", fine_gap);
  return r;
}

inline CheckReport de_bruijn_refinement(const EntropyReport& coarse, const EntropyReport& fine,
                                        const DeBruijnOptions& opts = {}, double min_ratio = 1.8) {
  const CheckReport c = de_bruijn_check(coarse, opts);
  const CheckReport f = de_bruijn_check(fine, opts);
  return refinement_report("de_bruijn_refinement", c.anchor, *c.find("max_abs_gap"), *f.find("max_abs_gap"), min_ratio);
}

// Per-snapshot quantities for the entropy balance: H, I and E[div beta - 2 beta.grad psi]
// with the perturbation forced on.
struct BalanceSeries {
  std::vector<double> times, H, I, rate;
};

inline BalanceSeries balance_series(const FpeSolution& sol, const Potential& pot, PerturbationRef pert) {
  require(!sol.snapshots.empty(), "FPE solution has no snapshots");
  const ReferenceMeasure m{pot};
  const FisherStencil fisher(sol.snapshots.front().grid, pot);
  BalanceSeries b;
  for (const auto& s : sol.snapshots) {
    b.times.push_back(s.time);
    b.H.push_back(relative_entropy(s, m));
    b.I.push_back(fisher(s.values));
    b.rate.push_back(pert != nullptr ? perturbation_rate(s, pot, *pert) : 0.0);
  }
  return b;
}

struct DisplacementIdentityOptions {
  double tolerance = 0.02;
  double scale_floor = 1e-3;
};

// H(t) - H(t0) against the trapezoid integral of -I/2 + E[div beta - 2 beta.grad psi] 1{on}
// over the snapshots in [t0, t]. The perturbation flag is taken at each interval's midpoint.
inline CheckReport displacement_identity_check(const FpeSolution& sol, const Potential& pot, PerturbationRef pert,
                                               double t0, double t, const DisplacementIdentityOptions& opts = {}) {
  if (t < t0) fail(ErrorKind::precondition, "displacement window must satisfy t >= t0");
  const GridDensity& a = sol.at(t0);
  const GridDensity& b = sol.at(t);
  const BalanceSeries bs = balance_series(sol, pot, pert);
  const std::size_t i0 = static_cast<std::size_t>(&a - sol.snapshots.data());
  const std::size_t i1 = static_cast<std::size_t>(&b - sol.snapshots.data());
  double fisher_part = 0.0, pert_part = 0.0;
  for (std::size_t i = i0; i < i1; ++i) {
    const double h = bs.times[i + 1] - bs.times[i];
    fisher_part += -0.25 * h * (bs.I[i] + bs.I[i + 1]);
    if (pert != nullptr && pert->active(0.5 * (bs.times[i] + bs.times[i + 1])))
      pert_part += 0.5 * h * (bs.rate[i] + bs.rate[i + 1]);
  }
  CheckReport r;
  r.name = "displacement_identity";
  r.anchor = "time-displacement of the relative entropy";
  r.lhs = bs.H[i1] - bs.H[i0];
  r.rhs = fisher_part + pert_part;
  set_gap(r, opts.scale_floor);
  r.tolerance = opts.tolerance;
  r.pass = r.rel_gap < opts.tolerance;
  r.metric("fisher_term", fisher_part);
  r.metric("perturbation_term", pert_part);
  r.metric("snapshots", static_cast<double>(i1 - i0 + 1));
  return r;
}

// E[beta . grad R] by grid quadrature, R from finite differences of log p + 2 psi.
inline double perturbation_score_term(const GridDensity& p, const Potential& pot, const Perturbation& pert) {
  const std::vector<Vec> g = log_likelihood_gradient(p, pot);
  return grid_expectation(p, [&](std::size_t k) { return dot(pert.field(p.grid.center(k)), g[k]); });
}

struct DerivativeOptions {
  double tolerance = 0.03;
  double scale_floor = 1e-3;
};

// One-sided quotients (H(t0 + d) - H(t0)) / d on a perturbed run, extrapolated
// to d = 0, against -I(t0)/2 - E[beta . grad R(t0)].
inline CheckReport perturbed_derivative_check(const FpeSolution& sol, const Potential& pot, PerturbationRef pert,
                                              double t0, std::span<const double> deltas,
                                              const DerivativeOptions& opts = {}) {
  if (deltas.size() < 2) fail(ErrorKind::precondition, "insufficient windows: need at least two");
  const ReferenceMeasure m{pot};
  const GridDensity& p0 = sol.at(t0);
  const double H0 = relative_entropy(p0, m);
  const double I0 = fisher_information(p0, m);
  const double pterm = pert != nullptr ? perturbation_score_term(p0, pot, *pert) : 0.0;
  std::vector<double> ds, qs;
  CheckReport r;
  for (double d : deltas) {
    require(d > 0.0, "window widths must be positive");
    const double q = (relative_entropy(sol.at(t0 + d), m) - H0) / d;
    ds.push_back(d);
    qs.push_back(q);
    r.metric("quotient_delta_" + std::to_string(d), q);
  }
  const double intercept = extrapolate_to_zero(ds, qs);
  r.name = "perturbed_derivative";
  r.anchor = "perturbed entropy derivative at the activation time";
  r.lhs = intercept;
  r.rhs = -0.5 * I0 - pterm;
  set_gap(r, opts.scale_floor);
  r.tolerance = opts.tolerance;
  r.refinement_slope = fit_line(ds, qs).second;
  r.pass = r.rel_gap < opts.tolerance;
  r.metric("fisher_at_t0", I0);
  r.metric("perturbation_term", pterm);
  return r;
}

// Constants bounding |log Z| on [t0, T]:
//   C' = (T - t0) sup|beta|^2 / 2,  C'' = 2 sup|B| + (T - t0) sup|2 beta.grad psi - div beta| / 2.
struct GirsanovConstants {
  double c_prime = 0.0;
  double c_second = 0.0;
  double bound() const { return c_prime + c_second; }
};

inline GirsanovConstants girsanov_constants(const Perturbation& pert, const Potential& pot, double horizon) {
  const PerturbationBounds pb = perturbation_bounds(pert, pot);
  const double w = std::max(0.0, horizon - pert.activation_time());
  return {0.5 * w * pb.max_field * pb.max_field, 2.0 * pb.max_potential + 0.5 * w * pb.max_drift_term};
}

// log Z_t = -int beta dW - 1/2 int |beta|^2 dt along unperturbed forward paths.
struct GirsanovLedger {
  GirsanovConstants constants;
  std::vector<double> log_z;          // at the horizon, per path
  std::vector<double> max_abs_log_z;  // over time, per path
};

inline GirsanovLedger girsanov_ledger(const PathBundle& unperturbed, const Perturbation& pert, const Potential& pot) {
  require(unperturbed.has_noise(), "bundle has no stored noise increments");
  const int d = unperturbed.dim;
  GirsanovLedger led;
  led.constants = girsanov_constants(pert, pot, unperturbed.time(unperturbed.steps));
  led.log_z.assign(unperturbed.paths, 0.0);
  led.max_abs_log_z.assign(unperturbed.paths, 0.0);
  for (std::size_t p = 0; p < unperturbed.paths; ++p) {
    double z = 0.0, worst = 0.0;
    for (std::size_t k = 0; k < unperturbed.steps; ++k) {
      if (!pert.active(unperturbed.time(k))) continue;
      const Vec x = unperturbed.state(p, k);
      const Vec beta = pert.field(x);
      Vec w{};
      for (int a = 0; a < d; ++a) w[a] = unperturbed.noise[unperturbed.noise_index(p, k) + a];
      z += -dot(beta, w) - 0.5 * norm2(beta) * unperturbed.dt;
      worst = std::max(worst, std::abs(z));
    }
    led.log_z[p] = z;
    led.max_abs_log_z[p] = worst;
  }
  return led;
}

struct GirsanovOptions {
  double density_floor = 1e-12;
};

// Grid ratio p^beta / p^0 against the analytic envelope, and the growth of
// max |ratio - 1| with the time since activation.
inline CheckReport girsanov_ratio_checks(const FpeSolution& perturbed, const FpeSolution& unperturbed,
                                         const Potential& pot, PerturbationRef pert,
                                         const PathBundle* unperturbed_paths = nullptr,
                                         const GirsanovOptions& opts = {}) {
  require(perturbed.snapshots.size() == unperturbed.snapshots.size(), "solutions must share their snapshot times");
  require(perturbed.snapshots.front().grid.same_as(unperturbed.snapshots.front().grid), "solutions must share a grid");
  const double T = perturbed.horizon();
  const GirsanovConstants gc = pert != nullptr ? girsanov_constants(*pert, pot, T) : GirsanovConstants{};
  const double envelope = gc.bound();
  const double t0 = pert != nullptr ? pert->activation_time() : 0.0;

  double lo = std::numeric_limits<double>::infinity(), hi = 0.0, max_log = 0.0;
  std::size_t excluded = 0;
  double slope_bound = 0.0, sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < perturbed.snapshots.size(); ++i) {
    const auto& pb = perturbed.snapshots[i];
    const auto& p0 = unperturbed.snapshots[i];
    require(std::abs(pb.time - p0.time) <= 1e-12 * std::max(1.0, T), "solutions must share their snapshot times");
    double dev = 0.0;
    for (std::size_t k = 0; k < pb.values.size(); ++k) {
      if (p0.values[k] < opts.density_floor || pb.values[k] < opts.density_floor) {
        if (i + 1 == perturbed.snapshots.size()) ++excluded;
        continue;
      }
      const double ratio = pb.values[k] / p0.values[k];
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
      max_log = std::max(max_log, std::abs(std::log(ratio)));
      dev = std::max(dev, std::abs(ratio - 1.0));
    }
    const double w = pb.time - t0;
    if (w > 1e-12) {
      slope_bound = std::max(slope_bound, dev / w);
      sxy += w * dev;
      sxx += w * w;
    }
  }
  const bool envelope_ok = std::isfinite(lo) && lo > 0.0 && std::isfinite(hi) && std::log(hi) <= envelope + 1e-12 &&
                           -std::log(lo) <= envelope + 1e-12;
  CheckReport r;
  r.name = "girsanov_ratio";
  r.anchor = "likelihood-ratio bounds from the Girsanov density";
  r.lhs = max_log;
  r.rhs = envelope;
  r.abs_gap = std::max(0.0, max_log - envelope);
  r.rel_gap = detail::rel_to(r.abs_gap, envelope);
  r.tolerance = 0.0;
  r.refinement_slope = sxx > 0.0 ? sxy / sxx : 0.0;
  bool paths_ok = true;
  if (unperturbed_paths != nullptr && pert != nullptr) {
    const GirsanovLedger led = girsanov_ledger(*unperturbed_paths, *pert, pot);
    const double worst = *std::max_element(led.max_abs_log_z.begin(), led.max_abs_log_z.end());
    std::vector<double> z(led.log_z.size());
    for (std::size_t p = 0; p < z.size(); ++p) z[p] = std::exp(led.log_z[p]);
    const MeanStderr ms = mean_stderr(z);
    paths_ok = worst <= envelope + 1e-12;
    r.metric("path_max_abs_log_z", worst);
    r.metric("path_mean_z", ms.mean);
    r.metric("path_mean_z_stderr", ms.stderr_);
  }
  r.pass = envelope_ok && std::isfinite(slope_bound) && paths_ok;
  r.metric("ratio_min", lo);
  r.metric("ratio_max", hi);
  r.metric("c_prime", gc.c_prime);
  r.metric("c_second", gc.c_second);
  r.metric("deviation_slope_bound", slope_bound);
  r.metric("cells_excluded", static_cast<double>(excluded));
  if (excluded > 0) r.notes.push_back(std::to_string(excluded) + " cells below the density floor were excluded");
  return r;
}

// Measured exponent of W(w) = int_{t0}^{t0+w} E^beta |grad(R^beta - R^0)|^2 over the given windows.
inline double gradient_gap_exponent(const FpeSolution& perturbed, const FpeSolution& unperturbed, const Potential& pot,
                                    double t0, std::span<const double> windows) {
  require(windows.size() >= 2, "exponent fit needs at least two windows");
  std::vector<double> lw, lg;
  for (double w : windows) {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < perturbed.snapshots.size(); ++i) {
      const auto& a = perturbed.snapshots[i];
      if (a.time < t0 - 1e-12 || a.time >= t0 + w - 1e-12) continue;
      const auto& b = unperturbed.snapshots[i];
      const auto ga = log_likelihood_gradient(a, pot);
      const auto gb = log_likelihood_gradient(b, pot);
      acc += perturbed.interval() * grid_expectation(a, [&](std::size_t k) { return norm2(ga[k] - gb[k]); });
    }
    if (acc > 0.0) {
      lw.push_back(std::log(w));
      lg.push_back(std::log(acc));
    }
  }
  require(lw.size() >= 2, "gradient gap vanished on every window");
  return fit_line(lw, lg).second;
}

struct DefectOptions {
  bool drop_potential_term = false;  // negative control
  double tolerance_scale = 1e-3;
  double tolerance_floor = 1e-4;
};

// E[sum d^2 l / dx_i^2 / l - 2 grad R . grad psi] with l = e^R; zero by parts.
inline CheckReport forward_defect_check(const GridDensity& p, const Potential& pot, const DefectOptions& opts = {}) {
  const GridSpec& g = p.grid;
  const std::vector<double> R = log_likelihood_field(p, pot);
  const std::vector<Vec> G = log_likelihood_gradient(p, pot);
  std::vector<double> lap(g.size(), 0.0);
  for (int a = 0; a < g.dim; ++a) {
    const int n = g.axes[a].cells;
    const std::size_t stride = a == 0 ? 1 : static_cast<std::size_t>(g.nx());
    const double h2 = g.spacing(a) * g.spacing(a);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const int i = static_cast<int>((k / stride) % n);
      // one-sided at the walls, where p is negligible
      const std::size_t lo = i > 0 ? k - stride : k;
      const std::size_t hi = i + 1 < n ? k + stride : k;
      lap[k] += (R[hi] - 2.0 * R[k] + R[lo]) / h2;
    }
  }
  const double value = grid_expectation(p, [&](std::size_t k) {
    double v = lap[k] + norm2(G[k]);
    if (!opts.drop_potential_term) v -= 2.0 * dot(G[k], pot.gradient(g.center(k)));
    return v;
  });
  const double I = fisher_information(p, ReferenceMeasure{pot});
  CheckReport r;
  r.name = "forward_defect";
  r.anchor = "zero-mean defect of the forward-time relative entropy process";
  r.lhs = value;
  r.rhs = 0.0;
  r.abs_gap = std::abs(value);
  r.tolerance = std::max(opts.tolerance_floor, opts.tolerance_scale * I);
  r.rel_gap = r.abs_gap / std::max(I, opts.tolerance_floor);
  r.pass = r.abs_gap < r.tolerance;
  r.metric("fisher", I);
  if (opts.drop_potential_term) r.notes.push_back("potential term dropped (negative control)");
  return r;
}

}  // namespace entlab

#endif  // ENTLAB_DISSIPATION_HPP
