#ifndef ENTLAB_FPE_HPP
#define ENTLAB_FPE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/grid.hpp"
#include "entlab/model.hpp"

namespace entlab {

// Bernoulli function w / (e^w - 1).
inline double bernoulli(double w) {
  if (std::abs(w) < 1e-10) return 1.0 - 0.5 * w;
  return w / std::expm1(w);
}

// One axis-aligned interface between cell `lo` and its upper neighbour `hi`.
struct Interface {
  std::size_t lo = 0;
  std::size_t hi = 0;
  int axis = 0;
};

inline std::vector<Interface> grid_interfaces(const GridSpec& g) {
  std::vector<Interface> out;
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) out.push_back({g.index(i, j), g.index(i + 1, j), 0});
  if (g.dim == 2)
    for (int j = 0; j + 1 < g.ny(); ++j)
      for (int i = 0; i < g.nx(); ++i) out.push_back({g.index(i, j), g.index(i, j + 1), 1});
  return out;
}

// Chang-Cooper (Scharfetter-Gummel) interface weights for a potential Phi
// sampled at cell centres: flux = -(1/2h) [B(-w) p_hi - B(w) p_lo], w = 2 dPhi.
struct FluxWeights {
  std::vector<double> up;    // B(-w), multiplies p_hi
  std::vector<double> down;  // B(w), multiplies p_lo
};

inline FluxWeights flux_weights(const std::vector<Interface>& faces, std::span<const double> phi) {
  FluxWeights fw;
  fw.up.resize(faces.size());
  fw.down.resize(faces.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const double w = 2.0 * (phi[faces[f].hi] - phi[faces[f].lo]);
    fw.up[f] = bernoulli(-w);
    fw.down[f] = bernoulli(w);
  }
  return fw;
}

inline std::vector<double> potential_at_centers(const GridSpec& g, const Potential& pot) {
  std::vector<double> psi(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) psi[k] = pot.value(g.center(k));
  return psi;
}

// Explicit finite-volume stepper with zero-flux walls.
class FokkerPlanckSolver {
 public:
  FokkerPlanckSolver(const GridSpec& grid, const Potential& pot, PerturbationRef pert)
      : grid_(grid), pert_(pert), faces_(grid_interfaces(grid)) {
    grid.validate();
    require(pot.dim() == grid.dim, "potential and grid dimensions differ");
    const std::vector<double> psi = potential_at_centers(grid, pot);
    base_ = flux_weights(faces_, psi);
    for (std::size_t k = 0; k < grid.size(); ++k)
      max_drift_ = std::max(max_drift_, norm(pot.gradient(grid.center(k))));
    if (pert != nullptr) {
      require(pert->dim() == grid.dim, "perturbation and grid dimensions differ");
      std::vector<double> phi = psi;
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const Vec x = grid.center(k);
        phi[k] += pert->potential(x);
        max_drift_ = std::max(max_drift_, norm(pot.gradient(x) + pert->field(x)));
      }
      perturbed_ = flux_weights(faces_, phi);
    }
    flux_.resize(faces_.size());
  }

  const GridSpec& grid() const { return grid_; }

  // Throws with the offending bound when dt violates either stability limit.
  void check_cfl(double dt) const {
    double hmin = grid_.spacing(0);
    if (grid_.dim == 2) hmin = std::min(hmin, grid_.spacing(1));
    const double diff_bound = hmin * hmin / (2.0 * grid_.dim);
    if (dt > diff_bound * (1.0 + 1e-12)) {
      std::ostringstream os;
      os << "CFL violation: dt=" << dt << " exceeds diffusion bound h^2/(2d)=" << diff_bound;
      fail(ErrorKind::precondition, os.str());
    }
    if (dt * max_drift_ / hmin > 1.0) {
      std::ostringstream os;
      os << "CFL violation: dt*max|drift|/h=" << dt * max_drift_ / hmin << " exceeds 1";
      fail(ErrorKind::precondition, os.str());
    }
  }

  // Advances p by dt using the perturbed weights when `active`.
  void step(std::vector<double>& p, double dt, bool active) {
    const FluxWeights& fw = (active && pert_ != nullptr) ? perturbed_ : base_;
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const Interface& fc = faces_[f];
      const double h = grid_.spacing(fc.axis);
      flux_[f] = -(fw.up[f] * p[fc.hi] - fw.down[f] * p[fc.lo]) / (2.0 * h);
    }
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const Interface& fc = faces_[f];
      const double c = dt * flux_[f] / grid_.spacing(fc.axis);
      p[fc.lo] -= c;
      p[fc.hi] += c;
    }
  }

 private:
  GridSpec grid_;
  PerturbationRef pert_;
  std::vector<Interface> faces_;
  FluxWeights base_;
  FluxWeights perturbed_;
  std::vector<double> flux_;
  double max_drift_ = 0.0;
};

struct FpeOptions {
  int record_every = 1;
  // Called at t=0 and after every step with the current density.
  std::function<void(const GridDensity&)> observer;
};

struct FpeSolution {
  std::vector<GridDensity> snapshots;
  double dt = 0.0;
  int record_every = 1;

  double interval() const { return dt * record_every; }
  double horizon() const { return snapshots.back().time; }

  // Snapshot recorded at time t; throws if none was.
  const GridDensity& at(double t) const {
    require(!snapshots.empty(), "FPE solution has no snapshots");
    const double t0 = snapshots.front().time;
    const double step = interval();
    const double u = step > 0.0 ? (t - t0) / step : 0.0;
    const auto i = static_cast<long long>(std::llround(u));
    const double tol = 1e-9 * std::max(1.0, std::abs(t));
    if (i >= 0 && static_cast<std::size_t>(i) < snapshots.size() && std::abs(snapshots[i].time - t) <= tol)
      return snapshots[i];
    for (const auto& s : snapshots)
      if (std::abs(s.time - t) <= tol) return s;
    fail(ErrorKind::precondition, "missing FPE snapshot for time " + std::to_string(t));
  }
};

// The perturbation is switched on for a step when its midpoint lies after t0.
inline bool fpe_step_active(PerturbationRef pert, double t_left, double dt) {
  return pert != nullptr && pert->active(t_left + 0.5 * dt);
}

inline FpeSolution solve_fpe(const GridDensity& p0, const Potential& pot, PerturbationRef pert, double dt, double T,
                             const FpeOptions& opts = {}) {
  require(T >= 0.0 && std::isfinite(T), "horizon must be finite and nonnegative");
  require(opts.record_every >= 1, "record_every must be positive");
  p0.require_normalized();
  require(p0.min_value() >= 0.0, "initial density must be nonnegative");
  FpeSolution sol;
  sol.dt = dt;
  sol.record_every = opts.record_every;
  GridDensity cur = p0;
  sol.snapshots.push_back(cur);
  if (opts.observer) opts.observer(cur);
  if (T == 0.0) return sol;
  require(dt > 0.0 && dt <= T, "time step must satisfy 0 < dt <= T");
  const long long n = std::llround(T / dt);
  require(std::abs(n * dt - T) <= 1e-9 * T, "horizon must be an integer multiple of dt");
  FokkerPlanckSolver solver(p0.grid, pot, pert);
  solver.check_cfl(dt);
  const double start = p0.time;
  for (long long k = 0; k < n; ++k) {
    const double t_left = start + k * dt;
    solver.step(cur.values, dt, fpe_step_active(pert, t_left, dt));
    cur.time = start + (k + 1) * dt;
    for (double& v : cur.values) {
      if (v < -1e-12) fail(ErrorKind::numeric, "positivity lost");
    }
    if (opts.observer) opts.observer(cur);
    if ((k + 1) % opts.record_every == 0 || k + 1 == n) {
      const double m = cur.mass();
      if (std::abs(m - 1.0) > 1e-8) fail(ErrorKind::numeric, "mass drift beyond 1e-8: " + std::to_string(m));
      sol.snapshots.push_back(cur);
    }
  }
  return sol;
}

// L-infinity norm of div(grad(psi) u) + 0.5 lap(u) on the grid, using the
// conservative interface stencil with arithmetic-mean interface values and the
// analytic gradient at the interface midpoint.
inline double operator_residual(const GridSpec& grid, const Potential& pot, std::span<const double> u) {
  require(u.size() == grid.size(), "value array does not match grid");
  const auto faces = grid_interfaces(grid);
  std::vector<double> div(grid.size(), 0.0);
  for (const Interface& f : faces) {
    const double h = grid.spacing(f.axis);
    const Vec mid = 0.5 * (grid.center(f.lo) + grid.center(f.hi));
    const double a = pot.gradient(mid)[f.axis];
    const double g = a * 0.5 * (u[f.lo] + u[f.hi]) + 0.5 * (u[f.hi] - u[f.lo]) / h;
    div[f.lo] += g / h;
    div[f.hi] -= g / h;
  }
  double worst = 0.0;
  for (double v : div) worst = std::max(worst, std::abs(v));
  return worst;
}

inline double stationary_residual(const ReferenceMeasure& m, const GridSpec& grid) {
  std::vector<double> q(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) q[k] = m.density(grid.center(k));
  return operator_residual(grid, m.potential, q);
}

struct StationarityOptions {
  double max_drift = 1e-4;
  double max_residual = 1e-3;
  double ratio_target = 4.0;
  double ratio_tolerance = 0.3;
};

// Runs the solver from q/Z and measures how far it moves; the residual of the
// generator on q is compared between the grid and its twofold refinement.
inline CheckReport stationarity_check(const Potential& pot, const GridSpec& grid, double dt, double T,
                                      const StationarityOptions& opts = {}) {
  const ReferenceMeasure m{pot};
  GridDensity q{grid, std::vector<double>(grid.size()), 0.0};
  for (std::size_t k = 0; k < grid.size(); ++k) q.values[k] = m.density(grid.center(k));
  const double z = q.mass();
  for (double& v : q.values) v /= z;
  double drift = 0.0;
  FpeOptions fo;
  fo.record_every = std::numeric_limits<int>::max();
  fo.observer = [&](const GridDensity& p) {
    for (std::size_t k = 0; k < p.values.size(); ++k) drift = std::max(drift, std::abs(p.values[k] - q.values[k]));
  };
  solve_fpe(q, pot, nullptr, dt, T, fo);
  GridSpec fine = grid;
  for (int a = 0; a < grid.dim; ++a) fine.axes[a].cells *= 2;
  const double r0 = stationary_residual(m, grid);
  const double r1 = stationary_residual(m, fine);
  const double ratio = r1 > 0.0 ? r0 / r1 : std::numeric_limits<double>::infinity();
  CheckReport r;
  r.name = "stationarity";
  r.anchor = "stationary Fokker-Planck equation solved by the reference density";
  r.lhs = drift;
  r.rhs = 0.0;
  set_gap(r, 1.0);
  r.tolerance = opts.max_drift;
  const bool ratio_ok = std::abs(ratio - opts.ratio_target) <= opts.ratio_tolerance * opts.ratio_target;
  r.pass = drift < opts.max_drift && r0 < opts.max_residual && ratio_ok;
  r.refinement_slope = ratio;
  r.metric("max_norm_drift", drift);
  r.metric("residual", r0);
  r.metric("residual_refined", r1);
  r.metric("residual_ratio", ratio);
  r.metric("log_Z", std::log(z));
  return r;
}

// Central differences of log(max(p, floor)); one-sided on the outer cells.
inline std::vector<Vec> log_gradient(const GridSpec& g, std::span<const double> logv) {
  std::vector<Vec> out(g.size(), Vec{});
  for (int a = 0; a < g.dim; ++a) {
    const int n = g.axes[a].cells;
    const double h = g.spacing(a);
    for (int j = 0; j < g.ny(); ++j)
      for (int i = 0; i < g.nx(); ++i) {
        const int c = a == 0 ? i : j;
        auto at = [&](int cc) { return a == 0 ? logv[g.index(cc, j)] : logv[g.index(i, cc)]; };
        double d;
        if (c == 0)
          d = (at(1) - at(0)) / h;
        else if (c == n - 1)
          d = (at(n - 1) - at(n - 2)) / h;
        else
          d = (at(c + 1) - at(c - 1)) / (2.0 * h);
        out[g.index(i, j)][a] = d;
      }
  }
  return out;
}

inline std::vector<double> floored_log(std::span<const double> v) {
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = std::log(std::max(v[k], kDensityFloor));
  return out;
}

inline std::vector<Vec> score_field(const GridDensity& p) { return log_gradient(p.grid, floored_log(p.values)); }

inline Vec interpolate_field(const GridSpec& g, std::span<const Vec> field, const Vec& x) {
  const InterpStencil s = interp_stencil(g, x);
  Vec v{};
  for (int k = 0; k < s.count; ++k) v = v + s.w[k] * field[s.idx[k]];
  return v;
}

inline Vec score_at(const GridDensity& p, std::span<const Vec> field, const Vec& x) {
  return interpolate_field(p.grid, field, x);
}

}  // namespace entlab

#endif  // ENTLAB_FPE_HPP
