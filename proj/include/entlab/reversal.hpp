#ifndef ENTLAB_REVERSAL_HPP
#define ENTLAB_REVERSAL_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/fpe.hpp"
#include "entlab/grid.hpp"
#include "entlab/model.hpp"
#include "entlab/rng.hpp"
#include "entlab/simulate.hpp"

namespace entlab {

// R = log p + 2 psi and grad R of every FPE snapshot at the cell centres;
// linear in time between snapshots, multilinear in space. R is flatter than
// log p, so interpolating it keeps the stationary ledger exactly zero.
class ScoreTable {
 public:
  ScoreTable(const FpeSolution& sol, const Potential& pot) : pot_(pot) {
    require(!sol.snapshots.empty(), "FPE solution has no snapshots");
    grid_ = sol.snapshots.front().grid;
    require(pot.dim() == grid_.dim, "potential and grid dimensions differ");
    t_begin_ = sol.snapshots.front().time;
    interval_ = sol.snapshots.size() > 1 ? sol.snapshots[1].time - sol.snapshots[0].time : 0.0;
    std::vector<double> two_psi(grid_.size());
    std::vector<Vec> two_grad(grid_.size());
    for (std::size_t c = 0; c < grid_.size(); ++c) {
      two_psi[c] = 2.0 * pot.value(grid_.center(c));
      two_grad[c] = 2.0 * pot.gradient(grid_.center(c));
    }
    for (std::size_t i = 0; i < sol.snapshots.size(); ++i) {
      const GridDensity& p = sol.snapshots[i];
      const double expect = t_begin_ + static_cast<double>(i) * interval_;
      if (std::abs(p.time - expect) > 1e-9 * std::max(1.0, expect))
        fail(ErrorKind::precondition, "FPE snapshots are not uniformly spaced in time");
      std::vector<double> r = floored_log(p.values);
      std::vector<Vec> g = log_gradient(grid_, r);
      for (std::size_t c = 0; c < grid_.size(); ++c) {
        r[c] += two_psi[c];
        g[c] = g[c] + two_grad[c];
      }
      R_.push_back(std::move(r));
      G_.push_back(std::move(g));
    }
    t_end_ = sol.snapshots.back().time;
  }

  const GridSpec& grid() const { return grid_; }
  const Potential& potential() const { return pot_; }
  double begin() const { return t_begin_; }
  double horizon() const { return t_end_; }

  struct Value {
    double R = 0.0;
    Vec gradR{};
  };

  // Forward time s must lie within the stored snapshots.
  Value eval(const Vec& x, double s) const {
    const double tol = 1e-9 * std::max(1.0, t_end_);
    if (s < t_begin_ - tol || s > t_end_ + tol) {
      std::ostringstream os;
      os << "missing FPE snapshot for time " << s << " (solution covers [" << t_begin_ << ", " << t_end_ << "])";
      fail(ErrorKind::precondition, os.str());
    }
    std::size_t i = 0;
    double f = 0.0;
    if (R_.size() > 1) {
      const double u = std::clamp((s - t_begin_) / interval_, 0.0, static_cast<double>(R_.size() - 1));
      i = std::min(static_cast<std::size_t>(u), R_.size() - 2);
      f = u - static_cast<double>(i);
    }
    const InterpStencil st = interp_stencil(grid_, x);
    Value v;
    for (int k = 0; k < st.count; ++k) {
      const std::size_t c = st.idx[k];
      double r = R_[i][c];
      Vec g = G_[i][c];
      if (f > 0.0) {
        r = (1.0 - f) * r + f * R_[i + 1][c];
        g = (1.0 - f) * g + f * G_[i + 1][c];
      }
      v.R += st.w[k] * r;
      v.gradR = v.gradR + st.w[k] * g;
    }
    return v;
  }

  Vec score(const Vec& x, double s) const { return eval(x, s).gradR - 2.0 * pot_.gradient(x); }

 private:
  GridSpec grid_;
  Potential pot_;
  double t_begin_ = 0.0, t_end_ = 0.0, interval_ = 0.0;
  std::vector<std::vector<double>> R_;
  std::vector<std::vector<Vec>> G_;
};

// Backward drift at reversed time t: score of p_{T-t} + grad psi + beta 1{t < T - t0}.
inline Vec backward_drift(const ScoreTable& table, PerturbationRef pert, const Vec& x, double t_rev) {
  const double s = table.horizon() - t_rev;
  const bool on = pert != nullptr && pert->active(s);
  // score + grad psi = grad R - grad psi
  return table.eval(x, s).gradR - table.potential().gradient(x) + perturbation_field(pert, x, on);
}

struct BackwardOptions {
  double start = 0.0;  // reversed start time; positions must follow p_{T - start}
  double stop = -1.0;  // reversed stop time, defaults to T
  bool record_paths = false;
  std::function<void(const StepView&)> observer;
};

// Euler-Maruyama on the reversed-time SDE driven by the backward-noise stream.
inline ForwardResult simulate_backward(const EnsembleState& terminal, const ScoreTable& table, PerturbationRef pert,
                                       double dt, const BackwardOptions& opts = {}) {
  terminal.validate();
  const Potential& pot = table.potential();
  require(pot.dim() == terminal.dim && table.grid().dim == terminal.dim, "ensemble, potential and grid dimensions differ");
  const double T = table.horizon();
  const double stop = opts.stop < 0.0 ? T : opts.stop;
  if (stop > T + 1e-12 || opts.start < 0.0) fail(ErrorKind::precondition, "requested reversed time beyond T");
  require(stop > opts.start, "reversed window is empty");
  const std::size_t steps = step_count(dt, stop - opts.start);

  const int d = terminal.dim;
  const std::size_t n = terminal.size();
  const double sq = std::sqrt(dt);
  ForwardResult res;
  res.final_state = terminal;
  if (opts.record_paths) {
    PathBundle b;
    b.dim = d;
    b.paths = n;
    b.steps = steps;
    b.dt = dt;
    b.start_time = opts.start;
    b.activation_time = pert != nullptr ? T - pert->activation_time() : -1.0;
    b.seed = terminal.seed;
    b.states.resize(n * (steps + 1) * d);
    b.noise.resize(n * steps * d);
    for (std::size_t p = 0; p < n; ++p)
      for (int a = 0; a < d; ++a) b.states[b.state_index(p, 0) + a] = terminal.positions[p * d + a];
    std::ostringstream os;
    os.precision(17);
    os << "backward;" << signature(pot) << ';' << signature(pert) << ";dt=" << dt << ";T=" << T << ";start=" << opts.start
       << ";seed=" << terminal.seed << ";n=" << n;
    b.config_hash = fnv1a64(os.str());
    res.paths = std::move(b);
  }

  std::vector<double> cur = terminal.positions, next(n * d), noise(n * d);
  double xi[kMaxDim];
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = opts.start + static_cast<double>(k) * dt;
    const auto ctr = static_cast<std::uint32_t>(terminal.stream_counter + k);
    for (std::size_t p = 0; p < n; ++p) {
      gaussian_block(terminal.seed, Stream::backward_noise, p, ctr, d, xi);
      Vec x{};
      for (int a = 0; a < d; ++a) x[a] = cur[p * d + a];
      const Vec b = backward_drift(table, pert, x, t);
      for (int a = 0; a < d; ++a) {
        const double w = sq * xi[a];
        noise[p * d + a] = w;
        next[p * d + a] = x[a] + (b[a] * dt + w);
      }
    }
    if (res.paths) {
      PathBundle& b = *res.paths;
      for (std::size_t p = 0; p < n; ++p)
        for (int a = 0; a < d; ++a) {
          b.states[b.state_index(p, k + 1) + a] = next[p * d + a];
          b.noise[b.noise_index(p, k) + a] = noise[p * d + a];
        }
    }
    if (opts.observer) opts.observer(StepView{k, t, dt, d, cur, noise, next});
    std::swap(cur, next);
  }
  res.final_state.positions = std::move(cur);
  res.final_state.time = opts.start + static_cast<double>(steps) * dt;
  res.final_state.stream_counter = static_cast<std::uint32_t>(terminal.stream_counter + steps);
  return res;
}

// Replays a stored bundle through an observer, step by step.
inline void replay_steps(const PathBundle& b, const std::function<void(const StepView&)>& observer) {
  require(b.has_noise(), "bundle has no stored noise increments");
  const int d = b.dim;
  std::vector<double> before(b.paths * d), after(b.paths * d), noise(b.paths * d);
  for (std::size_t k = 0; k < b.steps; ++k) {
    for (std::size_t p = 0; p < b.paths; ++p)
      for (int a = 0; a < d; ++a) {
        before[p * d + a] = b.states[b.state_index(p, k) + a];
        after[p * d + a] = b.states[b.state_index(p, k + 1) + a];
        noise[p * d + a] = b.noise[b.noise_index(p, k) + a];
      }
    observer(StepView{k, b.time(k), b.dt, d, before, noise, after});
  }
}

// z-score of a sample correlation under the null of zero correlation.
inline double correlation_z(double sxy, double sxx, double syy, std::size_t m) {
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy) * std::sqrt(static_cast<double>(m));
}

struct ReconstructionOptions {
  bool score_correction = true;
  int checkpoints = 10;
  bool keep_increments = false;
};

// Rebuilds backward Brownian increments from forward steps,
//   dWbar_j = -dW_k - grad log p_{s_{k+1}}(X_{k+1}) dt,  k = steps - 1 - j,
// and tests them against the Brownian null. Feed forward StepViews in order.
class BrownianReconstruction {
 public:
  BrownianReconstruction(const ScoreTable& table, std::vector<double> terminal, int dim, std::size_t steps, double dt,
                         ReconstructionOptions opts = {})
      : table_(table), xT_(std::move(terminal)), d_(dim), steps_(steps), dt_(dt), opts_(opts) {
    n_ = xT_.size() / dim;
    if (n_ < 2) fail(ErrorKind::precondition, "insufficient sample");
    require(steps >= 2, "reconstruction needs at least two steps");
    for (int a = 0; a < d_; ++a) {
      std::vector<double> col(n_);
      for (std::size_t p = 0; p < n_; ++p) col[p] = xT_[p * d_ + a];
      mean_xT_[a] = pairwise_mean(col);
      for (double v : col) sxx_ += (v - mean_xT_[a]) * (v - mean_xT_[a]);
    }
    prev_.assign(n_ * d_, 0.0);
    cum_.assign(n_ * d_, 0.0);
    const int nc = std::max(1, opts_.checkpoints);
    for (int c = 1; c <= nc; ++c) {
      const std::size_t j = std::max<std::size_t>(1, steps_ * c / nc);
      if (checkpoints_.empty() || checkpoints_.back() != j) checkpoints_.push_back(j);
    }
    for (std::size_t j : checkpoints_) prefix_.emplace_back(steps_ - j, std::vector<double>());
    if (opts_.keep_increments) increments_.assign(n_ * steps_ * d_, 0.0);
  }

  void operator()(const StepView& v) {
    require(v.step == seen_, "forward steps must be fed in order");
    require(v.after.size() == n_ * d_, "step view does not match the terminal ensemble");
    for (auto& [len, sums] : prefix_)
      if (len == seen_) sums = cum_;
    const double s1 = v.t + v.dt;
    const std::size_t j = steps_ - 1 - v.step;
    const std::size_t m = n_ * d_;
    std::vector<double> w(m);
    for (std::size_t p = 0; p < n_; ++p) {
      Vec x{};
      for (int a = 0; a < d_; ++a) x[a] = v.after[p * d_ + a];
      Vec corr{};
      if (opts_.score_correction) corr = table_.score(x, s1);
      for (int a = 0; a < d_; ++a) w[p * d_ + a] = -v.noise[p * d_ + a] - corr[a] * v.dt;
    }
    double sw = 0.0, sww = 0.0, swx = 0.0, slag = 0.0, sprev = 0.0;
    for (std::size_t p = 0; p < n_; ++p)
      for (int a = 0; a < d_; ++a) {
        const double x = w[p * d_ + a];
        sw += x;
        sww += x * x;
        swx += x * (xT_[p * d_ + a] - mean_xT_[a]);
        slag += x * prev_[p * d_ + a];
        sprev += prev_[p * d_ + a] * prev_[p * d_ + a];
      }
    const double var = (sww - sw * sw / m) / static_cast<double>(m - 1);
    const double se = v.dt * std::sqrt(2.0 / static_cast<double>(m - 1));
    max_var_z_ = std::max(max_var_z_, std::abs(var - v.dt) / se);
    max_corr_z_ = std::max(max_corr_z_, std::abs(correlation_z(swx, sww, sxx_, m)));
    if (v.step > 0) max_lag_z_ = std::max(max_lag_z_, std::abs(correlation_z(slag, sww, sprev, m)));
    for (std::size_t i = 0; i < m; ++i) cum_[i] += w[i];
    if (opts_.keep_increments)
      for (std::size_t p = 0; p < n_; ++p)
        for (int a = 0; a < d_; ++a) increments_[(p * steps_ + j) * d_ + a] = w[p * d_ + a];
    prev_ = std::move(w);
    ++seen_;
  }

  CheckReport report() const {
    require(seen_ == steps_, "reconstruction has not seen every step");
    const std::size_t m = n_ * d_;
    // Wbar at reversed checkpoint j = (sum of all increments) - (forward prefix of length steps - j)
    double max_cum_z = 0.0, max_cum_var_z = 0.0;
    for (std::size_t c = 0; c < checkpoints_.size(); ++c) {
      const auto& [len, sums] = prefix_[c];
      double sw = 0, sww = 0, swx = 0;
      for (std::size_t p = 0; p < n_; ++p)
        for (int a = 0; a < d_; ++a) {
          const std::size_t i = p * d_ + a;
          const double x = cum_[i] - (len == 0 ? 0.0 : sums[i]);
          sw += x;
          sww += x * x;
          swx += x * (xT_[i] - mean_xT_[a]);
        }
      const double ss = sww - sw * sw / m;
      const double t = static_cast<double>(checkpoints_[c]) * dt_;
      const double se = t * std::sqrt(2.0 / static_cast<double>(m - 1));
      max_cum_var_z = std::max(max_cum_var_z, std::abs(ss / static_cast<double>(m - 1) - t) / se);
      max_cum_z = std::max(max_cum_z, std::abs(correlation_z(swx, ss, sxx_, m)));
    }
    const bool var_ok = max_var_z_ <= 5.0 && max_cum_var_z <= 5.0;
    const bool lag_ok = max_lag_z_ <= 5.0;
    const bool corr_ok = max_corr_z_ <= 5.0 && max_cum_z <= 5.0;
    CheckReport r;
    r.name = "backward_brownian";
    r.anchor = "backward Brownian motion of the reversed diffusion";
    r.tolerance = 5.0;
    r.lhs = std::max({max_var_z_, max_lag_z_, max_corr_z_, max_cum_z, max_cum_var_z});
    r.rhs = 0.0;
    set_gap(r, 1.0);
    r.pass = var_ok && lag_ok && corr_ok;
    r.metric("max_variance_z", max_var_z_);
    r.metric("max_cumulative_variance_z", max_cum_var_z);
    r.metric("max_lag1_z", max_lag_z_);
    r.metric("max_terminal_corr_z", max_corr_z_);
    r.metric("max_cumulative_terminal_corr_z", max_cum_z);
    r.metric("variance_pass", var_ok ? 1.0 : 0.0);
    r.metric("lag1_pass", lag_ok ? 1.0 : 0.0);
    r.metric("terminal_corr_pass", corr_ok ? 1.0 : 0.0);
    r.metric("paths", static_cast<double>(n_));
    if (!opts_.score_correction) r.notes.push_back("score correction disabled (negative control)");
    return r;
  }

  // Reversed-order increments, N x steps x d; only with keep_increments.
  const std::vector<double>& increments() const { return increments_; }

 private:
  const ScoreTable& table_;
  std::vector<double> xT_;
  int d_;
  std::size_t steps_;
  double dt_;
  ReconstructionOptions opts_;
  std::size_t n_ = 0, seen_ = 0;
  Vec mean_xT_{};
  double sxx_ = 0.0;
  double max_var_z_ = 0.0, max_lag_z_ = 0.0, max_corr_z_ = 0.0;
  std::vector<double> prev_, cum_;
  std::vector<std::size_t> checkpoints_;
  std::vector<std::pair<std::size_t, std::vector<double>>> prefix_;
  std::vector<double> increments_;
};

struct Reconstruction {
  std::vector<double> increments;
  CheckReport report;
};

inline Reconstruction reconstruct_backward_brownian(const PathBundle& forward, const ScoreTable& table,
                                                    ReconstructionOptions opts = {}) {
  if (!forward.has_noise()) fail(ErrorKind::precondition, "bundle has no stored noise increments");
  if (forward.paths < 2) fail(ErrorKind::precondition, "insufficient sample");
  std::vector<double> xT(forward.paths * forward.dim);
  for (std::size_t p = 0; p < forward.paths; ++p)
    for (int a = 0; a < forward.dim; ++a) xT[p * forward.dim + a] = forward.states[forward.state_index(p, forward.steps) + a];
  opts.keep_increments = true;
  BrownianReconstruction rec(table, std::move(xT), forward.dim, forward.steps, forward.dt, opts);
  replay_steps(forward, std::ref(rec));
  return {rec.increments(), rec.report()};
}

// Streaming version: simulates forward twice (once for X_T, once to reconstruct)
// so no path storage is needed.
inline CheckReport reconstruction_check(const EnsembleState& init, const Potential& pot, PerturbationRef pert,
                                        double dt, double T, const ScoreTable& table, ReconstructionOptions opts = {}) {
  if (init.size() < 2) fail(ErrorKind::precondition, "insufficient sample");
  const auto first = simulate_forward(init, pot, pert, dt, T);
  opts.keep_increments = false;
  BrownianReconstruction rec(table, first.final_state.positions, init.dim, step_count(dt, T), dt, opts);
  SimOptions so;
  so.observer = std::ref(rec);
  simulate_forward(init, pot, pert, dt, T, so);
  return rec.report();
}

// Backward Ito sum: sum_j Y_{j+1} (X_{j+1} - X_j), later-endpoint evaluation.
inline double backward_ito_sum(std::span<const double> Y, std::span<const double> X) {
  require(!X.empty(), "empty path");
  require(Y.size() == X.size(), "integrand and integrator lengths differ");
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < X.size(); ++j) s += Y[j + 1] * (X[j + 1] - X[j]);
  return s;
}

// Forward (Ito) sum: sum_j Y_j (X_{j+1} - X_j).
inline double forward_ito_sum(std::span<const double> Y, std::span<const double> X) {
  require(!X.empty(), "empty path");
  require(Y.size() == X.size(), "integrand and integrator lengths differ");
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < X.size(); ++j) s += Y[j] * (X[j + 1] - X[j]);
  return s;
}

// Per-path ledger values at one reversed time; M, F, residual and qv are
// cumulative from the ledger start.
struct LedgerCheckpoint {
  double t = 0.0;
  std::vector<double> X;      // N x d
  std::vector<double> R;      // N
  std::vector<double> gradR;  // N x d
  std::vector<double> M, F, residual, qv;

  Vec point(std::size_t p, int d) const {
    Vec x{};
    for (int a = 0; a < d; ++a) x[a] = X[p * d + a];
    return x;
  }
  Vec grad(std::size_t p, int d) const {
    Vec g{};
    for (int a = 0; a < d; ++a) g[a] = gradR[p * d + a];
    return g;
  }
};

// Ensemble means of the per-step ledger terms.
struct LedgerStep {
  double t = 0.0;
  double dR = 0.0, dM = 0.0, dF = 0.0, residual = 0.0, abs_residual = 0.0;
};

struct TrajectorialLedger {
  int dim = 1;
  std::size_t paths = 0;
  double dt = 0.0;
  double horizon = 0.0;
  double start = 0.0;
  std::vector<LedgerCheckpoint> checkpoints;
  std::vector<LedgerStep> steps;
  // N x steps arrays, filled only when requested
  std::vector<double> dR, dM, dF, residual;

  const LedgerCheckpoint& at(double t) const {
    for (const auto& c : checkpoints)
      if (std::abs(c.t - t) <= 1e-9 * std::max(1.0, horizon)) return c;
    std::ostringstream os;
    os << "no ledger checkpoint at reversed time " << t;
    fail(ErrorKind::precondition, os.str());
  }
};

// Splits dR = dM + dF + residual along backward paths, with
//   dM = gradR . dWbar,  dF = (1/2 |gradR|^2 + (2 beta.grad psi - div beta) 1{on}) dt,
// all evaluated at the left endpoint. Feed backward StepViews in order.
class LedgerBuilder {
 public:
  LedgerBuilder(const ScoreTable& table, PerturbationRef pert, std::vector<double> checkpoint_times,
                bool keep_steps = false)
      : table_(table), pert_(pert), times_(std::move(checkpoint_times)), keep_(keep_steps) {}

  void start(const EnsembleState& s, double t_start, double dt, std::size_t steps) {
    led_ = TrajectorialLedger{};
    led_.dim = s.dim;
    led_.paths = s.size();
    led_.dt = dt;
    led_.horizon = table_.horizon();
    led_.start = t_start;
    const std::size_t n = s.size();
    R_.resize(n);
    G_.resize(n * s.dim);
    M_.assign(n, 0.0);
    F_.assign(n, 0.0);
    res_.assign(n, 0.0);
    qv_.assign(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) eval_into(s.point(p), table_.horizon() - t_start, p);
    if (keep_) {
      led_.dR.assign(n * steps, 0.0);
      led_.dM.assign(n * steps, 0.0);
      led_.dF.assign(n * steps, 0.0);
      led_.residual.assign(n * steps, 0.0);
    }
    steps_ = steps;
    maybe_checkpoint(t_start, s.positions);
  }

  void operator()(const StepView& v) {
    const int d = v.dim;
    const std::size_t n = led_.paths;
    require(v.before.size() == n * static_cast<std::size_t>(d), "ledger was not started for this ensemble");
    const double T = table_.horizon();
    const bool on = pert_ != nullptr && pert_->active(T - v.t);
    const Potential& pot = table_.potential();
    std::vector<double> dR(n), dM(n), dF(n), rs(n);
    for (std::size_t p = 0; p < n; ++p) {
      Vec x{}, g{}, w{}, y{};
      for (int a = 0; a < d; ++a) {
        x[a] = v.before[p * d + a];
        y[a] = v.after[p * d + a];
        g[a] = G_[p * d + a];
        w[a] = v.noise[p * d + a];
      }
      double drift = 0.5 * norm2(g);
      if (on) drift += perturbation_drift_term(*pert_, pot, x);
      const double r0 = R_[p];
      eval_into(y, T - (v.t + v.dt), p);
      dR[p] = R_[p] - r0;
      dM[p] = dot(g, w);
      dF[p] = drift * v.dt;
      rs[p] = dR[p] - dM[p] - dF[p];
      M_[p] += dM[p];
      F_[p] += dF[p];
      res_[p] += rs[p];
      qv_[p] += norm2(g) * v.dt;
      if (keep_) {
        const std::size_t i = p * steps_ + v.step;
        led_.dR[i] = dR[p];
        led_.dM[i] = dM[p];
        led_.dF[i] = dF[p];
        led_.residual[i] = rs[p];
      }
    }
    LedgerStep st;
    st.t = v.t;
    st.dR = pairwise_mean(dR);
    st.dM = pairwise_mean(dM);
    st.dF = pairwise_mean(dF);
    st.residual = pairwise_mean(rs);
    for (double& r : rs) r = std::abs(r);
    st.abs_residual = pairwise_mean(rs);
    led_.steps.push_back(st);
    maybe_checkpoint(v.t + v.dt, v.after);
  }

  TrajectorialLedger take() { return std::move(led_); }

 private:
  void eval_into(const Vec& x, double s, std::size_t p) {
    const auto v = table_.eval(x, s);
    R_[p] = v.R;
    for (int a = 0; a < led_.dim; ++a) G_[p * led_.dim + a] = v.gradR[a];
  }

  void maybe_checkpoint(double t, std::span<const double> X) {
    for (double c : times_)
      if (std::abs(c - t) <= 1e-9 * std::max(1.0, led_.horizon)) {
        LedgerCheckpoint cp;
        cp.t = c;
        cp.X.assign(X.begin(), X.end());
        cp.R = R_;
        cp.gradR = G_;
        cp.M = M_;
        cp.F = F_;
        cp.residual = res_;
        cp.qv = qv_;
        led_.checkpoints.push_back(std::move(cp));
        return;
      }
  }

  const ScoreTable& table_;
  PerturbationRef pert_;
  std::vector<double> times_;
  bool keep_;
  std::size_t steps_ = 0;
  TrajectorialLedger led_;
  std::vector<double> R_, G_, M_, F_, res_, qv_;
};

inline TrajectorialLedger decompose_entropy_process(const PathBundle& backward, const ScoreTable& table,
                                                    PerturbationRef pert, std::vector<double> checkpoint_times,
                                                    bool keep_steps = true) {
  require(backward.paths >= 1, "empty bundle");
  LedgerBuilder lb(table, pert, std::move(checkpoint_times), keep_steps);
  std::vector<double> x0(backward.paths * backward.dim);
  for (std::size_t p = 0; p < backward.paths; ++p)
    for (int a = 0; a < backward.dim; ++a) x0[p * backward.dim + a] = backward.states[backward.state_index(p, 0) + a];
  lb.start(EnsembleState::from_points(backward.dim, std::move(x0), backward.seed, backward.start_time),
           backward.start_time, backward.dt, backward.steps);
  replay_steps(backward, std::ref(lb));
  return lb.take();
}

// Simulates the backward SDE and builds the ledger on the fly.
inline TrajectorialLedger backward_ledger(const EnsembleState& terminal, const ScoreTable& table, PerturbationRef pert,
                                          double dt, BackwardOptions opts, std::vector<double> checkpoint_times,
                                          EnsembleState* final_state = nullptr) {
  const double stop = opts.stop < 0.0 ? table.horizon() : opts.stop;
  LedgerBuilder lb(table, pert, std::move(checkpoint_times), false);
  lb.start(terminal, opts.start, dt, step_count(dt, stop - opts.start));
  opts.observer = std::ref(lb);
  opts.record_paths = false;
  auto res = simulate_backward(terminal, table, pert, dt, opts);
  if (final_state != nullptr) *final_state = std::move(res.final_state);
  return lb.take();
}

// OLS with heteroskedasticity-robust (HC0) standard errors.
struct Regression {
  Eigen::VectorXd coef;
  Eigen::VectorXd stderr_;
};

inline Regression ols_hc0(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd xtx = X.transpose() * X;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  require(ldlt.info() == Eigen::Success, "singular regression design");
  Regression r;
  r.coef = ldlt.solve(X.transpose() * y);
  const Eigen::VectorXd e = y - X * r.coef;
  const Eigen::MatrixXd Xe = X.array().colwise() * e.array();
  const Eigen::MatrixXd meat = Xe.transpose() * Xe;
  const Eigen::MatrixXd bread = ldlt.solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
  const Eigen::MatrixXd cov = bread * meat * bread;
  r.stderr_ = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return r;
}

// Basis (1, x, x^2, e^{-x^2}); x^2 is |x|^2 and x the first coordinate when d > 1.
inline Eigen::MatrixXd martingale_basis(const LedgerCheckpoint& c, std::size_t n, int d) {
  Eigen::MatrixXd B(n, 4);
  for (std::size_t p = 0; p < n; ++p) {
    const Vec x = c.point(p, d);
    const double r2 = norm2(x);
    B(p, 0) = 1.0;
    B(p, 1) = x[0];
    B(p, 2) = r2;
    B(p, 3) = std::exp(-r2);
  }
  return B;
}

struct MartingaleOptions {
  bool substitute_entropy_increments = false;  // negative control: regress dR instead of dM
  std::size_t min_paths = 10000;
};

// Orthogonality of M increments to functions of the window start, plus the L2 isometry.
inline CheckReport martingale_test(const TrajectorialLedger& led, const MartingaleOptions& opts = {}) {
  if (led.paths < opts.min_paths) {
    std::ostringstream os;
    os << "insufficient sample: martingale test needs at least " << opts.min_paths << " paths, got " << led.paths;
    fail(ErrorKind::precondition, os.str());
  }
  require(led.checkpoints.size() >= 2, "martingale test needs at least two ledger checkpoints");
  const std::size_t n = led.paths;
  const auto& cps = led.checkpoints;
  auto values = [&](const LedgerCheckpoint& c) -> const std::vector<double>& {
    return opts.substitute_entropy_increments ? c.R : c.M;
  };
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (std::size_t i = 0; i + 1 < cps.size(); ++i) windows.emplace_back(i, i + 1);
  if (cps.size() > 2) windows.emplace_back(0, cps.size() - 1);

  double max_z = 0.0;
  for (const auto& [a, b] : windows) {
    const Eigen::MatrixXd X = martingale_basis(cps[a], n, led.dim);
    Eigen::VectorXd y(n);
    for (std::size_t p = 0; p < n; ++p) y(p) = values(cps[b])[p] - values(cps[a])[p];
    const Regression reg = ols_hc0(X, y);
    for (Eigen::Index k = 0; k < reg.coef.size(); ++k) {
      const double c = reg.coef(k), se = reg.stderr_(k);
      double z = 0.0;
      if (se > 0.0)
        z = std::abs(c) / se;
      else if (c != 0.0)
        z = std::numeric_limits<double>::infinity();
      max_z = std::max(max_z, z);
    }
  }

  const LedgerCheckpoint& first = cps.front();
  const LedgerCheckpoint& last = cps.back();
  std::vector<double> m2(n), qv(n);
  for (std::size_t p = 0; p < n; ++p) {
    const double dm = last.M[p] - first.M[p];
    m2[p] = dm * dm;
    qv[p] = last.qv[p] - first.qv[p];
  }
  const MeanStderr em2 = mean_stderr(m2);
  const MeanStderr eqv = mean_stderr(qv);
  const double iso_gap = std::abs(em2.mean - eqv.mean);
  const bool trivial = eqv.mean < 1e-12 && em2.mean < 1e-12;
  const double iso_rel = trivial ? 0.0 : iso_gap / eqv.mean;
  const bool orth_ok = max_z <= 5.0;
  const bool iso_ok = iso_rel <= 0.05;

  CheckReport r;
  r.name = "martingale";
  r.anchor = "square-integrable martingale part of the relative entropy process";
  r.lhs = em2.mean;
  r.rhs = eqv.mean;
  set_gap(r);
  r.rel_gap = iso_rel;
  r.tolerance = 0.05;
  r.pass = orth_ok && iso_ok;
  r.metric("max_coefficient_z", max_z);
  r.metric("orthogonality_pass", orth_ok ? 1.0 : 0.0);
  r.metric("isometry_rel_gap", iso_rel);
  r.metric("isometry_pass", iso_ok ? 1.0 : 0.0);
  r.metric("E_M2_stderr", em2.stderr_);
  r.metric("windows", static_cast<double>(windows.size()));
  if (opts.substitute_entropy_increments) r.notes.push_back("entropy increments substituted for M (negative control)");
  return r;
}

// Equal-mass bins over a scalar key; returns path indices per bin.
struct Bin {
  std::vector<std::size_t> members;
  double key_min = 0.0, key_max = 0.0, key_mean = 0.0;
};

inline std::vector<Bin> equal_mass_bins(std::span<const double> key, int count) {
  require(count >= 1, "bin count must be positive");
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  std::vector<Bin> bins(count);
  const std::size_t n = key.size();
  for (int b = 0; b < count; ++b) {
    const std::size_t lo = n * b / count, hi = n * (b + 1) / count;
    Bin& bin = bins[b];
    bin.members.assign(order.begin() + lo, order.begin() + hi);
    if (bin.members.empty()) continue;
    bin.key_min = key[bin.members.front()];
    bin.key_max = key[bin.members.back()];
    double s = 0.0;
    for (std::size_t i : bin.members) s += key[i];
    bin.key_mean = s / static_cast<double>(bin.members.size());
  }
  return bins;
}

// Binning key: the coordinate in 1D, the radius otherwise.
inline std::vector<double> bin_keys(const LedgerCheckpoint& c, std::size_t n, int d) {
  std::vector<double> k(n);
  for (std::size_t p = 0; p < n; ++p) k[p] = d == 1 ? c.X[p] : norm(c.point(p, d));
  return k;
}

struct DisplacementOptions {
  int bins = 64;
  std::size_t min_per_bin = 30;
  double x_limit = 2.0;
  double tolerance = 0.10;
  double denominator_floor = 1e-2;
};

// Per bin of X_{T-t}: E[R_{t0} - R_{T-t} | bin] against E[F_{t0} - F_{T-t} | bin].
// The left side is estimated from R_{t0} - R_{T-t} - (M_{t0} - M_{T-t}); the
// subtracted increment has zero conditional mean and carries almost all of the
// sampling noise. The plain bin means are reported as metrics.
inline CheckReport trajectorial_displacement_check(const TrajectorialLedger& led, double t, double t0,
                                                   const DisplacementOptions& opts = {}) {
  if (!(t < led.horizon - t0)) fail(ErrorKind::precondition, "empty reversed window");
  const LedgerCheckpoint& a = led.at(t);
  const LedgerCheckpoint& b = led.at(led.horizon - t0);
  const std::size_t n = led.paths;
  const auto bins = equal_mass_bins(bin_keys(a, n, led.dim), opts.bins);

  double worst = 0.0, worst_raw = 0.0, sq = 0.0, sq_raw = 0.0, rhs_abs = 0.0, lhs_sum = 0.0, rhs_sum = 0.0;
  std::size_t used = 0, small = 0;
  for (const Bin& bin : bins) {
    if (bin.members.size() < opts.min_per_bin) {
      ++small;
      continue;
    }
    if (bin.key_min < -opts.x_limit || bin.key_max > opts.x_limit) continue;
    double raw = 0.0, mart = 0.0, r = 0.0;
    for (std::size_t p : bin.members) {
      raw += b.R[p] - a.R[p];
      mart += b.M[p] - a.M[p];
      r += b.F[p] - a.F[p];
    }
    const double m = static_cast<double>(bin.members.size());
    raw /= m;
    mart /= m;
    r /= m;
    const double l = raw - mart;
    const double denom = std::max(std::abs(r), opts.denominator_floor);
    worst = std::max(worst, std::abs(l - r) / denom);
    worst_raw = std::max(worst_raw, std::abs(raw - r) / denom);
    sq += (l - r) * (l - r);
    sq_raw += (raw - r) * (raw - r);
    rhs_abs += std::abs(r);
    lhs_sum += l;
    rhs_sum += r;
    ++used;
  }
  CheckReport rep;
  rep.name = "trajectorial_displacement";
  rep.anchor = "trajectorial time-displacement of relative entropy";
  rep.tolerance = opts.tolerance;
  rep.lhs = used ? lhs_sum / used : 0.0;
  rep.rhs = used ? rhs_sum / used : 0.0;
  set_gap(rep);
  rep.rel_gap = worst;
  rep.pass = used > 0 && worst < opts.tolerance;
  rep.metric("max_bin_rel_discrepancy", worst);
  rep.metric("rms_bin_discrepancy", used ? std::sqrt(sq / used) : 0.0);
  rep.metric("raw_max_bin_rel_discrepancy", worst_raw);
  rep.metric("raw_rms_bin_discrepancy", used ? std::sqrt(sq_raw / used) : 0.0);
  rep.metric("mean_abs_rhs", used ? rhs_abs / used : 0.0);
  rep.metric("bins_used", static_cast<double>(used));
  rep.metric("bins_excluded_small", static_cast<double>(small));
  if (small > 0) rep.notes.push_back(std::to_string(small) + " bins below the minimum count were excluded");
  return rep;
}

// Reports whether the coarse-to-fine RMS discrepancy ratio reaches `min_ratio`.
inline CheckReport displacement_refinement(const CheckReport& coarse, const CheckReport& fine, double min_ratio = 1.6) {
  const double c = *coarse.find("rms_bin_discrepancy");
  const double f = *fine.find("rms_bin_discrepancy");
  CheckReport r;
  r.name = "trajectorial_displacement_refinement";
  r.anchor = "trajectorial time-displacement of relative entropy";
  r.lhs = f > 0.0 ? c / f : std::numeric_limits<double>::infinity();
  r.rhs = 2.0;
  set_gap(r);
  r.tolerance = min_ratio;
  r.refinement_slope = r.lhs;
  r.pass = r.lhs >= min_ratio;
  r.metric("coarse_rms", c);
  r.metric("fine_rms", f);
  return r;
}

struct RateOptions {
  int bins = 64;
  std::size_t min_per_bin = 30;
  double relative_tolerance = 0.05;
};

// Shrinking reversed windows ending at T - t0. The conditional expectation of
// the window quotient uses dR - dM (dM has zero conditional mean) to cut noise.
inline CheckReport trajectorial_rate_check(const TrajectorialLedger& led, double t0, std::span<const double> deltas,
                                           const Potential& pot, PerturbationRef pert, const RateOptions& opts = {}) {
  require(deltas.size() >= 2, "rate check needs at least two windows");
  const double end_t = led.horizon - t0;
  if (!(end_t > 0.0)) fail(ErrorKind::precondition, "empty reversed window");
  const LedgerCheckpoint& e = led.at(end_t);
  const std::size_t n = led.paths;
  const int d = led.dim;

  // limit target at X_{t0}
  std::vector<double> target(n), half_fisher(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Vec g = e.grad(p, d);
    half_fisher[p] = 0.5 * norm2(g);
    target[p] = half_fisher[p];
  }
  if (pert != nullptr)
    for (std::size_t p = 0; p < n; ++p) target[p] += perturbation_drift_term(*pert, pot, e.point(p, d));
  const double scale = pairwise_mean(half_fisher);

  CheckReport r;
  r.name = "trajectorial_rate";
  r.anchor = "limiting trajectorial identity for the relative entropy process";
  std::vector<double> gaps, floors, logd, logg;
  for (double delta : deltas) {
    const LedgerCheckpoint& a = led.at(end_t - delta);
    const auto bins = equal_mass_bins(bin_keys(a, n, d), opts.bins);
    double gap = 0.0, var_floor = 0.0, literal = 0.0;
    for (const Bin& bin : bins) {
      const std::size_t m = bin.members.size();
      if (m < opts.min_per_bin) continue;
      std::vector<double> q(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t p = bin.members[i];
        q[i] = ((e.R[p] - a.R[p]) - (e.M[p] - a.M[p])) / delta - target[p];
      }
      const MeanStderr ms = mean_stderr(q);
      const double w = static_cast<double>(m) / static_cast<double>(n);
      gap += w * std::abs(ms.mean);
      var_floor += w * ms.stderr_;
    }
    for (std::size_t p = 0; p < n; ++p) literal += std::abs((e.R[p] - a.R[p]) / delta - target[p]);
    literal /= static_cast<double>(n);
    gaps.push_back(gap);
    floors.push_back(var_floor);
    r.metric("gap_delta_" + std::to_string(delta), gap);
    r.metric("noise_floor_delta_" + std::to_string(delta), var_floor);
    r.metric("literal_l1_delta_" + std::to_string(delta), literal);
    if (gap > 0.0) {
      logd.push_back(std::log(delta));
      logg.push_back(std::log(gap));
    }
  }
  bool monotone = true;
  for (std::size_t i = 0; i + 1 < gaps.size(); ++i)
    if (gaps[i + 1] > gaps[i] + 2.0 * (floors[i] + floors[i + 1])) monotone = false;
  const double final_gap = gaps.back();
  const double allowed = opts.relative_tolerance * scale + 3.0 * floors.back();
  r.lhs = final_gap;
  r.rhs = 0.0;
  set_gap(r, scale);
  r.tolerance = allowed;
  if (logd.size() >= 2) r.refinement_slope = fit_line(logd, logg).second;
  r.pass = monotone && final_gap < allowed;
  r.metric("half_fisher_at_t0", scale);
  r.metric("monotone", monotone ? 1.0 : 0.0);
  return r;
}

}  // namespace entlab

#endif  // ENTLAB_REVERSAL_HPP
