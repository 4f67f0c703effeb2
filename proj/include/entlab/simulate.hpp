#ifndef ENTLAB_SIMULATE_HPP
#define ENTLAB_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/model.hpp"
#include "entlab/rng.hpp"

namespace entlab {

struct EnsembleState {
  int dim = 1;
  std::vector<double> positions;  // N x dim, row-major
  double time = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t stream_counter = 0;  // forward-noise steps already consumed

  std::size_t size() const { return positions.size() / static_cast<std::size_t>(dim); }

  Vec point(std::size_t i) const {
    Vec x{};
    for (int a = 0; a < dim; ++a) x[a] = positions[i * dim + a];
    return x;
  }

  void validate() const {
    require(dim >= 1 && dim <= kMaxDim, "ensemble dimension must be 1, 2 or 3");
    require(!positions.empty() && positions.size() % dim == 0, "ensemble needs at least one particle");
    for (double v : positions)
      if (!std::isfinite(v)) fail(ErrorKind::precondition, "ensemble contains nonfinite positions");
  }

  // X0 ~ N(mean, var I), drawn from the initial stream.
  static EnsembleState gaussian(std::size_t n, int dim, const Vec& mean, double var, std::uint64_t seed) {
    require(var >= 0.0, "initial variance must be nonnegative");
    EnsembleState s;
    s.dim = dim;
    s.seed = seed;
    s.positions.resize(n * dim);
    const double sd = std::sqrt(var);
    double xi[kMaxDim];
    for (std::size_t i = 0; i < n; ++i) {
      gaussian_block(seed, Stream::initial, i, 0, dim, xi);
      for (int a = 0; a < dim; ++a) s.positions[i * dim + a] = mean[a] + sd * xi[a];
    }
    s.validate();
    return s;
  }

  static EnsembleState from_points(int dim, std::vector<double> positions, std::uint64_t seed, double t = 0.0) {
    EnsembleState s;
    s.dim = dim;
    s.positions = std::move(positions);
    s.seed = seed;
    s.time = t;
    s.validate();
    return s;
  }
};

// Full trajectories: states are N x (steps+1) x d, noise N x steps x d.
struct PathBundle {
  int dim = 1;
  std::size_t paths = 0;
  std::size_t steps = 0;
  double dt = 0.0;
  double start_time = 0.0;
  double activation_time = -1.0;  // negative when unperturbed
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<double> states;
  std::vector<double> noise;

  double time(std::size_t k) const { return start_time + static_cast<double>(k) * dt; }
  std::vector<double> times() const {
    std::vector<double> t(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k) t[k] = time(k);
    return t;
  }
  std::size_t state_index(std::size_t p, std::size_t k) const { return (p * (steps + 1) + k) * dim; }
  std::size_t noise_index(std::size_t p, std::size_t k) const { return (p * steps + k) * dim; }

  Vec state(std::size_t p, std::size_t k) const {
    Vec x{};
    for (int a = 0; a < dim; ++a) x[a] = states[state_index(p, k) + a];
    return x;
  }
  Vec increment(std::size_t p, std::size_t k) const {
    Vec x{};
    for (int a = 0; a < dim; ++a) x[a] = noise[noise_index(p, k) + a];
    return x;
  }
  bool has_noise() const { return !noise.empty(); }
};

// One Euler-Maruyama step of the ensemble, handed to observers before the
// next step overwrites the buffers.
struct StepView {
  std::size_t step = 0;
  double t = 0.0;  // left endpoint
  double dt = 0.0;
  int dim = 1;
  std::span<const double> before;
  std::span<const double> noise;  // sqrt(dt) xi
  std::span<const double> after;
};

struct SimOptions {
  bool record_paths = false;
  std::function<void(const StepView&)> observer;
};

struct ForwardResult {
  EnsembleState final_state;
  std::optional<PathBundle> paths;
};

inline constexpr double kBlowUpRadius = 1e6;

// Increment drift(x, t) dt + noise; the replay check recomputes exactly this.
inline Vec euler_increment(const Potential& pot, PerturbationRef pert, const Vec& x, double t, double dt,
                           const Vec& noise) {
  const bool on = pert != nullptr && pert->active(t);
  const Vec g = pot.gradient(x);
  const Vec b = perturbation_field(pert, x, on);
  Vec inc{};
  for (int a = 0; a < pot.dim(); ++a) inc[a] = -(g[a] + b[a]) * dt + noise[a];
  return inc;
}

// Largest Gershgorin bound of Hess(psi) over (a strided subset of) the particles.
inline double local_lipschitz_estimate(const Potential& pot, const EnsembleState& s, std::size_t max_probe = 4096) {
  const std::size_t n = s.size();
  const std::size_t stride = std::max<std::size_t>(1, n / max_probe);
  std::size_t far = 0;
  double far_r = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = norm2(s.point(i));
    if (r > far_r) {
      far_r = r;
      far = i;
    }
  }
  auto bound = [&](std::size_t i) {
    const Mat h = pot.hessian(s.point(i));
    double worst = 0.0;
    for (int r = 0; r < s.dim; ++r) {
      double row = 0.0;
      for (int c = 0; c < s.dim; ++c) row += std::abs(h[r][c]);
      worst = std::max(worst, row);
    }
    return worst;
  };
  double L = bound(far);
  for (std::size_t i = 0; i < n; i += stride) L = std::max(L, bound(i));
  return L;
}

inline std::uint64_t forward_config_hash(const EnsembleState& init, const Potential& pot, PerturbationRef pert,
                                         double dt, double T) {
  std::ostringstream os;
  os.precision(17);
  os << signature(pot) << ';' << signature(pert) << ";dt=" << dt << ";T=" << T << ";seed=" << init.seed
     << ";n=" << init.size() << ";t=" << init.time << ";ctr=" << init.stream_counter;
  std::uint64_t h = fnv1a64(os.str());
  for (double v : init.positions) {
    const auto* bytes = reinterpret_cast<const char*>(&v);
    h = fnv1a64(std::string_view(bytes, sizeof v), h);
  }
  return h;
}

inline std::size_t step_count(double dt, double T) {
  require(std::isfinite(dt) && std::isfinite(T) && dt > 0.0, "time step must be positive and finite");
  require(dt <= T, "time step must not exceed the horizon (dt <= T)");
  const double r = T / dt;
  const double n = std::round(r);
  require(std::abs(r - n) <= 1e-9 * r, "horizon must be an integer multiple of dt");
  require(n < 4294967295.0, "too many steps for the stream counter");
  return static_cast<std::size_t>(n);
}

// Euler-Maruyama for dX = -(grad psi + beta 1{t > t0}) dt + dW.
inline ForwardResult simulate_forward(const EnsembleState& init, const Potential& pot, PerturbationRef pert, double dt,
                                      double T, const SimOptions& opts = {}) {
  init.validate();
  require(pot.dim() == init.dim, "potential and ensemble dimensions differ");
  if (pert != nullptr) require(pert->dim() == init.dim, "perturbation and ensemble dimensions differ");
  const std::size_t steps = step_count(dt, T);
  const double L = local_lipschitz_estimate(pot, init);
  if (!(dt * L < 1.0)) {
    std::ostringstream os;
    os << "stability bound violated: dt*L=" << dt * L << " >= 1 (local Lipschitz estimate " << L << ")";
    fail(ErrorKind::precondition, os.str());
  }

  const int d = init.dim;
  const std::size_t n = init.size();
  const double sq = std::sqrt(dt);
  ForwardResult res;
  res.final_state = init;
  if (opts.record_paths) {
    PathBundle b;
    b.dim = d;
    b.paths = n;
    b.steps = steps;
    b.dt = dt;
    b.start_time = init.time;
    b.activation_time = pert != nullptr ? pert->activation_time() : -1.0;
    b.seed = init.seed;
    b.config_hash = forward_config_hash(init, pot, pert, dt, T);
    b.states.resize(n * (steps + 1) * d);
    b.noise.resize(n * steps * d);
    for (std::size_t p = 0; p < n; ++p)
      for (int a = 0; a < d; ++a) b.states[b.state_index(p, 0) + a] = init.positions[p * d + a];
    res.paths = std::move(b);
  }

  std::vector<double> cur = init.positions, next(n * d), noise(n * d);
  double xi[kMaxDim];
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = init.time + static_cast<double>(k) * dt;
    const auto ctr = static_cast<std::uint32_t>(init.stream_counter + k);
    for (std::size_t p = 0; p < n; ++p) {
      gaussian_block(init.seed, Stream::forward_noise, p, ctr, d, xi);
      Vec x{}, w{};
      for (int a = 0; a < d; ++a) {
        x[a] = cur[p * d + a];
        w[a] = sq * xi[a];
        noise[p * d + a] = w[a];
      }
      const Vec inc = euler_increment(pot, pert, x, t, dt, w);
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        const double v = x[a] + inc[a];
        next[p * d + a] = v;
        r2 += v * v;
      }
      if (!(r2 <= kBlowUpRadius * kBlowUpRadius)) fail(ErrorKind::numeric, "blow-up: reduce Δt or check potential");
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
  res.final_state.time = init.time + static_cast<double>(steps) * dt;
  res.final_state.stream_counter = static_cast<std::uint32_t>(init.stream_counter + steps);
  return res;
}

// Index of the first (path, step) whose stored state is not bit-identical to
// the recomputed Euler update, or nullopt when the bundle replays exactly.
inline std::optional<std::pair<std::size_t, std::size_t>> replay_mismatch(const PathBundle& b, const Potential& pot,
                                                                          PerturbationRef pert) {
  require(b.has_noise(), "bundle has no stored noise increments");
  for (std::size_t p = 0; p < b.paths; ++p)
    for (std::size_t k = 0; k < b.steps; ++k) {
      const Vec x = b.state(p, k);
      const Vec inc = euler_increment(pot, pert, x, b.time(k), b.dt, b.increment(p, k));
      const Vec y = b.state(p, k + 1);
      for (int a = 0; a < b.dim; ++a)
        if (x[a] + inc[a] != y[a]) return std::make_pair(p, k);
    }
  return std::nullopt;
}

// Per-step variance of the stored increments against dt; passes when every
// step is within 5 standard errors.
inline CheckReport noise_variance_check(const PathBundle& b) {
  require(b.has_noise(), "bundle has no stored noise increments");
  const std::size_t m = b.paths * b.dim;
  require(m >= 2, "insufficient sample");
  CheckReport r;
  r.name = "noise_variance";
  r.anchor = "Brownian increments";
  r.tolerance = 5.0;
  const double se = b.dt * std::sqrt(2.0 / static_cast<double>(m - 1));
  double worst = 0.0;
  std::vector<double> sq(m);
  for (std::size_t k = 0; k < b.steps; ++k) {
    for (std::size_t p = 0; p < b.paths; ++p)
      for (int a = 0; a < b.dim; ++a) {
        const double w = b.noise[b.noise_index(p, k) + a];
        sq[p * b.dim + a] = w * w;
      }
    worst = std::max(worst, std::abs(pairwise_mean(sq) - b.dt) / se);
  }
  r.lhs = worst;
  r.rhs = 0.0;
  set_gap(r, 1.0);
  r.pass = worst <= r.tolerance;
  return r;
}

struct MomentSeries {
  std::vector<double> times;
  std::vector<double> second_moment;
  std::vector<double> stderr_;
};

inline void append_moment(MomentSeries& s, double t, std::span<const double> positions, int dim) {
  const std::size_t n = positions.size() / dim;
  std::vector<double> r2(n);
  for (std::size_t p = 0; p < n; ++p) {
    double v = 0.0;
    for (int a = 0; a < dim; ++a) v += positions[p * dim + a] * positions[p * dim + a];
    r2[p] = v;
  }
  s.times.push_back(t);
  if (n >= 2) {
    const MeanStderr ms = mean_stderr(r2);
    s.second_moment.push_back(ms.mean);
    s.stderr_.push_back(ms.stderr_);
  } else {
    s.second_moment.push_back(r2[0]);
    s.stderr_.push_back(0.0);
  }
}

inline MomentSeries second_moment_series(const PathBundle& b) {
  require(b.paths >= 1, "empty bundle");
  MomentSeries s;
  std::vector<double> slice(b.paths * b.dim);
  for (std::size_t k = 0; k <= b.steps; ++k) {
    for (std::size_t p = 0; p < b.paths; ++p)
      for (int a = 0; a < b.dim; ++a) slice[p * b.dim + a] = b.states[b.state_index(p, k) + a];
    append_moment(s, b.time(k), slice, b.dim);
  }
  return s;
}

// Streaming variant: attach as an observer, call start() with the initial state.
class MomentTracker {
 public:
  explicit MomentTracker(int every = 1) : every_(every) { require(every >= 1, "record interval must be positive"); }

  void start(const EnsembleState& s) { append_moment(series_, s.time, s.positions, s.dim); }
  void operator()(const StepView& v) {
    if ((v.step + 1) % every_ == 0) append_moment(series_, v.t + v.dt, v.after, v.dim);
  }
  const MomentSeries& series() const { return series_; }

 private:
  int every_;
  MomentSeries series_;
};

// sup{d - 2 x.(grad psi + beta 1{t>t0})(x) : |x| <= R}, with the perturbation
// both off and on, by a dense grid scan.
inline double gronwall_constant(const Potential& pot, PerturbationRef pert, double R) {
  const int d = pot.dim();
  const int per_axis = d == 1 ? 4001 : (d == 2 ? 401 : 61);
  double sup = -std::numeric_limits<double>::infinity();
  for (const Vec& x : box_samples(d, -R, R, per_axis)) {
    if (norm2(x) > R * R) continue;
    const Vec g = pot.gradient(x);
    double v = d - 2.0 * dot(x, g);
    if (pert != nullptr) v = std::max(v, d - 2.0 * dot(x, g + pert->field(x)));
    if (!std::isfinite(v)) fail(ErrorKind::numeric, "C_R scan diverged");
    sup = std::max(sup, v);
  }
  return sup;
}

// m0 e^{2Ct} + (C_R + d)(e^{2Ct} - 1)/(2C).
inline double gronwall_bound(double m0, double C, double CR, int d, double t) {
  const double e = std::exp(2.0 * C * t);
  return m0 * e + (CR + d) * std::expm1(2.0 * C * t) / (2.0 * C);
}

inline CheckReport gronwall_envelope_check(const MomentSeries& s, const Potential& pot, PerturbationRef pert,
                                           double C, double R) {
  require(!s.times.empty(), "empty moment series");
  const int d = pot.dim();
  const double lim = std::max(4.0 * R, 8.0);
  const CheckReport drift = check_drift_condition(pot, C, R, box_samples(d, -lim, lim, d == 1 ? 2001 : 121));
  require(drift.pass, "C and R do not satisfy the drift condition");
  const double CR = gronwall_constant(pot, pert, R);
  const double m0 = s.second_moment.front();
  const double t0 = s.times.front();

  CheckReport r;
  r.name = "gronwall_envelope";
  r.anchor = "second-moment Gronwall bound";
  r.tolerance = 1.0;
  double worst = 0.0;
  long long first_bad = -1;
  // the ratio is 1 at the first sample by construction
  for (std::size_t k = s.times.size() > 1 ? 1 : 0; k < s.times.size(); ++k) {
    const double bound = gronwall_bound(m0, C, CR, d, s.times[k] - t0);
    const double ratio = s.second_moment[k] / bound;
    worst = std::max(worst, ratio);
    if (ratio > 1.0 + 1e-12 && first_bad < 0) first_bad = static_cast<long long>(k);
  }
  r.lhs = worst;
  r.rhs = 1.0;
  set_gap(r);
  r.pass = first_bad < 0;
  r.metric("C_R", CR);
  r.metric("first_violation_index", static_cast<double>(first_bad));
  if (first_bad >= 0) {
    std::ostringstream os;
    os << "second moment exceeds the envelope at time index " << first_bad << " (t=" << s.times[first_bad] << ")";
    r.notes.push_back(os.str());
  }
  return r;
}

inline CheckReport gronwall_envelope_check(const PathBundle& b, const Potential& pot, PerturbationRef pert, double C,
                                           double R) {
  require(b.paths >= 1, "empty bundle");
  return gronwall_envelope_check(second_moment_series(b), pot, pert, C, R);
}

}  // namespace entlab

#endif  // ENTLAB_SIMULATE_HPP
