#ifndef ENTLAB_TRANSPORT_HPP
#define ENTLAB_TRANSPORT_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/dissipation.hpp"
#include "entlab/entropy.hpp"
#include "entlab/fpe.hpp"
#include "entlab/grid.hpp"
#include "entlab/model.hpp"

namespace entlab {

// ---------------------------------------------------------------------------
// 1D quantile functions

// Quantile function of a density that is uniform inside each cell: piecewise
// linear in u with breakpoints at the cumulative cell masses.
class Quantile1D {
 public:
  explicit Quantile1D(const GridDensity& p, double tol = 1e-8) {
    require(p.grid.dim == 1, "quantile functions need a 1D density");
    p.require_normalized(tol);
    require(p.min_value() >= 0.0, "density must be nonnegative");
    const Axis& ax = p.grid.axes[0];
    const double h = ax.spacing();
    const double total = p.mass();
    double c = 0.0;
    for (int k = 0; k < ax.cells; ++k) {
      const double m = p.values[k] * h / total;
      if (m <= 0.0) continue;
      if (u_.empty()) {
        u_.push_back(0.0);
        x_.push_back(ax.lower + k * h);
      } else if (x_.back() != ax.lower + k * h) {
        // gap of empty cells: jump in x at fixed u
        u_.push_back(c);
        x_.push_back(ax.lower + k * h);
      }
      c += m;
      u_.push_back(c);
      x_.push_back(ax.lower + (k + 1) * h);
    }
    require(!u_.empty(), "density has no mass");
    u_.back() = 1.0;
  }

  // Equal-weight samples; the quantile is a step function, stored as
  // zero-width ramps.
  static Quantile1D from_samples(std::vector<double> xs) {
    require(!xs.empty(), "empty sample");
    std::sort(xs.begin(), xs.end());
    Quantile1D q;
    const double w = 1.0 / static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      q.u_.push_back(i * w);
      q.x_.push_back(xs[i]);
      q.u_.push_back((i + 1) * w);
      q.x_.push_back(xs[i]);
    }
    q.u_.back() = 1.0;
    q.step_ = true;
    return q;
  }

  const std::vector<double>& u() const { return u_; }
  const std::vector<double>& x() const { return x_; }
  bool is_step() const { return step_; }

  // Value on the segment containing u (right-continuous at jumps).
  double operator()(double u) const {
    auto it = std::upper_bound(u_.begin(), u_.end(), u);
    if (it == u_.begin()) return x_.front();
    if (it == u_.end()) return x_.back();
    const std::size_t j = static_cast<std::size_t>(it - u_.begin());
    const double u0 = u_[j - 1], u1 = u_[j];
    if (u1 == u0) return x_[j];
    return x_[j - 1] + (x_[j] - x_[j - 1]) * (u - u0) / (u1 - u0);
  }

  // Left and right limits on (u0, u1) for a segment fully inside one piece.
  std::pair<double, double> segment(double u0, double u1) const {
    const double mid = 0.5 * (u0 + u1);
    auto it = std::upper_bound(u_.begin(), u_.end(), mid);
    const std::size_t j = std::clamp<std::size_t>(static_cast<std::size_t>(it - u_.begin()), 1, u_.size() - 1);
    const double a = u_[j - 1], b = u_[j];
    if (b == a) return {x_[j], x_[j]};
    auto at = [&](double u) { return x_[j - 1] + (x_[j] - x_[j - 1]) * (u - a) / (b - a); };
    return {at(u0), at(u1)};
  }

 private:
  Quantile1D() = default;
  std::vector<double> u_, x_;
  bool step_ = false;
};

namespace detail {

inline std::vector<double> merged_breaks(const Quantile1D& a, const Quantile1D& b) {
  std::vector<double> u;
  u.reserve(a.u().size() + b.u().size());
  std::merge(a.u().begin(), a.u().end(), b.u().begin(), b.u().end(), std::back_inserter(u));
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

}  // namespace detail

// W2^2 = int_0^1 (Qa - Qb)^2 du, integrated exactly piece by piece.
inline double w2_squared_1d(const Quantile1D& a, const Quantile1D& b) {
  const std::vector<double> u = detail::merged_breaks(a, b);
  std::vector<double> terms;
  terms.reserve(u.size());
  for (std::size_t i = 0; i + 1 < u.size(); ++i) {
    const double du = u[i + 1] - u[i];
    if (du <= 0.0) continue;
    const auto [a0, a1] = a.segment(u[i], u[i + 1]);
    const auto [b0, b1] = b.segment(u[i], u[i + 1]);
    const double d0 = a0 - b0, d1 = a1 - b1;
    terms.push_back(du * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0);
  }
  return std::max(0.0, pairwise_sum(terms));
}

inline double w2_1d(const GridDensity& a, const GridDensity& b) {
  return std::sqrt(w2_squared_1d(Quantile1D(a), Quantile1D(b)));
}

inline double w2_1d_samples(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(w2_squared_1d(Quantile1D::from_samples({a.begin(), a.end()}),
                                 Quantile1D::from_samples({b.begin(), b.end()})));
}

// Equal-weight 1D samples against a grid density.
inline double w2_samples_to_density(std::span<const double> samples, const GridDensity& p) {
  return std::sqrt(w2_squared_1d(Quantile1D::from_samples({samples.begin(), samples.end()}), Quantile1D(p)));
}

// ---------------------------------------------------------------------------
// Transport plans

struct WeightedCloud {
  int dim = 1;
  std::vector<Vec> points;
  std::vector<double> weights;

  std::size_t size() const { return points.size(); }
};

// Cell-centre atoms with cell-mass weights; cells below `min_mass` are dropped
// and the rest renormalized.
inline WeightedCloud grid_cloud(const GridDensity& p, double min_mass = 0.0) {
  WeightedCloud c;
  c.dim = p.grid.dim;
  const double vol = p.grid.cell_volume();
  double total = 0.0;
  for (std::size_t k = 0; k < p.values.size(); ++k) {
    const double m = p.values[k] * vol;
    if (m <= min_mass) continue;
    c.points.push_back(p.grid.center(k));
    c.weights.push_back(m);
    total += m;
  }
  require(total > 0.0, "density has no mass");
  for (double& w : c.weights) w /= total;
  return c;
}

inline WeightedCloud sample_cloud(std::span<const double> pts, int dim) {
  require(dim >= 1 && dim <= kMaxDim && pts.size() % dim == 0 && !pts.empty(), "malformed point set");
  WeightedCloud c;
  c.dim = dim;
  const std::size_t n = pts.size() / dim;
  for (std::size_t i = 0; i < n; ++i) {
    Vec x{};
    for (int a = 0; a < dim; ++a) x[a] = pts[i * dim + a];
    c.points.push_back(x);
  }
  c.weights.assign(n, 1.0 / static_cast<double>(n));
  return c;
}

struct TransportPlan {
  std::size_t source_size = 0, target_size = 0;
  std::vector<std::tuple<std::size_t, std::size_t, double>> coupling;  // (i, j, mass)
  double cost = 0.0;                                                    // W2^2

  double max_marginal_error(std::span<const double> a, std::span<const double> b) const {
    std::vector<double> r(source_size, 0.0), c(target_size, 0.0);
    for (const auto& [i, j, m] : coupling) {
      r[i] += m;
      c[j] += m;
    }
    double e = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) e = std::max(e, std::abs(r[i] - a[i]));
    for (std::size_t j = 0; j < c.size(); ++j) e = std::max(e, std::abs(c[j] - b[j]));
    return e;
  }
};

// Monotone (north-west corner) coupling of two 1D densities on their cells.
inline TransportPlan monotone_plan_1d(const GridDensity& a, const GridDensity& b) {
  require(a.grid.dim == 1 && b.grid.dim == 1, "monotone plans are 1D");
  a.require_normalized();
  b.require_normalized();
  TransportPlan plan;
  plan.source_size = a.values.size();
  plan.target_size = b.values.size();
  const double ha = a.grid.spacing(0), hb = b.grid.spacing(0);
  std::size_t i = 0, j = 0;
  double ra = a.values[0] * ha, rb = b.values[0] * hb;
  while (i < plan.source_size && j < plan.target_size) {
    const double m = std::min(ra, rb);
    if (m > 0.0) plan.coupling.emplace_back(i, j, m);
    ra -= m;
    rb -= m;
    if (ra <= 0.0 && ++i < plan.source_size) ra = a.values[i] * ha;
    if (rb <= 0.0 && ++j < plan.target_size) rb = b.values[j] * hb;
  }
  plan.cost = w2_squared_1d(Quantile1D(a), Quantile1D(b));
  return plan;
}

// ---------------------------------------------------------------------------
// Entropic transport (log-domain Sinkhorn with epsilon scaling)

struct SinkhornOptions {
  double marginal_tol = 1e-8;
  long max_iterations = 100000;
  bool want_plan = false;
};

struct SinkhornResult {
  double value = 0.0;         // OT_eps = <a, f> + <b, g>
  double transport_cost = 0.0;  // <C, pi>
  double marginal_error = 0.0;
  long iterations = 0;
  std::optional<TransportPlan> plan;
};

namespace detail {

struct CloudMatrix {
  Eigen::MatrixXd X;  // n x d
  Eigen::VectorXd sq;
  Eigen::VectorXd logw;
};

inline CloudMatrix cloud_matrix(const WeightedCloud& c) {
  CloudMatrix m;
  const Eigen::Index n = static_cast<Eigen::Index>(c.size());
  m.X.resize(n, c.dim);
  m.sq.resize(n);
  m.logw.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int a = 0; a < c.dim; ++a) m.X(i, a) = c.points[i][a];
    m.sq(i) = m.X.row(i).squaredNorm();
    m.logw(i) = std::log(c.weights[i]);
  }
  return m;
}

// out_i = -eps log sum_j exp(logw_j + (pot_j - C_ij) / eps)
inline void softmin(const CloudMatrix& from, const CloudMatrix& to, const Eigen::VectorXd& pot, double eps,
                    Eigen::VectorXd& out) {
  const Eigen::Index n = from.X.rows();
  out.resize(n);
  Eigen::ArrayXd v(to.X.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd cross = to.X * from.X.row(i).transpose();
    v = to.logw.array() + (pot.array() - (from.sq(i) + to.sq.array() - 2.0 * cross.array())) / eps;
    const double mx = v.maxCoeff();
    out(i) = -eps * (mx + std::log((v - mx).exp().sum()));
  }
}

// Row sums of pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps), minus a_i, in L1.
inline double row_error(const CloudMatrix& A, const CloudMatrix& B, const Eigen::VectorXd& f, const Eigen::VectorXd& g,
                        double eps, double* cost = nullptr) {
  double err = 0.0, c = 0.0;
  for (Eigen::Index i = 0; i < A.X.rows(); ++i) {
    const Eigen::VectorXd cross = B.X * A.X.row(i).transpose();
    const Eigen::ArrayXd C = A.sq(i) + B.sq.array() - 2.0 * cross.array();
    const Eigen::ArrayXd pi = (A.logw(i) + B.logw.array() + (f(i) + g.array() - C) / eps).exp();
    err += std::abs(pi.sum() - std::exp(A.logw(i)));
    if (cost) c += (pi * C).sum();
  }
  if (cost) *cost = c;
  return err;
}

inline double squared_diameter(const WeightedCloud& a, const WeightedCloud& b) {
  Vec lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto* c : {&a, &b})
    for (const Vec& x : c->points)
      for (int k = 0; k < c->dim; ++k) {
        lo[k] = std::min(lo[k], x[k]);
        hi[k] = std::max(hi[k], x[k]);
      }
  double s = 0.0;
  for (int k = 0; k < a.dim; ++k) s += (hi[k] - lo[k]) * (hi[k] - lo[k]);
  return s;
}

}  // namespace detail

// Squared length scale used to validate epsilon: squared diameter of the joint bounding box.
inline double transport_scale2(const WeightedCloud& a, const WeightedCloud& b) {
  return std::max(detail::squared_diameter(a, b), 1e-300);
}

inline SinkhornResult sinkhorn(const WeightedCloud& a, const WeightedCloud& b, double eps,
                               const SinkhornOptions& opts = {}) {
  if (!(eps > 0.0)) fail(ErrorKind::precondition, "use w2_1d or network-simplex path");
  require(a.dim == b.dim, "clouds must share a dimension");
  require(a.size() <= 10000 && b.size() <= 10000, "entropic transport is limited to 1e4 support points");
  const auto A = detail::cloud_matrix(a);
  const auto B = detail::cloud_matrix(b);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(A.X.rows()), g = Eigen::VectorXd::Zero(B.X.rows());
  const bool symmetric = &a == &b || (a.points == b.points && a.weights == b.weights);
  double stage = std::max(eps, transport_scale2(a, b));
  SinkhornResult res;
  double err = std::numeric_limits<double>::infinity();
  while (true) {
    const bool last = stage <= eps;
    const double tol = last ? opts.marginal_tol : 1e-3;
    for (long it = 0;; ++it) {
      if (symmetric) {
        Eigen::VectorXd t;
        detail::softmin(A, A, f, stage, t);
        f = 0.5 * (f + t);
        g = f;
      } else {
        detail::softmin(A, B, g, stage, f);
        detail::softmin(B, A, f, stage, g);
      }
      ++res.iterations;
      if (it % 5 == 4 || res.iterations >= opts.max_iterations) {
        err = detail::row_error(A, B, f, g, stage);
        if (err < tol) break;
      }
      if (res.iterations >= opts.max_iterations) {
        std::ostringstream os;
        os << "Sinkhorn did not converge in " << opts.max_iterations << " iterations; marginal error " << err;
        fail(ErrorKind::numeric, os.str());
      }
    }
    if (last) break;
    stage = std::max(eps, 0.5 * stage);
  }
  res.marginal_error = detail::row_error(A, B, f, g, eps, &res.transport_cost);
  res.value = f.dot(A.logw.array().exp().matrix()) + g.dot(B.logw.array().exp().matrix());
  if (opts.want_plan) {
    require(a.size() * b.size() <= 4000000, "plan output is limited to 4e6 entries");
    const Eigen::Index n = A.X.rows(), m = B.X.rows();
    Eigen::MatrixXd P(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd cross = B.X * A.X.row(i).transpose();
      const Eigen::ArrayXd C = A.sq(i) + B.sq.array() - 2.0 * cross.array();
      P.row(i) = (A.logw(i) + B.logw.array() + (f(i) + g.array() - C) / eps).exp().matrix().transpose();
    }
    // round onto the transport polytope
    const Eigen::VectorXd aw = A.logw.array().exp().matrix(), bw = B.logw.array().exp().matrix();
    const Eigen::VectorXd rs = P.rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i)
      if (rs(i) > aw(i)) P.row(i) *= aw(i) / rs(i);
    const Eigen::VectorXd cs = P.colwise().sum().transpose();
    for (Eigen::Index j = 0; j < m; ++j)
      if (cs(j) > bw(j)) P.col(j) *= bw(j) / cs(j);
    const Eigen::VectorXd er = aw - P.rowwise().sum(), ec = bw - P.colwise().sum().transpose();
    const double s = er.sum();
    if (s > 0.0) P += er * ec.transpose() / s;
    TransportPlan plan;
    plan.source_size = a.size();
    plan.target_size = b.size();
    double cost = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        if (P(i, j) > 0.0) {
          plan.coupling.emplace_back(i, j, P(i, j));
          cost += P(i, j) * norm2(a.points[i] - b.points[j]);
        }
    plan.cost = cost;
    res.plan = std::move(plan);
  }
  return res;
}

struct EntropicResult {
  double distance = 0.0;  // sqrt of the debiased divergence
  double divergence = 0.0;
  double eps = 0.0;
  std::optional<TransportPlan> plan;
};

// Debiased Sinkhorn divergence S = OT(a, b) - OT(a, a)/2 - OT(b, b)/2.
inline EntropicResult w2_entropic(const WeightedCloud& a, const WeightedCloud& b, double eps,
                                  const SinkhornOptions& opts = {}) {
  if (!(eps > 0.0)) fail(ErrorKind::precondition, "use w2_1d or network-simplex path");
  const double L2 = transport_scale2(a, b);
  const double rel = eps / L2;
  if (rel < 1e-3 * (1.0 - 1e-12) || rel > 1.0 + 1e-12) {
    std::ostringstream os;
    os << "entropic epsilon must lie in [1e-3, 1] times the squared length scale " << L2 << ", got " << eps;
    fail(ErrorKind::precondition, os.str());
  }
  SinkhornOptions self = opts;
  self.want_plan = false;
  const auto ab = sinkhorn(a, b, eps, opts);
  const auto aa = sinkhorn(a, a, eps, self);
  const auto bb = sinkhorn(b, b, eps, self);
  EntropicResult r;
  r.divergence = ab.value - 0.5 * (aa.value + bb.value);
  r.distance = std::sqrt(std::max(0.0, r.divergence));
  r.eps = eps;
  r.plan = ab.plan;
  return r;
}

// Debiased divergences over an epsilon sweep, extrapolated to eps = 0.
inline double w2_entropic_extrapolated(const WeightedCloud& a, const WeightedCloud& b, std::span<const double> eps,
                                       const SinkhornOptions& opts = {}) {
  require(!eps.empty(), "empty epsilon sweep");
  std::vector<double> xs, ys;
  for (double e : eps) {
    xs.push_back(e);
    ys.push_back(w2_entropic(a, b, e, opts).divergence);
  }
  const double s = eps.size() == 1 ? ys[0] : extrapolate_to_zero(xs, ys);
  return std::sqrt(std::max(0.0, s));
}

// Default sweep: eps = {4, 2, 1} x 1e-3 of the squared length scale.
inline double w2_clouds(const WeightedCloud& a, const WeightedCloud& b) {
  const double L2 = transport_scale2(a, b);
  const std::vector<double> eps{4e-3 * L2, 2e-3 * L2, 1e-3 * L2};
  return w2_entropic_extrapolated(a, b, eps);
}

// W2 between grid densities: exact quantiles in 1D, entropic on coarsened clouds in 2D.
inline double w2_grid(const GridDensity& a, const GridDensity& b, int coarsen_factor = 0) {
  require(a.grid.dim == b.grid.dim, "densities must share a dimension");
  if (a.grid.dim == 1) return w2_1d(a, b);
  if (coarsen_factor <= 0) coarsen_factor = std::max(1, a.grid.nx() / 32);
  const GridDensity ca = coarsen(a, coarsen_factor), cb = coarsen(b, coarsen_factor);
  return w2_clouds(grid_cloud(ca, 1e-14), grid_cloud(cb, 1e-14));
}

// ---------------------------------------------------------------------------
// Displacement interpolation (1D)

struct GeodesicCurve {
  GridDensity start, end;
  double a = 0.0, b = 1.0;
  std::vector<double> times;
  std::vector<GridDensity> densities;
};

// Monotone map T = Qb o Fa evaluated at points.
inline std::vector<double> monotone_map(const GridDensity& a, const GridDensity& b, std::span<const double> xs) {
  const Quantile1D qb(b);
  const Axis& ax = a.grid.axes[0];
  const double h = ax.spacing();
  std::vector<double> cdf(ax.cells + 1, 0.0);
  for (int k = 0; k < ax.cells; ++k) cdf[k + 1] = cdf[k] + a.values[k] * h;
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) {
    const double u = std::clamp((x - ax.lower) / h, 0.0, static_cast<double>(ax.cells));
    const int k = std::min(static_cast<int>(u), ax.cells - 1);
    const double f = cdf[k] + (u - k) * (cdf[k + 1] - cdf[k]);
    out.push_back(qb(std::clamp(f, 0.0, 1.0)));
  }
  return out;
}

// Pushforward of mu_a under ((b - t) Id + (t - a) T) / (b - a), binned exactly on mu_a's grid.
inline GridDensity displacement_interpolate(const GridDensity& mu_a, const GridDensity& mu_b, double t, double a = 0.0,
                                            double b = 1.0) {
  require(mu_a.grid.dim == 1, "displacement interpolation is 1D");
  require(mu_a.grid.same_as(mu_b.grid), "endpoints must share a grid");
  require(b > a, "interpolation interval must be nonempty");
  if (t < a || t > b) fail(ErrorKind::precondition, "interpolation time outside [a, b]");
  const double s = (t - a) / (b - a);
  GridDensity out = mu_a;
  out.time = t;
  if (s == 0.0 || mu_a.values == mu_b.values) return out;
  if (s == 1.0) {
    out.values = mu_b.values;
    return out;
  }
  const Quantile1D qa(mu_a), qb(mu_b);
  const std::vector<double> u = detail::merged_breaks(qa, qb);
  // Q_t is piecewise linear on the merged breakpoints; invert it at each cell edge.
  std::vector<double> qu(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    // right limit at a breakpoint, left limit at u = 1
    const double lo = i + 1 < u.size() ? u[i] : u[i - 1];
    const double hi = i + 1 < u.size() ? u[i + 1] : u[i];
    const auto [a0, a1] = qa.segment(lo, hi);
    const auto [b0, b1] = qb.segment(lo, hi);
    qu[i] = i + 1 < u.size() ? (1.0 - s) * a0 + s * b0 : (1.0 - s) * a1 + s * b1;
  }
  const Axis& ax = mu_a.grid.axes[0];
  const double h = ax.spacing();
  auto cdf_at = [&](double x) {
    if (x <= qu.front()) return 0.0;
    if (x >= qu.back()) return 1.0;
    // last segment whose left value is <= x
    std::size_t i = static_cast<std::size_t>(std::upper_bound(qu.begin(), qu.end(), x) - qu.begin()) - 1;
    // on segment i the map runs from its right-limit start to the left limit of the next piece
    const auto [a0, a1] = qa.segment(u[i], u[i + 1]);
    const auto [b0, b1] = qb.segment(u[i], u[i + 1]);
    const double x0 = (1.0 - s) * a0 + s * b0, x1 = (1.0 - s) * a1 + s * b1;
    if (x >= x1) return u[i + 1];
    if (x1 <= x0) return u[i];
    return u[i] + (u[i + 1] - u[i]) * (x - x0) / (x1 - x0);
  };
  double prev = cdf_at(ax.lower);
  require(prev == 0.0, "interpolated density leaves the grid");
  for (int k = 0; k < ax.cells; ++k) {
    const double next = cdf_at(ax.lower + (k + 1) * h);
    out.values[k] = std::max(0.0, next - prev) / h;
    prev = next;
  }
  return out;
}

inline GeodesicCurve geodesic(const GridDensity& mu_a, const GridDensity& mu_b, std::span<const double> times,
                              double a = 0.0, double b = 1.0) {
  GeodesicCurve c{mu_a, mu_b, a, b, {times.begin(), times.end()}, {}};
  for (double t : times) c.densities.push_back(displacement_interpolate(mu_a, mu_b, t, a, b));
  return c;
}

// Largest relative deviation of W2(mu_u, mu_v) from (v - u)/(b - a) W2(mu_a, mu_b) over all pairs.
inline double constant_speed_defect(const GeodesicCurve& c) {
  const double full = w2_1d(c.start, c.end);
  if (full == 0.0) return 0.0;
  double worst = 0.0;
  for (std::size_t i = 0; i < c.times.size(); ++i)
    for (std::size_t j = i + 1; j < c.times.size(); ++j) {
      const double expect = std::abs(c.times[j] - c.times[i]) / (c.b - c.a) * full;
      if (expect == 0.0) continue;
      worst = std::max(worst, std::abs(w2_1d(c.densities[i], c.densities[j]) - expect) / expect);
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Checks

namespace detail {

inline void require_sweep(std::span<const double> deltas) {
  if (deltas.size() < 3) fail(ErrorKind::precondition, "window sweep shorter than 3");
  for (double d : deltas) require(d > 0.0, "window widths must be positive");
}

// E[|grad R + 2 beta|^2] and E[grad R . (grad R + 2 beta)] at one density.
struct VelocityMoments {
  double speed2 = 0.0;
  double inner = 0.0;
  double fisher = 0.0;
};

inline VelocityMoments velocity_moments(const GridDensity& p, const Potential& pot, PerturbationRef pert) {
  const std::vector<Vec> g = log_likelihood_gradient(p, pot);
  VelocityMoments m;
  m.speed2 = grid_expectation(p, [&](std::size_t k) {
    const Vec v = g[k] + 2.0 * (pert ? pert->field(p.grid.center(k)) : Vec{});
    return norm2(v);
  });
  m.inner = grid_expectation(p, [&](std::size_t k) {
    const Vec v = g[k] + 2.0 * (pert ? pert->field(p.grid.center(k)) : Vec{});
    return dot(g[k], v);
  });
  m.fisher = grid_expectation(p, [&](std::size_t k) { return norm2(g[k]); });
  return m;
}

}  // namespace detail

struct TransportCheckOptions {
  double tolerance = 0.05;
  double scale_floor = 1e-2;
};

// W2(P_{t0 + d}, P_{t0}) / d extrapolated to d = 0 against |grad R + 2 beta|_{L2(p)} / 2.
inline CheckReport metric_derivative_check(const FpeSolution& sol, const Potential& pot, PerturbationRef pert,
                                           double t0, std::span<const double> deltas,
                                           const TransportCheckOptions& opts = {}) {
  detail::require_sweep(deltas);
  const GridDensity& p0 = sol.at(t0);
  const auto vm = detail::velocity_moments(p0, pot, pert);
  CheckReport r;
  std::vector<double> ds, qs;
  for (double d : deltas) {
    const double q = w2_grid(sol.at(t0 + d), p0) / d;
    ds.push_back(d);
    qs.push_back(q);
    r.metric("quotient_delta_" + std::to_string(d), q);
  }
  r.name = "metric_derivative";
  r.anchor = "local behaviour of the quadratic Wasserstein metric";
  r.lhs = extrapolate_to_zero(ds, qs);
  r.rhs = 0.5 * std::sqrt(vm.speed2);
  set_gap(r, opts.scale_floor);
  r.tolerance = opts.tolerance;
  r.refinement_slope = fit_line(ds, qs).second;
  r.pass = r.rel_gap < opts.tolerance;
  r.metric("fisher_at_t0", vm.fisher);
  return r;
}

// Perturbed run for the steepest-descent comparison.
struct PerturbedRun {
  std::string label;
  const FpeSolution* solution = nullptr;
  const Perturbation* perturbation = nullptr;
};

namespace detail {

inline double descent_ratio(const FpeSolution& sol, const Potential& pot, double t0, std::span<const double> deltas,
                            std::vector<double>* quotients = nullptr) {
  const ReferenceMeasure m{pot};
  const GridDensity& p0 = sol.at(t0);
  const double H0 = relative_entropy(p0, m);
  std::vector<double> ds, qs;
  for (double d : deltas) {
    const GridDensity& p = sol.at(t0 + d);
    const double w = w2_grid(p, p0);
    require(w > 0.0, "zero Wasserstein displacement in the descent window");
    ds.push_back(d);
    qs.push_back((relative_entropy(p, m) - H0) / w);
  }
  if (quotients) *quotients = qs;
  return extrapolate_to_zero(ds, qs);
}

}  // namespace detail

// (H(t) - H(t0)) / W2(P_t, P_t0) extrapolated to t0+: the unperturbed ratio must
// reach -sqrt(I) and no perturbed ratio may fall below it.
inline CheckReport steepest_descent_check(const FpeSolution& unperturbed, std::span<const PerturbedRun> runs,
                                          const Potential& pot, double t0, std::span<const double> deltas,
                                          const TransportCheckOptions& opts = {}) {
  detail::require_sweep(deltas);
  const GridDensity& p0 = unperturbed.at(t0);
  const double I = fisher_information(p0, ReferenceMeasure{pot});
  CheckReport r;
  r.name = "steepest_descent";
  r.anchor = "steepest descent property of the unperturbed flow";
  r.lhs = detail::descent_ratio(unperturbed, pot, t0, deltas);
  r.rhs = -std::sqrt(I);
  set_gap(r, opts.scale_floor);
  r.tolerance = opts.tolerance;
  bool ok = r.rel_gap < opts.tolerance;
  const double slack = opts.tolerance * std::max(std::abs(r.rhs), opts.scale_floor);
  for (const PerturbedRun& run : runs) {
    require(run.solution != nullptr && run.perturbation != nullptr, "perturbed run is incomplete");
    const double ratio = detail::descent_ratio(*run.solution, pot, t0, deltas);
    const auto vm = detail::velocity_moments(run.solution->at(t0), pot, run.perturbation);
    // Cauchy-Schwarz: -<gR, v>/|v| >= -|gR|, equality iff v is parallel to gR
    const double predicted = -vm.inner / std::sqrt(vm.speed2);
    const double cosine = vm.inner / std::sqrt(vm.speed2 * vm.fisher);
    const double margin = ratio - r.lhs;
    r.metric("ratio_" + run.label, ratio);
    r.metric("margin_" + run.label, margin);
    r.metric("predicted_ratio_" + run.label, predicted);
    r.metric("predicted_margin_" + run.label, predicted - r.rhs);
    r.metric("cosine_" + run.label, cosine);
    if (margin < -slack) ok = false;
    // non-parallel runs must show a strictly positive margin
    if (cosine < 1.0 - 1e-3 && !(margin > 0.0)) ok = false;
  }
  r.pass = ok;
  return r;
}

struct GeodesicCheckOptions {
  double tolerance = 0.03;
  double scale_floor = 1e-3;
};

// One-sided derivative of H along the displacement interpolation at a, against
// E[grad R . (T - Id)] / (b - a).
inline CheckReport geodesic_entropy_derivative_check(const GridDensity& mu_a, const GridDensity& mu_b,
                                                     const Potential& pot, std::span<const double> deltas,
                                                     const GeodesicCheckOptions& opts = {}) {
  require(!deltas.empty(), "empty window sweep");
  const GridSpec& g = mu_a.grid;
  for (std::size_t k = 0; k < g.size(); ++k)
    if (mu_a.values[k] > 0.0 && !(std::exp(-2.0 * pot.value(g.center(k))) > 0.0))
      fail(ErrorKind::precondition, "start density is not absolutely continuous w.r.t. the reference measure");
  const ReferenceMeasure m{pot};
  std::vector<double> xs(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) xs[k] = g.center(k)[0];
  const std::vector<double> T = monotone_map(mu_a, mu_b, xs);
  const std::vector<Vec> gr = log_likelihood_gradient(mu_a, pot);
  const double rhs = grid_expectation(mu_a, [&](std::size_t k) { return gr[k][0] * (T[k] - xs[k]); });
  const double H0 = relative_entropy(mu_a, m);
  CheckReport r;
  std::vector<double> ds, qs;
  for (double d : deltas) {
    const double q = (relative_entropy(displacement_interpolate(mu_a, mu_b, d), m) - H0) / d;
    ds.push_back(d);
    qs.push_back(q);
    r.metric("quotient_delta_" + std::to_string(d), q);
  }
  r.name = "geodesic_entropy_derivative";
  r.anchor = "entropy derivative along the constant-speed geodesic";
  r.lhs = ds.size() == 1 ? qs[0] : extrapolate_to_zero(ds, qs);
  r.rhs = rhs;
  set_gap(r, opts.scale_floor);
  r.tolerance = opts.tolerance;
  r.pass = r.rel_gap < opts.tolerance;
  return r;
}

// Smallest Hessian eigenvalue: exact for quadratic potentials, scanned over the grid otherwise.
inline double curvature_of(const Potential& pot, const GridSpec& g) {
  if (pot.kind() == PotentialKind::quadratic) return pot.kappa();
  std::vector<Vec> pts(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) pts[k] = g.center(k);
  return curvature_lower_bound(pot, pts);
}

// slack = W sqrt(I_a) - kappa W^2 / 2 - (H_a - H_b) >= -1e-6
inline CheckReport hwi_check(const GridDensity& mu_a, const GridDensity& mu_b, const Potential& pot,
                             std::optional<double> kappa = std::nullopt) {
  const ReferenceMeasure m{pot};
  const double k = kappa.value_or(curvature_of(pot, mu_a.grid));
  const double W = w2_grid(mu_a, mu_b);
  const double Ia = fisher_information(mu_a, m);
  const double Ha = relative_entropy(mu_a, m), Hb = relative_entropy(mu_b, m);
  CheckReport r;
  r.name = "hwi";
  r.anchor = "HWI-type inequality under a curvature bound";
  r.lhs = Ha - Hb;
  r.rhs = W * std::sqrt(Ia) - 0.5 * k * W * W;
  const double slack = r.rhs - r.lhs;
  r.abs_gap = std::max(0.0, -slack);
  r.rel_gap = r.abs_gap;
  r.tolerance = 1e-6;
  r.pass = slack >= -1e-6;
  r.metric("slack", slack);
  r.metric("w2", W);
  r.metric("fisher_a", Ia);
  r.metric("kappa", k);
  return r;
}

struct DecayOptions {
  double t0 = 0.0;
  double late_fraction = 0.5;  // slope fitted over the last half of the positive range
};

// H(t) <= H(t0) e^{-kappa (t - t0)} on the positive-H range, and the fitted
// late-time slope of log(H + log Z), where Z is the grid mass of Q.
inline CheckReport exponential_decay_check(const EntropyReport& rep, double kappa, double log_z,
                                           const DecayOptions& opts = {}) {
  require(rep.size() >= 2, "decay check needs at least two samples");
  CheckReport r;
  r.name = "exponential_decay";
  r.anchor = "exponential decay of the relative entropy";
  r.tolerance = 0.0;
  std::size_t i0 = 0;
  while (i0 < rep.size() && rep.times[i0] < opts.t0 - 1e-12) ++i0;
  require(i0 < rep.size(), "t0 beyond the last sample");
  const double H0 = rep.H[i0];
  std::size_t end = i0;
  while (end < rep.size() && rep.H[end] > 0.0) ++end;
  if (end < rep.size()) {
    std::ostringstream os;
    os << "relative entropy not positive from t = " << (end < rep.size() ? rep.times[end] : 0.0)
       << "; range truncated (the bound is vacuous there)";
    r.notes.push_back(os.str());
  }
  double worst = -std::numeric_limits<double>::infinity();
  bool ok = true;
  for (std::size_t i = i0; i < end; ++i) {
    const double bound = H0 * std::exp(-kappa * (rep.times[i] - rep.times[i0]));
    const double excess = rep.H[i] - bound;
    worst = std::max(worst, excess);
    if (excess > 1e-12 * std::max(1.0, std::abs(bound))) ok = false;
  }
  r.lhs = end > i0 ? rep.H[end - 1] : H0;
  r.rhs = end > i0 ? H0 * std::exp(-kappa * (rep.times[end - 1] - rep.times[i0])) : H0;
  r.abs_gap = std::max(0.0, worst);
  r.rel_gap = r.abs_gap;
  r.metric("max_excess", end > i0 ? worst : 0.0);
  r.metric("positive_samples", static_cast<double>(end - i0));
  r.metric("log_Z", log_z);
  const std::size_t late = i0 + static_cast<std::size_t>((1.0 - opts.late_fraction) * (end - i0));
  std::vector<double> ts, ls;
  for (std::size_t i = late; i < end; ++i) {
    const double kl = rep.H[i] + log_z;
    if (kl > 0.0) {
      ts.push_back(rep.times[i]);
      ls.push_back(std::log(kl));
    }
  }
  if (ts.size() >= 2) {
    r.refinement_slope = fit_line(ts, ls).second;
    r.metric("late_log_slope", *r.refinement_slope);
  } else {
    r.notes.push_back("too few positive samples to fit a late-time slope");
  }
  r.pass = ok;
  return r;
}

// log of the grid mass of Q.
inline double log_reference_mass(const GridSpec& g, const Potential& pot) {
  std::vector<double> q(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) q[k] = std::exp(-2.0 * pot.value(g.center(k)));
  return std::log(pairwise_sum(q) * g.cell_volume());
}

// W2 between a particle histogram and a grid density on the same grid.
inline CheckReport sde_pde_consistency(const GridDensity& fpe, std::span<const double> particles, double tolerance) {
  const GridDensity hist = histogram(fpe.grid, particles, fpe.grid.dim, fpe.time);
  CheckReport r;
  r.name = "sde_pde_consistency";
  r.anchor = "agreement of the particle system with the Fokker-Planck solution";
  r.lhs = w2_grid(hist, fpe);
  r.rhs = 0.0;
  r.abs_gap = r.lhs;
  r.rel_gap = r.lhs;
  r.tolerance = tolerance;
  r.pass = r.lhs < tolerance;
  r.metric("particles", static_cast<double>(particles.size() / fpe.grid.dim));
  return r;
}

}  // namespace entlab

#endif  // ENTLAB_TRANSPORT_HPP
