#ifndef ENTLAB_MODEL_HPP
#define ENTLAB_MODEL_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "entlab/core.hpp"

namespace entlab {

enum class PotentialKind { quadratic, double_well, custom };

// Confining potential psi >= 0 with gradient and Hessian.
class Potential {
 public:
  using ScalarFn = std::function<double(const Vec&)>;
  using VectorFn = std::function<Vec(const Vec&)>;
  using MatrixFn = std::function<Mat(const Vec&)>;

  static Potential quadratic(int dim, double kappa) {
    require(kappa > 0.0 && std::isfinite(kappa), "quadratic potential needs kappa > 0");
    Potential p(dim, PotentialKind::quadratic, kappa);
    p.kappa_ = kappa;
    return p;
  }

  // psi(x) = (|x|^2 - a)^2 / 4 + b
  static Potential double_well(int dim, double a, double b, double growth_constant) {
    require(std::isfinite(a) && std::isfinite(b), "double well parameters must be finite");
    Potential p(dim, PotentialKind::double_well, growth_constant);
    p.a_ = a;
    p.b_ = b;
    return p;
  }

  static Potential custom(int dim, ScalarFn value, VectorFn gradient, MatrixFn hessian, double growth_constant) {
    require(static_cast<bool>(value) && static_cast<bool>(gradient), "custom potential needs value and gradient");
    Potential p(dim, PotentialKind::custom, growth_constant);
    p.value_ = std::move(value);
    p.gradient_ = std::move(gradient);
    p.hessian_ = std::move(hessian);
    return p;
  }

  int dim() const { return dim_; }
  PotentialKind kind() const { return kind_; }
  double kappa() const { return kappa_; }
  double well_a() const { return a_; }
  double well_b() const { return b_; }
  double growth_constant() const { return growth_; }

  double value(const Vec& x) const {
    double v = 0.0;
    switch (kind_) {
      case PotentialKind::quadratic: v = 0.5 * kappa_ * norm2(x); break;
      case PotentialKind::double_well: {
        const double s = norm2(x) - a_;
        v = 0.25 * s * s + b_;
        break;
      }
      case PotentialKind::custom: v = value_(x); break;
    }
    if (!std::isfinite(v)) fail(ErrorKind::numeric, "nonfinite potential value");
    if (v < 0.0) fail(ErrorKind::precondition, "psi must be nonnegative");
    return v;
  }

  Vec gradient(const Vec& x) const {
    switch (kind_) {
      case PotentialKind::quadratic: return kappa_ * x;
      case PotentialKind::double_well: return (norm2(x) - a_) * x;
      case PotentialKind::custom: break;
    }
    return gradient_(x);
  }

  Mat hessian(const Vec& x) const {
    Mat h{};
    switch (kind_) {
      case PotentialKind::quadratic:
        for (int i = 0; i < dim_; ++i) h[i][i] = kappa_;
        return h;
      case PotentialKind::double_well: {
        const double s = norm2(x) - a_;
        for (int i = 0; i < dim_; ++i)
          for (int j = 0; j < dim_; ++j) h[i][j] = 2.0 * x[i] * x[j] + (i == j ? s : 0.0);
        return h;
      }
      case PotentialKind::custom: break;
    }
    if (hessian_) return hessian_(x);
    // central differences of the gradient
    const double step = 1e-5 * norm(x) + 1e-7;
    for (int j = 0; j < dim_; ++j) {
      Vec xp = x, xm = x;
      xp[j] += step;
      xm[j] -= step;
      const Vec gp = gradient_(xp), gm = gradient_(xm);
      for (int i = 0; i < dim_; ++i) h[i][j] = (gp[i] - gm[i]) / (2.0 * step);
    }
    for (int i = 0; i < dim_; ++i)
      for (int j = i + 1; j < dim_; ++j) h[i][j] = h[j][i] = 0.5 * (h[i][j] + h[j][i]);
    return h;
  }

 private:
  Potential(int dim, PotentialKind kind, double growth) : dim_(dim), kind_(kind), growth_(growth) {
    require(dim >= 1 && dim <= kMaxDim, "dimension must be 1, 2 or 3");
    require(growth > 0.0, "growth constant must be positive");
  }

  int dim_ = 1;
  PotentialKind kind_ = PotentialKind::quadratic;
  double growth_ = 1.0;
  double kappa_ = 0.0;
  double a_ = 0.0, b_ = 0.0;
  ScalarFn value_;
  VectorFn gradient_;
  MatrixFn hessian_;
};

// Gradient-type perturbation beta = grad B, active for t > t0.
class Perturbation {
 public:
  using ScalarFn = std::function<double(const Vec&)>;
  using VectorFn = std::function<Vec(const Vec&)>;

  // B(x) = c exp(-1 / (1 - |x - center|^2 / r^2)) inside the ball, zero outside.
  static Perturbation bump(int dim, double amplitude, double radius, const Vec& center, double t0) {
    require(radius > 0.0 && std::isfinite(amplitude), "bump needs finite amplitude and positive radius");
    require(t0 >= 0.0, "activation time must be nonnegative");
    Perturbation p;
    p.dim_ = dim;
    p.amplitude_ = amplitude;
    p.radius_ = radius;
    p.center_ = center;
    for (int a = dim; a < kMaxDim; ++a) p.center_[a] = 0.0;
    p.t0_ = t0;
    return p;
  }

  // Arbitrary gradient field supported in the ball (center, radius).
  static Perturbation custom(int dim, ScalarFn potential, VectorFn field, ScalarFn divergence, const Vec& center,
                             double radius, double t0) {
    require(radius > 0.0 && t0 >= 0.0, "custom perturbation needs positive radius");
    Perturbation p = bump(dim, 0.0, radius, center, t0);
    p.custom_ = true;
    p.potential_ = std::move(potential);
    p.field_ = std::move(field);
    p.divergence_ = std::move(divergence);
    return p;
  }

  int dim() const { return dim_; }
  double amplitude() const { return amplitude_; }
  double radius() const { return radius_; }
  const Vec& center() const { return center_; }
  double activation_time() const { return t0_; }
  bool active(double t) const { return t > t0_; }
  bool is_custom() const { return custom_; }

  bool in_support(const Vec& x) const { return norm2(x - center_) < radius_ * radius_; }

  double potential(const Vec& x) const {
    if (!in_support(x)) return 0.0;
    if (custom_) return potential_(x);
    const double s = norm2(x - center_) / (radius_ * radius_);
    return amplitude_ * std::exp(-1.0 / (1.0 - s));
  }

  Vec field(const Vec& x) const {
    if (!in_support(x)) return Vec{};
    if (custom_) return field_(x);
    const Vec u = x - center_;
    const double r2 = radius_ * radius_;
    const double s = norm2(u) / r2;
    const double om = 1.0 - s;
    const double b = amplitude_ * std::exp(-1.0 / om);
    return (-2.0 * b / (r2 * om * om)) * u;
  }

  double divergence(const Vec& x) const {
    if (!in_support(x)) return 0.0;
    if (custom_) return divergence_(x);
    const Vec u = x - center_;
    const double r2 = radius_ * radius_;
    const double s = norm2(u) / r2;
    const double om = 1.0 - s;
    const double b = amplitude_ * std::exp(-1.0 / om);
    const double g = -2.0 * b / (r2 * om * om);
    const double gp = -2.0 * b * (1.0 - 2.0 * s) / (r2 * om * om * om * om);
    return dim_ * g + 2.0 * s * gp;
  }

 private:
  Perturbation() = default;

  int dim_ = 1;
  double amplitude_ = 0.0;
  double radius_ = 1.0;
  Vec center_{};
  double t0_ = 0.0;
  bool custom_ = false;
  ScalarFn potential_;
  VectorFn field_;
  ScalarFn divergence_;
};

// Perturbation-or-nothing, passed by pointer through the solvers.
using PerturbationRef = const Perturbation*;

inline Vec perturbation_field(PerturbationRef pert, const Vec& x, bool on) {
  return (pert != nullptr && on) ? pert->field(x) : Vec{};
}

// 2 beta.grad(psi) - div(beta), the perturbation part of the entropy drift.
inline double perturbation_drift_term(const Perturbation& pert, const Potential& pot, const Vec& x) {
  if (!pert.in_support(x)) return 0.0;
  return 2.0 * dot(pert.field(x), pot.gradient(x)) - pert.divergence(x);
}

// Text descriptions used for config digests; custom callables hash by name only.
inline std::string signature(const Potential& pot) {
  std::ostringstream os;
  os.precision(17);
  os << "psi:d=" << pot.dim();
  switch (pot.kind()) {
    case PotentialKind::quadratic: os << ",quadratic,k=" << pot.kappa(); break;
    case PotentialKind::double_well: os << ",double_well,a=" << pot.well_a() << ",b=" << pot.well_b(); break;
    case PotentialKind::custom: os << ",custom"; break;
  }
  return os.str();
}

inline std::string signature(PerturbationRef pert) {
  if (pert == nullptr) return "beta:none";
  std::ostringstream os;
  os.precision(17);
  os << "beta:" << (pert->is_custom() ? "custom" : "bump") << ",c=" << pert->amplitude() << ",r=" << pert->radius()
     << ",x0=" << pert->center()[0] << ":" << pert->center()[1] << ":" << pert->center()[2]
     << ",t0=" << pert->activation_time();
  return os.str();
}

// Unnormalized reference measure with density exp(-2 psi).
struct ReferenceMeasure {
  Potential potential;

  double density(const Vec& x) const {
    const double q = std::exp(-2.0 * potential.value(x));
    if (!std::isfinite(q) || q <= 0.0) fail(ErrorKind::numeric, "nonfinite density");
    return q;
  }
};

inline std::vector<double> eval_reference_density(const ReferenceMeasure& m, std::span<const Vec> pts) {
  std::vector<double> out;
  out.reserve(pts.size());
  for (const auto& x : pts) {
    require(all_finite(x), "points must be finite");
    out.push_back(m.density(x));
  }
  return out;
}

// Tensor sample grid on [lo, hi]^dim with n points per axis (endpoints included).
inline std::vector<Vec> box_samples(int dim, double lo, double hi, int n) {
  require(n >= 2 && hi > lo, "sample box needs n >= 2 and hi > lo");
  std::vector<Vec> pts;
  const double step = (hi - lo) / (n - 1);
  int total = 1;
  for (int k = 0; k < dim; ++k) total *= n;
  pts.reserve(total);
  for (int idx = 0; idx < total; ++idx) {
    Vec x{};
    int rem = idx;
    for (int k = 0; k < dim; ++k) {
      x[k] = lo + step * (rem % n);
      rem /= n;
    }
    pts.push_back(x);
  }
  return pts;
}

inline CheckReport check_drift_condition(const Potential& pot, double C, double R, std::span<const Vec> grid) {
  require(!grid.empty(), "empty sample grid");
  require(C > 0.0 && R > 0.0, "drift condition needs C > 0 and R > 0");
  CheckReport r;
  r.name = "drift_condition";
  r.anchor = "drift condition x.grad(psi) >= -C|x|^2";
  double worst = std::numeric_limits<double>::infinity();
  std::size_t tested = 0;
  for (const auto& x : grid) {
    pot.value(x);  // positivity assertion
    const double n2 = norm2(x);
    if (n2 < R * R) continue;
    ++tested;
    // margin of x.grad(psi) + C|x|^2 relative to |x|^2
    worst = std::min(worst, (dot(x, pot.gradient(x)) + C * n2) / n2);
  }
  require(tested > 0, "sample grid has no points with |x| >= R");
  r.lhs = worst;
  r.rhs = 0.0;
  r.tolerance = 0.0;
  r.abs_gap = worst;
  r.pass = worst >= 0.0;
  r.metric("points_tested", static_cast<double>(tested));
  return r;
}

inline double min_eigenvalue(const Mat& h, int dim) {
  Eigen::MatrixXd m(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) m(i, j) = h[i][j];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double curvature_lower_bound(const Potential& pot, std::span<const Vec> grid) {
  require(!grid.empty(), "empty sample grid");
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& x : grid) {
    const Mat h = pot.hessian(x);
    for (int i = 0; i < pot.dim(); ++i)
      for (int j = 0; j < pot.dim(); ++j)
        if (!std::isfinite(h[i][j])) fail(ErrorKind::numeric, "nonfinite Hessian");
    lo = std::min(lo, min_eigenvalue(h, pot.dim()));
  }
  return lo;
}

// |grad psi(x)| <= K (1 + |x|) on every sampled point.
inline CheckReport check_linear_growth(const Potential& pot, std::span<const Vec> grid) {
  require(!grid.empty(), "empty sample grid");
  CheckReport r;
  r.name = "linear_growth";
  r.anchor = "linear growth of grad(psi)";
  double worst = 0.0;
  for (const auto& x : grid) worst = std::max(worst, norm(pot.gradient(x)) / (1.0 + norm(x)));
  r.lhs = worst;
  r.rhs = pot.growth_constant();
  r.tolerance = 0.0;
  set_gap(r);
  r.pass = worst <= pot.growth_constant();
  return r;
}

// Analytic sup bounds of the perturbation over its support ball, by dense scan.
struct PerturbationBounds {
  double max_potential = 0.0;   // sup |B|
  double max_field = 0.0;       // sup |beta|
  double max_drift_term = 0.0;  // sup |2 beta.grad(psi) - div beta|
};

inline PerturbationBounds perturbation_bounds(const Perturbation& pert, const Potential& pot, int per_axis = 0) {
  PerturbationBounds b;
  const int dim = pert.dim();
  if (per_axis <= 0) per_axis = dim == 1 ? 4001 : (dim == 2 ? 241 : 41);
  for (const Vec& u : box_samples(dim, -1.0, 1.0, per_axis)) {
    Vec x = pert.center() + pert.radius() * u;
    if (!pert.in_support(x)) continue;
    const Vec beta = pert.field(x);
    b.max_potential = std::max(b.max_potential, std::abs(pert.potential(x)));
    b.max_field = std::max(b.max_field, norm(beta));
    b.max_drift_term = std::max(b.max_drift_term, std::abs(perturbation_drift_term(pert, pot, x)));
  }
  return b;
}

}  // namespace entlab

#endif  // ENTLAB_MODEL_HPP
