#ifndef ENTLAB_ENTROPY_HPP
#define ENTLAB_ENTROPY_HPP

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/fpe.hpp"
#include "entlab/grid.hpp"
#include "entlab/model.hpp"

namespace entlab {

enum class EntropyEstimator { grid, kde };

inline const char* to_string(EntropyEstimator e) { return e == EntropyEstimator::grid ? "grid" : "kde"; }

struct EntropyReport {
  std::vector<double> times;
  std::vector<double> H;
  std::vector<double> I;
  EntropyEstimator estimator = EntropyEstimator::grid;
  // E[div beta - 2 beta.grad(psi)] at each time (zero while the perturbation is off); empty when unperturbed.
  std::vector<double> perturbation_rate;

  std::size_t size() const { return times.size(); }
};

// sum p log(p/q) V with 0 log 0 = 0; can be negative because Q is unnormalized.
inline double relative_entropy(const GridDensity& p, const ReferenceMeasure& m) {
  const GridSpec& g = p.grid;
  std::vector<double> terms(g.size(), 0.0);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double v = p.values[k];
    if (v > 0.0) terms[k] = v * (std::log(v) + 2.0 * m.potential.value(g.center(k)));
  }
  return pairwise_sum(terms) * g.cell_volume();
}

// Fisher information in the interface form dual to the Chang-Cooper flux, so
// that the semi-discrete solver satisfies dH/dt = -I/2 exactly.
class FisherStencil {
 public:
  FisherStencil(const GridSpec& grid, const Potential& pot)
      : grid_(grid), faces_(grid_interfaces(grid)), psi_(potential_at_centers(grid, pot)) {
    weights_ = flux_weights(faces_, psi_);
  }

  double operator()(std::span<const double> p) const {
    std::vector<double> terms(faces_.size(), 0.0);
    const double vol = grid_.cell_volume();
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const Interface& fc = faces_[f];
      const double num = weights_.up[f] * p[fc.hi] - weights_.down[f] * p[fc.lo];
      if (num == 0.0) continue;
      const double dlog = std::log(std::max(p[fc.hi], kDensityFloor)) - std::log(std::max(p[fc.lo], kDensityFloor)) +
                          2.0 * (psi_[fc.hi] - psi_[fc.lo]);
      const double h = grid_.spacing(fc.axis);
      terms[f] = vol / (h * h) * num * dlog;
    }
    return std::max(pairwise_sum(terms), 0.0);
  }

 private:
  GridSpec grid_;
  std::vector<Interface> faces_;
  std::vector<double> psi_;
  FluxWeights weights_;
};

inline double fisher_information(const GridDensity& p, const ReferenceMeasure& m) {
  return FisherStencil(p.grid, m.potential)(p.values);
}

// l = p e^{2 psi} at the given points; log p is interpolated, which keeps the
// relative error uniform in the tails.
inline std::vector<double> likelihood_ratio(const GridDensity& p, const ReferenceMeasure& m, std::span<const Vec> pts) {
  const std::vector<double> logp = floored_log(p.values);
  std::vector<double> out;
  out.reserve(pts.size());
  for (const Vec& x : pts) out.push_back(std::exp(interpolate(p.grid, logp, x) + 2.0 * m.potential.value(x)));
  return out;
}

// sum (psi p + 0.5 p log p) V
inline double free_energy(const GridDensity& p, const Potential& pot) {
  const GridSpec& g = p.grid;
  std::vector<double> terms(g.size(), 0.0);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double v = p.values[k];
    if (v > 0.0) terms[k] = v * (pot.value(g.center(k)) + 0.5 * std::log(v));
  }
  return pairwise_sum(terms) * g.cell_volume();
}

// Relative entropy process values R = log p + 2 psi per cell.
inline std::vector<double> log_likelihood_field(const GridDensity& p, const Potential& pot) {
  std::vector<double> r = floored_log(p.values);
  for (std::size_t k = 0; k < r.size(); ++k) r[k] += 2.0 * pot.value(p.grid.center(k));
  return r;
}

// grad R = grad log p + 2 grad psi per cell.
inline std::vector<Vec> log_likelihood_gradient(const GridDensity& p, const Potential& pot) {
  std::vector<Vec> s = score_field(p);
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = s[k] + 2.0 * pot.gradient(p.grid.center(k));
  return s;
}

// sum f(x) p(x) V over the grid.
template <class F>
double grid_expectation(const GridDensity& p, F&& f) {
  std::vector<double> terms(p.values.size());
  for (std::size_t k = 0; k < terms.size(); ++k) terms[k] = p.values[k] == 0.0 ? 0.0 : f(k) * p.values[k];
  return pairwise_sum(terms) * p.grid.cell_volume();
}

inline double perturbation_rate(const GridDensity& p, const Potential& pot, const Perturbation& pert) {
  return grid_expectation(p, [&](std::size_t k) {
    const Vec x = p.grid.center(k);
    return pert.divergence(x) - 2.0 * dot(pert.field(x), pot.gradient(x));
  });
}

// Observer that records H and I (and the perturbation rate) along an FPE run.
class EntropyTracker {
 public:
  EntropyTracker(const GridSpec& grid, const Potential& pot, PerturbationRef pert)
      : measure_{pot}, fisher_(grid, pot), pert_(pert) {}

  void operator()(const GridDensity& p) {
    report_.times.push_back(p.time);
    report_.H.push_back(relative_entropy(p, measure_));
    report_.I.push_back(fisher_(p.values));
    if (pert_ != nullptr)
      report_.perturbation_rate.push_back(pert_->active(p.time) ? perturbation_rate(p, measure_.potential, *pert_)
                                                                : 0.0);
  }

  const EntropyReport& report() const { return report_; }
  EntropyReport take() { return std::move(report_); }

 private:
  ReferenceMeasure measure_;
  FisherStencil fisher_;
  PerturbationRef pert_;
  EntropyReport report_;
};

inline EntropyReport entropy_report(const FpeSolution& sol, const Potential& pot) {
  EntropyTracker tr(sol.snapshots.front().grid, pot, nullptr);
  for (const auto& s : sol.snapshots) tr(s);
  return tr.take();
}

struct SampleEntropy {
  double H = 0.0;
  double I = 0.0;
  int k = 0;
  double bandwidth = 0.0;
};

namespace detail {

// Distance to the k-th nearest neighbour of each point (self excluded).
inline std::vector<double> knn_distances(std::span<const double> pts, int d, int k) {
  const std::size_t n = pts.size() / d;
  std::vector<double> out(n);
  if (d == 1) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pts[a] < pts[b]; });
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = pts[order[i]];
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t lo = i, hi = i;
      double dist = 0.0;
      for (int c = 0; c < k; ++c) {
        const double dl = lo > 0 ? s[i] - s[lo - 1] : std::numeric_limits<double>::infinity();
        const double dr = hi + 1 < n ? s[hi + 1] - s[i] : std::numeric_limits<double>::infinity();
        if (dl <= dr) {
          --lo;
          dist = dl;
        } else {
          ++hi;
          dist = dr;
        }
      }
      out[order[i]] = dist;
    }
    return out;
  }
  namespace bg = boost::geometry;
  namespace bgi = boost::geometry::index;
  auto run = [&](auto tag) {
    using Point = decltype(tag);
    std::vector<std::pair<Point, std::size_t>> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      Point p;
      bg::set<0>(p, pts[i * d]);
      bg::set<1>(p, pts[i * d + 1]);
      if constexpr (bg::traits::dimension<Point>::value == 3) bg::set<2>(p, pts[i * d + 2]);
      values[i] = {p, i};
    }
    bgi::rtree<std::pair<Point, std::size_t>, bgi::rstar<16>> tree(values.begin(), values.end());
    std::vector<std::pair<Point, std::size_t>> hits;
    for (std::size_t i = 0; i < n; ++i) {
      hits.clear();
      tree.query(bgi::nearest(values[i].first, static_cast<unsigned>(k + 1)), std::back_inserter(hits));
      double best = 0.0;
      std::vector<double> ds;
      for (const auto& h : hits)
        if (h.second != i) ds.push_back(bg::distance(h.first, values[i].first));
      std::sort(ds.begin(), ds.end());
      best = ds.size() >= static_cast<std::size_t>(k) ? ds[k - 1] : ds.back();
      out[i] = best;
    }
  };
  if (d == 2)
    run(bg::model::point<double, 2, bg::cs::cartesian>{});
  else
    run(bg::model::point<double, 3, bg::cs::cartesian>{});
  return out;
}

}  // namespace detail

// Kozachenko-Leonenko entropy plus Monte Carlo average of 2 psi; Fisher information
// from a Gaussian-kernel score estimate (Silverman bandwidth, at most 2000 reference points).
inline SampleEntropy sample_entropy_estimators(std::span<const double> pts, int d, const ReferenceMeasure& m) {
  require(d >= 1 && d <= kMaxDim, "sample dimension must be 1, 2 or 3");
  const std::size_t n = pts.size() / static_cast<std::size_t>(d);
  if (n < 2) fail(ErrorKind::precondition, "fewer than 2 samples");
  SampleEntropy out;
  out.k = std::max(1, static_cast<int>(std::ceil(std::log(static_cast<double>(n)))));
  out.k = std::min<int>(out.k, static_cast<int>(n) - 1);
  const std::vector<double> eps = detail::knn_distances(pts, d, out.k);
  std::vector<double> logs(n), psi2(n);
  for (std::size_t i = 0; i < n; ++i) {
    logs[i] = std::log(std::max(eps[i], 1e-12));  // ties: zero distances replaced by 1e-12
    Vec x{};
    for (int a = 0; a < d; ++a) x[a] = pts[i * d + a];
    psi2[i] = 2.0 * m.potential.value(x);
  }
  const double log_ball = 0.5 * d * std::log(std::numbers::pi) - std::lgamma(0.5 * d + 1.0);
  const double h_diff = boost::math::digamma(static_cast<double>(n)) - boost::math::digamma(static_cast<double>(out.k)) +
                        log_ball + d * pairwise_mean(logs);
  out.H = -h_diff + pairwise_mean(psi2);

  // KDE score
  const std::size_t nref = std::min<std::size_t>(n, 2000);
  const std::size_t stride = n / nref;
  double var = 0.0;
  for (int a = 0; a < d; ++a) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = pts[i * d + a];
    var += mean_stderr(col).variance;
  }
  const double sigma = std::sqrt(var / d);
  const double bw = sigma * std::pow(4.0 / ((d + 2.0) * static_cast<double>(nref)), 1.0 / (d + 4.0));
  out.bandwidth = bw;
  std::vector<double> fisher_terms(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec x{};
    for (int a = 0; a < d; ++a) x[a] = pts[i * d + a];
    double wsum = 0.0;
    Vec acc{};
    for (std::size_t r = 0; r < nref; ++r) {
      const std::size_t j = r * stride;
      if (j == i) continue;
      Vec y{};
      for (int a = 0; a < d; ++a) y[a] = pts[j * d + a];
      const Vec diff = y - x;
      const double w = std::exp(-0.5 * norm2(diff) / (bw * bw));
      wsum += w;
      acc = acc + w * diff;
    }
    Vec score = wsum > 0.0 ? (1.0 / (wsum * bw * bw)) * acc : Vec{};
    fisher_terms[i] = norm2(score + 2.0 * m.potential.gradient(x));
  }
  out.I = pairwise_mean(fisher_terms);
  return out;
}

}  // namespace entlab

#endif  // ENTLAB_ENTROPY_HPP
