#ifndef ENTLAB_GRID_HPP
#define ENTLAB_GRID_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "entlab/core.hpp"
#include "entlab/rng.hpp"

namespace entlab {

struct Axis {
  double lower = -6.0;
  double upper = 6.0;
  int cells = 512;

  double spacing() const { return (upper - lower) / cells; }
  double center(int i) const { return lower + (i + 0.5) * spacing(); }
};

// Rectangular cell-centred grid in one or two dimensions.
struct GridSpec {
  int dim = 1;
  std::array<Axis, 2> axes{};

  static GridSpec line(double lower, double upper, int cells) {
    GridSpec g;
    g.dim = 1;
    g.axes[0] = {lower, upper, cells};
    g.axes[1] = {0.0, 1.0, 1};
    g.validate();
    return g;
  }

  static GridSpec square(double lower, double upper, int cells) {
    GridSpec g;
    g.dim = 2;
    g.axes[0] = {lower, upper, cells};
    g.axes[1] = {lower, upper, cells};
    g.validate();
    return g;
  }

  void validate() const {
    require(dim == 1 || dim == 2, "grid dimension must be 1 or 2");
    for (int a = 0; a < dim; ++a) {
      const Axis& ax = axes[a];
      require(std::isfinite(ax.lower) && std::isfinite(ax.upper), "grid bounds must be finite");
      require(ax.lower < ax.upper, "grid lower bound must be below upper bound");
      require(ax.cells >= 16, "grid needs at least 16 cells per axis");
    }
  }

  int nx() const { return axes[0].cells; }
  int ny() const { return dim == 2 ? axes[1].cells : 1; }
  std::size_t size() const { return static_cast<std::size_t>(nx()) * ny(); }
  double spacing(int a) const { return axes[a].spacing(); }
  double cell_volume() const { return dim == 2 ? spacing(0) * spacing(1) : spacing(0); }
  std::size_t index(int i, int j = 0) const { return static_cast<std::size_t>(j) * nx() + i; }

  Vec center(std::size_t idx) const {
    Vec x{};
    x[0] = axes[0].center(static_cast<int>(idx % nx()));
    if (dim == 2) x[1] = axes[1].center(static_cast<int>(idx / nx()));
    return x;
  }

  bool contains(const Vec& x) const {
    for (int a = 0; a < dim; ++a)
      if (!(x[a] >= axes[a].lower && x[a] <= axes[a].upper)) return false;
    return true;
  }

  // Whole ball (center, radius + margin) inside the box.
  bool covers_ball(const Vec& c, double radius, double margin) const {
    for (int a = 0; a < dim; ++a)
      if (c[a] - radius - margin < axes[a].lower || c[a] + radius + margin > axes[a].upper) return false;
    return true;
  }

  bool same_as(const GridSpec& o) const {
    if (dim != o.dim) return false;
    for (int a = 0; a < dim; ++a)
      if (axes[a].lower != o.axes[a].lower || axes[a].upper != o.axes[a].upper || axes[a].cells != o.axes[a].cells)
        return false;
    return true;
  }
};

struct GridDensity {
  GridSpec grid;
  std::vector<double> values;
  double time = 0.0;

  double mass() const { return pairwise_sum(values) * grid.cell_volume(); }
  double min_value() const { return *std::min_element(values.begin(), values.end()); }

  void require_normalized(double tol = 1e-8) const {
    const double m = mass();
    if (!(std::abs(m - 1.0) <= tol)) fail(ErrorKind::precondition, "density not normalized: mass " + std::to_string(m));
  }
};

inline GridDensity discretize(const GridSpec& grid, const std::function<double(const Vec&)>& f, double t = 0.0) {
  grid.validate();
  GridDensity p{grid, std::vector<double>(grid.size()), t};
  for (std::size_t k = 0; k < grid.size(); ++k) p.values[k] = f(grid.center(k));
  return p;
}

// Isotropic Gaussian N(mean, var I) sampled at cell centres.
inline GridDensity gaussian_density(const GridSpec& grid, const Vec& mean, double var, double t = 0.0) {
  require(var > 0.0, "Gaussian variance must be positive");
  const double norm_c = std::pow(2.0 * std::numbers::pi * var, -0.5 * grid.dim);
  return discretize(
      grid, [&](const Vec& x) { return norm_c * std::exp(-0.5 * norm2(x - mean) / var); }, t);
}

inline void normalize(GridDensity& p) {
  const double m = p.mass();
  require(m > 0.0 && std::isfinite(m), "cannot normalize a density with nonpositive mass");
  for (double& v : p.values) v /= m;
}

// Multilinear interpolation weights on cell centres; constant extension in the
// half cell next to each wall.
struct InterpStencil {
  std::array<std::size_t, 4> idx{};
  std::array<double, 4> w{};
  int count = 0;
};

inline InterpStencil interp_stencil(const GridSpec& grid, const Vec& x) {
  if (!grid.contains(x)) fail(ErrorKind::precondition, "query outside grid");
  std::array<int, 2> i0{0, 0};
  std::array<double, 2> fr{0.0, 0.0};
  for (int a = 0; a < grid.dim; ++a) {
    const Axis& ax = grid.axes[a];
    const double pos = (x[a] - ax.lower) / ax.spacing() - 0.5;
    int i = static_cast<int>(std::floor(pos));
    i = std::clamp(i, 0, ax.cells - 2);
    i0[a] = i;
    fr[a] = std::clamp(pos - i, 0.0, 1.0);
  }
  InterpStencil s;
  if (grid.dim == 1) {
    s.idx = {static_cast<std::size_t>(i0[0]), static_cast<std::size_t>(i0[0] + 1), 0, 0};
    s.w = {1.0 - fr[0], fr[0], 0.0, 0.0};
    s.count = 2;
  } else {
    s.idx = {grid.index(i0[0], i0[1]), grid.index(i0[0] + 1, i0[1]), grid.index(i0[0], i0[1] + 1),
             grid.index(i0[0] + 1, i0[1] + 1)};
    s.w = {(1 - fr[0]) * (1 - fr[1]), fr[0] * (1 - fr[1]), (1 - fr[0]) * fr[1], fr[0] * fr[1]};
    s.count = 4;
  }
  return s;
}

inline double interpolate(const GridSpec& grid, std::span<const double> values, const Vec& x) {
  const InterpStencil s = interp_stencil(grid, x);
  double v = 0.0;
  for (int k = 0; k < s.count; ++k) v += s.w[k] * values[s.idx[k]];
  return v;
}

// Histogram of an N x d position array (row-major) on the grid; d must equal the grid dimension.
inline GridDensity histogram(const GridSpec& grid, std::span<const double> positions, int d, double t = 0.0) {
  require(d == grid.dim, "histogram dimension mismatch");
  const std::size_t n = positions.size() / d;
  require(n >= 1, "histogram of empty ensemble");
  GridDensity h{grid, std::vector<double>(grid.size(), 0.0), t};
  for (std::size_t p = 0; p < n; ++p) {
    Vec x{};
    for (int a = 0; a < d; ++a) x[a] = positions[p * d + a];
    if (!grid.contains(x)) fail(ErrorKind::numeric, "particle outside histogram grid");
    std::array<int, 2> ij{0, 0};
    for (int a = 0; a < d; ++a) {
      const Axis& ax = grid.axes[a];
      ij[a] = std::min(static_cast<int>((x[a] - ax.lower) / ax.spacing()), ax.cells - 1);
    }
    h.values[grid.index(ij[0], ij[1])] += 1.0;
  }
  const double scale = 1.0 / (static_cast<double>(n) * grid.cell_volume());
  for (double& v : h.values) v *= scale;
  return h;
}

// Draws n points from the piecewise-constant density; returns an n x dim array.
inline std::vector<double> sample_grid_density(const GridDensity& p, std::size_t n, std::uint64_t seed) {
  const GridSpec& g = p.grid;
  std::vector<double> cdf(p.values.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < cdf.size(); ++k) {
    acc += std::max(p.values[k], 0.0);
    cdf[k] = acc;
  }
  require(acc > 0.0, "cannot sample from a zero density");
  std::vector<double> out(n * g.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = uniform_pair(seed, Stream::terminal, i, 0);
    const auto v = uniform_pair(seed, Stream::terminal, i, 1);
    const double target = u[0] * acc;
    std::size_t k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), target) - cdf.begin());
    k = std::min(k, cdf.size() - 1);
    const int ix = static_cast<int>(k % g.nx());
    out[i * g.dim] = g.axes[0].lower + (ix + u[1]) * g.spacing(0);
    if (g.dim == 2) {
      const int iy = static_cast<int>(k / g.nx());
      out[i * g.dim + 1] = g.axes[1].lower + (iy + v[0]) * g.spacing(1);
    }
  }
  return out;
}

// Sums blocks of factor x factor cells into a coarser grid (mass preserving).
inline GridDensity coarsen(const GridDensity& p, int factor) {
  const GridSpec& g = p.grid;
  require(factor >= 1 && g.nx() % factor == 0 && g.ny() % (g.dim == 2 ? factor : 1) == 0,
          "coarsening factor must divide the cell counts");
  GridSpec c = g;
  c.axes[0].cells = g.nx() / factor;
  if (g.dim == 2) c.axes[1].cells = g.ny() / factor;
  c.validate();
  GridDensity out{c, std::vector<double>(c.size(), 0.0), p.time};
  const double ratio = g.cell_volume() / c.cell_volume();
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i)
      out.values[c.index(i / factor, g.dim == 2 ? j / factor : 0)] += p.values[g.index(i, j)] * ratio;
  return out;
}

}  // namespace entlab

#endif  // ENTLAB_GRID_HPP
