#ifndef ENTLAB_CORE_HPP
#define ENTLAB_CORE_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace entlab {

inline constexpr int kMaxDim = 3;

// Points live in a fixed 3-slot array; slots beyond the active dimension stay zero.
using Vec = std::array<double, kMaxDim>;
using Mat = std::array<Vec, kMaxDim>;

inline constexpr double kDensityFloor = 1e-300;

enum class ErrorKind { precondition, numeric, config, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(ErrorKind::precondition, msg);
}

inline double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm2(const Vec& a) { return dot(a, a); }
inline double norm(const Vec& a) { return std::sqrt(norm2(a)); }

inline Vec operator+(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec operator-(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec operator*(double s, const Vec& a) { return {s * a[0], s * a[1], s * a[2]}; }

inline bool all_finite(const Vec& a) {
  return std::isfinite(a[0]) && std::isfinite(a[1]) && std::isfinite(a[2]);
}

// Fixed-order pairwise summation; the tree shape depends only on the length.
inline double pairwise_sum(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline double pairwise_mean(std::span<const double> xs) {
  require(!xs.empty(), "mean of empty sequence");
  return pairwise_sum(xs) / static_cast<double>(xs.size());
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  double variance = 0.0;
};

inline MeanStderr mean_stderr(std::span<const double> xs) {
  require(xs.size() >= 2, "insufficient sample");
  const double m = pairwise_mean(xs);
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - m) * (xs[i] - m);
  const double var = pairwise_sum(sq) / static_cast<double>(xs.size() - 1);
  return {m, std::sqrt(var / static_cast<double>(xs.size())), var};
}

// Result of one identity verification.
struct CheckReport {
  std::string name;
  std::string anchor;
  double lhs = 0.0;
  double rhs = 0.0;
  double abs_gap = 0.0;
  double rel_gap = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::optional<double> refinement_slope;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::string> notes;

  void metric(const std::string& key, double value) { metrics.emplace_back(key, value); }
  std::optional<double> find(const std::string& key) const {
    for (const auto& [k, v] : metrics)
      if (k == key) return v;
    return std::nullopt;
  }
};

// Fills gaps from lhs/rhs; relative gap uses max(|rhs|, scale) as denominator.
inline void set_gap(CheckReport& r, double scale = 0.0) {
  r.abs_gap = std::abs(r.lhs - r.rhs);
  const double denom = std::max(std::abs(r.rhs), scale);
  r.rel_gap = denom > 0.0 ? r.abs_gap / denom : (r.abs_gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
}

// Least-squares line y = a + b x; returns {a, b}.
inline std::pair<double, double> fit_line(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "line fit needs at least two points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double det = n * sxx - sx * sx;
  require(det != 0.0, "degenerate abscissae in line fit");
  const double b = (n * sxy - sx * sy) / det;
  return {(sy - b * sx) / n, b};
}

// 64-bit FNV-1a digest.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace entlab

#endif  // ENTLAB_CORE_HPP
