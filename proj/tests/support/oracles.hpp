#ifndef ENTLAB_TEST_ORACLES_HPP
#define ENTLAB_TEST_ORACLES_HPP

#include <cmath>
#include <numbers>

// Closed forms for Gaussians under psi = kappa |x|^2 / 2, used only as test oracles.
namespace oracle {

// H[N(m, s2 I_d) | e^{-2 psi}]
inline double gaussian_H(double m2, double s2, double kappa = 1.0, int d = 1) {
  return d * (-0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5) + kappa * (m2 + d * s2);
}

// I[N(m, s2) | e^{-2 psi}] in 1D: a^2 (m^2 + s2) + 2 a b m + b^2
inline double gaussian_I(double m, double s2, double kappa = 1.0) {
  const double a = 2.0 * kappa - 1.0 / s2;
  const double b = m / s2;
  return a * a * (m * m + s2) + 2.0 * a * b * m + b * b;
}

// OU (kappa = 1) moments from N(m0, s0)
inline double ou_mean(double m0, double t) { return m0 * std::exp(-t); }
inline double ou_var(double s0, double t) { return s0 * std::exp(-2.0 * t) + 0.5 * (1.0 - std::exp(-2.0 * t)); }

inline double normal_pdf(double x, double m, double s2) {
  return std::exp(-0.5 * (x - m) * (x - m) / s2) / std::sqrt(2.0 * std::numbers::pi * s2);
}

}  // namespace oracle

#endif
