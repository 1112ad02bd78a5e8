#pragma once
//! \file
//! \brief Quadrature rules, smooth cutoff profiles and an RAII layer over FFTW.

#include <cmath>
#include <complex>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include <fftw3.h>

#include "bmlab/core.hpp"

namespace bml {

// ---------------------------------------------------------------------------
// Gauss-Legendre

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Gauss-Legendre rule with m nodes on [a, b] (Newton on P_m).
inline QuadratureRule gauss_legendre(int m, double a = -1.0, double b = 1.0) {
  QuadratureRule rule;
  rule.nodes.resize(m);
  rule.weights.resize(m);
  for (int i = 0; i < m; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (m + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1, p1 = x;
      for (int k = 2; k <= m; ++k) {
        double p2 = ((2.0 * k - 1) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = m * (x * p1 - p0) / (x * x - 1);
      double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double p0 = 1, p1 = x;
    for (int k = 2; k <= m; ++k) {
      double p2 = ((2.0 * k - 1) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = m * (x * p1 - p0) / (x * x - 1);
    const double w = 2.0 / ((1 - x * x) * dp * dp);
    rule.nodes[i] = 0.5 * (b - a) * x + 0.5 * (b + a);
    rule.weights[i] = 0.5 * (b - a) * w;
  }
  return rule;
}

// ---------------------------------------------------------------------------
// Smooth plateau profiles

/// Equals 1 for t <= inner, 0 for t >= outer, C-infinity and monotone between.
inline double plateau(double t, double inner, double outer) {
  if (t <= inner) return 1.0;
  if (t >= outer) return 0.0;
  const double s = (outer - t) / (outer - inner);
  const double e0 = std::exp(-1.0 / s);
  const double e1 = std::exp(-1.0 / (1.0 - s));
  return e0 / (e0 + e1);
}

/// Radial profile with a plateau and a support radius. Used for the Fourier
/// side bump zeta-hat and the appendix low-pass psi-hat.
struct PlateauProfile {
  double inner = 0.5;
  double outer = 1.0;

  double operator()(double radius) const {
    return plateau(radius, inner, outer);
  }

  static PlateauProfile zeta() { return {0.5, 1.0}; }
  /// Half-scaled zeta: makes zeta_L(. - b1/L) and zeta_2L(. - b2/L) disjoint.
  static PlateauProfile zeta_narrow() { return {0.25, 0.5}; }
  static PlateauProfile psi() { return {1.0, 2.0}; }
};

// ---------------------------------------------------------------------------
// Surface area of the unit sphere S^{n-1}

inline double sphere_area(int n) {
  return 2.0 * std::pow(std::numbers::pi, 0.5 * n) / std::tgamma(0.5 * n);
}

/// Fourier transform of the surface measure of the unit sphere in R^n,
/// with convention int e(-x.xi) dmu(x).
inline double sphere_measure_transform(int n, double rho) {
  if (rho < 1e-12) return sphere_area(n);
  const double nu = 0.5 * n - 1.0;
  const double z = kTwoPi * rho;
  if (n == 1) return 2.0 * std::cos(z);
  if (n == 3) return 4.0 * std::numbers::pi * std::sin(z) / z;
  return kTwoPi * std::pow(rho, -nu) * std::cyl_bessel_j(nu, z);
}

/// Inverse Fourier transform in R^n of a radial function profile(|xi|)
/// supported in |xi| <= support, evaluated at |x| = r:
///   int profile(|xi|) e(x.xi) dxi.
class RadialInverseTransform {
 public:
  RadialInverseTransform(int n, PlateauProfile profile, int nodes_per_piece = 160)
      : n_(n), profile_(profile) {
    // Split at the plateau edge: the integrand is analytic on each piece.
    auto a = gauss_legendre(nodes_per_piece, 0.0, profile.inner);
    auto b = gauss_legendre(nodes_per_piece, profile.inner, profile.outer);
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
      rho_.push_back(a.nodes[i]);
      w_.push_back(a.weights[i] * profile(a.nodes[i]));
    }
    for (std::size_t i = 0; i < b.nodes.size(); ++i) {
      rho_.push_back(b.nodes[i]);
      w_.push_back(b.weights[i] * profile(b.nodes[i]));
    }
  }

  double operator()(double r) const {
    CompensatedSum<double> s;
    for (std::size_t i = 0; i < rho_.size(); ++i)
      s.add(w_[i] * std::pow(rho_[i], n_ - 1) *
            sphere_measure_transform(n_, rho_[i] * r));
    return s.value();
  }

 private:
  int n_;
  PlateauProfile profile_;
  std::vector<double> rho_, w_;
};

// ---------------------------------------------------------------------------
// FFTW

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// In-place complex DFT over a row-major array with the given extents.
/// sign = -1 is the forward transform sum x_j e(-j.k/N).
class FftPlan {
 public:
  FftPlan(std::span<const int> extents, Complex* data, int sign) {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan_ = fftw_plan_dft(static_cast<int>(extents.size()), extents.data(),
                          reinterpret_cast<fftw_complex*>(data),
                          reinterpret_cast<fftw_complex*>(data), sign,
                          FFTW_ESTIMATE);
    if (!plan_) throw Error("fftw_plan_dft failed");
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
  ~FftPlan() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan_);
  }
  void execute() { fftw_execute(plan_); }

 private:
  fftw_plan plan_ = nullptr;
};

/// One-shot in-place DFT.
inline void fft_inplace(std::span<const int> extents, std::vector<Complex>& data,
                        int sign) {
  FftPlan plan(extents, data.data(), sign);
  plan.execute();
}

}  // namespace bml
