#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/multiplier.hpp"
#include "bmlab/numerics.hpp"

namespace bml {

// ---------------------------------------------------------------------------
// Sampled functions on a periodic box

/// f sampled at x = j h on the torus (R / side Z)^n, side = m h, with the
/// indices wrapped so the box is centered at the origin.
class ContinuousField {
 public:
  ContinuousField(int n, int points_per_axis, double mesh)
      : n_(n), m_(points_per_axis), h_(mesh) {
    if (n < 1 || points_per_axis < 2 || !(mesh > 0)) throw InvalidArgument("bad continuous grid");
    check_budget("continuous field", std::pow(static_cast<double>(m_), n_), 1.2e8);
    values_.assign(static_cast<std::size_t>(ipow(m_, n_)), Complex{});
  }

  /// Box of the given side with mesh side / points.
  static ContinuousField box(int n, double side, double mesh) {
    const double m = side / mesh;
    if (std::abs(m - std::round(m)) > 1e-9) throw InvalidArgument("side must be a multiple of the mesh");
    return ContinuousField(n, static_cast<int>(std::round(m)), mesh);
  }

  template <class F>
  static ContinuousField sample(int n, double side, double mesh, F&& f) {
    auto field = box(n, side, mesh);
    std::vector<double> x(n);
    for (std::size_t i = 0; i < field.size(); ++i) {
      field.position(i, x);
      field.values_[i] = f(std::span<const double>(x));
    }
    return field;
  }

  int dim() const { return n_; }
  int points_per_axis() const { return m_; }
  double mesh() const { return h_; }
  double side() const { return m_ * h_; }
  double cell_volume() const { return std::pow(h_, n_); }
  std::size_t size() const { return values_.size(); }

  std::vector<Complex>& values() { return values_; }
  const std::vector<Complex>& values() const { return values_; }
  Complex operator[](std::size_t i) const { return values_[i]; }

  int signed_index(int j) const { return j < (m_ + 1) / 2 ? j : j - m_; }

  void position(std::size_t flat, std::vector<double>& x) const {
    for (int a = n_ - 1; a >= 0; --a) {
      x[a] = signed_index(static_cast<int>(flat % m_)) * h_;
      flat /= m_;
    }
  }
  void frequency(std::size_t flat, std::vector<double>& xi) const {
    for (int a = n_ - 1; a >= 0; --a) {
      xi[a] = signed_index(static_cast<int>(flat % m_)) / side();
      flat /= m_;
    }
  }

  double lp_norm(double p) const {
    CompensatedSum<double> s;
    if (std::isinf(p)) return sup_norm();
    for (auto v : values_) s.add(std::pow(std::abs(v), p));
    return std::pow(s.value() * cell_volume(), 1.0 / p);
  }
  double sup_norm() const {
    double s = 0;
    for (auto v : values_) s = std::max(s, std::abs(v));
    return s;
  }

  std::vector<int> extents() const { return std::vector<int>(n_, m_); }

 private:
  int n_, m_;
  double h_;
  std::vector<Complex> values_;
};

/// Discrete stand-in for the Fourier transform: fhat(k / side) = h^n sum f(x_j) e(-x_j k / side).
inline std::vector<Complex> field_transform(const ContinuousField& f) {
  std::vector<Complex> out = f.values();
  fft_inplace(f.extents(), out, -1);
  const double w = f.cell_volume();
  for (auto& v : out) v *= w;
  return out;
}

/// Inverse of field_transform applied to fhat times a multiplier.
template <class Mult>
ContinuousField apply_multiplier(const ContinuousField& shape, const std::vector<Complex>& fhat,
                                 Mult&& mult) {
  ContinuousField out = shape;
  auto& v = out.values();
  const int n = shape.dim();
  parallel_chunks(v.size(), 1 << 14, [&](std::size_t b, std::size_t e) {
    std::vector<double> xi(n);
    for (std::size_t i = b; i < e; ++i) {
      shape.frequency(i, xi);
      v[i] = fhat[i] * mult(std::span<const double>(xi));
    }
  });
  fft_inplace(shape.extents(), v, +1);
  const double w = 1.0 / (std::pow(shape.side(), n));
  for (auto& x : v) x *= w;
  return out;
}

/// L2 norm of the function with transform fhat times mult, on the Fourier side.
template <class Mult>
double fourier_l2(const ContinuousField& shape, const std::vector<Complex>& fhat, Mult&& mult) {
  CompensatedSum<double> s;
  std::vector<double> xi(shape.dim());
  for (std::size_t i = 0; i < fhat.size(); ++i) {
    shape.frequency(i, xi);
    s.add(std::norm(fhat[i] * mult(std::span<const double>(xi))));
  }
  return std::sqrt(s.value() / std::pow(shape.side(), shape.dim()));
}

// ---------------------------------------------------------------------------
// Normalized averages f * d sigma-bar_lambda

/// Transform of d sigma-bar_lambda: d sigma-hat(lambda^{1/d} xi).
inline Complex normalized_measure_transform(const SurfaceMeasure& sigma, int degree, double lambda,
                                            std::span<const double> xi) {
  const double t = std::pow(lambda, 1.0 / degree);
  std::vector<double> s(xi.begin(), xi.end());
  for (auto& v : s) v *= t;
  return sigma(s);
}

inline ContinuousField continuous_average_fourier(const SurfaceMeasure& sigma, int degree,
                                                  double lambda, const ContinuousField& f) {
  auto fhat = field_transform(f);
  return apply_multiplier(f, fhat, [&](std::span<const double> xi) {
    return normalized_measure_transform(sigma, degree, lambda, xi);
  });
}

struct AverageValues {
  std::vector<Complex> values;
  std::vector<double> error;
  bool flagged = false;
};

/// Direct quadrature sum_k w_k f(x - lambda^{1/d} y_k) over nodes y_k on {R = 1},
/// at two resolutions; the difference is the error estimate.
inline AverageValues continuous_average(const IntegralForm& form, const CutoffFunction& phi,
                                        double lambda,
                                        const std::function<Complex(std::span<const double>)>& f,
                                        const std::vector<std::vector<double>>& points,
                                        int resolution = 0, double tolerance = 1e-6) {
  const int n = form.dimension();
  const SurfaceMethod method =
      n <= 3 ? SurfaceMethod::level_set_quadrature : SurfaceMethod::monte_carlo;
  const int fine_res = resolution > 0 ? resolution : (n == 2 ? 512 : n == 3 ? 96 : 40000);
  SurfaceMeasure fine(form, phi, method, fine_res);
  SurfaceMeasure coarse(form, phi, method, std::max(2, fine_res / 2), 2);
  const double t = std::pow(lambda, 1.0 / form.degree());
  auto run = [&](const SurfaceMeasure& s, std::span<const double> x) {
    CompensatedSum<Complex> acc;
    std::vector<double> y(n);
    const auto& nodes = s.nodes();
    const auto& w = s.weights();
    for (std::size_t k = 0; k < w.size(); ++k) {
      for (int i = 0; i < n; ++i) y[i] = x[i] - t * nodes[k * n + i];
      acc.add(w[k] * f(y));
    }
    return acc.value();
  };
  AverageValues out;
  for (const auto& x : points) {
    if (static_cast<int>(x.size()) != n) throw InvalidArgument("point dimension mismatch");
    const Complex a = run(fine, x), b = run(coarse, x);
    out.values.push_back(a);
    out.error.push_back(std::abs(a - b));
    if (std::abs(a - b) > tolerance * std::max(1.0, std::abs(a))) out.flagged = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Low/high split

struct Split {
  ContinuousField low, high;
};

inline Split low_high_split(const SurfaceMeasure& sigma, const ContinuousField& f, double N,
                            PlateauProfile psi = PlateauProfile::psi()) {
  auto fhat = field_transform(f);
  auto radius = [](std::span<const double> xi) {
    double s = 0;
    for (double v : xi) s += v * v;
    return std::sqrt(s);
  };
  auto low = apply_multiplier(f, fhat, [&](std::span<const double> xi) {
    return psi(radius(xi) / N) * sigma(xi);
  });
  auto high = apply_multiplier(f, fhat, [&](std::span<const double> xi) {
    return (1.0 - psi(radius(xi) / N)) * sigma(xi);
  });
  return {std::move(low), std::move(high)};
}

struct SplitNorms {
  double N = 0;
  double f_l1 = 0, f_l2 = 0;
  double low_sup = 0;
  double high_l2 = 0;          // spatial Riemann sum
  double high_l2_fourier = 0;  // Parseval
  double K1 = 0, K2 = 0;       // for this f
  double kernel_sup = 0;       // sup |psi_{1/N} * d sigma-bar|
  double high_multiplier_sup = 0;
  double K1_operator = 0, K2_operator = 0;  // best constants over all f
};

struct SplitScan {
  std::vector<SplitNorms> rows;
  double decay_exponent = 0;  // c_R - 1
  double K1_spread = 0, K2_spread = 0, K1_operator_spread = 0, K2_operator_spread = 0;
  double parseval_error = 0;
};

inline double spread(const std::vector<double>& v) {
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi / *lo;
}

/// Endpoint constants of the split for each N: ||low||_inf <= K1 N ||f||_1 and
/// ||high||_2 <= K2 N^{1 - c_R} ||f||_2.
inline SplitScan split_scan(const SurfaceMeasure& sigma, double c_R, const ContinuousField& f,
                            const std::vector<double>& Ns, PlateauProfile psi = PlateauProfile::psi()) {
  SplitScan scan;
  scan.decay_exponent = c_R - 1.0;
  auto fhat = field_transform(f);
  auto radius = [](std::span<const double> xi) {
    double s = 0;
    for (double v : xi) s += v * v;
    return std::sqrt(s);
  };
  const double l1 = f.lp_norm(1.0), l2 = f.lp_norm(2.0);
  std::vector<Complex> ones(f.size(), Complex(1.0));
  std::vector<double> k1, k2, k1o, k2o;
  for (double N : Ns) {
    SplitNorms r;
    r.N = N;
    r.f_l1 = l1;
    r.f_l2 = l2;
    auto low_mult = [&](std::span<const double> xi) { return psi(radius(xi) / N) * sigma(xi); };
    auto high_mult = [&](std::span<const double> xi) {
      return (1.0 - psi(radius(xi) / N)) * sigma(xi);
    };
    r.low_sup = apply_multiplier(f, fhat, low_mult).sup_norm();
    r.high_l2 = apply_multiplier(f, fhat, high_mult).lp_norm(2.0);
    r.high_l2_fourier = fourier_l2(f, fhat, high_mult);
    // the kernel is the inverse transform of the multiplier itself
    r.kernel_sup = apply_multiplier(f, ones, low_mult).sup_norm();
    std::vector<double> xi(f.dim());
    for (std::size_t i = 0; i < f.size(); ++i) {
      f.frequency(i, xi);
      r.high_multiplier_sup = std::max(r.high_multiplier_sup, std::abs(high_mult(xi)));
    }
    r.K1 = r.low_sup / (N * l1);
    r.K2 = r.high_l2 / (std::pow(N, 1.0 - c_R) * l2);
    r.K1_operator = r.kernel_sup / N;
    r.K2_operator = r.high_multiplier_sup / std::pow(N, 1.0 - c_R);
    scan.parseval_error = std::max(scan.parseval_error, std::abs(r.high_l2 - r.high_l2_fourier) /
                                                            std::max(1e-300, r.high_l2_fourier));
    k1.push_back(r.K1);
    k2.push_back(r.K2);
    k1o.push_back(r.K1_operator);
    k2o.push_back(r.K2_operator);
    scan.rows.push_back(r);
  }
  if (!Ns.empty()) {
    scan.K1_spread = spread(k1);
    scan.K2_spread = spread(k2);
    scan.K1_operator_spread = spread(k1o);
    scan.K2_operator_spread = spread(k2o);
  }
  return scan;
}

inline nlohmann::json to_json(const SplitScan& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows)
    rows.push_back({{"N", r.N},
                    {"f_l1", r.f_l1},
                    {"f_l2", r.f_l2},
                    {"low_sup", r.low_sup},
                    {"high_l2", r.high_l2},
                    {"high_l2_fourier", r.high_l2_fourier},
                    {"K1", r.K1},
                    {"K2", r.K2},
                    {"kernel_sup", r.kernel_sup},
                    {"high_multiplier_sup", r.high_multiplier_sup},
                    {"K1_operator", r.K1_operator},
                    {"K2_operator", r.K2_operator}});
  return {{"rows", rows},
          {"decay_exponent", s.decay_exponent},
          {"K1_spread", s.K1_spread},
          {"K2_spread", s.K2_spread},
          {"K1_operator_spread", s.K1_operator_spread},
          {"K2_operator_spread", s.K2_operator_spread},
          {"parseval_error", s.parseval_error}};
}

// ---------------------------------------------------------------------------
// Kernel and decay envelopes

/// Smallest K with |psi_{1/N} * d sigma-bar(x)| <= K N (1 + |x|)^{-M} on the grid.
inline double kernel_envelope(const SurfaceMeasure& sigma, double N, double M, int n, double side,
                              double mesh, PlateauProfile psi = PlateauProfile::psi()) {
  auto shape = ContinuousField::box(n, side, mesh);
  std::vector<Complex> ones(shape.size(), Complex(1.0));
  auto kernel = apply_multiplier(shape, ones, [&](std::span<const double> xi) {
    double s = 0;
    for (double v : xi) s += v * v;
    return psi(std::sqrt(s) / N) * sigma(xi);
  });
  double K = 0;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    kernel.position(i, x);
    double r = 0;
    for (double v : x) r += v * v;
    K = std::max(K, std::abs(kernel[i]) * std::pow(1.0 + std::sqrt(r), M) / N);
  }
  return K;
}

/// sup of |d sigma-hat(xi)| (1 + |xi|)^{c_R - 1} over random directions and radii up to r_max.
inline double decay_envelope(const SurfaceMeasure& sigma, double c_R, double r_max,
                             int directions = 16, int radii = 400, std::uint64_t seed = 1) {
  const int n = sigma.dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<double> u(n), xi(n);
  double sup = 0;
  for (int k = 0; k < directions; ++k) {
    double s = 0;
    for (auto& v : u) {
      v = gauss(rng);
      s += v * v;
    }
    for (auto& v : u) v /= std::sqrt(s);
    for (int j = 0; j <= radii; ++j) {
      const double r = r_max * j / radii;
      for (int i = 0; i < n; ++i) xi[i] = r * u[i];
      sup = std::max(sup, std::abs(sigma(xi)) * std::pow(1.0 + r, c_R - 1.0));
    }
  }
  return sup;
}

}  // namespace bml
