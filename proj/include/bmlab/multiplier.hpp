#pragma once
//! \file
//! \brief Fourier side of the average: the exact multiplier, the surface
//! measure transform, the main term c_lambda and its High/Low pieces.
//!
//! Convention: the multiplier of f -> K * f is K^(xi) = sum_y K(y) e(-y.xi),
//! so a kernel supported near the rationals b/q carries the Weyl sum
//! F_q(a, -b) with F_q(a, b) = q^{-n} sum_m e_q(a R(m) + b.m).

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "bmlab/arith.hpp"
#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/grid.hpp"
#include "bmlab/lattice.hpp"
#include "bmlab/numerics.hpp"

namespace bml {

inline bool is_sphere(const IntegralForm& form) {
  if (form.degree() != 2 || !form.is_diagonal()) return false;
  auto c = form.diagonal_coefficients();
  return std::all_of(c.begin(), c.end(), [](std::int64_t v) { return v == 1; });
}

// ---------------------------------------------------------------------------
// Sample grids on T^n

/// Samples xi = j / G, j in [-(G-1)/2, (G-1)/2]^n. When the multiplier is
/// invariant under signed coordinate permutations only one representative
/// per orbit is stored (sorted absolute indices), with its orbit size.
struct MultiplierGrid {
  int n = 0;
  int G = 0;
  std::string label;
  bool orbit_reduced = false;
  std::vector<int> reps;             // samples x n
  std::vector<double> multiplicity;  // grid points represented by each sample
  std::vector<Complex> values;

  std::size_t samples() const { return multiplicity.size(); }
  std::span<const int> index(std::size_t i) const { return {reps.data() + i * n, static_cast<std::size_t>(n)}; }
  std::vector<double> xi(std::size_t i) const {
    std::vector<double> x(n);
    for (int k = 0; k < n; ++k) x[k] = static_cast<double>(reps[i * n + k]) / G;
    return x;
  }
  /// Maximum over the samples: a lower bound for the true sup-norm.
  double sup() const {
    double m = 0;
    for (auto v : values) m = std::max(m, std::abs(v));
    return m;
  }
  /// (G^{-n} sum over all grid points |m|^2)^{1/2}
  double l2_mean() const {
    CompensatedSum<double> s;
    double total = 0;
    for (std::size_t i = 0; i < samples(); ++i) {
      s.add(multiplicity[i] * std::norm(values[i]));
      total += multiplicity[i];
    }
    return std::sqrt(s.value() / total);
  }
  /// Sample index holding the grid point j.
  std::size_t find(std::span<const int> j) const {
    const int h = (G - 1) / 2;
    std::vector<int> k(j.begin(), j.end());
    if (orbit_reduced) {
      for (auto& v : k) v = std::abs(v);
      std::sort(k.begin(), k.end());
    }
    if (lookup_.empty()) {
      for (std::size_t i = 0; i < samples(); ++i) lookup_[key(index(i), h)] = i;
    }
    auto it = lookup_.find(key(k, h));
    if (it == lookup_.end()) throw InvalidArgument("index outside the grid");
    return it->second;
  }
  Complex at(std::span<const int> j) const { return values[find(j)]; }

  /// Same sample layout, empty values.
  MultiplierGrid like(std::string new_label) const {
    MultiplierGrid g = *this;
    g.label = std::move(new_label);
    g.values.assign(samples(), 0.0);
    return g;
  }

 private:
  static std::uint64_t key(std::span<const int> k, int h) {
    std::uint64_t v = 0;
    for (int c : k) v = v * static_cast<std::uint64_t>(2 * h + 1) + static_cast<std::uint64_t>(c + h);
    return v;
  }
  mutable std::unordered_map<std::uint64_t, std::size_t> lookup_;
};

inline MultiplierGrid make_sample_grid(int n, int G, bool orbit_reduced, std::string label,
                                       double budget = 1e7) {
  if (G < 1 || G % 2 == 0) throw InvalidArgument("grid resolution G must be odd");
  const int h = (G - 1) / 2;
  MultiplierGrid g;
  g.n = n;
  g.G = G;
  g.label = std::move(label);
  g.orbit_reduced = orbit_reduced;
  std::vector<int> j(n);
  if (!orbit_reduced) {
    check_budget("multiplier grid", std::pow(static_cast<double>(G), n), budget);
    std::fill(j.begin(), j.end(), -h);
    while (true) {
      g.reps.insert(g.reps.end(), j.begin(), j.end());
      g.multiplicity.push_back(1.0);
      int i = n - 1;
      while (i >= 0 && j[i] == h) j[i--] = -h;
      if (i < 0) break;
      ++j[i];
    }
  } else {
    std::fill(j.begin(), j.end(), 0);
    double fact_n = std::tgamma(n + 1.0);
    while (true) {
      double mult = fact_n;
      int run = 1;
      for (int i = 1; i <= n; ++i) {
        if (i < n && j[i] == j[i - 1]) {
          ++run;
        } else {
          mult /= std::tgamma(run + 1.0);
          run = 1;
        }
      }
      for (int c : j) mult *= c != 0 ? 2.0 : 1.0;
      g.reps.insert(g.reps.end(), j.begin(), j.end());
      g.multiplicity.push_back(mult);
      int i = n - 1;
      while (i >= 0 && j[i] == h) --i;
      if (i < 0) break;
      ++j[i];
      for (int k = i + 1; k < n; ++k) j[k] = j[i];
    }
    check_budget("multiplier grid", static_cast<double>(g.multiplicity.size()), budget);
  }
  g.values.assign(g.multiplicity.size(), 0.0);
  return g;
}

/// max_i |a_i - b_i| over a shared layout.
inline double max_abs_diff(const MultiplierGrid& a, const MultiplierGrid& b) {
  if (a.reps != b.reps) throw InvalidArgument("grids have different layouts");
  double m = 0;
  for (std::size_t i = 0; i < a.samples(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

template <class Fn>
void sample_grid(MultiplierGrid& g, Fn&& fn) {
  parallel_chunks(g.samples(), 32, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) g.values[i] = fn(g.xi(i));
  });
}

// ---------------------------------------------------------------------------
// Exact multiplier

inline MultiplierGrid exact_multiplier(const LatticeShell& shell, int G, bool orbit_reduced,
                                       double budget = 1e10) {
  if (shell.empty()) throw NotRepresented("lambda = " + std::to_string(shell.lambda) +
                                          " is not a represented value");
  auto g = make_sample_grid(shell.n, G, orbit_reduced, "w");
  check_budget("exact multiplier", static_cast<double>(g.samples()) * shell.size(), budget);
  const int n = shell.n;
  sample_grid(g, [&](const std::vector<double>& xi) {
    CompensatedSum<Complex> s;
    for (std::size_t k = 0; k < shell.size(); ++k) {
      double phase = 0;
      for (int i = 0; i < n; ++i) phase += shell.point(k)[i] * xi[i];
      s.add(shell.weights[k] * expi(-phase));
    }
    return s.value() / shell.r_value;
  });
  return g;
}

inline MultiplierGrid exact_multiplier(const IntegralForm& form, const CutoffFunction& phi,
                                       std::int64_t lambda, int G) {
  return exact_multiplier(enumerate_shell(form, phi, lambda), G, form.hyperoctahedral_invariant());
}

// ---------------------------------------------------------------------------
// Surface measure transform

enum class SurfaceMethod { automatic, bessel_sphere, level_set_quadrature, monte_carlo };

inline const char* to_string(SurfaceMethod m) {
  switch (m) {
    case SurfaceMethod::automatic: return "automatic";
    case SurfaceMethod::bessel_sphere: return "bessel-sphere";
    case SurfaceMethod::level_set_quadrature: return "level-set-quadrature";
    case SurfaceMethod::monte_carlo: return "monte-carlo";
  }
  return "?";
}

struct SurfaceValue {
  Complex value;
  double error = 0.0;
  bool flagged = false;
};

/// d sigma = phi dmu / |grad R| on {R = 1}. In polar coordinates
///   int g d sigma = int_{S^{n-1}, R(u) > 0} g(t_u u) R(u)^{-n/d} / d du,
/// t_u = R(u)^{-1/d}; the quadrature methods discretize this direction
/// integral, the Bessel route uses the closed form for the sphere.
class SurfaceMeasure {
 public:
  SurfaceMeasure(const IntegralForm& form, const CutoffFunction& phi,
                 SurfaceMethod method = SurfaceMethod::automatic, int resolution = 0,
                 std::uint64_t seed = 1, double tolerance = 1e-6)
      : n_(form.dimension()), tolerance_(tolerance) {
    if (method == SurfaceMethod::automatic) {
      if (is_sphere(form) && phi.radial_on_unit_sphere()) method = SurfaceMethod::bessel_sphere;
      else if (n_ <= 3) method = SurfaceMethod::level_set_quadrature;
      else method = SurfaceMethod::monte_carlo;
    }
    method_ = method;
    switch (method) {
      case SurfaceMethod::bessel_sphere:
        if (!is_sphere(form) || !phi.radial_on_unit_sphere())
          throw InvalidArgument("bessel-sphere needs the sphere form and a radial cutoff");
        sphere_scale_ = 0.5 * phi.value_on_unit_sphere();
        break;
      case SurfaceMethod::level_set_quadrature: {
        if (n_ < 2 || n_ > 3) throw InvalidArgument("level-set quadrature is implemented for n = 2, 3");
        const int m = resolution > 0 ? resolution : (n_ == 2 ? 256 : 64);
        build_rule(form, phi, m, fine_);
        build_rule(form, phi, m / 2, coarse_);
        break;
      }
      case SurfaceMethod::monte_carlo: {
        const int m = resolution > 0 ? resolution : 20000;
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss;
        std::vector<double> u(n_);
        const double w = sphere_area(n_) / m;
        for (int k = 0; k < m; ++k) {
          double r2 = 0;
          for (auto& v : u) {
            v = gauss(rng);
            r2 += v * v;
          }
          for (auto& v : u) v /= std::sqrt(r2);
          add_node(form, phi, u, w, fine_);
          fine_.count = m;
        }
        break;
      }
      case SurfaceMethod::automatic:
        break;
    }
  }

  SurfaceMethod method() const { return method_; }
  int dim() const { return n_; }

  /// Fast path, value only.
  Complex operator()(std::span<const double> xi) const {
    if (method_ == SurfaceMethod::bessel_sphere) return sphere_scale_ * sphere_measure_transform(n_, norm(xi));
    return apply(fine_, xi);
  }

  SurfaceValue evaluate(std::span<const double> xi) const {
    SurfaceValue out;
    switch (method_) {
      case SurfaceMethod::bessel_sphere:
        out.value = (*this)(xi);
        out.error = 1e-14 * std::max(1.0, std::abs(out.value));
        break;
      case SurfaceMethod::level_set_quadrature:
        out.value = apply(fine_, xi);
        out.error = std::abs(out.value - apply(coarse_, xi));
        break;
      default: {
        // standard error of the sample mean
        CompensatedSum<Complex> s;
        CompensatedSum<double> s2;
        const std::size_t m = fine_.count;
        for (std::size_t k = 0; k < fine_.w.size(); ++k) {
          const Complex v = fine_.w[k] * phase(fine_, k, xi) * static_cast<double>(m);
          s.add(v);
          s2.add(std::norm(v));
        }
        const Complex mean = s.value() / static_cast<double>(m);
        const double var = std::max(0.0, s2.value() / m - std::norm(mean));
        out.value = mean;
        out.error = std::sqrt(var / m);
      }
    }
    out.flagged = out.error > tolerance_ * std::max(1.0, std::abs(out.value));
    return out;
  }

  double total_mass() const {
    std::vector<double> zero(n_, 0.0);
    return (*this)(zero).real();
  }

  /// Quadrature nodes on {R = 1}, n coordinates per node; empty for the Bessel route.
  const std::vector<double>& nodes() const { return fine_.x; }
  const std::vector<double>& weights() const { return fine_.w; }

 private:
  struct Rule {
    std::vector<double> x;  // nodes on the level set, n per node
    std::vector<double> w;
    std::size_t count = 0;  // Monte Carlo sample count (nodes with R(u) <= 0 dropped)
  };

  static double norm(std::span<const double> v) {
    double s = 0;
    for (double c : v) s += c * c;
    return std::sqrt(s);
  }

  void add_node(const IntegralForm& form, const CutoffFunction& phi, const std::vector<double>& u,
                double w, Rule& rule) const {
    const double Ru = form.eval(u);
    if (!(Ru > 0)) {
      if (!phi.coordinate_bound())
        throw InvalidArgument("unbounded cutoff on an indefinite level set: surface measure diverges");
      return;
    }
    const int d = form.degree();
    const double t = std::pow(Ru, -1.0 / d);
    std::vector<double> x(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) x[i] = t * u[i];
    const double wt = w * phi(x) * std::pow(Ru, -static_cast<double>(n_) / d) / d;
    if (wt == 0.0) return;
    rule.x.insert(rule.x.end(), x.begin(), x.end());
    rule.w.push_back(wt);
  }

  void build_rule(const IntegralForm& form, const CutoffFunction& phi, int m, Rule& rule) const {
    if (n_ == 2) {
      for (int k = 0; k < m; ++k) {
        const double th = kTwoPi * k / m;
        add_node(form, phi, {std::cos(th), std::sin(th)}, kTwoPi / m, rule);
      }
      return;
    }
    auto gl = gauss_legendre(m, -1.0, 1.0);
    const int mphi = 2 * m;
    for (int i = 0; i < m; ++i) {
      const double z = gl.nodes[i], s = std::sqrt(std::max(0.0, 1 - z * z));
      for (int k = 0; k < mphi; ++k) {
        const double p = kTwoPi * k / mphi;
        add_node(form, phi, {s * std::cos(p), s * std::sin(p), z}, gl.weights[i] * kTwoPi / mphi, rule);
      }
    }
  }

  Complex phase(const Rule& r, std::size_t k, std::span<const double> xi) const {
    double p = 0;
    for (int i = 0; i < n_; ++i) p += r.x[k * n_ + i] * xi[i];
    return expi(-p);
  }

  Complex apply(const Rule& r, std::span<const double> xi) const {
    CompensatedSum<Complex> s;
    for (std::size_t k = 0; k < r.w.size(); ++k) s.add(r.w[k] * phase(r, k, xi));
    return s.value();
  }

  int n_;
  double tolerance_;
  SurfaceMethod method_ = SurfaceMethod::automatic;
  double sphere_scale_ = 0.0;
  Rule fine_, coarse_;
};

// ---------------------------------------------------------------------------
// Weyl sums indexed by (a, b) for one modulus

/// F_q(a, b) for all a and arbitrary integer b. Diagonal forms factor into
/// one-dimensional sums; other forms use a full table.
class WeylCoefficients {
 public:
  WeylCoefficients(const IntegralForm& form, std::int64_t q, double budget = kDefaultArithBudget)
      : q_(q), n_(form.dimension()), diagonal_(form.is_diagonal()) {
    if (diagonal_) {
      auto c = form.diagonal_coefficients();
      axis_.resize(static_cast<std::size_t>(n_));
      std::map<std::int64_t, std::vector<std::vector<Complex>>> memo;
      for (int i = 0; i < n_; ++i) {
        auto& slot = memo[c[i]];
        if (slot.empty())
          for (std::int64_t a = 0; a < q; ++a) slot.push_back(weyl_sum_1d(a * c[i], form.degree(), q));
        axis_[i] = slot;
      }
    } else {
      table_ = make_weyl_table(form, q, WeylMethod::automatic, budget);
    }
  }

  std::int64_t modulus() const { return q_; }

  Complex operator()(std::int64_t a, std::span<const std::int64_t> b) const {
    a = mod(a, q_);
    if (diagonal_) {
      Complex p = 1.0;
      for (int i = 0; i < n_; ++i) p *= axis_[i][a][mod(b[i], q_)];
      return p;
    }
    std::vector<std::int64_t> r(b.begin(), b.end());
    for (auto& v : r) v = mod(v, q_);
    return table_(a, r);
  }

  /// F_q(a, -b)
  Complex at_negative(std::int64_t a, std::span<const std::int64_t> b) const {
    std::vector<std::int64_t> r(b.begin(), b.end());
    for (auto& v : r) v = -v;
    return (*this)(a, r);
  }

 private:
  std::int64_t q_;
  int n_;
  bool diagonal_;
  std::vector<std::vector<std::vector<Complex>>> axis_;  // [axis][a][c]
  WeylTable table_;
};

// ---------------------------------------------------------------------------
// Sums over rationals near xi

namespace detail {
/// Calls fn(b, eta) for each integer vector b with |q xi - b| < q rho, where
/// eta = xi - b / q.
template <class Fn>
void near_rationals(std::span<const double> xi, std::int64_t q, double rho, Fn&& fn) {
  const int n = static_cast<int>(xi.size());
  const double R = q * rho;
  std::vector<std::int64_t> b(n);
  std::vector<double> eta(n);
  auto rec = [&](auto& self, int i, double used) -> void {
    if (i == n) {
      fn(std::span<const std::int64_t>(b), std::span<const double>(eta));
      return;
    }
    const double c = q * xi[i];
    const double room = std::sqrt(std::max(0.0, R * R - used));
    for (auto v = static_cast<std::int64_t>(std::ceil(c - room)); v <= static_cast<std::int64_t>(std::floor(c + room)); ++v) {
      const double dist = c - static_cast<double>(v);
      const double nu = used + dist * dist;
      if (nu >= R * R) continue;
      b[i] = v;
      eta[i] = dist / static_cast<double>(q);
      self(self, i + 1, nu);
    }
  };
  rec(rec, 0, 0.0);
}

inline double norm2(std::span<const double> v) {
  double s = 0;
  for (double c : v) s += c * c;
  return std::sqrt(s);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Pieces of the decomposition

struct MultiplierParams {
  std::int64_t lambda = 0;
  int N = 0;
  std::int64_t L = 0;            // 0: N!
  int section = 2;               // which m_{2,2} definition (2: major-arc split, 3: via Omega)
  bool e_factor = false;         // section 3 pieces: keep e_q(-a lambda)
  PlateauProfile zeta = PlateauProfile::zeta();
  SurfaceMethod surface = SurfaceMethod::automatic;
};

inline const std::vector<std::string>& piece_labels() {
  static const std::vector<std::string> labels{"w",  "c",    "m11",  "m12", "m21", "m22",
                                               "m221", "m222", "m23", "omega", "v", "s"};
  return labels;
}

/// Evaluates any piece at a point; holds the shell, surface measure and
/// Weyl data for one (form, phi, lambda, N, L).
class Decomposition {
 public:
  Decomposition(const IntegralForm& form, const CutoffFunction& phi, MultiplierParams p)
      : form_(form), phi_(phi), p_(p), sigma_(form, phi, p.surface) {
    n_ = form.dimension();
    d_ = form.degree();
    if (p_.lambda < 1) throw InvalidArgument("lambda must be >= 1");
    shell_ = enumerate_shell(form, phi, p_.lambda);
    if (shell_.empty())
      throw NotRepresented("lambda = " + std::to_string(p_.lambda) + " is not a represented value");
    root_ = std::pow(static_cast<double>(p_.lambda), 1.0 / d_);
    qmax_ = detail::iroot_floor(p_.lambda, d_);
    normalization_ = std::pow(static_cast<double>(p_.lambda), static_cast<double>(n_) / d_ - 1.0) /
                     shell_.r_value;
    if (p_.N < 0) throw InvalidArgument("N must be >= 0");
    if (p_.N > 0 && p_.L == 0) {
      if (p_.N > 12) throw InvalidArgument("N! too large");
      p_.L = factorial(p_.N);
    }
    if (p_.L > 0)
      for (int q = 1; q <= p_.N; ++q)
        if (p_.L % q != 0)
          throw InvalidArgument("inconsistent (N, L): " + std::to_string(q) + " does not divide L");
    for (std::int64_t q = 1; q <= std::max<std::int64_t>(qmax_, p_.N); ++q)
      weyl_.emplace(q, WeylCoefficients(form, q));
    if (p_.L > 0 && !weyl_.count(p_.L)) weyl_.emplace(p_.L, WeylCoefficients(form, p_.L));
  }

  const LatticeShell& shell() const { return shell_; }
  const SurfaceMeasure& surface() const { return sigma_; }
  const MultiplierParams& params() const { return p_; }
  double normalization() const { return normalization_; }
  std::int64_t q_max() const { return qmax_; }
  std::int64_t L() const { return p_.L; }

  Complex w(std::span<const double> xi) const {
    CompensatedSum<Complex> s;
    for (std::size_t k = 0; k < shell_.size(); ++k) {
      double ph = 0;
      for (int i = 0; i < n_; ++i) ph += shell_.point(k)[i] * xi[i];
      s.add(shell_.weights[k] * expi(-ph));
    }
    return s.value() / shell_.r_value;
  }

  /// sum_{lo <= q <= hi} sum_b sum_{a in U_q} e_q(-a lambda) F_q(a,-b)
  ///   [zeta_q - zeta_{t_q}](xi - b/q) dsigma(lambda^{1/d}(xi - b/q)),
  /// with t_q = q lambda^{1/d} / N. mode 0: zeta_q only, 1: zeta_{t_q} only,
  /// 2: the difference.
  Complex major_arcs(std::span<const double> xi, std::int64_t lo, std::int64_t hi, int mode,
                     bool e_factor = true) const {
    CompensatedSum<Complex> s;
    for (std::int64_t q = lo; q <= hi; ++q) {
      const auto& F = weyl_.at(q);
      const double t = p_.N > 0 ? q * root_ / p_.N : 0.0;
      const double scale = mode == 1 ? t : static_cast<double>(q);
      const double rho = p_.zeta.outer / scale;
      detail::near_rationals(xi, q, rho, [&](std::span<const std::int64_t> b, std::span<const double> eta) {
        const double r = detail::norm2(eta);
        double bump = 0;
        if (mode == 0) bump = p_.zeta(q * r);
        else if (mode == 1) bump = p_.zeta(t * r);
        else bump = p_.zeta(q * r) - p_.zeta(t * r);
        if (bump == 0.0) return;
        Complex coeff = 0;
        for (std::int64_t a = 1; a <= q; ++a) {
          if (gcd64(a % q, q) != 1) continue;
          const Complex e = e_factor ? expi_frac(mod(-a * p_.lambda, q), q) : Complex(1.0);
          coeff += e * F.at_negative(a % q, b);
        }
        s.add(coeff * bump * dsigma(eta));
      });
    }
    return normalization_ * s.value();
  }

  Complex c(std::span<const double> xi) const { return major_arcs(xi, 1, qmax_, 0); }
  Complex m11(std::span<const double> xi) const { return root_ <= p_.N ? w(xi) : Complex(0.0); }
  Complex m12(std::span<const double> xi) const { need_N(); return major_arcs(xi, 1, std::min<std::int64_t>(p_.N, qmax_), 1); }
  Complex m22_major(std::span<const double> xi) const { need_N(); return major_arcs(xi, 1, std::min<std::int64_t>(p_.N, qmax_), 2); }
  Complex m23(std::span<const double> xi) const { need_N(); return major_arcs(xi, p_.N + 1, qmax_, 0); }
  Complex m21(std::span<const double> xi) const { return w(xi) - c(xi); }

  /// Sum over b in Z^n near L xi of coefficient(b) * zeta_{2L}(xi - b/L) (times
  /// dsigma when with_sigma).
  template <class Coef>
  Complex at_level_L(std::span<const double> xi, Coef&& coef, bool with_sigma) const {
    need_L();
    const auto L = p_.L;
    CompensatedSum<Complex> s;
    detail::near_rationals(xi, L, p_.zeta.outer / (2.0 * L), [&](std::span<const std::int64_t> b, std::span<const double> eta) {
      const double bump = p_.zeta(2.0 * L * detail::norm2(eta));
      if (bump == 0.0) return;
      Complex v = coef(b, eta) * bump;
      if (with_sigma) v *= dsigma(eta);
      s.add(v);
    });
    return s.value();
  }

  /// sum_{0 <= a < L} e_L(-a lambda)^{[e_factor]} F_L(a, -b), restricted by predicate on a.
  template <class Pred>
  Complex level_L_coefficient(std::span<const std::int64_t> b, Pred&& keep) const {
    const auto& F = weyl_.at(p_.L);
    Complex c = 0;
    for (std::int64_t a = 0; a < p_.L; ++a) {
      if (!keep(a)) continue;
      const Complex e = p_.e_factor ? expi_frac(mod(-a * p_.lambda, p_.L), p_.L) : Complex(1.0);
      c += e * F.at_negative(a, b);
    }
    return c;
  }

  Complex omega(std::span<const double> xi) const {
    return normalization_ * at_level_L(xi, [&](auto b, auto) { return level_L_coefficient(b, [](std::int64_t) { return true; }); }, true);
  }

  Complex s(std::span<const double> xi) const {
    return at_level_L(xi, [&](auto b, auto) { return level_L_coefficient(b, [](std::int64_t) { return true; }); }, false);
  }

  Complex v(std::span<const double> xi) const {
    need_L();
    const auto L = p_.L;
    CompensatedSum<Complex> acc;
    detail::near_rationals(xi, L, p_.zeta.outer / L, [&](std::span<const std::int64_t>, std::span<const double> eta) {
      const double bump = p_.zeta(static_cast<double>(L) * detail::norm2(eta));
      if (bump != 0.0) acc.add(bump * dsigma(eta));
    });
    return normalization_ * acc.value();
  }

  /// Omega minus the q <= N major arcs without the e_q factor.
  Complex m22_omega(std::span<const double> xi) const {
    need_N();
    return omega(xi) - major_arcs(xi, 1, p_.N, 0, p_.e_factor);
  }

  /// Terms of Omega with L / gcd(a, b, L) > N.
  Complex m222(std::span<const double> xi) const {
    need_N();
    const auto L = p_.L;
    return normalization_ * at_level_L(xi, [&](auto b, auto) {
      const auto g = full_gcd(0, b, L);
      return level_L_coefficient(b, [&](std::int64_t a) { return L / gcd64(a, g) > p_.N; });
    }, true);
  }

  /// Terms with L / nu <= N, each with (zeta_{2L} - zeta_{L/nu})(xi - b/L). The
  /// zeta_{L/nu} part is summed by reduced fractions a'/q, b'/q, q = L/nu,
  /// gcd(a', b', q) = 1.
  Complex m221(std::span<const double> xi) const {
    need_N();
    const auto L = p_.L;
    const Complex first = at_level_L(xi, [&](auto b, auto) {
      const auto g = full_gcd(0, b, L);
      return level_L_coefficient(b, [&](std::int64_t a) { return L / gcd64(a, g) <= p_.N; });
    }, true);
    CompensatedSum<Complex> second;
    for (std::int64_t q = 1; q <= p_.N; ++q) {
      if (L % q) continue;
      const auto& F = weyl_.at(q);
      detail::near_rationals(xi, q, p_.zeta.outer / q, [&](std::span<const std::int64_t> b, std::span<const double> eta) {
        const double bump = p_.zeta(q * detail::norm2(eta));
        if (bump == 0.0) return;
        const auto g = full_gcd(0, b, q);
        Complex coeff = 0;
        for (std::int64_t a = 0; a < q; ++a) {
          if (gcd64(a, g) != 1) continue;
          const Complex e = p_.e_factor ? expi_frac(mod(-a * p_.lambda, q), q) : Complex(1.0);
          coeff += e * F.at_negative(a, b);
        }
        second.add(coeff * bump * dsigma(eta));
      });
    }
    return normalization_ * (first - second.value());
  }

  Complex evaluate(const std::string& label, std::span<const double> xi) const {
    if (label == "w") return w(xi);
    if (label == "c") return c(xi);
    if (label == "m11") return m11(xi);
    if (label == "m12") return m12(xi);
    if (label == "m21") return m21(xi);
    if (label == "m22") return p_.section == 3 ? m22_omega(xi) : m22_major(xi);
    if (label == "m221") return m221(xi);
    if (label == "m222") return m222(xi);
    if (label == "m23") return m23(xi);
    if (label == "omega") return omega(xi);
    if (label == "v") return v(xi);
    if (label == "s") return s(xi);
    throw InvalidArgument("unknown piece label: " + label);
  }

  /// Multiplier of the sampled pieces is invariant under signed permutations.
  bool symmetric() const {
    return form_.hyperoctahedral_invariant() && sigma_.method() != SurfaceMethod::monte_carlo;
  }

 private:
  Complex dsigma(std::span<const double> eta) const {
    std::vector<double> x(eta.begin(), eta.end());
    for (auto& v : x) v *= root_;
    return sigma_(x);
  }
  void need_N() const {
    if (p_.N < 1) throw InvalidArgument("this piece needs N >= 1");
  }
  void need_L() const {
    if (p_.L < 1) throw InvalidArgument("this piece needs L (or N)");
  }

  IntegralForm form_;
  CutoffFunction phi_;
  MultiplierParams p_;
  SurfaceMeasure sigma_;
  LatticeShell shell_;
  int n_ = 0, d_ = 0;
  double root_ = 0.0;
  std::int64_t qmax_ = 0;
  double normalization_ = 1.0;
  std::map<std::int64_t, WeylCoefficients> weyl_;
};

inline MultiplierGrid piece(const Decomposition& dec, const std::string& label, int G) {
  auto g = make_sample_grid(dec.shell().n, G, dec.symmetric(), label);
  sample_grid(g, [&](const std::vector<double>& xi) { return dec.evaluate(label, xi); });
  return g;
}

inline MultiplierGrid piece(const std::string& label, const IntegralForm& form,
                            const CutoffFunction& phi, const MultiplierParams& p, int G) {
  return piece(Decomposition(form, phi, p), label, G);
}

inline MultiplierGrid main_term(const IntegralForm& form, const CutoffFunction& phi,
                                std::int64_t lambda, int G) {
  MultiplierParams p;
  p.lambda = lambda;
  return piece("c", form, phi, p, G);
}

/// Omega = v s needs zeta_L(. - b1/L) zeta_{2L}(. - b2/L) = 0 for b1 != b2 and
/// zeta_L = 1 on the support of zeta_{2L}.
inline bool factorization_exact(const PlateauProfile& z) {
  return 1.5 * z.outer <= 1.0 && z.inner >= 0.5 * z.outer;
}

// ---------------------------------------------------------------------------
// Kernel of s

struct KernelOfS {
  Box box;
  std::vector<double> values;  // row-major over box
  double l1_mass = 0.0;
};

/// s^vee(x) = L t^{-n} zeta(x / t) 1{R(x) = 0 mod L} for s built with
/// zeta_t; the definition of s uses t = 2L.
inline KernelOfS kernel_of_s(const IntegralForm& form, std::int64_t L, const Box& box,
                             double t = 0.0, PlateauProfile profile = PlateauProfile::zeta(),
                             double budget = 1e8) {
  if (L < 1) throw InvalidArgument("L must be >= 1");
  if (t <= 0) t = 2.0 * static_cast<double>(L);
  const int n = form.dimension();
  check_budget("kernel of s", static_cast<double>(box.volume()), budget);
  RadialInverseTransform zeta(n, profile);
  KernelOfS out{box, std::vector<double>(box.volume(), 0.0), 0.0};
  std::map<std::int64_t, double> memo;  // |x|^2 -> zeta(x / t)
  std::vector<std::int64_t> x(n);
  const double pre = static_cast<double>(L) * std::pow(t, -n);
  CompensatedSum<double> mass;
  for (std::size_t i = 0; i < box.volume(); ++i) {
    box.point(i, x);
    if (mod(form.eval_mod(x, L), L) != 0) continue;
    std::int64_t r2 = 0;
    for (auto c : x) r2 += c * c;
    auto it = memo.find(r2);
    if (it == memo.end()) it = memo.emplace(r2, zeta(std::sqrt(static_cast<double>(r2)) / t)).first;
    out.values[i] = pre * it->second;
    mass.add(std::abs(out.values[i]));
  }
  out.l1_mass = mass.value();
  return out;
}

// ---------------------------------------------------------------------------
// Low-pass kernel zeta_t * dsigma for the sphere

/// (zeta_t * dsigma)(x) = int zeta(t |xi|) dsigma^(xi) e(x.xi) dxi, radial.
inline double low_pass_sphere_kernel(int n, const CutoffFunction& phi, double t, double r,
                                     PlateauProfile profile = PlateauProfile::zeta(),
                                     int nodes_per_unit = 48) {
  const double scale = 0.5 * phi.value_on_unit_sphere();
  const double a = profile.inner / t, b = profile.outer / t;
  CompensatedSum<double> s;
  auto piece_rule = [&](double lo, double hi) {
    const int m = std::max(32, static_cast<int>(std::ceil((hi - lo) * nodes_per_unit * (1 + r))));
    auto gl = gauss_legendre(m, lo, hi);
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
      const double rho = gl.nodes[i];
      s.add(gl.weights[i] * profile(t * rho) * scale * sphere_measure_transform(n, rho) *
            std::pow(rho, n - 1) * sphere_measure_transform(n, rho * r));
    }
  };
  piece_rule(0.0, a);
  piece_rule(a, b);
  return s.value();
}

}  // namespace bml
