#pragma once
//! \file
//! \brief Integral forms, cutoff functions and the derived constants
//! (Birch rank, c_R, eta_R) that control every decay exponent downstream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"

namespace bml {

struct Monomial {
  std::vector<int> exponents;
  std::int64_t coeff = 0;
};

enum class RankSource { derived, declared };

class IntegralForm;
std::optional<int> derive_birch_rank(const IntegralForm& form);

/// Homogeneous polynomial with integer coefficients.
class IntegralForm {
 public:
  IntegralForm(int dimension, std::vector<Monomial> monomials,
               std::optional<int> declared_rank = std::nullopt,
               std::string name = {})
      : n_(dimension), name_(std::move(name)) {
    if (n_ < 1) throw InvalidArgument("form dimension must be positive");
    std::map<std::vector<int>, std::int64_t> merged;
    for (auto& m : monomials) {
      if (static_cast<int>(m.exponents.size()) != n_)
        throw InvalidArgument("monomial exponent vector has wrong length");
      for (int e : m.exponents)
        if (e < 0) throw InvalidArgument("negative exponent");
      merged[m.exponents] += m.coeff;
    }
    for (auto& [e, c] : merged)
      if (c != 0) monomials_.push_back({e, c});
    if (monomials_.empty())
      throw InvalidArgument("form has no nonzero coefficient");
    d_ = sum_of(monomials_.front().exponents);
    for (auto& m : monomials_)
      if (sum_of(m.exponents) != d_)
        throw InvalidArgument("form is not homogeneous");
    if (d_ < 2) throw InvalidArgument("form degree must exceed 1");
    if (declared_rank) {
      if (*declared_rank <= 0 || *declared_rank > n_)
        throw InvalidArgument("declared Birch rank must lie in (0, n]");
      rank_ = *declared_rank;
      source_ = RankSource::declared;
    } else if (auto r = derive_birch_rank(*this)) {
      rank_ = *r;
      source_ = RankSource::derived;
    }
  }

  int degree() const { return d_; }
  int dimension() const { return n_; }
  const std::vector<Monomial>& monomials() const { return monomials_; }
  const std::string& name() const { return name_; }

  bool has_rank() const { return rank_.has_value(); }
  /// Throws when the rank is neither derivable nor declared.
  int birch_rank() const {
    if (!rank_)
      throw InvalidArgument(
          "Birch rank is not derivable for this form; declare it explicitly");
    return *rank_;
  }
  RankSource rank_source() const { return source_; }
  /// Declared ranks are reported as unverified.
  bool rank_verified() const { return source_ == RankSource::derived; }

  /// Exact integer evaluation.
  std::int64_t operator()(std::span<const std::int64_t> x) const {
    __int128 total = 0;
    for (auto& m : monomials_) {
      __int128 term = m.coeff;
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k < m.exponents[i]; ++k) term *= x[i];
      total += term;
    }
    if (total > INT64_MAX || total < INT64_MIN)
      throw InvalidArgument("form value overflows 64 bits");
    return static_cast<std::int64_t>(total);
  }

  std::int64_t eval_int(std::span<const int> x) const {
    std::vector<std::int64_t> v(x.begin(), x.end());
    return (*this)(v);
  }

  /// Exact evaluation reduced mod q (no overflow for q < 2^31).
  std::int64_t eval_mod(std::span<const std::int64_t> x, std::int64_t q) const {
    std::int64_t total = 0;
    for (auto& m : monomials_) {
      std::int64_t term = mod(m.coeff, q);
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k < m.exponents[i]; ++k) term = (term * mod(x[i], q)) % q;
      total = (total + term) % q;
    }
    return total;
  }

  double eval(std::span<const double> x) const {
    double total = 0;
    for (auto& m : monomials_) {
      double term = static_cast<double>(m.coeff);
      for (int i = 0; i < n_; ++i)
        if (m.exponents[i]) term *= std::pow(x[i], m.exponents[i]);
      total += term;
    }
    return total;
  }

  std::vector<double> gradient(std::span<const double> x) const {
    std::vector<double> g(n_, 0.0);
    for (auto& m : monomials_) {
      for (int j = 0; j < n_; ++j) {
        if (m.exponents[j] == 0) continue;
        double term = static_cast<double>(m.coeff) * m.exponents[j];
        for (int i = 0; i < n_; ++i) {
          const int e = m.exponents[i] - (i == j ? 1 : 0);
          if (e) term *= std::pow(x[i], e);
        }
        g[j] += term;
      }
    }
    return g;
  }

  /// Every monomial is a product of even powers with positive coefficient,
  /// so the form is a sum of nonnegative terms.
  bool nonnegative_monomials() const {
    for (auto& m : monomials_) {
      if (m.coeff <= 0) return false;
      for (int e : m.exponents)
        if (e % 2) return false;
    }
    return true;
  }

  /// Sum of pure powers a_i x_i^d.
  bool is_diagonal() const {
    for (auto& m : monomials_)
      if (std::count(m.exponents.begin(), m.exponents.end(), 0) != n_ - 1)
        return false;
    return true;
  }

  /// Coefficient of x_i^d per variable (zero where absent). Requires diagonal.
  std::vector<std::int64_t> diagonal_coefficients() const {
    std::vector<std::int64_t> a(n_, 0);
    for (auto& m : monomials_)
      for (int i = 0; i < n_; ++i)
        if (m.exponents[i] == d_) a[i] = m.coeff;
    return a;
  }

  /// Invariance under coordinate permutations and sign changes.
  bool hyperoctahedral_invariant() const {
    if (!is_diagonal() || d_ % 2) return false;
    auto a = diagonal_coefficients();
    return std::all_of(a.begin(), a.end(), [&](auto c) { return c == a[0]; });
  }

  /// R(-x) = R(x).
  bool is_even() const { return d_ % 2 == 0; }

  std::string canonical() const {
    std::string s = "n=" + std::to_string(n_) + ";";
    for (auto& m : monomials_) {
      s += std::to_string(m.coeff) + "*";
      for (int e : m.exponents) s += std::to_string(e) + ",";
      s += ";";
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json mons = nlohmann::json::array();
    for (auto& m : monomials_) mons.push_back({m.exponents, m.coeff});
    nlohmann::json j{{"monomials", mons}, {"degree", d_}, {"dimension", n_}};
    if (source_ == RankSource::declared && rank_) j["birch_rank"] = *rank_;
    return j;
  }

 private:
  static int sum_of(const std::vector<int>& e) {
    int s = 0;
    for (int v : e) s += v;
    return s;
  }

  int n_;
  int d_ = 0;
  std::vector<Monomial> monomials_;
  std::optional<int> rank_;
  RankSource source_ = RankSource::derived;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Presets and parsing

/// Sum of a * x_i^d over all n coordinates.
inline IntegralForm kpowers(int n, int d, std::string name = {}) {
  std::vector<Monomial> mons;
  for (int i = 0; i < n; ++i) {
    std::vector<int> e(n, 0);
    e[i] = d;
    mons.push_back({e, 1});
  }
  if (name.empty())
    name = "kpowers-" + std::to_string(n) + "-" + std::to_string(d);
  return IntegralForm(n, std::move(mons), std::nullopt, std::move(name));
}

inline IntegralForm sphere_form(int n) {
  return kpowers(n, 2, "sphere-" + std::to_string(n));
}

inline IntegralForm form_from_json(const nlohmann::json& j) {
  const int n = j.at("dimension").get<int>();
  std::vector<Monomial> mons;
  for (auto& m : j.at("monomials"))
    mons.push_back({m.at(0).get<std::vector<int>>(), m.at(1).get<std::int64_t>()});
  std::optional<int> rank;
  if (j.contains("birch_rank") && !j["birch_rank"].is_null())
    rank = j["birch_rank"].get<int>();
  IntegralForm f(n, std::move(mons), rank, j.value("name", std::string{}));
  if (j.contains("degree") && j["degree"].get<int>() != f.degree())
    throw InvalidArgument("declared degree does not match the monomials");
  return f;
}

/// Named presets: sphere-N, cubes-N, kpowers-N-D.
inline IntegralForm form_from_preset(const std::string& preset) {
  auto parse_int = [&](const std::string& s) {
    std::size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw InvalidArgument("bad form preset: " + preset);
    return v;
  };
  try {
    if (preset.rfind("sphere-", 0) == 0) return sphere_form(parse_int(preset.substr(7)));
    if (preset.rfind("cubes-", 0) == 0)
      return kpowers(parse_int(preset.substr(6)), 3, preset);
    if (preset.rfind("kpowers-", 0) == 0) {
      auto rest = preset.substr(8);
      auto dash = rest.find('-');
      if (dash == std::string::npos) throw InvalidArgument("bad form preset: " + preset);
      return kpowers(parse_int(rest.substr(0, dash)), parse_int(rest.substr(dash + 1)),
                     preset);
    }
  } catch (const std::invalid_argument&) {
  }
  throw InvalidArgument("unknown form preset: " + preset);
}

// ---------------------------------------------------------------------------
// Birch rank

namespace detail {
/// Rank over Q by Gaussian elimination in exact rationals.
inline int rational_rank(std::vector<std::vector<Rational>> a) {
  const std::size_t rows = a.size();
  const std::size_t cols = rows ? a[0].size() : 0;
  std::size_t rank = 0;
  for (std::size_t c = 0; c < cols && rank < rows; ++c) {
    std::size_t piv = rank;
    while (piv < rows && a[piv][c].numerator() == 0) ++piv;
    if (piv == rows) continue;
    std::swap(a[piv], a[rank]);
    for (std::size_t r = 0; r < rows; ++r) {
      if (r == rank || a[r][c].numerator() == 0) continue;
      const Rational f = a[r][c] / a[rank][c];
      for (std::size_t k = c; k < cols; ++k) a[r][k] -= f * a[rank][k];
    }
    ++rank;
  }
  return static_cast<int>(rank);
}
}  // namespace detail

/// n - dim of the singular locus, where it is derivable without elimination
/// theory: diagonal forms (count of variables present) and quadratic forms
/// (rank of the symmetric matrix). Returns nullopt otherwise.
inline std::optional<int> derive_birch_rank(const IntegralForm& form) {
  const int n = form.dimension();
  if (form.degree() == 2) {
    std::vector<std::vector<Rational>> a(n, std::vector<Rational>(n, Rational(0)));
    for (auto& m : form.monomials()) {
      std::vector<int> idx;
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < m.exponents[i]; ++k) idx.push_back(i);
      if (idx[0] == idx[1]) {
        a[idx[0]][idx[0]] += Rational(2 * m.coeff);
      } else {
        a[idx[0]][idx[1]] += Rational(m.coeff);
        a[idx[1]][idx[0]] += Rational(m.coeff);
      }
    }
    return detail::rational_rank(std::move(a));
  }
  if (form.is_diagonal()) {
    auto coeffs = form.diagonal_coefficients();
    return static_cast<int>(
        std::count_if(coeffs.begin(), coeffs.end(), [](auto c) { return c != 0; }));
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Constants

struct FormConstants {
  Rational c_R;
  Rational eta_R;
  Rational d_eta;
  /// Birch rank exceeds (d-1) 2^d.
  bool rank_large_enough = false;
};

inline FormConstants constants(const IntegralForm& form) {
  const int d = form.degree();
  const std::int64_t B = form.birch_rank();
  FormConstants k;
  k.c_R = Rational(B, (d - 1) * ipow(2, d - 1));
  k.eta_R = (k.c_R / Rational(2) - Rational(1)) / Rational(6 * d);
  k.d_eta = k.eta_R * Rational(d);
  k.rank_large_enough = B > (d - 1) * ipow(2, d);
  if (k.rank_large_enough && !(k.c_R > Rational(2) && k.d_eta < k.c_R - Rational(2)))
    throw Error("constant relations c_R > 2 and d*eta_R < c_R - 2 violated");
  return k;
}

// ---------------------------------------------------------------------------
// Cutoff functions

class CutoffFunction {
 public:
  enum class Kind { smooth_bump, box_indicator, constant_one };

  static CutoffFunction bump(double radius) {
    if (!(radius > 0)) throw InvalidArgument("bump radius must be positive");
    return {Kind::smooth_bump, radius};
  }
  static CutoffFunction box(double half_width) {
    if (!(half_width > 0)) throw InvalidArgument("box half-width must be positive");
    return {Kind::box_indicator, half_width};
  }
  static CutoffFunction one() { return {Kind::constant_one, 0.0}; }

  Kind kind() const { return kind_; }
  double parameter() const { return param_; }

  double operator()(std::span<const double> x) const {
    switch (kind_) {
      case Kind::constant_one:
        return 1.0;
      case Kind::box_indicator:
        for (double v : x)
          if (std::abs(v) > param_) return 0.0;
        return 1.0;
      case Kind::smooth_bump: {
        double r2 = 0;
        for (double v : x) r2 += v * v;
        const double t = r2 / (param_ * param_);
        if (t >= 1.0) return 0.0;
        return std::exp(1.0 - 1.0 / (1.0 - t));
      }
    }
    return 0.0;
  }

  /// Bound on max |x_i| over the support, if compactly supported.
  std::optional<double> coordinate_bound() const {
    if (kind_ == Kind::constant_one) return std::nullopt;
    return param_;
  }

  /// phi restricted to the unit sphere is constant.
  bool radial_on_unit_sphere() const {
    return kind_ != Kind::box_indicator || param_ >= 1.0;
  }
  /// Value on the unit sphere (valid when radial_on_unit_sphere()).
  double value_on_unit_sphere() const {
    std::vector<double> e1{1.0};
    return (*this)(e1);
  }

  std::string canonical() const {
    switch (kind_) {
      case Kind::constant_one:
        return "one";
      case Kind::box_indicator:
        return "box:" + std::to_string(param_);
      case Kind::smooth_bump:
        return "bump:" + std::to_string(param_);
    }
    return "?";
  }

  /// "bump:2", "box:1.5", "one".
  static CutoffFunction parse(const std::string& s) {
    if (s == "one") return one();
    auto colon = s.find(':');
    if (colon == std::string::npos) throw InvalidArgument("bad cutoff spec: " + s);
    const std::string kind = s.substr(0, colon);
    const double p = std::stod(s.substr(colon + 1));
    if (kind == "bump") return bump(p);
    if (kind == "box") return box(p);
    throw InvalidArgument("bad cutoff spec: " + s);
  }

 private:
  CutoffFunction(Kind k, double p) : kind_(k), param_(p) {}
  Kind kind_;
  double param_;
};

// ---------------------------------------------------------------------------
// phi-regularity probe

enum class RegularityVerdict { regular, rank_too_small, no_nonsingular_solution_found };

inline std::string to_string(RegularityVerdict v) {
  switch (v) {
    case RegularityVerdict::regular:
      return "regular";
    case RegularityVerdict::rank_too_small:
      return "rank-too-small";
    case RegularityVerdict::no_nonsingular_solution_found:
      return "no-nonsingular-solution-found";
  }
  return "?";
}

struct RegularityProbe {
  RegularityVerdict verdict;
  std::vector<double> witness;  // the nonsingular solution, when found
};

namespace detail {
inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base), f = inv, r = 0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}
inline std::uint64_t nth_prime(int k) {
  std::uint64_t p = 1;
  for (int found = 0; found <= k;)
    if (is_prime(static_cast<std::int64_t>(++p))) ++found;
  return p;
}
}  // namespace detail

/// Looks for x in supp(phi) with R(x) = 1 and grad R(x) != 0 by damped
/// Newton iteration from Halton starts. A miss is a probe failure, not a
/// disproof.
inline RegularityProbe probe_phi_regularity(const IntegralForm& form,
                                            const CutoffFunction& phi,
                                            int samples) {
  if (samples < 1) throw InvalidArgument("samples must be >= 1");
  const int d = form.degree();
  if (form.birch_rank() <= (d - 1) * ipow(2, d))
    return {RegularityVerdict::rank_too_small, {}};
  const int n = form.dimension();
  const double box = phi.coordinate_bound().value_or(2.0);
  std::vector<std::uint64_t> bases(n);
  for (int i = 0; i < n; ++i) bases[i] = detail::nth_prime(i);

  for (int s = 1; s <= samples; ++s) {
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i)
      x[i] = box * (2.0 * detail::radical_inverse(s, bases[i]) - 1.0);
    double res = form.eval(x) - 1.0;
    for (int it = 0; it < 200 && std::abs(res) > 1e-14; ++it) {
      auto g = form.gradient(x);
      double g2 = 0;
      for (double v : g) g2 += v * v;
      if (g2 < 1e-300) break;
      double step = 1.0;
      std::vector<double> trial(n);
      double tres = res;
      for (int k = 0; k < 40; ++k) {
        for (int i = 0; i < n; ++i) trial[i] = x[i] - step * res * g[i] / g2;
        tres = form.eval(trial) - 1.0;
        if (std::abs(tres) < std::abs(res)) break;
        step *= 0.5;
      }
      if (!(std::abs(tres) < std::abs(res))) break;
      x = trial;
      res = tres;
    }
    if (std::abs(res) > 1e-12) continue;
    auto g = form.gradient(x);
    double gnorm = 0;
    for (double v : g) gnorm += v * v;
    if (std::sqrt(gnorm) > 1e-8 && phi(x) > 0.0)
      return {RegularityVerdict::regular, x};
  }
  return {RegularityVerdict::no_nonsingular_solution_found, {}};
}

}  // namespace bml
