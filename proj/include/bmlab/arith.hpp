#pragma once
//! \file
//! \brief Complete exponential sums F_q(a,b), the finite inversion identity,
//! congruence counts and the divisor splitting of Z_L.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/numerics.hpp"

namespace bml {

enum class WeylMethod { direct, dft, factorized, automatic };

inline const char* to_string(WeylMethod m) {
  switch (m) {
    case WeylMethod::direct:
      return "direct";
    case WeylMethod::dft:
      return "dft";
    case WeylMethod::factorized:
      return "factorized";
    case WeylMethod::automatic:
      return "automatic";
  }
  return "?";
}

inline constexpr double kDefaultArithBudget = 1e8;

namespace detail {

/// Decode a flat index into a vector in Z_q^n (row-major, last index fastest).
inline void unflatten(std::size_t idx, std::int64_t q, std::vector<std::int64_t>& out) {
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    out[i] = static_cast<std::int64_t>(idx % q);
    idx /= q;
  }
}

inline std::size_t flatten(std::span<const std::int64_t> b, std::int64_t q) {
  std::size_t idx = 0;
  for (auto v : b) idx = idx * q + static_cast<std::size_t>(mod(v, q));
  return idx;
}

inline std::size_t power_size(std::int64_t q, int n) {
  return static_cast<std::size_t>(ipow(q, n));
}

}  // namespace detail

/// q^{-n} sum_{m in Z_q^n} e((a R(m) + m.b) / q), by direct summation.
inline Complex weyl_sum(const IntegralForm& form, std::int64_t q, std::int64_t a,
                        std::span<const std::int64_t> b,
                        double budget = kDefaultArithBudget) {
  if (q < 1) throw InvalidArgument("q must be >= 1");
  const int n = form.dimension();
  if (static_cast<int>(b.size()) != n) throw InvalidArgument("b has wrong length");
  const double cost = std::pow(static_cast<double>(q), n);
  check_budget("direct Weyl sum", cost, budget);
  const std::size_t total = detail::power_size(q, n);
  std::vector<std::int64_t> m(n);
  CompensatedSum<Complex> s;
  for (std::size_t idx = 0; idx < total; ++idx) {
    detail::unflatten(idx, q, m);
    std::int64_t phase = mod(a, q) * form.eval_mod(m, q) % q;
    for (int i = 0; i < n; ++i) phase = (phase + mod(m[i], q) * mod(b[i], q)) % q;
    s.add(expi_frac(phase, q));
  }
  return s.value() / cost;
}

/// One-dimensional normalized sums S(c) = q^{-1} sum_m e((k m^d + m c)/q)
/// for all c in Z_q.
inline std::vector<Complex> weyl_sum_1d(std::int64_t k, int d, std::int64_t q) {
  std::vector<Complex> out(q);
  for (std::int64_t c = 0; c < q; ++c) {
    CompensatedSum<Complex> s;
    for (std::int64_t m = 0; m < q; ++m) {
      std::int64_t md = 1;
      for (int i = 0; i < d; ++i) md = md * m % q;
      s.add(expi_frac((mod(k, q) * md + m * c) % q, q));
    }
    out[c] = s.value() / static_cast<double>(q);
  }
  return out;
}

/// The slice b -> F_q(a, b) over all of Z_q^n (row-major in b).
inline std::vector<Complex> weyl_slice(const IntegralForm& form, std::int64_t q,
                                       std::int64_t a, WeylMethod method = WeylMethod::automatic,
                                       double budget = kDefaultArithBudget) {
  const int n = form.dimension();
  const double qn = std::pow(static_cast<double>(q), n);
  check_budget("Weyl slice", qn, budget);
  const std::size_t total = detail::power_size(q, n);
  if (method == WeylMethod::automatic)
    method = form.is_diagonal() ? WeylMethod::factorized : WeylMethod::dft;

  std::vector<Complex> out(total);
  std::vector<std::int64_t> m(n);
  switch (method) {
    case WeylMethod::direct: {
      check_budget("direct Weyl slice", qn * qn, budget);
      for (std::size_t bi = 0; bi < total; ++bi) {
        detail::unflatten(bi, q, m);
        out[bi] = weyl_sum(form, q, a, m, budget);
      }
      break;
    }
    case WeylMethod::dft: {
      for (std::size_t idx = 0; idx < total; ++idx) {
        detail::unflatten(idx, q, m);
        out[idx] = expi_frac(mod(a, q) * form.eval_mod(m, q) % q, q);
      }
      if (q > 1) {
        std::vector<int> ext(n, static_cast<int>(q));
        fft_inplace(ext, out, +1);
      }
      for (auto& v : out) v /= qn;
      break;
    }
    case WeylMethod::factorized: {
      if (!form.is_diagonal())
        throw InvalidArgument("factorized Weyl sums need a diagonal form");
      auto coeffs = form.diagonal_coefficients();
      std::vector<std::vector<Complex>> one(n);
      for (int i = 0; i < n; ++i)
        one[i] = weyl_sum_1d(mod(a, q) * mod(coeffs[i], q) % q, form.degree(), q);
      for (std::size_t bi = 0; bi < total; ++bi) {
        detail::unflatten(bi, q, m);
        Complex p = 1.0;
        for (int i = 0; i < n; ++i) p *= one[i][m[i]];
        out[bi] = p;
      }
      break;
    }
    case WeylMethod::automatic:
      break;
  }
  return out;
}

/// All F_q(a, b), a in Z_q, b in Z_q^n.
struct WeylTable {
  std::int64_t q = 1;
  int n = 0;
  WeylMethod method = WeylMethod::automatic;
  std::vector<Complex> values;  // index a * q^n + flat(b)

  std::size_t slice_size() const { return detail::power_size(q, n); }
  Complex operator()(std::int64_t a, std::span<const std::int64_t> b) const {
    return values[static_cast<std::size_t>(mod(a, q)) * slice_size() + detail::flatten(b, q)];
  }
  Complex at(std::int64_t a, std::size_t flat_b) const {
    return values[static_cast<std::size_t>(a) * slice_size() + flat_b];
  }
};

inline WeylTable make_weyl_table(const IntegralForm& form, std::int64_t q,
                                 WeylMethod method = WeylMethod::automatic,
                                 double budget = kDefaultArithBudget) {
  const int n = form.dimension();
  check_budget("Weyl table", std::pow(static_cast<double>(q), n + 1), budget);
  WeylTable t{q, n, method, {}};
  const std::size_t slice = t.slice_size();
  t.values.resize(slice * q);
  parallel_chunks(static_cast<std::size_t>(q), 1, [&](std::size_t a, std::size_t) {
    auto s = weyl_slice(form, q, static_cast<std::int64_t>(a), method, budget);
    std::copy(s.begin(), s.end(), t.values.begin() + a * slice);
  });
  return t;
}

// ---------------------------------------------------------------------------
// Decay scan

struct WeylDecayReport {
  std::vector<std::int64_t> qs;
  std::vector<double> maxima;      // M(q) = max over (a,q)=1 and b of |F_q(a,b)|
  std::vector<double> normalized;  // M(q) q^{c_R}
  double prime_slope = 0.0;        // least squares slope of log M vs log q over primes
  double constant = 0.0;
  std::vector<std::int64_t> violations;  // q with M(q) q^{c_R} > constant
};

/// M(q) for a single modulus. Diagonal forms use max_b |prod_i S_i| =
/// prod_i max_c |S_i(c)|, which is exact.
inline double weyl_max_coprime(const IntegralForm& form, std::int64_t q,
                               double budget = kDefaultArithBudget) {
  const bool diag = form.is_diagonal();
  std::vector<double> per_a(q, 0.0);
  parallel_chunks(static_cast<std::size_t>(q), 1, [&](std::size_t ai, std::size_t) {
    const auto a = static_cast<std::int64_t>(ai);
    if (gcd64(a, q) != 1) return;
    double best = 0;
    if (diag) {
      auto coeffs = form.diagonal_coefficients();
      double p = 1.0;
      for (auto c : coeffs) {
        auto one = weyl_sum_1d(a * mod(c, q) % q, form.degree(), q);
        double mx = 0;
        for (auto& v : one) mx = std::max(mx, std::abs(v));
        p *= mx;
      }
      best = p;
    } else {
      for (auto& v : weyl_slice(form, q, a, WeylMethod::dft, budget))
        best = std::max(best, std::abs(v));
    }
    per_a[ai] = best;
  });
  return *std::max_element(per_a.begin(), per_a.end());
}

inline WeylDecayReport weyl_decay_scan(const IntegralForm& form, std::int64_t q_max,
                                       double constant = 2.0,
                                       double budget = kDefaultArithBudget) {
  if (q_max < 2) throw InvalidArgument("q_max must be >= 2");
  const double c = to_double(constants(form).c_R);
  WeylDecayReport rep;
  rep.constant = constant;
  std::vector<double> lx, ly;
  for (std::int64_t q = 2; q <= q_max; ++q) {
    const double m = weyl_max_coprime(form, q, budget);
    rep.qs.push_back(q);
    rep.maxima.push_back(m);
    rep.normalized.push_back(m * std::pow(static_cast<double>(q), c));
    if (rep.normalized.back() > constant) rep.violations.push_back(q);
    if (is_prime(q) && m > 0) {
      lx.push_back(std::log(static_cast<double>(q)));
      ly.push_back(std::log(m));
    }
  }
  rep.prime_slope = ls_slope(lx, ly);
  return rep;
}

// ---------------------------------------------------------------------------
// Inversion identity and congruence counts

struct InversionCheck {
  Complex lhs;
  double rhs;
};

/// lhs = sum_a sum_b F_L(a,b) e(x.b/L), rhs = L 1_{R(x) = 0 mod L}.
inline InversionCheck weyl_inversion_check(const WeylTable& table, const IntegralForm& form,
                                           std::span<const std::int64_t> x) {
  const std::int64_t L = table.q;
  const int n = table.n;
  const std::size_t slice = table.slice_size();
  std::vector<std::int64_t> b(n);
  std::vector<Complex> phase(slice);
  for (std::size_t bi = 0; bi < slice; ++bi) {
    detail::unflatten(bi, L, b);
    std::int64_t e = 0;
    for (int i = 0; i < n; ++i) e = (e + mod(x[i], L) * b[i]) % L;
    phase[bi] = expi_frac(e, L);
  }
  CompensatedSum<Complex> s;
  for (std::int64_t a = 0; a < L; ++a)
    for (std::size_t bi = 0; bi < slice; ++bi) s.add(table.at(a, bi) * phase[bi]);
  const double rhs = form.eval_mod(x, L) == 0 ? static_cast<double>(L) : 0.0;
  return {s.value(), rhs};
}

inline InversionCheck weyl_inversion_check(const IntegralForm& form, std::int64_t L,
                                           std::span<const std::int64_t> x,
                                           double budget = kDefaultArithBudget) {
  check_budget("inversion check", std::pow(static_cast<double>(L), form.dimension() + 1),
               budget);
  return weyl_inversion_check(make_weyl_table(form, L, WeylMethod::automatic, budget), form,
                              x);
}

/// Number of x in Z_L^n with R(x) = 0 mod L.
inline std::int64_t congruence_zeros(const IntegralForm& form, std::int64_t L,
                                     double budget = kDefaultArithBudget) {
  if (L < 1) throw InvalidArgument("L must be >= 1");
  const int n = form.dimension();
  check_budget("congruence count", std::pow(static_cast<double>(L), n), budget);
  const std::size_t total = detail::power_size(L, n);
  return parallel_reduce(
      total, 1 << 16, std::int64_t{0},
      [&](std::size_t b, std::size_t e) {
        std::vector<std::int64_t> x(n);
        std::int64_t c = 0;
        for (std::size_t i = b; i < e; ++i) {
          detail::unflatten(i, L, x);
          if (form.eval_mod(x, L) == 0) ++c;
        }
        return c;
      },
      std::plus<>());
}

/// L^{1-n} #{x in Z_L^n : R(x) = 0 mod L}.
inline double congruence_count(const IntegralForm& form, std::int64_t L,
                               double budget = kDefaultArithBudget) {
  const auto zeros = congruence_zeros(form, L, budget);
  return static_cast<double>(zeros) /
         std::pow(static_cast<double>(L), form.dimension() - 1);
}

// ---------------------------------------------------------------------------
// Divisor splitting

struct ReducedFraction {
  std::int64_t a;  // original numerator in Z_L
  std::int64_t numerator;
  std::int64_t q;
};

struct DivisorSplit {
  std::int64_t L = 1;
  std::int64_t N = 1;
  std::map<std::int64_t, std::vector<ReducedFraction>> low;   // q <= N
  std::map<std::int64_t, std::vector<ReducedFraction>> high;  // q > N, q | L

  std::size_t total() const {
    std::size_t t = 0;
    for (auto& [q, v] : low) t += v.size();
    for (auto& [q, v] : high) t += v.size();
    return t;
  }
};

/// Each a in Z_L written as (a/nu)/(L/nu) with nu = gcd(a, L).
inline DivisorSplit divisor_split(std::int64_t L, std::int64_t N) {
  if (L < 1 || N < 1 || N > L) throw InvalidArgument("divisor_split needs 1 <= N <= L");
  DivisorSplit s{L, N, {}, {}};
  for (std::int64_t a = 0; a < L; ++a) {
    const std::int64_t nu = gcd64(a, L);  // gcd(0, L) = L
    const std::int64_t q = L / nu;
    ReducedFraction f{a, a / nu, q};
    (q <= N ? s.low : s.high)[q].push_back(f);
  }
  return s;
}

/// nu = gcd(a, b_1, ..., b_n, L).
inline std::int64_t full_gcd(std::int64_t a, std::span<const std::int64_t> b, std::int64_t L) {
  std::int64_t g = gcd64(a, L);
  for (auto v : b) g = gcd64(g, v);
  return g;
}

inline std::int64_t factorial(int N) {
  std::int64_t f = 1;
  for (int k = 2; k <= N; ++k) {
    if (f > INT64_MAX / k) throw InvalidArgument("factorial overflows 64 bits");
    f *= k;
  }
  return f;
}

}  // namespace bml
