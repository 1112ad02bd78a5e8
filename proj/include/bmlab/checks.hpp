#pragma once
//! \file
//! \brief Exact-identity suite (finite inversion, the kernel of s against its
//! defining Fourier sum, reconstruction of the multiplier from its pieces)
//! and the random endpoint-bound experiment.

#include <cmath>
#include <random>
#include <vector>

#include "bmlab/arith.hpp"
#include "bmlab/grid.hpp"
#include "bmlab/multiplier.hpp"

namespace bml {

/// max over x in [0, L)^n of |sum_{a,b} F_L(a,b) e(x.b/L) - L 1{R(x) = 0 mod L}|.
inline double inversion_max_error(const IntegralForm& form, std::int64_t L,
                                  double budget = kDefaultArithBudget) {
  const int n = form.dimension();
  check_budget("inversion suite", std::pow(static_cast<double>(L), 2 * n + 1), budget);
  auto table = make_weyl_table(form, L, WeylMethod::automatic, budget);
  std::vector<std::int64_t> x(n);
  double err = 0;
  for (std::size_t i = 0; i < detail::power_size(L, n); ++i) {
    detail::unflatten(i, L, x);
    auto r = weyl_inversion_check(table, form, x);
    err = std::max(err, std::abs(r.lhs - r.rhs));
  }
  return err;
}

/// Largest N with 1, ..., N all dividing L.
inline int largest_divisor_run(std::int64_t L) {
  int N = 0;
  while (L % (N + 1) == 0) ++N;
  return N;
}

/// max |s-vee(x) - G^{-n} sum_j s(j/G) e(x.j/G)| over |x_i| <= 3L, for a
/// planar form; G = oversample L resolves the support of s.
inline double kernel_of_s_oracle_error(const IntegralForm& form, std::int64_t L, std::int64_t lambda,
                                       int oversample = 96) {
  if (form.dimension() != 2) throw InvalidArgument("the double-sum oracle is planar");
  MultiplierParams p;
  p.lambda = lambda;
  p.L = L;
  p.N = largest_divisor_run(L);
  Decomposition dec(form, CutoffFunction::one(), p);
  const int G = oversample * static_cast<int>(L);
  std::vector<Complex> samples(static_cast<std::size_t>(G) * G);
  for (int j0 = 0; j0 < G; ++j0)
    for (int j1 = 0; j1 < G; ++j1) {
      std::vector<double> xi{static_cast<double>(j0) / G, static_cast<double>(j1) / G};
      samples[static_cast<std::size_t>(j0) * G + j1] = dec.s(xi);
    }
  const auto R = 3 * L;
  Box box{{-R, -R}, {2 * R + 1, 2 * R + 1}};
  auto k = kernel_of_s(form, L, box);
  // inner sums over j1 for each x1, then the outer sum over j0
  const int W = static_cast<int>(2 * R + 1);
  std::vector<Complex> inner(static_cast<std::size_t>(G) * W);
  for (int j0 = 0; j0 < G; ++j0)
    for (int c = 0; c < W; ++c) {
      const std::int64_t x1 = c - R;
      CompensatedSum<Complex> s;
      for (int j1 = 0; j1 < G; ++j1)
        s.add(samples[static_cast<std::size_t>(j0) * G + j1] * expi_frac(mod(x1 * j1, G), G));
      inner[static_cast<std::size_t>(j0) * W + c] = s.value();
    }
  double err = 0;
  std::vector<std::int64_t> x(2);
  for (std::size_t i = 0; i < box.volume(); ++i) {
    box.point(i, x);
    CompensatedSum<Complex> s;
    const auto c = static_cast<std::size_t>(x[1] + R);
    for (int j0 = 0; j0 < G; ++j0) s.add(inner[static_cast<std::size_t>(j0) * W + c] * expi_frac(mod(x[0] * j0, G), G));
    const Complex v = s.value() / (static_cast<double>(G) * G);
    err = std::max(err, std::abs(v - k.values[i]));
  }
  return err;
}

struct ReconstructionResiduals {
  double w_minus_c_m21 = 0.0;          // max |w - c - m21|
  double c_minus_m12_m22_m23 = 0.0;    // max |c - m12 - m22 - m23|
  double w_sup = 0.0;
  std::size_t samples = 0;
};

/// Both identities at every sample of the frequency grid of resolution G.
inline ReconstructionResiduals reconstruction_residuals(const IntegralForm& form,
                                                        const CutoffFunction& phi,
                                                        std::int64_t lambda, int N, int G) {
  MultiplierParams p;
  p.lambda = lambda;
  p.N = N;
  Decomposition dec(form, phi, p);
  auto w = piece(dec, "w", G), c = piece(dec, "c", G), m21 = piece(dec, "m21", G);
  auto m12 = piece(dec, "m12", G), m22 = piece(dec, "m22", G), m23 = piece(dec, "m23", G);
  ReconstructionResiduals r;
  r.samples = w.samples();
  for (std::size_t i = 0; i < w.samples(); ++i) {
    r.w_minus_c_m21 = std::max(r.w_minus_c_m21, std::abs(w.values[i] - c.values[i] - m21.values[i]));
    r.c_minus_m12_m22_m23 = std::max(
        r.c_minus_m12_m22_m23,
        std::abs(c.values[i] - m12.values[i] - m22.values[i] - m23.values[i]));
  }
  r.w_sup = w.sup();
  return r;
}

// ---------------------------------------------------------------------------
// Endpoint bounds of M_lambda

struct EndpointResult {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst_sup_ratio = 0.0;  // max ||M f||_inf / ||f||_inf
  double worst_l1_ratio = 0.0;   // max ||M f||_1 / ||f||_1
};

/// ||M_lambda f||_inf <= ||f||_inf and ||M_lambda f||_1 <= ||f||_1 over random
/// complex f on a cube of the given side; lambda cycles through the list
/// (unrepresented values are skipped).
inline EndpointResult endpoint_bounds(const IntegralForm& form, const CutoffFunction& phi,
                                      const std::vector<std::int64_t>& lambdas, std::size_t trials,
                                      std::uint64_t seed, int side = 10) {
  std::vector<LatticeShell> shells;
  for (auto l : lambdas) {
    auto s = enumerate_shell(form, phi, l);
    if (!s.empty()) shells.push_back(std::move(s));
  }
  if (shells.empty()) throw InvalidArgument("no represented lambda in the list");
  const int n = form.dimension();
  EndpointResult r;
  for (std::size_t t = 0; t < trials; ++t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(t)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GridFunction f(Index(n, 0), Index(n, side));
    const double density = std::exp(std::log(0.01) * u(rng));
    for (auto& v : f.values())
      if (u(rng) < density) v = std::polar(std::exp(4.0 * (u(rng) - 0.5)), kTwoPi * u(rng));
    if (f.norm(1.0) == 0.0) f.values()[0] = 1.0;
    const auto& shell = shells[t % shells.size()];
    auto g = apply_average(shell, f);
    const double rs = g.norm(std::numeric_limits<double>::infinity()) /
                      f.norm(std::numeric_limits<double>::infinity());
    const double r1 = g.norm(1.0) / f.norm(1.0);
    r.worst_sup_ratio = std::max(r.worst_sup_ratio, rs);
    r.worst_l1_ratio = std::max(r.worst_l1_ratio, r1);
    if (rs > 1.0 + 1e-12 || r1 > 1.0 + 1e-12) ++r.violations;
    ++r.trials;
  }
  return r;
}

}  // namespace bml
