#include <gtest/gtest.h>

#include <numeric>

#include "bmlab/arith.hpp"

using namespace bml;

namespace {

IntegralForm square_1d() { return IntegralForm(1, {{{2}, 1}}); }

/// Independent oracle: plain double loop with std::exp.
Complex naive_weyl(const IntegralForm& f, std::int64_t q, std::int64_t a,
                   const std::vector<std::int64_t>& b) {
  const int n = f.dimension();
  Complex s = 0;
  std::vector<std::int64_t> m(n, 0);
  const auto total = static_cast<std::int64_t>(std::pow(q, n));
  for (std::int64_t idx = 0; idx < total; ++idx) {
    std::int64_t t = idx;
    for (int i = n - 1; i >= 0; --i) {
      m[i] = t % q;
      t /= q;
    }
    double phase = static_cast<double>(a * f(m));
    for (int i = 0; i < n; ++i) phase += static_cast<double>(m[i] * b[i]);
    s += std::exp(Complex(0, 2 * std::numbers::pi * phase / q));
  }
  return s / static_cast<double>(total);
}

}  // namespace

TEST(Arith, TrivialModulus) {
  std::vector<std::int64_t> b(5, 0);
  EXPECT_NEAR(std::abs(weyl_sum(sphere_form(5), 1, 0, b) - 1.0), 0.0, 1e-15);
}

TEST(Arith, ZeroFrequencyGeometricSum) {
  auto f = sphere_form(3);
  for (std::int64_t q : {2, 5, 6}) {
    auto slice = weyl_slice(f, q, 0, WeylMethod::dft);
    for (std::size_t i = 0; i < slice.size(); ++i)
      EXPECT_NEAR(std::abs(slice[i] - (i == 0 ? 1.0 : 0.0)), 0.0, 1e-12);
  }
}

TEST(Arith, QuadraticGaussSumModThree) {
  std::vector<std::int64_t> b{0};
  auto v = weyl_sum(square_1d(), 3, 1, b);
  EXPECT_NEAR(v.real(), 0.0, 1e-14);
  EXPECT_NEAR(v.imag(), 1.0 / std::sqrt(3.0), 1e-14);
}

TEST(Arith, SphereModTwoVanishes) {
  std::vector<std::int64_t> b(5, 0);
  EXPECT_NEAR(std::abs(weyl_sum(sphere_form(5), 2, 1, b)), 0.0, 1e-15);
}

TEST(Arith, MethodsAgree) {
  std::vector<IntegralForm> forms{sphere_form(2), sphere_form(3), kpowers(2, 3),
                                  IntegralForm(3, {{{3, 0, 0}, 1}, {{1, 1, 1}, 1}}, 3)};
  for (auto& f : forms) {
    for (std::int64_t q = 1; q <= 8; ++q) {
      for (std::int64_t a = 0; a < q; ++a) {
        auto dft = weyl_slice(f, q, a, WeylMethod::dft);
        auto direct = weyl_slice(f, q, a, WeylMethod::direct);
        for (std::size_t i = 0; i < dft.size(); ++i)
          ASSERT_NEAR(std::abs(dft[i] - direct[i]), 0.0, 1e-10);
        if (f.is_diagonal()) {
          auto fac = weyl_slice(f, q, a, WeylMethod::factorized);
          for (std::size_t i = 0; i < dft.size(); ++i)
            ASSERT_NEAR(std::abs(fac[i] - direct[i]), 0.0, 1e-10);
        }
      }
    }
  }
}

TEST(Arith, AgreesWithNaiveOracle) {
  auto f = kpowers(2, 3);
  std::vector<std::int64_t> b{1, 4};
  for (std::int64_t q : {5, 7, 9})
    for (std::int64_t a = 1; a < q; ++a)
      EXPECT_NEAR(std::abs(weyl_sum(f, q, a, b) - naive_weyl(f, q, a, b)), 0.0, 1e-10);
}

TEST(Arith, TableInvariants) {
  for (std::int64_t q : {3, 4, 6}) {
    auto t = make_weyl_table(sphere_form(3), q);
    for (auto& v : t.values) EXPECT_LE(std::abs(v), 1.0 + 1e-12);
    std::vector<std::int64_t> zero(3, 0);
    EXPECT_NEAR(std::abs(t(0, zero) - 1.0), 0.0, 1e-12);
  }
}

TEST(Arith, Multiplicativity) {
  // F_{q1 q2}(a, 0) = F_{q1}(a q2, 0) F_{q2}(a q1, 0) for coprime moduli
  std::vector<IntegralForm> forms{sphere_form(2), kpowers(2, 3)};
  for (auto& f : forms) {
    std::vector<std::int64_t> zero(f.dimension(), 0);
    for (auto [q1, q2] : std::vector<std::pair<int, int>>{{2, 3}, {3, 5}, {4, 5}, {5, 7}}) {
      const std::int64_t q = q1 * q2;
      for (std::int64_t a = 1; a < q; ++a) {
        if (gcd64(a, q) != 1) continue;
        const double lhs = std::abs(weyl_sum(f, q, a, zero));
        const double rhs = std::abs(weyl_sum(f, q1, a * q2 % q1, zero)) *
                           std::abs(weyl_sum(f, q2, a * q1 % q2, zero));
        EXPECT_NEAR(lhs, rhs, 1e-12);
      }
    }
  }
}

TEST(Arith, ReductionByCommonDivisor) {
  // F_L(a, b) = F_{L/nu}(a/nu, b/nu) with nu = gcd(a, b, L)
  auto f = sphere_form(2);
  const std::int64_t L = 12;
  auto tL = make_weyl_table(f, L);
  std::vector<std::int64_t> b(2);
  for (std::int64_t a = 0; a < L; ++a)
    for (b[0] = 0; b[0] < L; ++b[0])
      for (b[1] = 0; b[1] < L; ++b[1]) {
        const auto nu = full_gcd(a, b, L);
        std::vector<std::int64_t> br{b[0] / nu, b[1] / nu};
        EXPECT_NEAR(std::abs(tL(a, b) - weyl_sum(f, L / nu, a / nu, br)), 0.0, 1e-12);
      }
}

TEST(Arith, InversionExamples) {
  std::vector<std::int64_t> one{1}, zero{0};
  auto c1 = weyl_inversion_check(square_1d(), 2, one);
  EXPECT_NEAR(std::abs(c1.lhs), 0.0, 1e-14);
  EXPECT_EQ(c1.rhs, 0.0);
  auto c0 = weyl_inversion_check(square_1d(), 2, zero);
  EXPECT_NEAR(std::abs(c0.lhs - 2.0), 0.0, 1e-14);
  EXPECT_EQ(c0.rhs, 2.0);
  std::vector<std::int64_t> x{3, -4, 7};
  auto trivial = weyl_inversion_check(sphere_form(3), 1, x);
  EXPECT_NEAR(std::abs(trivial.lhs - 1.0), 0.0, 1e-14);
  EXPECT_EQ(trivial.rhs, 1.0);
}

TEST(Arith, InversionIdentityExhaustive) {
  std::vector<IntegralForm> forms{sphere_form(2), sphere_form(3), kpowers(2, 3)};
  for (auto& f : forms) {
    for (std::int64_t L : {1, 2, 3, 4, 6}) {
      auto table = make_weyl_table(f, L);
      const int n = f.dimension();
      std::vector<std::int64_t> x(n, 0);
      const auto total = static_cast<std::size_t>(ipow(L, n));
      for (std::size_t idx = 0; idx < total; ++idx) {
        detail::unflatten(idx, L, x);
        auto c = weyl_inversion_check(table, f, x);
        ASSERT_LT(std::abs(c.lhs - c.rhs), 1e-8);
      }
    }
  }
}

TEST(Arith, CongruenceCounts) {
  EXPECT_DOUBLE_EQ(congruence_count(sphere_form(4), 2), 1.0);
  EXPECT_DOUBLE_EQ(congruence_count(sphere_form(7), 1), 1.0);
  EXPECT_EQ(congruence_zeros(sphere_form(4), 2), 8);
  for (std::int64_t L : {2, 3, 4, 6}) EXPECT_LE(congruence_count(sphere_form(5), L), 4.0);
}

TEST(Arith, CongruenceCountMatchesCharacterSum) {
  // #{R = 0 mod L} = L^{n-1} sum_a F_L(a, 0)
  for (std::int64_t L : {3, 4, 5, 6}) {
    auto f = sphere_form(3);
    Complex s = 0;
    std::vector<std::int64_t> zero(3, 0);
    for (std::int64_t a = 0; a < L; ++a) s += weyl_sum(f, L, a, zero);
    EXPECT_NEAR(congruence_count(f, L), s.real(), 1e-12);
    EXPECT_NEAR(s.imag(), 0.0, 1e-12);
  }
}

TEST(Arith, DivisorSplitExamples) {
  auto s = divisor_split(6, 2);
  ASSERT_EQ(s.low.size(), 2u);
  EXPECT_EQ(s.low.at(1).size(), 1u);
  EXPECT_EQ(s.low.at(2).size(), 1u);
  EXPECT_EQ(s.low.at(2)[0].a, 3);
  std::set<std::int64_t> high_q;
  for (auto& [q, v] : s.high) high_q.insert(q);
  EXPECT_EQ(high_q, (std::set<std::int64_t>{3, 6}));
  EXPECT_EQ(s.total(), 6u);

  auto t = divisor_split(24, 3);
  EXPECT_EQ(t.low.at(1).size(), 1u);
  EXPECT_EQ(t.low.at(2).size(), 1u);
  EXPECT_EQ(t.low.at(3).size(), 2u);
  std::size_t rest = 0;
  for (auto& [q, v] : t.high) rest += v.size();
  EXPECT_EQ(rest, 20u);

  for (int N = 1; N <= 5; ++N) {
    const auto L = factorial(N);
    auto u = divisor_split(L, N);
    EXPECT_EQ(u.total(), static_cast<std::size_t>(L));
    for (int q = 1; q <= N; ++q) EXPECT_EQ(L % q, 0);
    for (auto& [q, v] : u.low) EXPECT_EQ(static_cast<std::int64_t>(v.size()),
                                         [&] {
                                           std::int64_t phi = 0;
                                           for (std::int64_t a = 0; a < q; ++a)
                                             phi += gcd64(a, q) == 1;
                                           return phi;
                                         }());
  }
}

TEST(Arith, DecayScanSphereFive) {
  auto rep = weyl_decay_scan(sphere_form(5), 13, 2.0);
  for (std::size_t i = 0; i < rep.qs.size(); ++i) {
    EXPECT_LE(rep.maxima[i], 1.0 + 1e-12);
    if (rep.qs[i] % 2 == 1 && is_prime(rep.qs[i]))
      EXPECT_NEAR(rep.normalized[i], 1.0, 1e-9) << rep.qs[i];  // |Gauss sum| = q^{-1/2} per axis
  }
}

TEST(Arith, BudgetRefusal) {
  std::vector<std::int64_t> b(5, 0);
  EXPECT_THROW(weyl_sum(sphere_form(5), 100, 1, b, 1e6), BudgetExceeded);
  EXPECT_THROW(congruence_count(sphere_form(5), 100, 1e6), BudgetExceeded);
}
