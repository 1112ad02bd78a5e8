#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "bmlab/grid.hpp"

using namespace bml;

namespace {

GridFunction random_grid(Index origin, Index extents, std::uint64_t seed, bool complex_values = false) {
  GridFunction f(std::move(origin), std::move(extents));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : f.values()) v = complex_values ? Complex(u(rng), u(rng)) : Complex(u(rng));
  return f;
}

/// Pointwise definition, one output point at a time.
Complex oracle_average(const LatticeShell& s, const GridFunction& f, const Index& x) {
  Complex acc = 0;
  Index z(x.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    for (std::size_t j = 0; j < x.size(); ++j) z[j] = x[j] - s.point(k)[j];
    acc += s.weights[k] * f.at(z);
  }
  return acc / s.r_value;
}

}  // namespace

TEST(Grid, DeltaAtOriginSphereFive) {
  GridFunction f(Index(5, 0), Index(5, 1));
  f[0] = 1.0;
  auto out = apply_average(sphere_form(5), CutoffFunction::one(), 1, f);
  EXPECT_EQ(out.extents(), Index(5, 3));
  int hits = 0;
  Index x(5);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.box().point(i, x);
    int nz = 0, abs_sum = 0;
    for (auto c : x) {
      nz += c != 0;
      abs_sum += static_cast<int>(std::abs(c));
    }
    if (nz == 1 && abs_sum == 1) {
      EXPECT_NEAR(out[i].real(), 0.1, 1e-15);
      ++hits;
    } else {
      EXPECT_EQ(std::abs(out[i]), 0.0);
    }
  }
  EXPECT_EQ(hits, 10);
}

TEST(Grid, ConstantFunctionAveragesToOne) {
  auto shell = enumerate_shell(sphere_form(3), CutoffFunction::bump(2.0), 6);
  GridFunction f(Index(3, -20), Index(3, 41));
  for (auto& v : f.values()) v = 1.0;
  auto out = apply_average(shell, f);
  Index x(3, 0);
  EXPECT_NEAR(out.at(x).real(), 1.0, 1e-14);
}

TEST(Grid, IndicatorOfCubeSphereFour) {
  GridFunction f(Index(4, 0), Index(4, 5));
  for (auto& v : f.values()) v = 1.0;
  auto shell = enumerate_shell(sphere_form(4), CutoffFunction::one(), 2);
  auto out = apply_average(shell, f);
  Index x(4, 2);
  // every x - y with |y|^2 = 2 stays in [0,4]^4
  EXPECT_NEAR(out.at(x).real(), 1.0, 1e-15);
  Index corner(4, 0);
  EXPECT_NEAR(out.at(corner).real(), oracle_average(shell, f, corner).real(), 1e-15);
  // from the corner only y with both nonzero entries equal to -1 stay inside: 6 of 24
  EXPECT_NEAR(out.at(corner).real(), 6.0 / 24.0, 1e-15);
}

TEST(Grid, EmptyShellRefused) {
  GridFunction f(Index(3, 0), Index(3, 2));
  EXPECT_THROW(apply_average(sphere_form(3), CutoffFunction::one(), 7, f), NotRepresented);
}

TEST(Grid, DirectAgreesWithPointwiseOracle) {
  auto f = random_grid({-2, 1, 0}, {5, 4, 6}, 3, true);
  auto shell = enumerate_shell(sphere_form(3), CutoffFunction::bump(2.0), 9);
  auto out = apply_average(shell, f);
  Index x(3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.box().point(i, x);
    ASSERT_NEAR(std::abs(out[i] - oracle_average(shell, f, x)), 0.0, 1e-13);
  }
}

TEST(Grid, DirectAndFftAgree) {
  struct Case {
    int n;
    std::int64_t lambda;
  };
  for (auto c : {Case{2, 25}, Case{3, 14}, Case{4, 30}, Case{4, 6}}) {
    auto f = random_grid(Index(c.n, -1), Index(c.n, c.n == 4 ? 5 : 9), 17 + c.n);
    auto shell = enumerate_shell(sphere_form(c.n), CutoffFunction::bump(2.0), c.lambda);
    auto a = apply_average(shell, f);
    auto b = apply_average(shell, f, {AverageMode::fft, {}});
    ASSERT_EQ(a.box(), b.box());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(std::abs(a[i] - b[i]), 0.0, 1e-9);
  }
}

TEST(Grid, FftTorusTooSmallRefused) {
  auto f = random_grid(Index(2, 0), Index(2, 8), 1);
  auto shell = enumerate_shell(sphere_form(2), CutoffFunction::one(), 25);
  AverageOptions opt{AverageMode::fft, {18, 18}};
  EXPECT_THROW(apply_average(shell, f, opt), InvalidArgument);
  opt.torus = {19, 19};
  EXPECT_NO_THROW(apply_average(shell, f, opt));
}

TEST(Grid, ContractionOnLinfAndL1) {
  for (int trial = 0; trial < 10; ++trial) {
    auto f = random_grid(Index(3, 0), Index(3, 6), 100 + trial, true);
    auto shell = enumerate_shell(sphere_form(3), CutoffFunction::bump(2.0), 3 + trial);
    if (shell.empty()) continue;
    auto out = apply_average(shell, f);
    EXPECT_LE(out.norm(INFINITY), f.norm(INFINITY) + 1e-14);
    EXPECT_LE(out.norm(1.0), f.norm(1.0) + 1e-12);
  }
}

TEST(Grid, PositivityAndLinearity) {
  auto f = random_grid(Index(2, 0), Index(2, 7), 5);
  auto g = random_grid(Index(2, 0), Index(2, 7), 6);
  for (auto& v : f.values()) v = std::abs(v);
  auto shell = enumerate_shell(sphere_form(2), CutoffFunction::bump(1.5), 13);
  auto mf = apply_average(shell, f);
  for (auto v : mf.values()) EXPECT_GE(v.real(), 0.0);
  GridFunction h = f;
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = 2.0 * f[i] - 3.0 * g[i];
  auto mg = apply_average(shell, g), mh = apply_average(shell, h);
  for (std::size_t i = 0; i < mh.size(); ++i)
    EXPECT_NEAR(std::abs(mh[i] - (2.0 * mf[i] - 3.0 * mg[i])), 0.0, 1e-13);
}

TEST(Grid, TranslationEquivariance) {
  auto f = random_grid(Index(3, 0), Index(3, 4), 9);
  Index z{3, -5, 2};
  auto shell = enumerate_shell(sphere_form(3), CutoffFunction::one(), 11);
  auto a = apply_average(shell, f.translated(z));
  auto b = apply_average(shell, f).translated(z);
  ASSERT_EQ(a.box(), b.box());
  EXPECT_EQ(a.values(), b.values());
}

TEST(Grid, Sequences) {
  auto fac = make_factorial_pow2(4);
  EXPECT_EQ(fac.values, (std::vector<std::int64_t>{2, 24, 40320, 20922789888000}));
  EXPECT_TRUE(fac.prefix_consistent);
  auto lac = make_lacunary(2.0, 1, 5);
  EXPECT_EQ(lac.values, (std::vector<std::int64_t>{1, 2, 4, 8, 16}));
  auto lac3 = make_lacunary(1.5, 3, 6);
  for (std::size_t k = 1; k < lac3.values.size(); ++k)
    EXPECT_GE(static_cast<double>(lac3.values[k]) / lac3.values[k - 1], 1.5);
  auto ex = make_explicit({5, 13, 25});
  EXPECT_NO_THROW(verify_represented(ex, sphere_form(5), CutoffFunction::one()));
  EXPECT_THROW(verify_represented(make_explicit({3, 7}), sphere_form(3), CutoffFunction::one()),
               NotRepresented);
  EXPECT_THROW(make_factorial_sparse({2, 2, 3}), InvalidArgument);
  EXPECT_THROW(make_explicit({4, 3}), InvalidArgument);
  EXPECT_THROW(make_lacunary(2.0, 1, 0), InvalidArgument);
  EXPECT_FALSE(make_factorial_sparse({2, 3, 4, 5}).prefix_consistent);
  EXPECT_FALSE(make_factorial_sparse({1, 2, 6, 7, 8}).prefix_consistent);
}

TEST(Grid, MaximalSingleAndNested) {
  auto f = random_grid(Index(3, 0), Index(3, 5), 12);
  for (auto& v : f.values()) v = std::abs(v);
  auto form = sphere_form(3);
  auto phi = CutoffFunction::one();
  auto single = maximal(form, phi, make_explicit({6}), f);
  auto avg = apply_average(form, phi, 6, f);
  ASSERT_EQ(single.sup.box(), avg.box());
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_EQ(single.sup[i].real(), std::abs(avg[i]));

  auto small = maximal(form, phi, make_explicit({2, 9}), f);
  auto big = maximal(form, phi, make_explicit({2, 5, 9, 14}), f);
  Index x(3);
  for (std::size_t i = 0; i < small.sup.size(); ++i) {
    small.sup.box().point(i, x);
    EXPECT_LE(small.sup[i].real(), big.sup.at(x).real());
  }
}

TEST(Grid, MaximalOfDeltaIsMaxOfKernels) {
  GridFunction f(Index(4, 0), Index(4, 1));
  f[0] = 1.0;
  auto form = sphere_form(4);
  auto m = maximal(form, CutoffFunction::one(), make_explicit({1, 2}), f);
  Index x(4);
  for (std::size_t i = 0; i < m.sup.size(); ++i) {
    m.sup.box().point(i, x);
    std::int64_t r = 0;
    for (auto c : x) r += c * c;
    const double want = r == 1 ? 1.0 / 8.0 : r == 2 ? 1.0 / 24.0 : 0.0;
    EXPECT_EQ(m.sup[i].real(), want);
    EXPECT_EQ(m.argmax[i], r == 1 ? 0 : r == 2 ? 1 : -1);
  }
}

TEST(Grid, StoppingTimeConstantEqualsAverage) {
  auto f = random_grid(Index(2, -4), Index(2, 16), 21);
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  auto shell = enumerate_shell(form, phi, 5);
  StoppingTime st{DyadicCube{3, Index(2, 0)}, {5}, {radius_scale(form, phi, 5)},
                  std::vector<int>(64, 0), 1e9};
  auto mt = maximal_with_stopping_time({shell}, st, f);
  auto avg = apply_average(shell, f);
  Index x(2);
  for (std::size_t i = 0; i < mt.size(); ++i) {
    mt.box().point(i, x);
    EXPECT_NEAR(std::abs(mt[i] - avg.at(x)), 0.0, 1e-15);
  }
}

TEST(Grid, StoppingTimeDominatedByMaximal) {
  auto f = random_grid(Index(2, -4), Index(2, 16), 22);
  for (auto& v : f.values()) v = std::abs(v);
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  std::vector<std::int64_t> radii{1, 2, 5};
  std::vector<LatticeShell> shells;
  std::vector<double> scales;
  for (auto l : radii) {
    shells.push_back(enumerate_shell(form, phi, l));
    scales.push_back(radius_scale(form, phi, l));
  }
  std::mt19937_64 rng(4);
  std::vector<int> tau(64);
  for (auto& t : tau) t = static_cast<int>(rng() % 4) - 1;
  StoppingTime st{DyadicCube{3, Index(2, 0)}, radii, scales, tau, 1e9};
  auto mt = maximal_with_stopping_time(shells, st, f);
  auto mx = maximal(shells, f);
  Index x(2);
  for (std::size_t i = 0; i < mt.size(); ++i) {
    mt.box().point(i, x);
    EXPECT_LE(std::abs(mt[i]), mx.sup.at(x).real() + 1e-15);
  }
}

TEST(Grid, InadmissibleStoppingTimeRejected) {
  // f = 1 on a single point of the root cube: the unit cell holding it is
  // dense, so tau there must use a radius of scale > 1.
  const int n = 2;
  GridFunction f(Index(n, -8), Index(n, 24));
  Index p{3, 5};
  f.set(p, 1.0);
  auto form = sphere_form(n);
  auto phi = CutoffFunction::one();
  std::vector<std::int64_t> radii{1, 4, 25};
  std::vector<double> scales;
  for (auto l : radii) scales.push_back(radius_scale(form, phi, l));
  StoppingTime st{DyadicCube{3, Index(n, 0)}, radii, scales, std::vector<int>(64, 0), 4.0};
  try {
    validate_stopping_time(st, f);
    FAIL() << "expected rejection";
  } catch (const Inadmissible& e) {
    EXPECT_TRUE(e.cube().triple().contains(std::span<const std::int64_t>(p)));
  }
  // radius 25 has scale 5; it is admissible for every P of side <= 4
  std::fill(st.tau.begin(), st.tau.end(), 2);
  EXPECT_NO_THROW(validate_stopping_time(st, f));
  st.tau[st.root.box().flat(p)] = 1;  // scale 2 fails at the side-2 ancestor
  EXPECT_THROW(validate_stopping_time(st, f), Inadmissible);
}

TEST(Grid, BoxSummerMatchesDirectSums) {
  auto f = random_grid({-3, 2, 0}, {7, 5, 6}, 31);
  BoxSummer s(f);
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    Box b{{static_cast<std::int64_t>(rng() % 12) - 6, static_cast<std::int64_t>(rng() % 10),
           static_cast<std::int64_t>(rng() % 8) - 2},
          {static_cast<std::int64_t>(rng() % 8), static_cast<std::int64_t>(rng() % 6),
           static_cast<std::int64_t>(rng() % 7) + 1}};
    if (b.volume() == 0) continue;
    EXPECT_NEAR(s.sum(b), f.average(b, 1.0) * static_cast<double>(b.volume()), 1e-11);
  }
}

TEST(Grid, DyadicCubes) {
  Index x{-3, 5};
  auto c = DyadicCube::containing(x, 2);
  EXPECT_EQ(c.corner, (Index{-4, 4}));
  EXPECT_TRUE(c.contains(std::span<const std::int64_t>(x)));
  auto kids = c.children();
  EXPECT_EQ(kids.size(), 4u);
  for (auto& k : kids) EXPECT_TRUE(c.contains(k));
  EXPECT_EQ(c.triple().origin, (Index{-8, 0}));
  EXPECT_EQ(c.triple().extents, (Index{12, 12}));
}

TEST(Grid, BinaryRoundTrip) {
  auto f = random_grid({-1, 4}, {3, 5}, 8, true);
  auto p = std::filesystem::temp_directory_path() / "bmlab_test_grid.grid";
  f.write(p);
  auto g = GridFunction::read(p);
  EXPECT_EQ(g.box(), f.box());
  EXPECT_EQ(g.values(), f.values());
  std::filesystem::remove(p);
}

TEST(Grid, DeterministicAcrossWorkers) {
  auto f = random_grid(Index(3, 0), Index(3, 6), 77, true);
  auto shell = enumerate_shell(sphere_form(3), CutoffFunction::bump(2.0), 17);
  set_workers(1);
  auto a = apply_average(shell, f);
  set_workers(4);
  auto b = apply_average(shell, f);
  set_workers(1);
  EXPECT_EQ(a.values(), b.values());
}
