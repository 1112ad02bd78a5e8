#include <gtest/gtest.h>

#include <random>

#include "bmlab/sparse.hpp"

using namespace bml;

namespace {

PointSet box_points(const Box& b) {
  PointSet s(b.dim());
  Index x(b.dim());
  for (std::size_t i = 0; i < b.volume(); ++i) {
    b.point(i, x);
    s.insert(x);
  }
  return s;
}

PointSet random_points(const Box& b, double density, std::mt19937_64& rng) {
  PointSet s(b.dim());
  std::uniform_real_distribution<double> u(0, 1);
  Index x(b.dim());
  for (std::size_t i = 0; i < b.volume(); ++i)
    if (u(rng) < density) {
      b.point(i, x);
      s.insert(x);
    }
  return s;
}

// All maximal dyadic P strictly inside Q with <f>_{3P} > C <f>_{3Q}, by scanning every subcube.
std::vector<DyadicCube> maximal_stopping_scan(const DyadicCube& Q, const PointSet& F, double C) {
  const int n = Q.dim();
  const double top = F.count_in(Q.triple()) / static_cast<double>(Q.triple().volume());
  std::vector<DyadicCube> exceed;
  for (int k = 0; k < Q.level; ++k) {
    const std::int64_t cells = Q.side() >> k;
    Box grid{Index(n, 0), Index(n, cells)};
    Index x(n);
    for (std::size_t i = 0; i < grid.volume(); ++i) {
      grid.point(i, x);
      DyadicCube P{k, Q.corner};
      for (int j = 0; j < n; ++j) P.corner[j] += x[j] << k;
      const double avg = F.count_in(P.triple()) / static_cast<double>(P.triple().volume());
      if (avg > C * top) exceed.push_back(P);
    }
  }
  std::vector<DyadicCube> out;
  for (auto& P : exceed) {
    bool maximal = true;
    for (auto& O : exceed)
      if (O.level > P.level && O.contains(P)) maximal = false;
    if (maximal) out.push_back(P);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Sparse, RegionVertices) {
  auto S = region("Sn", sphere_form(5));
  EXPECT_EQ(S.vertex("S2"), (RPoint{Rational(25, 49), Rational(25, 49)}));
  EXPECT_EQ(region("Pn", sphere_form(5)).vertex("P2"), (RPoint{Rational(2, 3), Rational(2, 3)}));
  auto V = region("Vn", sphere_form(5));
  EXPECT_EQ(V.vertex("V2"), (RPoint{Rational(4, 5), Rational(4, 5)}));
  EXPECT_EQ(region("KLM", sphere_form(5)).vertex("Z0"), (RPoint{Rational(3, 5), Rational(2, 5)}));
  EXPECT_EQ(region("Dn", sphere_form(5)).vertex("D2"), (RPoint{Rational(4, 5), Rational(1, 5)}));
  EXPECT_TRUE(strictly_contains(V, S));
  EXPECT_FALSE(strictly_contains(S, V));
  EXPECT_FALSE(strictly_contains(S, S));
  EXPECT_THROW(region("Pn", sphere_form(4)), InvalidArgument);
  EXPECT_THROW(region("Qn", sphere_form(5)), InvalidArgument);
}

TEST(Sparse, SnInsideVnForRegularForms) {
  for (int n = 5; n <= 16; ++n) {
    auto f = sphere_form(n);
    EXPECT_TRUE(strictly_contains(region("Vn", f), region("Sn", f))) << n;
    EXPECT_TRUE(strictly_contains(region("Pn", f), region("Sn", f))) << n;
  }
  for (int n = 17; n <= 24; ++n) {
    auto f = kpowers(n, 3);
    EXPECT_TRUE(strictly_contains(region("Vn", f), region("Sn", f))) << n;
  }
}

TEST(Sparse, RegionMembershipMatchesBarycentricOracle) {
  auto S = region("Sn", sphere_form(5));
  const auto& v = S.vertices();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::int64_t> num(0, 97);
  for (int t = 0; t < 500; ++t) {
    RPoint p{Rational(num(rng), 97), Rational(num(rng), 97)};
    // solve p = a v0 + b v1 + c v2 with a + b + c = 1
    const Rational det = (v[1].x - v[0].x) * (v[2].y - v[0].y) - (v[2].x - v[0].x) * (v[1].y - v[0].y);
    const Rational b = ((p.x - v[0].x) * (v[2].y - v[0].y) - (v[2].x - v[0].x) * (p.y - v[0].y)) / det;
    const Rational c = ((v[1].x - v[0].x) * (p.y - v[0].y) - (p.x - v[0].x) * (v[1].y - v[0].y)) / det;
    const Rational a = Rational(1) - b - c;
    const bool inside = a > Rational(0) && b > Rational(0) && c > Rational(0);
    EXPECT_EQ(S.contains(p), inside) << to_string(p);
  }
  for (auto& p : S.interior_points()) EXPECT_TRUE(S.contains(p));
  for (auto& p : S.vertices()) {
    EXPECT_FALSE(S.contains(p));
    EXPECT_TRUE(S.contains_closed(p));
  }
  EXPECT_EQ(S.barycenter(), (RPoint{Rational(74, 147), Rational(74, 147)}));
}

TEST(Sparse, RegionRejectsBadPolygons) {
  EXPECT_THROW(Region("X", {{Rational(0), Rational(0)}, {Rational(1), Rational(1)}}), InvalidArgument);
  EXPECT_THROW(Region("X", {{Rational(0), Rational(0)}, {Rational(1, 2), Rational(1, 2)}, {Rational(1), Rational(1)}}),
               InvalidArgument);
  EXPECT_THROW(Region("X", {{Rational(0), Rational(0)}, {Rational(1), Rational(0)}, {Rational(1, 4), Rational(1, 4)},
                            {Rational(0), Rational(1)}}),
               InvalidArgument);
  EXPECT_THROW(Region("X", {{Rational(0), Rational(0)}, {Rational(2), Rational(0)}, {Rational(0), Rational(1)}}),
               InvalidArgument);
  auto svg = regions_svg({region("KLM", sphere_form(5)), region("Sn", sphere_form(5))});
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("S2=(25/49, 25/49)"), std::string::npos);
  EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 5, true);
}

TEST(Sparse, CollectionValidator) {
  DyadicCube Q{3, {0, 0}};
  SparseCollection one;
  one.add(Q);
  EXPECT_NO_THROW(one.validate());
  EXPECT_DOUBLE_EQ(one.witness_volume(0), 64.0);

  // three of four quadrants removed: |E| = |Q|/4, not strictly larger
  SparseCollection thin;
  auto kids = Q.children();
  thin.add(Q, {kids[0], kids[1], kids[2]});
  EXPECT_THROW(thin.validate(), InvalidCollection);

  SparseCollection nested;
  nested.add(Q, {kids[0]});
  nested.add(kids[0]);
  EXPECT_NO_THROW(nested.validate());

  SparseCollection overlap;
  overlap.add(Q);
  overlap.add(kids[1]);
  EXPECT_THROW(overlap.validate(), InvalidCollection);

  SparseCollection twice;
  twice.add(Q);
  twice.add(Q);
  EXPECT_THROW(twice.validate(), InvalidCollection);

  // a child covered by finer holes of the parent
  SparseCollection fine;
  fine.add(Q, kids[2].children());
  fine.add(kids[2]);
  EXPECT_NO_THROW(fine.validate());
  SparseCollection partial;
  auto grand = kids[2].children();
  grand.pop_back();
  partial.add(Q, grand);
  partial.add(kids[2]);
  EXPECT_THROW(partial.validate(), InvalidCollection);

  SparseCollection bad_hole;
  bad_hole.add(kids[0], {DyadicCube{1, {6, 6}}});
  EXPECT_THROW(bad_hole.validate(), InvalidCollection);
}

TEST(Sparse, FormValues) {
  DyadicCube Q{2, {0, 0}};
  GridFunction f(Q.box()), g(Q.box());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = g[i] = 1.0;
  SparseCollection s;
  s.add(Q);
  EXPECT_NEAR(sparse_form_value(s, 0.5, 0.7, f, g), 16.0, 1e-12);

  // two unit cubes, unit masses at both with values 2 and 3 for f, 5 and 7 for g
  GridFunction a(Index{0, 0}, Index{2, 1}), b(Index{0, 0}, Index{2, 1});
  a[0] = 2;
  a[1] = 3;
  b[0] = 5;
  b[1] = 7;
  SparseCollection units;
  units.add(DyadicCube{0, {0, 0}});
  units.add(DyadicCube{0, {1, 0}});
  EXPECT_NEAR(sparse_form_value(units, 0.5, 0.5, a, b), 2 * 5 + 3 * 7, 1e-12);

  SparseCollection pair;
  pair.add(DyadicCube{1, {0, 0}});
  GridFunction c(Index{0, 0}, Index{2, 2}), e(Index{0, 0}, Index{2, 2});
  c[0] = 4;
  e[3] = 9;
  // |Q| (4^2/4)^{1/2} (9^3/4)^{1/3}
  EXPECT_NEAR(sparse_form_value(pair, 0.5, 1.0 / 3, c, e), 4 * 2 * std::cbrt(729.0 / 4), 1e-12);
}

TEST(Sparse, FormProperties) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  DyadicCube Q{3, {0, 0}};
  auto kids = Q.children();
  SparseCollection s;
  s.add(Q, {kids[0]});
  s.add(kids[0], {kids[0].children()[3]});
  s.add(kids[0].children()[3]);
  for (int t = 0; t < 20; ++t) {
    GridFunction f(Q.box()), g(Q.box());
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = u(rng);
      g[i] = u(rng);
    }
    const double p = 0.3 + 0.6 * u(rng), q = 0.3 + 0.6 * u(rng);
    const double base = sparse_form_value(s, p, q, f, g);
    EXPECT_NEAR(sparse_form_value(s, q, p, g, f), base, 1e-12 * base);
    GridFunction af = f, bg = g;
    for (std::size_t i = 0; i < f.size(); ++i) {
      af[i] *= 2.5;
      bg[i] *= 0.3;
    }
    EXPECT_NEAR(sparse_form_value(s, p, q, af, bg), 0.75 * base, 1e-12 * base);
    GridFunction big = f;
    for (std::size_t i = 0; i < f.size(); ++i) big[i] += u(rng);
    EXPECT_GE(sparse_form_value(s, p, q, big, g), base);
  }
  PointSet F(2), G(2);
  GridFunction fc(Q.box()), gc(Q.box());
  for (std::int64_t i = 0; i < 8; ++i)
    for (std::int64_t j = 0; j < 8; ++j) {
      if ((i * j) % 3 == 0) {
        F.insert(Index{i, j});
        fc.set(Index{i, j}, 1.0);
      }
      if ((i + j) % 4 == 1) {
        G.insert(Index{i, j});
        gc.set(Index{i, j}, 1.0);
      }
    }
  EXPECT_NEAR(sparse_form_value(s, 0.6, 0.55, F, G), sparse_form_value(s, 0.6, 0.55, fc, gc), 1e-12);
}

TEST(Sparse, DyadicCountsTriple) {
  std::mt19937_64 rng(5);
  DyadicCube Q{4, {0, 0, 0}};
  auto F = random_points(Q.triple(), 0.05, rng);
  DyadicCounts counts(F, 4);
  for (int k = 0; k < 4; ++k)
    for (auto& c : std::vector<DyadicCube>{DyadicCube::containing(Index{3, 5, 7}, k), DyadicCube::containing(Index{0, 0, 0}, k)}) {
      EXPECT_EQ(counts.count(c), static_cast<std::int64_t>(F.count_in(c.box())));
      EXPECT_EQ(counts.triple_count(c), static_cast<std::int64_t>(F.count_in(c.triple())));
    }
}

TEST(Sparse, RecursionTrivialCases) {
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  DyadicCube Q{4, {0, 0}};
  std::vector<std::int64_t> radii{1, 2, 5, 25, 100};
  auto G = box_points(Q.box());
  // f = 1_Q with the default C = 4 * 3^n: averages over 3P never exceed 1 < C / 3^n
  auto cert = stopping_time_recursion(form, phi, radii, box_points(Q.box()), G, Q);
  ASSERT_EQ(cert.nodes.size(), 1u);
  EXPECT_TRUE(cert.collection.holes[0].empty());
  // f = 1_{3Q}: no stopping cubes for any C > 1
  auto full = stopping_time_recursion(form, phi, radii, box_points(Q.triple()), G, Q, {1.01});
  EXPECT_EQ(full.nodes.size(), 1u);
  // every G point sees M_lambda 1 = 1 for radii with scale <= 16
  EXPECT_NEAR(full.maximal_pairing, 256.0, 1e-9);
  EXPECT_NEAR(full.node_sum(), 256.0, 1e-9);
  EXPECT_EQ(full.radii, (std::vector<std::int64_t>{1, 2, 5, 25, 100}));

  EXPECT_THROW(stopping_time_recursion(form, phi, radii, box_points(Q.box()), box_points(Q.triple()), Q),
               InvalidArgument);
  EXPECT_THROW(stopping_time_recursion(form, phi, {3}, box_points(Q.box()), G, Q), NotRepresented);
}

TEST(Sparse, PointMassMatchesExhaustiveScan) {
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  DyadicCube Q{4, {0, 0}};
  for (auto p : {Index{5, 9}, Index{0, 0}, Index{15, 3}, Index{-7, 20}}) {
    PointSet F(2);
    F.insert(p);
    // C = 4 is below the packing threshold here (nine side-4 cubes around the point)
    StoppingOptions opt{4.0};
    opt.enforce_packing = false;
    auto cert = stopping_time_recursion(form, phi, {1, 2, 5}, F, box_points(Q.box()), Q, opt);
    auto expect = maximal_stopping_scan(Q, F, 4.0);
    EXPECT_EQ(cert.collection.holes[0], expect);
    // the chain: each node's stopping cubes match the scan at that node
    for (std::size_t i = 0; i < cert.nodes.size(); ++i) {
      PointSet local(2);
      if (cert.nodes[i].cube.triple().contains(p)) local.insert(p);
      EXPECT_EQ(cert.collection.holes[i], maximal_stopping_scan(cert.nodes[i].cube, local, 4.0));
    }
  }
}

TEST(Sparse, RandomRecursionsAgainstDenseMaximal) {
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  DyadicCube Q{5, {0, 0}};
  std::vector<std::int64_t> radii{1, 4, 25, 100, 400};
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 12; ++t) {
    PointSet F(2);
    // a few dense blobs plus scattered points in 3Q
    auto scattered = random_points(Q.triple(), 0.002, rng);
    for (std::size_t i = 0; i < scattered.size(); ++i) F.insert(scattered.point(i));
    for (int b = 0; b < 3; ++b) {
      const std::int64_t s = 1 + static_cast<std::int64_t>(6 * u(rng));
      Index c{static_cast<std::int64_t>(-32 + 96 * u(rng)), static_cast<std::int64_t>(-32 + 96 * u(rng))};
      for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j < s; ++j) {
          Index x{std::min<std::int64_t>(c[0] + i, 63), std::min<std::int64_t>(c[1] + j, 63)};
          F.insert(x);
        }
    }
    auto G = random_points(Q.box(), 0.1 + 0.5 * u(rng), rng);
    auto cert = stopping_time_recursion(form, phi, radii, F, G, Q);
    EXPECT_NO_THROW(cert.collection.validate());
    EXPECT_LE(cert.max_packing(), 0.25);
    EXPECT_TRUE(cert.recursion_holds());

    // oracle: pointwise maximum of direct averages of 1_F over 3Q
    auto f = F.characteristic(Q.triple());
    CompensatedSum<double> direct;
    std::vector<GridFunction> avgs;
    for (auto l : radii) avgs.push_back(apply_average(form, phi, l, f, {AverageMode::direct, {}}));
    for (std::size_t i = 0; i < G.size(); ++i) {
      double m = 0;
      for (auto& a : avgs) m = std::max(m, std::real(a.at(G.point(i))));
      direct.add(m);
    }
    EXPECT_NEAR(cert.maximal_pairing, direct.value(), 1e-9 * std::max(1.0, direct.value()));
  }
}

TEST(Sparse, CorruptedCollectionsRejected) {
  auto form = sphere_form(2);
  auto phi = CutoffFunction::one();
  DyadicCube Q{5, {0, 0}};
  std::mt19937_64 rng(17);
  int corrupted = 0;
  for (int t = 0; t < 10; ++t) {
    PointSet F(2);
    for (int k = 0; k < 30; ++k) {
      Index x{static_cast<std::int64_t>(rng() % 48), static_cast<std::int64_t>(rng() % 48)};
      F.insert(x);
      x[0] += 1;
      F.insert(x);
    }
    StoppingOptions opt;
    opt.C = 20.0;
    opt.prune_empty = false;  // every stopping cube becomes a node
    auto cert = stopping_time_recursion(form, phi, {1, 4}, F, random_points(Q.box(), 0.3, rng), Q, opt);
    auto s = cert.collection;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.holes[i].empty()) continue;
      auto bad = s;
      bad.holes[i].pop_back();  // the dropped child now overlaps its parent
      EXPECT_THROW(bad.validate(), InvalidCollection);
      auto dup = s;
      dup.add(s.cubes[i]);
      EXPECT_THROW(dup.validate(), InvalidCollection);
      ++corrupted;
      break;
    }
  }
  EXPECT_GT(corrupted, 0);
}

TEST(Sparse, PackingViolationWhenCTooSmall) {
  auto form = sphere_form(2);
  DyadicCube Q{4, {0, 0}};
  PointSet F(2);
  for (std::int64_t i = 0; i < 16; i += 2)
    for (std::int64_t j = 0; j < 16; j += 2) F.insert(Index{i, j});
  EXPECT_THROW(stopping_time_recursion(form, CutoffFunction::one(), {1}, F, box_points(Q.box()), Q, {1.05}),
               PackingViolation);
}

TEST(Sparse, CertificateInFourDimensions) {
  auto form = sphere_form(4);
  DyadicCube Q{4, {0, 0, 0, 0}};
  std::mt19937_64 rng(2);
  PointSet F(4);
  auto cluster = random_points(Box{Index{2, 2, 2, 2}, Index{5, 5, 5, 5}}, 0.6, rng);
  for (std::size_t i = 0; i < cluster.size(); ++i) F.insert(cluster.point(i));
  auto sc = random_points(Q.triple(), 0.001, rng);
  for (std::size_t i = 0; i < sc.size(); ++i) F.insert(sc.point(i));
  auto G = random_points(Q.box(), 0.2, rng);
  auto cert = stopping_time_recursion(form, CutoffFunction::one(), {2, 10, 50}, F, G, Q);
  EXPECT_GT(cert.nodes.size(), 1u);
  EXPECT_TRUE(cert.recursion_holds());
  EXPECT_LE(cert.maximal_pairing, 10.0 * cert.sparse_form(8.0 / 15, 8.0 / 15));
  EXPECT_LE(cert.max_node_ratio(8.0 / 15, 8.0 / 15), 10.0);
}

TEST(Sparse, PairingEngineMatchesDirectSum) {
  auto form = sphere_form(3);
  auto phi = CutoffFunction::one();
  for (std::int64_t lambda : {9, 11}) {
    auto shell = enumerate_shell(form, phi, lambda);
    const int side = improving_side(form, lambda);
    PairingEngine engine(shell, side);
    Box E{Index(3, 0), Index(3, side)};
    std::mt19937_64 rng(lambda);
    for (int t = 0; t < 5; ++t) {
      auto p = random_pair(E.volume(), 3, lambda, t);
      double direct = 0;
      Index x(3), z(3);
      for (std::size_t i = 0; i < E.volume(); ++i) {
        if (!p.G[i]) continue;
        E.point(i, x);
        for (std::size_t k = 0; k < shell.size(); ++k) {
          for (int j = 0; j < 3; ++j) z[j] = x[j] - shell.point(k)[j];
          if (E.contains(z) && p.F[E.flat(z)]) direct += shell.weights[k] / shell.r_value;
        }
      }
      EXPECT_NEAR(engine.pairing(p.F, p.G), direct, 1e-9 * std::max(1.0, direct));
    }
  }
}

TEST(Sparse, ImprovingRatioEndpoints) {
  auto form = sphere_form(5);
  auto phi = CutoffFunction::one();
  auto r10 = improving_ratio(form, phi, 9, 1.0, 0.0, 20, 7);
  auto r01 = improving_ratio(form, phi, 9, 0.0, 1.0, 20, 7);
  EXPECT_EQ(r10.side, 4);
  EXPECT_EQ(r10.pairs.size(), 28u);
  for (auto& p : r10.pairs) EXPECT_LE(p.ratio, 1.0 + 1e-12) << p.label;
  for (auto& p : r01.pairs) EXPECT_LE(p.ratio, 1.0 + 1e-12) << p.label;
  auto mid = improving_ratio(form, phi, 9, 0.5, 0.5, 20, 7);
  EXPECT_EQ(mid.pairs[0].label, "full");
  EXPECT_LE(mid.pairs[0].ratio, 1.0 + 1e-12);
  auto again = improving_ratio(form, phi, 9, 0.5, 0.5, 20, 7);
  for (std::size_t i = 0; i < mid.pairs.size(); ++i) EXPECT_EQ(mid.pairs[i].ratio, again.pairs[i].ratio);
}

TEST(Sparse, NormScanAndPowerIteration) {
  auto form = sphere_form(3);
  auto phi = CutoffFunction::one();
  auto scan = norm_scaling_scan(form, phi, 0.5, 0.5, {9, 25, 49}, 2, 1, 4);
  ASSERT_EQ(scan.lower_bounds.size(), 3u);
  EXPECT_EQ(scan.target, 0.0);
  for (double v : scan.lower_bounds) EXPECT_LE(v, 1.0 + 1e-12);
  EXPECT_NEAR(scan.slope, 0.0, 0.1);
  EXPECT_THROW(norm_scaling_scan(sphere_form(5), phi, 0.5, 0.5, {100}, 0, 1, 4), BudgetExceeded);

  auto k = constants(sphere_form(5));
  const double s2 = to_double(region_sn(k.eta_R).vertex("S2").x);
  auto at_s2 = norm_scaling_scan(sphere_form(5), phi, s2, 1 - s2, {9, 16}, 0);
  EXPECT_NEAR(at_s2.target, -5.0 / 49, 1e-12);
  EXPECT_NEAR(at_s2.natural_target, -5.0 / 98, 1e-12);

  auto rq = power_iteration_l2(enumerate_shell(form, phi, 9), 16, 12, 3);
  for (std::size_t i = 1; i < rq.size(); ++i) EXPECT_GE(rq[i], rq[i - 1] - 1e-14);
  EXPECT_LE(rq.back(), 1.0 + 1e-12);
  EXPECT_GT(rq.back(), 0.9);
  EXPECT_DOUBLE_EQ(hughes_exponent(5, 2.0), 0.0);
  EXPECT_NEAR(hughes_exponent(5, 1.5, 0.1), 0.1 - 5.0 / 3, 1e-15);
}
