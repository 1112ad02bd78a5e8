#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <map>
#include <set>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/grid.hpp"
#include "bmlab/lattice.hpp"
#include "bmlab/numerics.hpp"

namespace bml {

// ---------------------------------------------------------------------------
// Regions in the (1/p, 1/q) square

struct RPoint {
  Rational x, y;
  bool operator==(const RPoint&) const = default;
};

inline std::string to_string(const RPoint& p) {
  return "(" + to_string(p.x) + ", " + to_string(p.y) + ")";
}

namespace detail {
inline Rational cross(const RPoint& o, const RPoint& a, const RPoint& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}
}  // namespace detail

/// Convex polygon with exact vertices, stored counter-clockwise.
class Region {
 public:
  Region(std::string name, std::vector<RPoint> vertices, std::vector<std::string> labels = {})
      : name_(std::move(name)), v_(std::move(vertices)), labels_(std::move(labels)) {
    if (v_.size() < 3) throw InvalidArgument("region needs at least three vertices");
    if (labels_.empty())
      for (std::size_t i = 0; i < v_.size(); ++i) labels_.push_back(name_ + std::to_string(i + 1));
    if (labels_.size() != v_.size()) throw InvalidArgument("one label per vertex");
    for (auto& p : v_)
      if (p.x < Rational(0) || p.x > Rational(1) || p.y < Rational(0) || p.y > Rational(1))
        throw InvalidArgument("region vertex outside [0,1]^2: " + to_string(p));
    Rational area2(0);
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const auto& a = v_[i];
      const auto& b = v_[(i + 1) % v_.size()];
      area2 += a.x * b.y - a.y * b.x;
    }
    if (area2 == Rational(0)) throw InvalidArgument("degenerate region " + name_);
    if (area2 < Rational(0)) {
      std::reverse(v_.begin(), v_.end());
      std::reverse(labels_.begin(), labels_.end());
    }
    for (std::size_t i = 0; i < v_.size(); ++i)
      if (detail::cross(v_[i], v_[(i + 1) % v_.size()], v_[(i + 2) % v_.size()]) < Rational(0))
        throw InvalidArgument("region " + name_ + " is not convex");
  }

  const std::string& name() const { return name_; }
  const std::vector<RPoint>& vertices() const { return v_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const RPoint& vertex(const std::string& label) const {
    for (std::size_t i = 0; i < v_.size(); ++i)
      if (labels_[i] == label) return v_[i];
    throw InvalidArgument("region " + name_ + " has no vertex " + label);
  }

  /// Open interior.
  bool contains(const RPoint& p) const { return side_signs(p, true); }
  bool contains_closed(const RPoint& p) const { return side_signs(p, false); }

  RPoint barycenter() const {
    RPoint c{Rational(0), Rational(0)};
    for (auto& p : v_) {
      c.x += p.x;
      c.y += p.y;
    }
    c.x /= Rational(static_cast<std::int64_t>(v_.size()));
    c.y /= Rational(static_cast<std::int64_t>(v_.size()));
    return c;
  }

  /// Barycenter and the midpoints of the vertex-to-barycenter segments.
  std::vector<RPoint> interior_points() const {
    const auto c = barycenter();
    std::vector<RPoint> out{c};
    for (auto& p : v_) out.push_back({(p.x + c.x) / Rational(2), (p.y + c.y) / Rational(2)});
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"name", name_}};
    for (std::size_t i = 0; i < v_.size(); ++i)
      j["vertices"].push_back({{"label", labels_[i]},
                               {"x", to_string(v_[i].x)},
                               {"y", to_string(v_[i].y)}});
    return j;
  }

 private:
  bool side_signs(const RPoint& p, bool strict) const {
    for (std::size_t i = 0; i < v_.size(); ++i) {
      const auto c = detail::cross(v_[i], v_[(i + 1) % v_.size()], p);
      if (strict ? !(c > Rational(0)) : c < Rational(0)) return false;
    }
    return true;
  }

  std::string name_;
  std::vector<RPoint> v_;
  std::vector<std::string> labels_;
};

inline Region region_sn(const Rational& eta) {
  const Rational s = (Rational(1) + Rational(2) * eta) / (Rational(2) * (Rational(1) + eta));
  return Region("Sn", {{Rational(0), Rational(1)}, {s, s}, {Rational(1), Rational(0)}},
                {"S1", "S2", "S3"});
}

inline Region region_pn(int n) {
  if (n < 5) throw InvalidArgument("P_n is defined for n >= 5");
  const Rational s(n - 1, n + 1);
  return Region("Pn", {{Rational(0), Rational(1)}, {s, s}, {Rational(1), Rational(0)}},
                {"P1", "P2", "P3"});
}

inline Region region_vn(const Rational& c) {
  const Rational s = (Rational(2) * c - Rational(1)) / (Rational(2) * c);
  return Region("Vn", {{Rational(1), Rational(0)}, {s, s}, {Rational(0), Rational(1)}},
                {"V1", "V2", "V3"});
}

/// L^p -> L^q triangle of the single continuous average.
inline Region region_dn(const Rational& c) {
  const Rational two_c = Rational(2) * c;
  return Region("Dn",
                {{Rational(0), Rational(0)},
                 {(two_c - Rational(1)) / two_c, Rational(1) / two_c},
                 {Rational(1), Rational(1)}},
                {"D1", "D2", "D3"});
}

/// Sparse region of the full discrete spherical maximal function.
inline Region klm_polygon(int n) {
  const std::int64_t N = n;
  const Rational z0(N - 2, N);
  const std::int64_t den = N * N * N - 2 * N * N + N - 2;
  return Region("KLM",
                {{z0, Rational(2, N)},
                 {z0, z0},
                 {Rational(N * N * N - 4 * N * N + 4 * N + 1, den),
                  Rational(N * N * N - 4 * N * N + 6 * N - 7, den)},
                 {Rational(0), Rational(1)}},
                {"Z0", "Z1", "Z2", "Z3"});
}

inline Region region(const std::string& name, const IntegralForm& form) {
  if (name == "Sn") return region_sn(constants(form).eta_R);
  if (name == "Pn") return region_pn(form.dimension());
  if (name == "Vn") return region_vn(constants(form).c_R);
  if (name == "Dn") return region_dn(constants(form).c_R);
  if (name == "KLM" || name == "KLM-polygon") return klm_polygon(form.dimension());
  throw InvalidArgument("unknown region: " + name);
}

/// inner is a subset of outer and not equal to it; open sets, so closed
/// containment of the vertices suffices.
inline bool strictly_contains(const Region& outer, const Region& inner) {
  for (auto& p : inner.vertices())
    if (!outer.contains_closed(p)) return false;
  if (inner.vertices().size() != outer.vertices().size()) return true;
  for (auto& p : inner.vertices())
    if (std::find(outer.vertices().begin(), outer.vertices().end(), p) == outer.vertices().end())
      return true;
  return false;
}

inline std::string regions_svg(const std::vector<Region>& regions, int size = 480) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  const int pad = 40;
  auto X = [&](const Rational& x) { return pad + to_double(x) * size; };
  auto Y = [&](const Rational& y) { return pad + (1.0 - to_double(y)) * size; };
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\""
    << size + 2 * pad << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << pad + size / 2 << "\" y=\"" << size + 2 * pad - 8 << "\">1/p</text>\n";
  s << "<text x=\"4\" y=\"" << pad + size / 2 << "\">1/q</text>\n";
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& reg = regions[r];
    const char* col = colors[r % 6];
    s << "<polygon points=\"";
    for (auto& p : reg.vertices()) s << X(p.x) << "," << Y(p.y) << " ";
    s << "\" fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"" << col << "\"/>\n";
    for (std::size_t i = 0; i < reg.vertices().size(); ++i) {
      const auto& p = reg.vertices()[i];
      s << "<circle cx=\"" << X(p.x) << "\" cy=\"" << Y(p.y) << "\" r=\"2\" fill=\"" << col << "\"/>\n";
      s << "<text x=\"" << X(p.x) + 4 << "\" y=\"" << Y(p.y) - 4 << "\" fill=\"" << col << "\">"
        << reg.labels()[i] << "=" << to_string(p) << "</text>\n";
    }
    s << "<text x=\"" << pad + 6 << "\" y=\"" << pad + 14 + 14 * r << "\" fill=\"" << col << "\">"
      << reg.name() << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Sparse point sets and dyadic counts

struct IndexHash {
  std::size_t operator()(const Index& v) const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (auto c : v) {
      h ^= static_cast<std::uint64_t>(c) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

/// Finite subset of Z^n (a characteristic function stored by its support).
class PointSet {
 public:
  explicit PointSet(int n = 0) : n_(n) {}

  bool insert(std::span<const std::int64_t> x) {
    if (static_cast<int>(x.size()) != n_) throw InvalidArgument("point has wrong dimension");
    Index p(x.begin(), x.end());
    if (!set_.insert(p).second) return false;
    coords_.insert(coords_.end(), p.begin(), p.end());
    return true;
  }
  bool contains(std::span<const std::int64_t> x) const { return set_.count(Index(x.begin(), x.end())) > 0; }
  std::size_t size() const { return set_.size(); }
  int dim() const { return n_; }
  std::span<const std::int64_t> point(std::size_t i) const {
    return {coords_.data() + i * n_, static_cast<std::size_t>(n_)};
  }
  std::size_t count_in(const Box& b) const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < size(); ++i) c += b.contains(point(i));
    return c;
  }

  static PointSet support(const GridFunction& f) {
    PointSet s(f.dim());
    Index x(f.dim());
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f[i] != 0.0) {
        f.box().point(i, x);
        s.insert(x);
      }
    return s;
  }
  GridFunction characteristic(const Box& b) const {
    GridFunction g(b);
    for (std::size_t i = 0; i < size(); ++i)
      if (b.contains(point(i))) g.set(point(i), 1.0);
    return g;
  }

 private:
  int n_;
  std::vector<std::int64_t> coords_;
  std::unordered_set<Index, IndexHash> set_;
};

/// Point counts per dyadic cell, levels 0..max_level (cells keyed by corner).
class DyadicCounts {
 public:
  DyadicCounts(const PointSet& s, int max_level) : n_(s.dim()), levels_(max_level + 1) {
    for (std::size_t i = 0; i < s.size(); ++i)
      for (int k = 0; k <= max_level; ++k) ++levels_[k][DyadicCube::containing(s.point(i), k).corner];
  }
  std::int64_t count(const DyadicCube& c) const {
    if (c.level >= static_cast<int>(levels_.size())) throw InvalidArgument("level beyond table");
    auto it = levels_[c.level].find(c.corner);
    return it == levels_[c.level].end() ? 0 : it->second;
  }
  /// Points in 3Q, as the sum over the 3^n neighbours of Q.
  std::int64_t triple_count(const DyadicCube& c) const {
    std::int64_t total = 0;
    Index off(n_, -1);
    DyadicCube nb = c;
    for (;;) {
      for (int i = 0; i < n_; ++i) nb.corner[i] = c.corner[i] + off[i] * c.side();
      total += count(nb);
      int i = 0;
      while (i < n_ && off[i] == 1) off[i++] = -1;
      if (i == n_) break;
      ++off[i];
    }
    return total;
  }

 private:
  int n_;
  std::vector<std::unordered_map<Index, std::int64_t, IndexHash>> levels_;
};

// ---------------------------------------------------------------------------
// Sparse collections

class InvalidCollection : public Error {
 public:
  using Error::Error;
};

class PackingViolation : public Error {
 public:
  PackingViolation(const DyadicCube& cube, double fraction)
      : Error("packing violated at " + cube.to_string() + ": stopping cubes cover " +
              std::to_string(fraction) + " of |Q| (> 1/4)"),
        cube_(cube),
        fraction_(fraction) {}
  const DyadicCube& cube() const { return cube_; }
  double fraction() const { return fraction_; }

 private:
  DyadicCube cube_;
  double fraction_;
};

namespace detail {

/// Holes with nested duplicates removed; dyadic cubes are nested or disjoint.
inline std::vector<DyadicCube> maximal_cubes(std::vector<DyadicCube> v) {
  std::sort(v.begin(), v.end(), [](const DyadicCube& a, const DyadicCube& b) {
    return a.level != b.level ? a.level > b.level : a.corner < b.corner;
  });
  std::vector<DyadicCube> out;
  std::set<DyadicCube> kept;
  for (auto& c : v) {
    bool inside = false;
    for (int a = c.level; a <= (v.empty() ? 0 : v.front().level) && !inside; ++a)
      inside = kept.count(DyadicCube::containing(c.corner, a)) > 0;
    if (inside) continue;
    kept.insert(c);
    out.push_back(c);
  }
  return out;
}

inline bool intersects(const DyadicCube& a, const DyadicCube& b) {
  return a.contains(b) || b.contains(a);
}

/// Is the cube c covered by the union of the dyadic cubes in holes?
inline bool covered(const DyadicCube& c, const std::vector<const DyadicCube*>& holes) {
  std::vector<const DyadicCube*> inner;
  for (auto* h : holes) {
    if (h->contains(c)) return true;
    if (c.contains(*h)) inner.push_back(h);
  }
  if (inner.empty() || c.level == 0) return false;
  for (auto& child : c.children())
    if (!covered(child, inner)) return false;
  return true;
}

}  // namespace detail

/// Cubes Q with witnesses E_Q = Q minus the union of the listed dyadic holes.
struct SparseCollection {
  std::vector<DyadicCube> cubes;
  std::vector<std::vector<DyadicCube>> holes;

  std::size_t size() const { return cubes.size(); }

  void add(DyadicCube q, std::vector<DyadicCube> h = {}) {
    cubes.push_back(std::move(q));
    holes.push_back(std::move(h));
  }

  double witness_volume(std::size_t i) const {
    double v = static_cast<double>(cubes[i].volume());
    for (auto& h : detail::maximal_cubes(holes[i])) v -= static_cast<double>(h.volume());
    return v;
  }

  /// Throws InvalidCollection naming the offending cubes.
  void validate() const {
    if (holes.size() != cubes.size()) throw InvalidCollection("one hole list per cube");
    std::map<DyadicCube, std::vector<std::size_t>> where;
    int top = 0;
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      for (auto& h : holes[i])
        if (!(h.level < cubes[i].level && cubes[i].contains(h)))
          throw InvalidCollection("hole " + h.to_string() + " is not a proper subcube of " +
                                  cubes[i].to_string());
      if (!(4.0 * witness_volume(i) > static_cast<double>(cubes[i].volume())))
        throw InvalidCollection("witness of " + cubes[i].to_string() + " has |E_Q| <= |Q|/4");
      where[cubes[i]].push_back(i);
      top = std::max(top, cubes[i].level);
    }
    for (std::size_t j = 0; j < cubes.size(); ++j) {
      for (int lev = cubes[j].level; lev <= top; ++lev) {
        const auto anc = DyadicCube::containing(cubes[j].corner, lev);
        auto it = where.find(anc);
        if (it == where.end()) continue;
        for (auto i : it->second) {
          if (i == j || (lev == cubes[j].level && i > j)) continue;
          std::vector<const DyadicCube*> h;
          for (auto& c : holes[i]) h.push_back(&c);
          for (auto& c : holes[j]) h.push_back(&c);
          if (!detail::covered(cubes[j], h))
            throw InvalidCollection("witnesses of " + cubes[i].to_string() + " and " +
                                    cubes[j].to_string() + " overlap");
        }
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      nlohmann::json c{{"level", cubes[i].level}, {"corner", cubes[i].corner}};
      for (auto& h : holes[i]) c["holes"].push_back({{"level", h.level}, {"corner", h.corner}});
      j.push_back(c);
    }
    return j;
  }
};

/// Lambda_{S,p,q}(f, g) = sum_Q |Q| <f>_{Q,p} <g>_{Q,q}, exponents given as 1/p, 1/q.
inline double sparse_form_value(const SparseCollection& s, double inv_p, double inv_q,
                                const GridFunction& f, const GridFunction& g) {
  s.validate();
  if (inv_p <= 0 || inv_q <= 0) throw InvalidArgument("1/p and 1/q must be positive");
  auto powered = [](const GridFunction& h, double e) {
    GridFunction out(h.box());
    for (std::size_t i = 0; i < h.size(); ++i) out[i] = std::pow(std::abs(h[i]), e);
    return out;
  };
  BoxSummer sf(powered(f, 1.0 / inv_p)), sg(powered(g, 1.0 / inv_q));
  CompensatedSum<double> total;
  for (auto& q : s.cubes) {
    const double vol = static_cast<double>(q.volume());
    total.add(vol * std::pow(sf.sum(q.box()) / vol, inv_p) * std::pow(sg.sum(q.box()) / vol, inv_q));
  }
  return total.value();
}

inline double sparse_form_value(const SparseCollection& s, double inv_p, double inv_q,
                                const PointSet& F, const PointSet& G) {
  s.validate();
  CompensatedSum<double> total;
  for (auto& q : s.cubes) {
    const double vol = static_cast<double>(q.volume());
    total.add(vol * std::pow(F.count_in(q.box()) / vol, inv_p) *
              std::pow(G.count_in(q.box()) / vol, inv_q));
  }
  return total.value();
}

// ---------------------------------------------------------------------------
// Stopping-time recursion

struct StoppingOptions {
  double C = 0.0;  // 0: 4 * 3^n
  int max_depth = 64;
  bool validate = true;
  bool enforce_packing = true;
  /// Skip subtrees whose cube holds no point of G; they pair to zero.
  bool prune_empty = true;
  double budget = 2e8;
};

struct CertificateNode {
  DyadicCube cube;
  std::int64_t parent = -1;
  std::int64_t f_triple = 0;  // |F cap 3Q|
  std::int64_t g_count = 0;   // |G cap Q|
  double pairing = 0.0;       // <M_tau f, g 1_Q>
  double packing = 0.0;       // sum |P| / |Q| over the stopping cubes
  std::size_t stopping = 0;
  int depth = 0;

  /// |Q| <f>_{3Q,p} <g>_{Q,q}
  double bound(double inv_p, double inv_q) const {
    const double vol = static_cast<double>(cube.volume());
    return vol * std::pow(f_triple / (vol * std::pow(3.0, cube.dim())), inv_p) *
           std::pow(g_count / vol, inv_q);
  }
};

struct SparseCertificate {
  SparseCollection collection;
  std::vector<CertificateNode> nodes;
  std::vector<std::int64_t> radii;  // radii with scale <= l(root)
  double C = 0.0;
  double maximal_pairing = 0.0;  // <sup_k M_{lambda_k} f, g>

  double node_sum() const {
    CompensatedSum<double> s;
    for (auto& n : nodes) s.add(n.pairing);
    return s.value();
  }
  double sparse_form(double inv_p, double inv_q) const {
    CompensatedSum<double> s;
    for (auto& n : nodes) s.add(n.bound(inv_p, inv_q));
    return s.value();
  }
  double max_node_ratio(double inv_p, double inv_q) const {
    double m = 0;
    for (auto& n : nodes) {
      const double b = n.bound(inv_p, inv_q);
      if (n.pairing > 0) m = std::max(m, b > 0 ? n.pairing / b : std::numeric_limits<double>::infinity());
    }
    return m;
  }
  double max_packing() const {
    double m = 0;
    for (auto& n : nodes) m = std::max(m, n.packing);
    return m;
  }
  /// <sup M f, g> <= sum over nodes of <M_tau f, g 1_Q>.
  bool recursion_holds() const { return maximal_pairing <= node_sum() * (1 + 1e-12) + 1e-12; }
};

namespace detail {

template <class Fn>
void for_each_offset(int n, Fn&& fn) {
  Index off(n, -1);
  for (;;) {
    fn(off);
    int i = 0;
    while (i < n && off[i] == 1) off[i++] = -1;
    if (i == n) return;
    ++off[i];
  }
}

}  // namespace detail

/// Recursion of the sparse-bound proof on f = 1_F (F in 3Q), g = 1_G (G in Q).
/// At each node: maximal dyadic P in Q with <f>_{3P} > C <f>_{3Q}; on x in
/// Q the stopping time takes the best radius whose scale lies in
/// (l(P(x)), l(Q)], and the recursion continues in each P with f 1_{3P},
/// g 1_P.
inline SparseCertificate stopping_time_recursion(const IntegralForm& form,
                                                 const CutoffFunction& phi,
                                                 const std::vector<std::int64_t>& radii,
                                                 const PointSet& F, const PointSet& G,
                                                 const DyadicCube& root,
                                                 StoppingOptions opt = {}) {
  const int n = form.dimension();
  if (F.dim() != n || G.dim() != n || root.dim() != n) throw InvalidArgument("dimension mismatch");
  if (opt.C <= 0) opt.C = 4.0 * std::pow(3.0, n);
  const Box triple = root.triple(), rbox = root.box();
  for (std::size_t i = 0; i < F.size(); ++i)
    if (!triple.contains(F.point(i))) throw InvalidArgument("F must lie in 3Q");
  for (std::size_t i = 0; i < G.size(); ++i)
    if (!rbox.contains(G.point(i))) throw InvalidArgument("G must lie in Q");

  SparseCertificate cert;
  cert.C = opt.C;
  std::vector<LatticeShell> shells;
  std::vector<double> scales;
  int reach = 0;
  for (auto l : radii) {
    const double sc = radius_scale(form, phi, l);
    if (sc > static_cast<double>(root.side())) continue;
    auto sh = enumerate_shell(form, phi, l);
    if (sh.empty()) throw NotRepresented("lambda = " + std::to_string(l) + " is not a represented value");
    reach = std::max(reach, sh.radius());
    cert.radii.push_back(l);
    scales.push_back(sc);
    shells.push_back(std::move(sh));
  }
  const std::size_t R = shells.size();

  // M_lambda f at the points of G
  Box near = rbox;
  for (int i = 0; i < n; ++i) {
    near.origin[i] -= reach;
    near.extents[i] += 2 * reach;
  }
  check_budget("stopping-time bitmap", static_cast<double>(near.volume()), opt.budget);
  std::vector<std::uint8_t> bitmap(near.volume(), 0);
  for (std::size_t i = 0; i < F.size(); ++i)
    if (near.contains(F.point(i))) bitmap[near.flat(F.point(i))] = 1;
  std::vector<double> mval(G.size() * R, 0.0);
  parallel_chunks(G.size(), 64, [&](std::size_t b, std::size_t e) {
    Index z(n);
    for (std::size_t gi = b; gi < e; ++gi) {
      auto x = G.point(gi);
      for (std::size_t r = 0; r < R; ++r) {
        const auto& sh = shells[r];
        CompensatedSum<double> s;
        for (std::size_t k = 0; k < sh.size(); ++k) {
          auto y = sh.point(k);
          for (int j = 0; j < n; ++j) z[j] = x[j] - y[j];
          if (bitmap[near.flat(z)]) s.add(sh.weights[k]);
        }
        mval[gi * R + r] = s.value() / sh.r_value;
      }
    }
  });
  {
    CompensatedSum<double> s;
    for (std::size_t gi = 0; gi < G.size(); ++gi) {
      double m = 0;
      for (std::size_t r = 0; r < R; ++r) m = std::max(m, mval[gi * R + r]);
      s.add(m);
    }
    cert.maximal_pairing = s.value();
  }

  struct Work {
    DyadicCube cube;
    std::vector<std::size_t> f, g;
    std::int64_t parent;
    int depth;
  };
  std::vector<Work> stack;
  {
    Work w{root, {}, {}, -1, 0};
    for (std::size_t i = 0; i < F.size(); ++i) w.f.push_back(i);
    for (std::size_t i = 0; i < G.size(); ++i) w.g.push_back(i);
    stack.push_back(std::move(w));
  }
  const double tri_n = std::pow(3.0, n);
  while (!stack.empty()) {
    Work w = std::move(stack.back());
    stack.pop_back();
    if (w.depth > opt.max_depth) throw Error("stopping-time recursion exceeded depth cap");
    const auto& Q = w.cube;
    CertificateNode node{Q, w.parent, static_cast<std::int64_t>(w.f.size()),
                         static_cast<std::int64_t>(w.g.size()), 0.0, 0.0, 0, w.depth};
    const double avg = w.f.size() / (static_cast<double>(Q.volume()) * tri_n);

    // per-level cell counts of F cap 3Q and selected stopping cubes
    std::vector<std::unordered_map<Index, std::int64_t, IndexHash>> counts(Q.level);
    std::vector<std::unordered_set<Index, IndexHash>> chosen(Q.level);
    std::vector<DyadicCube> stops;
    if (!w.f.empty() && Q.level > 0) {
      for (auto fi : w.f)
        for (int k = 0; k < Q.level; ++k) ++counts[k][DyadicCube::containing(F.point(fi), k).corner];
      for (int k = Q.level - 1; k >= 0; --k) {
        const std::int64_t side = std::int64_t{1} << k;
        const double thr = opt.C * avg * tri_n * std::pow(static_cast<double>(side), n);
        std::unordered_map<Index, std::int64_t, IndexHash> tsum;
        Index cell(n);
        for (auto& [c, m] : counts[k])
          detail::for_each_offset(n, [&](const Index& off) {
            bool inside = true;
            for (int i = 0; i < n; ++i) {
              cell[i] = c[i] + off[i] * side;
              inside = inside && cell[i] >= Q.corner[i] && cell[i] < Q.corner[i] + Q.side();
            }
            if (inside) tsum[cell] += m;
          });
        std::vector<Index> exceed;
        for (auto& [c, m] : tsum)
          if (static_cast<double>(m) > thr) exceed.push_back(c);
        std::sort(exceed.begin(), exceed.end());
        for (auto& c : exceed) {
          bool covered = false;
          for (int a = k + 1; a < Q.level && !covered; ++a)
            covered = chosen[a].count(DyadicCube::containing(c, a).corner) > 0;
          if (covered) continue;
          chosen[k].insert(c);
          stops.push_back({k, c});
        }
      }
    }
    std::sort(stops.begin(), stops.end());
    double covered_vol = 0;
    for (auto& P : stops) covered_vol += static_cast<double>(P.volume());
    node.packing = covered_vol / static_cast<double>(Q.volume());
    node.stopping = stops.size();
    if (opt.enforce_packing && 4.0 * covered_vol > static_cast<double>(Q.volume())) throw PackingViolation(Q, node.packing);

    auto stop_of = [&](std::span<const std::int64_t> x) -> int {
      for (int k = Q.level - 1; k >= 0; --k)
        if (chosen[k].count(DyadicCube::containing(x, k).corner)) return k;
      return -1;
    };

    std::map<DyadicCube, std::size_t> child_index;
    for (std::size_t i = 0; i < stops.size(); ++i) child_index[stops[i]] = i;
    std::vector<Work> kids(stops.size());
    for (std::size_t i = 0; i < stops.size(); ++i)
      kids[i] = Work{stops[i], {}, {}, static_cast<std::int64_t>(cert.nodes.size()), w.depth + 1};

    CompensatedSum<double> pairing;
    for (auto gi : w.g) {
      auto x = G.point(gi);
      const int k = stop_of(x);
      const double lp = k < 0 ? 0.0 : static_cast<double>(std::int64_t{1} << k);
      double best = 0;
      int tau = -1;
      for (std::size_t r = 0; r < R; ++r)
        if (scales[r] > lp && scales[r] <= static_cast<double>(Q.side()) && (tau < 0 || mval[gi * R + r] > best)) {
          best = mval[gi * R + r];
          tau = static_cast<int>(r);
        }
      pairing.add(best);
      if (k >= 0) kids[child_index.at(DyadicCube::containing(x, k))].g.push_back(gi);
      if (opt.validate && tau >= 0) {
        Index cell(n);
        for (int a = 0; a < Q.level; ++a) {
          const auto P = DyadicCube::containing(x, a);
          std::int64_t t = 0;
          detail::for_each_offset(n, [&](const Index& off) {
            for (int i = 0; i < n; ++i) cell[i] = P.corner[i] + off[i] * P.side();
            auto it = counts[a].find(cell);
            if (it != counts[a].end()) t += it->second;
          });
          if (static_cast<double>(t) > opt.C * avg * tri_n * static_cast<double>(P.volume()) &&
              !(scales[tau] > static_cast<double>(P.side())))
            throw Inadmissible(P, "a point of G uses a radius of scale " + std::to_string(scales[tau]) +
                                      " <= l(P)");
        }
      }
    }
    node.pairing = pairing.value();

    for (auto& kid : kids) {
      if (opt.prune_empty && kid.g.empty()) continue;
      const Box t = kid.cube.triple();
      for (auto fi : w.f)
        if (t.contains(F.point(fi))) kid.f.push_back(fi);
    }
    cert.collection.add(Q, stops);
    cert.nodes.push_back(node);
    for (auto it = kids.rbegin(); it != kids.rend(); ++it)
      if (!opt.prune_empty || !it->g.empty()) stack.push_back(std::move(*it));
  }
  if (opt.validate && opt.enforce_packing) cert.collection.validate();
  return cert;
}

struct SetPair {
  PointSet F, G;
};

/// Random test sets for a certificate: F in 3Q is dense blobs plus scattered
/// points, G in Q is blobs plus a sprinkle; one F blob and one G blob share a
/// center so the pairing is not vacuous. Points are drawn, not scanned, so
/// the cost does not depend on |3Q|.
inline SetPair certificate_sets(const DyadicCube& root, std::uint64_t seed, std::size_t trial,
                                std::size_t max_points = 40000) {
  const int n = root.dim();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + u(rng) * std::log(hi / lo)); };
  auto uniform_in = [&](const Box& b, Index& x) {
    for (int i = 0; i < n; ++i)
      x[i] = b.origin[i] + std::uniform_int_distribution<std::int64_t>(0, b.extents[i] - 1)(rng);
  };
  auto draw_in = [&](const Box& b, std::size_t count, PointSet& out) {
    Index x(n);
    for (std::size_t k = 0; k < count; ++k) {
      uniform_in(b, x);
      out.insert(x);
    }
  };
  auto blob = [&](const Index& center, const Box& within, PointSet& out) {
    const auto r = static_cast<std::int64_t>(log_uniform(1.0, root.side() / 2.0));
    Box b{center, Index(n, 2 * r + 1)};
    for (auto& c : b.origin) c -= r;
    b = b.intersect(within);
    if (b.volume() == 0) return;
    const double density = log_uniform(0.02, 1.0);
    draw_in(b, std::min<std::size_t>(max_points / 4, static_cast<std::size_t>(density * b.volume()) + 1), out);
  };
  SetPair p{PointSet(n), PointSet(n)};
  const Box tq = root.triple(), q = root.box();
  Index c(n);
  uniform_in(q, c);
  blob(c, q, p.G);
  blob(c, tq, p.F);
  for (int k = std::uniform_int_distribution<int>(0, 2)(rng); k > 0; --k) {
    uniform_in(tq, c);
    blob(c, tq, p.F);
  }
  if (u(rng) < 0.5) {
    uniform_in(q, c);
    blob(c, q, p.G);
  }
  draw_in(tq, static_cast<std::size_t>(log_uniform(1.0, max_points / 4.0)), p.F);
  draw_in(q, static_cast<std::size_t>(log_uniform(1.0, max_points / 4.0)), p.G);
  return p;
}

// ---------------------------------------------------------------------------
// Improving ratios on E = [0, lambda^{1/d}]^n

using Mask = std::vector<std::uint8_t>;

/// <M_lambda 1_F, 1_G> for F, G inside a cube of the given side, by one
/// complex FFT of 1_F + i 1_G and one inverse.
class PairingEngine {
 public:
  PairingEngine(const LatticeShell& shell, int side) : n_(shell.n), side_(side) {
    T_ = static_cast<int>(next_smooth(static_cast<std::size_t>(2 * side - 1)));
    ext_.assign(n_, T_);
    std::size_t vol = 1;
    for (int i = 0; i < n_; ++i) vol *= T_;
    buf_.assign(vol, 0.0);
    prod_.assign(vol, 0.0);
    fwd_ = std::make_unique<FftPlan>(ext_, buf_.data(), FFTW_FORWARD);
    inv_ = std::make_unique<FftPlan>(ext_, prod_.data(), FFTW_BACKWARD);
    const double r = shell.r_value;
    for (std::size_t k = 0; k < shell.size(); ++k) {
      auto y = shell.point(k);
      bool inside = true;
      std::size_t flat = 0;
      for (int i = 0; i < n_; ++i) {
        if (std::abs(y[i]) > side - 1) inside = false;
        flat = flat * T_ + static_cast<std::size_t>(mod(y[i], T_));
      }
      if (inside) lags_.push_back({flat, shell.weights[k] / r});
    }
  }

  int side() const { return side_; }
  std::size_t volume() const { return static_cast<std::size_t>(std::pow(side_, n_)); }

  double pairing(const Mask& F, const Mask& G) {
    std::fill(buf_.begin(), buf_.end(), Complex(0.0));
    for (std::size_t i = 0; i < F.size(); ++i)
      if (F[i] | G[i]) buf_[torus_flat(i)] = Complex(F[i], G[i]);
    fwd_->execute();
    // Fhat(k) = (Z(k) + conj Z(-k)) / 2, Ghat(k) = (Z(k) - conj Z(-k)) / 2i;
    // C(y) = sum_x G(x) F(x - y) has transform Ghat conj(Fhat).
    for (std::size_t k = 0; k < buf_.size(); ++k) {
      const Complex z = buf_[k], zm = std::conj(buf_[negate(k)]);
      const Complex fh = 0.5 * (z + zm), gh = Complex(0, -0.5) * (z - zm);
      prod_[k] = gh * std::conj(fh);
    }
    inv_->execute();
    CompensatedSum<double> s;
    for (auto& [flat, w] : lags_) s.add(w * prod_[flat].real());
    return s.value() / static_cast<double>(prod_.size());
  }

  /// max over G in E of <M 1_F, 1_G> / |G|^{1/q}: G is a top level set of M 1_F on E.
  std::pair<double, std::int64_t> best_response(const Mask& F, double inv_q) {
    std::fill(buf_.begin(), buf_.end(), Complex(0.0));
    for (std::size_t i = 0; i < F.size(); ++i)
      if (F[i]) buf_[torus_flat(i)] = 1.0;
    fwd_->execute();
    if (kernel_hat_.empty()) {
      kernel_hat_.assign(buf_.size(), 0.0);
      std::vector<Complex> k(buf_.size(), 0.0);
      for (auto& [flat, w] : lags_) k[flat] += w;
      fft_inplace(ext_, k, FFTW_FORWARD);
      kernel_hat_ = std::move(k);
    }
    for (std::size_t k = 0; k < buf_.size(); ++k) prod_[k] = buf_[k] * kernel_hat_[k];
    inv_->execute();
    std::vector<double> v(F.size());
    for (std::size_t i = 0; i < F.size(); ++i) v[i] = prod_[torus_flat(i)].real() / static_cast<double>(prod_.size());
    std::sort(v.begin(), v.end(), std::greater<>());
    double best = 0, acc = 0;
    std::int64_t size = 1;
    for (std::size_t k = 0; k < v.size(); ++k) {
      acc += v[k];
      const double val = acc / std::pow(static_cast<double>(k + 1), inv_q);
      if (val > best) {
        best = val;
        size = static_cast<std::int64_t>(k + 1);
      }
    }
    return {best, size};
  }

 private:
  struct Lag {
    std::size_t flat;
    double w;
  };
  std::size_t torus_flat(std::size_t i) const {
    std::size_t out = 0, stride = 1;
    std::vector<std::size_t> digits(n_);
    for (int j = n_ - 1; j >= 0; --j) {
      digits[j] = i % side_;
      i /= side_;
    }
    for (int j = n_ - 1; j >= 0; --j) {
      out += digits[j] * stride;
      stride *= T_;
    }
    return out;
  }
  std::size_t negate(std::size_t k) const {
    std::size_t out = 0, stride = 1;
    for (int j = n_ - 1; j >= 0; --j) {
      const std::size_t d = k % T_;
      k /= T_;
      out += ((T_ - d) % T_) * stride;
      stride *= T_;
    }
    return out;
  }

  int n_, side_, T_ = 0;
  std::vector<int> ext_;
  std::vector<Complex> buf_, prod_, kernel_hat_;
  std::unique_ptr<FftPlan> fwd_, inv_;
  std::vector<Lag> lags_;
};

/// Side of E = [0, lambda^{1/d}]^n cap Z^n.
inline int improving_side(const IntegralForm& form, std::int64_t lambda) {
  return static_cast<int>(detail::iroot_floor(lambda, form.degree())) + 1;
}

struct MaskPair {
  std::string label;
  Mask F, G;
};

/// Fixed adversarial family: full set, point masses, shell neighbourhoods, slabs.
inline std::vector<MaskPair> adversarial_pairs(const IntegralForm& form, const LatticeShell& shell,
                                               int side) {
  const int n = form.dimension();
  Box E{Index(n, 0), Index(n, side)};
  const std::size_t vol = E.volume();
  Index c(n, side / 2), x(n), z(n);
  const std::size_t ci = E.flat(c);
  Mask full(vol, 1), point(vol, 0), shell_out(vol, 0), shell_in(vol, 0), slab(vol, 0), low(vol, 0),
      high(vol, 0), band(vol, 0), blob(vol, 0);
  point[ci] = 1;
  for (std::size_t k = 0; k < shell.size(); ++k) {
    auto y = shell.point(k);
    for (int i = 0; i < n; ++i) {
      x[i] = c[i] + y[i];
      z[i] = c[i] - y[i];
    }
    if (E.contains(x)) shell_out[E.flat(x)] = 1;
    if (E.contains(z)) shell_in[E.flat(z)] = 1;
  }
  const double lam = static_cast<double>(shell.lambda);
  const double width = std::pow(lam, (form.degree() - 1.0) / form.degree());
  std::vector<double> xr(n);
  for (std::size_t i = 0; i < vol; ++i) {
    E.point(i, x);
    if (x[0] == 0) slab[i] = 1;
    (2 * x[0] < side ? low : high)[i] = 1;
    for (int j = 0; j < n; ++j) xr[j] = static_cast<double>(x[j] - c[j]);
    if (std::abs(form.eval(xr) - lam) <= width) band[i] = 1;
    bool near = true;
    for (int j = 0; j < n; ++j) near = near && std::abs(x[j] - c[j]) <= 1;
    if (near) blob[i] = 1;
  }
  auto nonempty = [&](Mask m) {
    if (std::find(m.begin(), m.end(), 1) == m.end()) m[ci] = 1;
    return m;
  };
  return {{"full", full, full},
          {"point-shell", point, nonempty(shell_out)},
          {"shell-point", nonempty(shell_in), point},
          {"point-full", point, full},
          {"full-point", full, point},
          {"slab", slab, slab},
          {"half-slabs", low, high},
          {"band-blob", nonempty(band), blob}};
}

inline MaskPair random_pair(std::size_t vol, std::uint64_t seed, std::int64_t lambda, std::size_t trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(lambda), static_cast<std::uint32_t>(trial)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&] {
    const double density = std::exp(std::log(1.0 / vol) * u(rng));
    Mask m(vol, 0);
    bool any = false;
    for (auto& b : m) {
      b = u(rng) < density;
      any = any || b;
    }
    if (!any) m[std::uniform_int_distribution<std::size_t>(0, vol - 1)(rng)] = 1;
    return m;
  };
  MaskPair p{"random-" + std::to_string(trial), draw(), {}};
  p.G = draw();
  return p;
}

struct PairRatio {
  std::string label;
  double pairing = 0.0;
  std::int64_t F_size = 0, G_size = 0;
  double ratio = 0.0;
};

struct ImprovingResult {
  std::int64_t lambda = 0;
  int side = 0;
  std::vector<PairRatio> pairs;
  double max_ratio = 0.0;
  std::string argmax;
};

inline std::int64_t mask_size(const Mask& m) {
  return std::count(m.begin(), m.end(), std::uint8_t{1});
}

/// max over trials of <M_lambda 1_F, 1_G> / (|E| <1_F>_{E,p} <1_G>_{E,q}).
inline ImprovingResult improving_ratio(const IntegralForm& form, const CutoffFunction& phi,
                                       std::int64_t lambda, double inv_p, double inv_q,
                                       std::size_t trials, std::uint64_t seed = 1) {
  auto shell = enumerate_shell(form, phi, lambda);
  if (shell.empty()) throw NotRepresented("lambda = " + std::to_string(lambda) + " is not a represented value");
  ImprovingResult out;
  out.lambda = lambda;
  out.side = improving_side(form, lambda);
  PairingEngine engine(shell, out.side);
  const double vol = static_cast<double>(engine.volume());
  auto pairs = adversarial_pairs(form, shell, out.side);
  for (std::size_t t = 0; t < trials; ++t) pairs.push_back(random_pair(engine.volume(), seed, lambda, t));
  for (auto& p : pairs) {
    PairRatio r{p.label, engine.pairing(p.F, p.G), mask_size(p.F), mask_size(p.G), 0.0};
    r.ratio = r.pairing / (vol * std::pow(r.F_size / vol, inv_p) * std::pow(r.G_size / vol, inv_q));
    if (r.ratio > out.max_ratio) {
      out.max_ratio = r.ratio;
      out.argmax = r.label;
    }
    out.pairs.push_back(r);
  }
  return out;
}

struct NormScan {
  std::vector<std::int64_t> lambdas;
  std::vector<double> lower_bounds;
  std::vector<std::string> witnesses;
  double slope = 0.0;
  double target = 0.0;          // n (1/q' - 1/p)
  double natural_target = 0.0;  // (n/d) (1/q' - 1/p)
};

/// Lower bounds for ||M_lambda||_{l^p -> l^{q'}} from <M 1_F, 1_G> / (|F|^{1/p} |G|^{1/q}),
/// 1/q = 1 - 1/q', over the adversarial and random families (and the best level
/// set G for each F) inside a cube of side box_factor lambda^{1/d}, with the
/// log-log slope.
inline NormScan norm_scaling_scan(const IntegralForm& form, const CutoffFunction& phi,
                                  double inv_p, double inv_qprime,
                                  const std::vector<std::int64_t>& lambdas,
                                  std::size_t random_trials = 16, std::uint64_t seed = 1,
                                  int box_factor = 1, double budget = 3e7) {
  NormScan out;
  const int n = form.dimension(), d = form.degree();
  const double inv_q = 1.0 - inv_qprime;
  out.target = n * (inv_qprime - inv_p);
  out.natural_target = static_cast<double>(n) / d * (inv_qprime - inv_p);
  std::vector<double> lx, ly;
  for (auto l : lambdas) {
    auto shell = enumerate_shell(form, phi, l);
    if (shell.empty()) continue;
    const int side = box_factor * (improving_side(form, l) - 1) + 1;
    check_budget("norm scan torus", std::pow(2.0 * side, n), budget);
    PairingEngine engine(shell, side);
    auto pairs = adversarial_pairs(form, shell, side);
    for (std::size_t t = 0; t < random_trials; ++t) pairs.push_back(random_pair(engine.volume(), seed, l, t));
    double best = 0;
    std::string who;
    for (auto& p : pairs) {
      const double v = engine.pairing(p.F, p.G) /
                       (std::pow(static_cast<double>(mask_size(p.F)), inv_p) *
                        std::pow(static_cast<double>(mask_size(p.G)), inv_q));
      if (v > best) {
        best = v;
        who = p.label;
      }
      const auto [br, gsize] = engine.best_response(p.F, inv_q);
      const double w = br / std::pow(static_cast<double>(mask_size(p.F)), inv_p);
      if (w > best) {
        best = w;
        who = p.label + "/level-set";
      }
    }
    out.lambdas.push_back(l);
    out.lower_bounds.push_back(best);
    out.witnesses.push_back(who);
    lx.push_back(std::log(static_cast<double>(l)));
    ly.push_back(std::log(best));
  }
  if (lx.size() >= 2) out.slope = ls_slope(lx, ly);
  return out;
}

/// Exponent delta - n (2/p - 1) of the l^p -> l^{p'} improving bound for spheres.
inline double hughes_exponent(int n, double p, double delta = 0.0) {
  return delta - n * (2.0 / p - 1.0);
}

/// Power iteration for ||M_lambda||_{2->2} on the torus Z_T^n: square roots of
/// the Rayleigh quotients of (M* M)^k x_0, computed in frequency space.
inline std::vector<double> power_iteration_l2(const LatticeShell& shell, int T, int iterations,
                                              std::uint64_t seed = 1) {
  const int n = shell.n;
  std::vector<int> ext(n, T);
  std::size_t vol = 1;
  for (int i = 0; i < n; ++i) vol *= T;
  std::vector<Complex> kernel(vol, 0.0), x(vol);
  for (std::size_t k = 0; k < shell.size(); ++k) {
    std::size_t flat = 0;
    for (int i = 0; i < n; ++i) flat = flat * T + static_cast<std::size_t>(mod(shell.point(k)[i], T));
    kernel[flat] += shell.weights[k] / shell.r_value;
  }
  fft_inplace(ext, kernel, FFTW_FORWARD);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  for (auto& v : x) v = gauss(rng);
  fft_inplace(ext, x, FFTW_FORWARD);
  std::vector<double> a(vol), out;
  for (std::size_t k = 0; k < vol; ++k) a[k] = std::norm(kernel[k]);
  std::vector<double> mass(vol);
  for (std::size_t k = 0; k < vol; ++k) mass[k] = std::norm(x[k]);
  for (int it = 0; it < iterations; ++it) {
    CompensatedSum<double> num, den;
    for (std::size_t k = 0; k < vol; ++k) {
      num.add(a[k] * mass[k]);
      den.add(mass[k]);
    }
    out.push_back(std::sqrt(num.value() / den.value()));
    double top = 0;
    for (std::size_t k = 0; k < vol; ++k) {
      mass[k] *= a[k] * a[k];
      top = std::max(top, mass[k]);
    }
    if (top > 0)
      for (auto& m : mass) m /= top;
  }
  return out;
}

}  // namespace bml
