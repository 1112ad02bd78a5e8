#pragma once
//! \file
//! \brief Finitely supported grid functions on Z^n, the single-scale average
//! M_lambda, radii sequences, maximal functions and stopping times.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"
#include "bmlab/lattice.hpp"
#include "bmlab/numerics.hpp"

namespace bml {

using Index = std::vector<std::int64_t>;

/// Axis-aligned integer box [origin, origin + extents).
struct Box {
  Index origin;
  Index extents;

  int dim() const { return static_cast<int>(origin.size()); }
  std::size_t volume() const {
    std::size_t v = 1;
    for (auto e : extents) v *= static_cast<std::size_t>(std::max<std::int64_t>(e, 0));
    return v;
  }
  bool contains(std::span<const std::int64_t> x) const {
    for (int i = 0; i < dim(); ++i)
      if (x[i] < origin[i] || x[i] >= origin[i] + extents[i]) return false;
    return true;
  }
  /// Point with the given row-major offset.
  void point(std::size_t flat, std::span<std::int64_t> out) const {
    for (int i = dim() - 1; i >= 0; --i) {
      const auto e = static_cast<std::size_t>(extents[i]);
      out[i] = origin[i] + static_cast<std::int64_t>(flat % e);
      flat /= e;
    }
  }
  std::size_t flat(std::span<const std::int64_t> x) const {
    std::size_t idx = 0;
    for (int i = 0; i < dim(); ++i)
      idx = idx * static_cast<std::size_t>(extents[i]) +
            static_cast<std::size_t>(x[i] - origin[i]);
    return idx;
  }
  Box intersect(const Box& o) const {
    Box b{origin, extents};
    for (int i = 0; i < dim(); ++i) {
      const auto lo = std::max(origin[i], o.origin[i]);
      const auto hi = std::min(origin[i] + extents[i], o.origin[i] + o.extents[i]);
      b.origin[i] = lo;
      b.extents[i] = std::max<std::int64_t>(0, hi - lo);
    }
    return b;
  }
  bool operator==(const Box&) const = default;
};

// ---------------------------------------------------------------------------
// Dyadic cubes

struct DyadicCube {
  int level = 0;  // side 2^level
  Index corner;   // in 2^level Z^n

  std::int64_t side() const { return std::int64_t{1} << level; }
  int dim() const { return static_cast<int>(corner.size()); }
  std::size_t volume() const {
    return static_cast<std::size_t>(std::pow(static_cast<double>(side()), dim()));
  }
  Box box() const { return {corner, Index(dim(), side())}; }
  /// Concentric cube of three times the side.
  Box triple() const {
    Box b{corner, Index(dim(), 3 * side())};
    for (auto& c : b.origin) c -= side();
    return b;
  }
  bool contains(std::span<const std::int64_t> x) const { return box().contains(x); }
  bool contains(const DyadicCube& o) const {
    if (o.level > level) return false;
    for (int i = 0; i < dim(); ++i)
      if (o.corner[i] < corner[i] || o.corner[i] + o.side() > corner[i] + side()) return false;
    return true;
  }
  std::vector<DyadicCube> children() const {
    if (level == 0) throw InvalidArgument("unit cube has no children");
    std::vector<DyadicCube> out;
    const auto h = side() / 2;
    for (std::size_t mask = 0; mask < (std::size_t{1} << dim()); ++mask) {
      DyadicCube c{level - 1, corner};
      for (int i = 0; i < dim(); ++i)
        if (mask >> i & 1) c.corner[i] += h;
      out.push_back(c);
    }
    return out;
  }
  /// The dyadic cube of the given level containing x.
  static DyadicCube containing(std::span<const std::int64_t> x, int level) {
    DyadicCube c{level, Index(x.size())};
    const std::int64_t s = std::int64_t{1} << level;
    for (std::size_t i = 0; i < x.size(); ++i) c.corner[i] = (x[i] >= 0 ? x[i] / s : -((-x[i] + s - 1) / s)) * s;
    return c;
  }
  bool operator==(const DyadicCube&) const = default;
  bool operator<(const DyadicCube& o) const {
    return std::tie(level, corner) < std::tie(o.level, o.corner);
  }
  std::string to_string() const {
    std::string s = "[level " + std::to_string(level) + " corner (";
    for (int i = 0; i < dim(); ++i) s += (i ? "," : "") + std::to_string(corner[i]);
    return s + ")]";
  }
};

// ---------------------------------------------------------------------------
// Grid functions

class GridFunction {
 public:
  GridFunction() = default;
  GridFunction(Index origin, Index extents)
      : box_{std::move(origin), std::move(extents)}, values_(box_.volume(), 0.0) {}
  explicit GridFunction(Box b) : GridFunction(b.origin, b.extents) {}

  const Box& box() const { return box_; }
  int dim() const { return box_.dim(); }
  const Index& origin() const { return box_.origin; }
  const Index& extents() const { return box_.extents; }
  std::size_t size() const { return values_.size(); }
  std::vector<Complex>& values() { return values_; }
  const std::vector<Complex>& values() const { return values_; }
  Complex& operator[](std::size_t i) { return values_[i]; }
  Complex operator[](std::size_t i) const { return values_[i]; }

  /// Zero outside the box.
  Complex at(std::span<const std::int64_t> x) const {
    return box_.contains(x) ? values_[box_.flat(x)] : Complex(0.0);
  }
  void set(std::span<const std::int64_t> x, Complex v) { values_[box_.flat(x)] = v; }

  /// Every value is 0 or 1.
  bool characteristic() const {
    return std::all_of(values_.begin(), values_.end(), [](Complex v) {
      return v.imag() == 0.0 && (v.real() == 0.0 || v.real() == 1.0);
    });
  }

  /// l^p norm; p = infinity gives the sup norm.
  double norm(double p) const {
    if (std::isinf(p)) {
      double m = 0;
      for (auto v : values_) m = std::max(m, std::abs(v));
      return m;
    }
    CompensatedSum<double> s;
    for (auto v : values_) s.add(std::pow(std::abs(v), p));
    return std::pow(s.value(), 1.0 / p);
  }

  /// <f>_{B,p} = (|B|^{-1} sum_{x in B} |f(x)|^p)^{1/p}, zero outside the
  /// stored box.
  double average(const Box& b, double p = 1.0) const {
    const Box inter = box_.intersect(b);
    CompensatedSum<double> s;
    Index x(dim());
    for (std::size_t i = 0; i < inter.volume(); ++i) {
      inter.point(i, x);
      s.add(std::pow(std::abs(values_[box_.flat(x)]), p));
    }
    return std::pow(s.value() / static_cast<double>(b.volume()), 1.0 / p);
  }

  /// sum_x f(x) g(x), no conjugation.
  Complex pairing(const GridFunction& g) const {
    const Box inter = box_.intersect(g.box());
    CompensatedSum<Complex> s;
    Index x(dim());
    for (std::size_t i = 0; i < inter.volume(); ++i) {
      inter.point(i, x);
      s.add(values_[box_.flat(x)] * g.values_[g.box_.flat(x)]);
    }
    return s.value();
  }

  /// Copy into a larger box, zero padded.
  GridFunction embedded(const Box& b) const {
    GridFunction out(b);
    Index x(dim());
    for (std::size_t i = 0; i < size(); ++i) {
      box_.point(i, x);
      if (b.contains(x)) out.values_[b.flat(x)] = values_[i];
    }
    return out;
  }

  /// f(. - z)
  GridFunction translated(std::span<const std::int64_t> z) const {
    GridFunction out = *this;
    for (int i = 0; i < dim(); ++i) out.box_.origin[i] += z[i];
    return out;
  }

  // Binary format: "BMGRID01", u64 header length, JSON header
  // {origin, extents, dtype}, then raw little-endian complex128 values.
  // An optional "meta" object rides along in the header.
  void write(const std::filesystem::path& p, const nlohmann::json& meta = nullptr) const {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    nlohmann::json h{{"origin", box_.origin}, {"extents", box_.extents}, {"dtype", "complex128"}};
    if (!meta.is_null()) h["meta"] = meta;
    const std::string header = h.dump();
    out.write("BMGRID01", 8);
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header.data(), static_cast<std::streamsize>(len));
    out.write(reinterpret_cast<const char*>(values_.data()),
              static_cast<std::streamsize>(values_.size() * sizeof(Complex)));
  }

  static GridFunction read(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, "BMGRID01", 8) != 0)
      throw InvalidArgument("not a grid file: " + p.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    auto j = nlohmann::json::parse(header);
    if (j.at("dtype") != "complex128") throw InvalidArgument("unsupported dtype");
    GridFunction g(j.at("origin").get<Index>(), j.at("extents").get<Index>());
    in.read(reinterpret_cast<char*>(g.values_.data()),
            static_cast<std::streamsize>(g.values_.size() * sizeof(Complex)));
    if (!in) throw InvalidArgument("truncated grid file: " + p.string());
    return g;
  }

 private:
  Box box_;
  std::vector<Complex> values_;
};

// ---------------------------------------------------------------------------
// Single-scale average

enum class AverageMode { direct, fft };

struct AverageOptions {
  AverageMode mode = AverageMode::direct;
  /// Torus side per axis for fft mode; empty picks the next 7-smooth size.
  std::vector<std::int64_t> torus;
  double budget = 1e8;
};

namespace detail {
inline void shell_bounds(const LatticeShell& s, Index& lo, Index& hi) {
  lo.assign(s.n, std::numeric_limits<std::int64_t>::max());
  hi.assign(s.n, std::numeric_limits<std::int64_t>::min());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (int j = 0; j < s.n; ++j) {
      lo[j] = std::min<std::int64_t>(lo[j], s.point(i)[j]);
      hi[j] = std::max<std::int64_t>(hi[j], s.point(i)[j]);
    }
}
}  // namespace detail

/// Output box of M_lambda f: the input box dilated by the shell's extent.
inline Box average_box(const LatticeShell& shell, const Box& in) {
  Index lo, hi;
  detail::shell_bounds(shell, lo, hi);
  Box b = in;
  for (int i = 0; i < b.dim(); ++i) {
    b.origin[i] += lo[i];
    b.extents[i] += hi[i] - lo[i];
  }
  return b;
}

/// (M_lambda f)(x) = r^{-1} sum_y phi(y / lambda^{1/d}) f(x - y).
inline GridFunction apply_average(const LatticeShell& shell, const GridFunction& f,
                                  AverageOptions opt = {}) {
  if (shell.empty())
    throw NotRepresented("lambda = " + std::to_string(shell.lambda) +
                         " is not a represented value");
  if (shell.n != f.dim()) throw InvalidArgument("dimension mismatch");
  const int n = f.dim();
  Index lo, hi;
  detail::shell_bounds(shell, lo, hi);
  const Box out_box = average_box(shell, f.box());
  GridFunction out(out_box);
  const double inv_r = 1.0 / shell.r_value;

  if (opt.mode == AverageMode::direct) {
    check_budget("direct average", static_cast<double>(f.size()) * shell.size(), opt.budget * 10);
    // Each task owns a range of output slices along axis 0; within an element
    // the shell is summed in its stored order.
    std::size_t slab_in = 1;
    for (int i = 1; i < n; ++i) slab_in *= static_cast<std::size_t>(f.extents()[i]);
    std::size_t slab_out = 1;
    for (int i = 1; i < n; ++i) slab_out *= static_cast<std::size_t>(out_box.extents[i]);
    const auto rows = static_cast<std::size_t>(out_box.extents[0]);
    std::vector<std::int64_t> stride_out(n, 1);
    for (int i = n - 2; i >= 0; --i) stride_out[i] = stride_out[i + 1] * out_box.extents[i + 1];

    parallel_chunks(rows, 1, [&](std::size_t row, std::size_t) {
      const std::int64_t x0 = out_box.origin[0] + static_cast<std::int64_t>(row);
      Index z(n);
      for (std::size_t k = 0; k < shell.size(); ++k) {
        auto y = shell.point(k);
        const std::int64_t fr = x0 - y[0] - f.origin()[0];
        if (fr < 0 || fr >= f.extents()[0]) continue;
        const Complex w = shell.weights[k] * inv_r;
        // offset of f(origin_f + (fr, t)) -> out(x0, origin_f[1:] + t + y[1:])
        std::int64_t base_out = static_cast<std::int64_t>(row) * stride_out[0];
        for (int i = 1; i < n; ++i)
          base_out += (f.origin()[i] + y[i] - out_box.origin[i]) * stride_out[i];
        const std::size_t base_in = static_cast<std::size_t>(fr) * slab_in;
        for (std::size_t t = 0; t < slab_in; ++t) {
          // unflatten t over f extents 1..n-1
          std::size_t rem = t;
          std::int64_t off = 0;
          for (int i = n - 1; i >= 1; --i) {
            const auto e = static_cast<std::size_t>(f.extents()[i]);
            off += static_cast<std::int64_t>(rem % e) * stride_out[i];
            rem /= e;
          }
          out[static_cast<std::size_t>(base_out + off)] += w * f[base_in + t];
        }
      }
      (void)slab_out;
      (void)z;
    });
    return out;
  }

  // FFT: zero-padded linear convolution on a torus.
  std::vector<int> ext(n);
  double volume = 1;
  for (int i = 0; i < n; ++i) {
    const std::int64_t need = f.extents()[i] + (hi[i] - lo[i]) + 1;
    std::int64_t side = opt.torus.empty() ? static_cast<std::int64_t>(next_smooth(need))
                                          : opt.torus[i];
    if (side < need)
      throw InvalidArgument("fft torus side " + std::to_string(side) + " on axis " +
                            std::to_string(i) + " is below the required " +
                            std::to_string(need));
    ext[i] = static_cast<int>(side);
    volume *= static_cast<double>(side);
  }
  check_budget("fft average", volume, opt.budget);
  Box torus{Index(n, 0), Index(ext.begin(), ext.end())};
  std::vector<Complex> a(torus.volume(), 0.0), k(torus.volume(), 0.0);
  Index x(n);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.box().point(i, x);
    for (int j = 0; j < n; ++j) x[j] -= f.origin()[j];
    a[torus.flat(x)] = f[i];
  }
  for (std::size_t s = 0; s < shell.size(); ++s) {
    for (int j = 0; j < n; ++j) x[j] = shell.point(s)[j] - lo[j];
    k[torus.flat(x)] += shell.weights[s] * inv_r;
  }
  fft_inplace(ext, a, -1);
  fft_inplace(ext, k, -1);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= k[i];
  fft_inplace(ext, a, +1);
  const double norm = 1.0 / volume;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out_box.point(i, x);
    for (int j = 0; j < n; ++j) x[j] -= out_box.origin[j];
    out[i] = a[torus.flat(x)] * norm;
  }
  return out;
}

inline GridFunction apply_average(const IntegralForm& form, const CutoffFunction& phi,
                                  std::int64_t lambda, const GridFunction& f,
                                  AverageOptions opt = {}) {
  return apply_average(enumerate_shell(form, phi, lambda), f, opt);
}

// ---------------------------------------------------------------------------
// Radii sequences

struct RadiiSequence {
  enum class Kind { lacunary, factorial_sparse, explicit_list };
  Kind kind = Kind::explicit_list;
  std::vector<std::int64_t> values;
  std::vector<std::int64_t> mu;  // factorial-sparse only
  double ratio = 0.0;            // lacunary only
  /// log mu_k / log k is increasing on the stored prefix from k = 3 on. A
  /// limit cannot be checked on a prefix.
  bool prefix_consistent = true;
};

inline RadiiSequence make_lacunary(double c, std::int64_t first, int count) {
  if (count < 1) throw InvalidArgument("count must be >= 1");
  if (!(c > 1.0)) throw InvalidArgument("lacunary ratio must exceed 1");
  if (first < 1) throw InvalidArgument("first radius must be >= 1");
  RadiiSequence s{RadiiSequence::Kind::lacunary, {first}, {}, c, true};
  while (static_cast<int>(s.values.size()) < count) {
    const auto next = static_cast<std::int64_t>(std::ceil(c * static_cast<double>(s.values.back()) - 1e-9));
    s.values.push_back(std::max(next, s.values.back() + 1));
  }
  return s;
}

inline RadiiSequence make_factorial_sparse(std::vector<std::int64_t> mu) {
  if (mu.empty()) throw InvalidArgument("count must be >= 1");
  for (std::size_t k = 1; k < mu.size(); ++k)
    if (mu[k] <= mu[k - 1]) throw InvalidArgument("mu_k must be strictly increasing");
  RadiiSequence s{RadiiSequence::Kind::factorial_sparse, {}, mu, 0.0, true};
  for (auto m : mu) {
    if (m < 1 || m > 20) throw InvalidArgument("mu_k! does not fit in 64 bits");
    std::int64_t f = 1;
    for (std::int64_t j = 2; j <= m; ++j) f *= j;
    s.values.push_back(f);
  }
  double prev = -1;
  for (std::size_t k = 3; k <= mu.size(); ++k) {
    const double g = std::log(static_cast<double>(mu[k - 1])) / std::log(static_cast<double>(k));
    if (g <= prev) s.prefix_consistent = false;
    prev = g;
  }
  return s;
}

/// mu_k = 2^k, k = 1..count.
inline RadiiSequence make_factorial_pow2(int count) {
  std::vector<std::int64_t> mu;
  for (int k = 1; k <= count; ++k) mu.push_back(std::int64_t{1} << k);
  return make_factorial_sparse(mu);
}

inline RadiiSequence make_explicit(std::vector<std::int64_t> values) {
  if (values.empty()) throw InvalidArgument("count must be >= 1");
  for (std::size_t k = 1; k < values.size(); ++k)
    if (values[k] <= values[k - 1]) throw InvalidArgument("radii must be strictly increasing");
  return {RadiiSequence::Kind::explicit_list, std::move(values), {}, 0.0, true};
}

/// Throws NotRepresented naming the first lambda with an empty shell.
inline void verify_represented(const RadiiSequence& seq, const IntegralForm& form,
                               const CutoffFunction& phi) {
  for (auto l : seq.values)
    if (enumerate_shell(form, phi, l).empty())
      throw NotRepresented("lambda = " + std::to_string(l) + " is not a represented value");
}

// ---------------------------------------------------------------------------
// Maximal functions

struct MaximalResult {
  GridFunction sup;          // real, nonnegative
  std::vector<int> argmax;   // index into the sequence, -1 where all vanish
};

/// sup_k |M_{lambda_k} f| on the union of the output boxes.
inline MaximalResult maximal(const std::vector<LatticeShell>& shells, const GridFunction& f,
                             AverageOptions opt = {}) {
  if (shells.empty()) throw InvalidArgument("empty sequence");
  std::vector<GridFunction> avgs(shells.size());
  parallel_chunks(shells.size(), 1, [&](std::size_t k, std::size_t) {
    avgs[k] = apply_average(shells[k], f, opt);
  });
  const int n = f.dim();
  Index lo(n, std::numeric_limits<std::int64_t>::max()), hi(n, std::numeric_limits<std::int64_t>::min());
  for (auto& a : avgs)
    for (int i = 0; i < n; ++i) {
      lo[i] = std::min(lo[i], a.origin()[i]);
      hi[i] = std::max(hi[i], a.origin()[i] + a.extents()[i]);
    }
  Box u{lo, hi};
  for (int i = 0; i < n; ++i) u.extents[i] = hi[i] - lo[i];
  MaximalResult r{GridFunction(u), std::vector<int>(u.volume(), -1)};
  Index x(n);
  for (std::size_t k = 0; k < avgs.size(); ++k) {
    for (std::size_t i = 0; i < avgs[k].size(); ++i) {
      const double v = std::abs(avgs[k][i]);
      avgs[k].box().point(i, x);
      const auto j = u.flat(x);
      if (v > r.sup[j].real()) {
        r.sup[j] = v;
        r.argmax[j] = static_cast<int>(k);
      }
    }
  }
  return r;
}

inline MaximalResult maximal(const IntegralForm& form, const CutoffFunction& phi,
                             const RadiiSequence& seq, const GridFunction& f,
                             AverageOptions opt = {}) {
  std::vector<LatticeShell> shells;
  for (auto l : seq.values) shells.push_back(enumerate_shell(form, phi, l));
  return maximal(shells, f, opt);
}

// ---------------------------------------------------------------------------
// Stopping times

class Inadmissible : public Error {
 public:
  Inadmissible(const DyadicCube& cube, const std::string& what)
      : Error("inadmissible stopping time at cube " + cube.to_string() + ": " + what),
        cube_(cube) {}
  const DyadicCube& cube() const { return cube_; }

 private:
  DyadicCube cube_;
};

/// Spatial scale of the average at lambda: the coordinate radius of the
/// cutoff's support after dilation by lambda^{1/d}.
inline double radius_scale(const IntegralForm& form, const CutoffFunction& phi,
                           std::int64_t lambda) {
  return phi.coordinate_bound().value_or(1.0) *
         std::pow(static_cast<double>(lambda), 1.0 / form.degree());
}

/// tau : Q -> sequence, stored as indices into `radii` (-1 = no average).
struct StoppingTime {
  DyadicCube root;
  std::vector<std::int64_t> radii;
  std::vector<double> scales;  // radius_scale per radius
  std::vector<int> tau;        // dense over root.box()
  double C = 0.0;

  int at(std::span<const std::int64_t> x) const { return tau[root.box().flat(x)]; }
};

/// n-dimensional summed-volume table for box sums of |f|.
class BoxSummer {
 public:
  explicit BoxSummer(const GridFunction& f) : box_(f.box()) {
    const int n = f.dim();
    Index ext = box_.extents;
    for (auto& e : ext) ++e;
    big_ = Box{Index(n, 0), ext};
    table_.assign(big_.volume(), 0.0);
    Index x(n), y(n);
    for (std::size_t i = 0; i < f.size(); ++i) {
      box_.point(i, x);
      for (int j = 0; j < n; ++j) y[j] = x[j] - box_.origin[j] + 1;
      table_[big_.flat(y)] = std::abs(f[i]);
    }
    for (int axis = 0; axis < n; ++axis) {
      for (std::size_t i = 0; i < table_.size(); ++i) {
        big_.point(i, y);
        if (y[axis] == 0) continue;
        auto z = y;
        --z[axis];
        table_[i] += table_[big_.flat(z)];
      }
    }
  }

  /// sum of |f| over b (zero outside the stored box).
  double sum(const Box& b) const {
    const Box in = box_.intersect(b);
    const int n = in.dim();
    for (auto e : in.extents)
      if (e == 0) return 0.0;
    double s = 0;
    Index y(n);
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
      int sign = 1;
      for (int j = 0; j < n; ++j) {
        if (mask >> j & 1) {
          y[j] = in.origin[j] - box_.origin[j];
          sign = -sign;
        } else {
          y[j] = in.origin[j] + in.extents[j] - box_.origin[j];
        }
      }
      s += sign * table_[big_.flat(y)];
    }
    return s;
  }
  double average(const Box& b) const { return sum(b) / static_cast<double>(b.volume()); }

 private:
  Box box_, big_;
  std::vector<double> table_;
};

/// Exhaustive check over the dyadic tree of the root: every P with
/// <f>_{3P} > C <f>_{3Q} must satisfy min_{x in P} scale(tau(x)) > l(P).
inline void validate_stopping_time(const StoppingTime& st, const GridFunction& f) {
  const Box root = st.root.box();
  if (st.tau.size() != root.volume()) throw InvalidArgument("tau has the wrong size");
  const int n = st.root.dim();
  BoxSummer sums(f);
  const double top = sums.average(st.root.triple());
  // min-pyramid of scales, level 0 = points
  auto scale_of = [&](int t) {
    return t < 0 ? std::numeric_limits<double>::infinity() : st.scales[static_cast<std::size_t>(t)];
  };
  std::vector<double> level(root.volume());
  for (std::size_t i = 0; i < level.size(); ++i) level[i] = scale_of(st.tau[i]);
  Index x(n);
  for (int k = 0; k <= st.root.level; ++k) {
    const std::int64_t side = std::int64_t{1} << k;
    const std::int64_t cells = st.root.side() / side;
    Box grid{Index(n, 0), Index(n, cells)};
    if (k > 0) {
      Box finer{Index(n, 0), Index(n, cells * 2)};
      std::vector<double> next(grid.volume(), std::numeric_limits<double>::infinity());
      Index y(n);
      for (std::size_t i = 0; i < level.size(); ++i) {
        finer.point(i, y);
        for (auto& v : y) v /= 2;
        auto& slot = next[grid.flat(y)];
        slot = std::min(slot, level[i]);
      }
      level.swap(next);
    }
    if (k == st.root.level) break;  // P = Q is never a proper subcube
    for (std::size_t i = 0; i < grid.volume(); ++i) {
      grid.point(i, x);
      DyadicCube P{k, Index(n)};
      for (int j = 0; j < n; ++j) P.corner[j] = st.root.corner[j] + x[j] * side;
      if (sums.average(P.triple()) > st.C * top && !(level[i] > static_cast<double>(side)))
        throw Inadmissible(P, "a point of P uses a radius of scale " +
                                  std::to_string(level[i]) + " <= l(P) = " +
                                  std::to_string(side));
    }
  }
}

/// (M_tau f)(x) = (M_{tau(x)} f)(x) on the root cube (zero where tau = -1).
inline GridFunction maximal_with_stopping_time(const std::vector<LatticeShell>& shells,
                                               const StoppingTime& st, const GridFunction& f,
                                               bool validate = true) {
  if (shells.size() != st.radii.size()) throw InvalidArgument("one shell per radius");
  if (validate) validate_stopping_time(st, f);
  const Box root = st.root.box();
  GridFunction out(root);
  const int n = st.root.dim();
  parallel_chunks(root.volume(), 4096, [&](std::size_t b, std::size_t e) {
    Index x(n), z(n);
    for (std::size_t i = b; i < e; ++i) {
      const int t = st.tau[i];
      if (t < 0) continue;
      root.point(i, x);
      const auto& s = shells[static_cast<std::size_t>(t)];
      Complex acc = 0;
      for (std::size_t k = 0; k < s.size(); ++k) {
        for (int j = 0; j < n; ++j) z[j] = x[j] - s.point(k)[j];
        acc += s.weights[k] * f.at(z);
      }
      out[i] = acc / s.r_value;
    }
  });
  return out;
}

}  // namespace bml
