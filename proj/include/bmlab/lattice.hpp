#pragma once
//! \file
//! \brief Weighted lattice shells {R(y) = lambda}, counting functions,
//! regular-value scans and the on-disk shell cache.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/core.hpp"
#include "bmlab/forms.hpp"

namespace bml {

class NotRepresented : public Error {
 public:
  using Error::Error;
};

struct LatticeShell {
  std::int64_t lambda = 0;
  int n = 0;
  std::vector<int> coords;      // row-major, n per point
  std::vector<double> weights;  // phi(y / lambda^{1/d})
  double r_value = 0.0;

  std::size_t size() const { return weights.size(); }
  std::span<const int> point(std::size_t i) const {
    return {coords.data() + i * n, static_cast<std::size_t>(n)};
  }
  bool empty() const { return weights.empty(); }
  /// Largest |y_i| over the shell.
  int radius() const {
    int r = 0;
    for (int c : coords) r = std::max(r, std::abs(c));
    return r;
  }
};

struct EnumerationOptions {
  double budget = 1e8;
};

namespace detail {

/// Integer k >= 0 with k^d <= v < (k+1)^d.
inline std::int64_t iroot_floor(std::int64_t v, int d) {
  if (v <= 0) return 0;
  auto k = static_cast<std::int64_t>(std::floor(std::pow(static_cast<double>(v), 1.0 / d)));
  auto pow_le = [&](std::int64_t x) {
    __int128 p = 1;
    for (int i = 0; i < d; ++i) {
      p *= x;
      if (p > v) return false;
    }
    return true;
  };
  while (k > 0 && !pow_le(k)) --k;
  while (pow_le(k + 1)) ++k;
  return k;
}

inline std::int64_t ipow_small(std::int64_t x, int d) {
  std::int64_t p = 1;
  for (int i = 0; i < d; ++i) p *= x;
  return p;
}

/// Coordinate bound from the cutoff support and, for positive definite
/// diagonal forms, from R(y) = lambda itself.
inline std::int64_t coordinate_box(const IntegralForm& form, const CutoffFunction& phi,
                                   std::int64_t lambda) {
  const int d = form.degree();
  std::optional<std::int64_t> bound;
  if (auto h = phi.coordinate_bound()) {
    const double t = std::pow(static_cast<double>(lambda), 1.0 / d);
    bound = static_cast<std::int64_t>(std::floor(*h * t + 1e-9));
  }
  if (form.is_diagonal() && form.nonnegative_monomials()) {
    std::int64_t amin = INT64_MAX;
    for (auto a : form.diagonal_coefficients()) amin = std::min(amin, a);
    if (amin > 0) {
      const std::int64_t b = iroot_floor(lambda / amin, d);
      bound = bound ? std::min(*bound, b) : b;
    }
  }
  if (!bound)
    throw InvalidArgument(
        "unbounded enumeration: the constant cutoff needs a positive definite "
        "diagonal form");
  return *bound;
}

}  // namespace detail

/// All y with R(y) = lambda and phi(y / lambda^{1/d}) > 0, sorted
/// lexicographically.
inline LatticeShell enumerate_shell(const IntegralForm& form, const CutoffFunction& phi,
                                    std::int64_t lambda, EnumerationOptions opt = {}) {
  if (lambda < 1) throw InvalidArgument("lambda must be >= 1");
  const int n = form.dimension();
  const int d = form.degree();
  const std::int64_t B = detail::coordinate_box(form, phi, lambda);
  const double t = std::pow(static_cast<double>(lambda), 1.0 / d);
  const std::int64_t side = 2 * B + 1;

  const bool pruned = form.is_diagonal() && form.nonnegative_monomials();
  const double cost = std::pow(static_cast<double>(side), pruned ? n - 1 : n);
  check_budget("shell enumeration", cost, opt.budget);

  std::vector<std::int64_t> coeffs = pruned ? form.diagonal_coefficients()
                                            : std::vector<std::int64_t>{};
  std::vector<std::vector<int>> slices(side);

  parallel_chunks(static_cast<std::size_t>(side), 1, [&](std::size_t s, std::size_t) {
    std::vector<int>& out = slices[s];
    std::vector<std::int64_t> y(n, 0);
    std::vector<double> yd(n);
    y[0] = static_cast<std::int64_t>(s) - B;
    auto accept = [&] {
      for (int i = 0; i < n; ++i) yd[i] = static_cast<double>(y[i]) / t;
      if (phi(yd) <= 0.0) return;
      if (form(y) != lambda) return;
      for (int i = 0; i < n; ++i) out.push_back(static_cast<int>(y[i]));
    };
    if (pruned) {
      // rem = lambda - sum_{j<i} a_j y_j^d, nonincreasing along the recursion
      auto rec = [&](auto&& self, int i, std::int64_t rem) -> void {
        if (rem < 0) return;
        if (i == n - 1) {
          if (coeffs[i] == 0) {
            if (rem != 0) return;
            for (std::int64_t v = -B; v <= B; ++v) {
              y[i] = v;
              accept();
            }
            return;
          }
          if (rem % coeffs[i]) return;
          const std::int64_t k = detail::iroot_floor(rem / coeffs[i], d);
          if (detail::ipow_small(k, d) * coeffs[i] != rem || k > B) return;
          y[i] = -k;
          accept();
          if (k != 0) {
            y[i] = k;
            accept();
          }
          return;
        }
        const std::int64_t lim =
            coeffs[i] ? std::min(B, detail::iroot_floor(rem / coeffs[i], d)) : B;
        for (std::int64_t v = -lim; v <= lim; ++v) {
          y[i] = v;
          self(self, i + 1, rem - coeffs[i] * detail::ipow_small(v, d));
        }
      };
      if (n == 1) {
        accept();
      } else {
        rec(rec, 1, lambda - coeffs[0] * detail::ipow_small(y[0], d));
      }
    } else {
      auto rec = [&](auto&& self, int i) -> void {
        if (i == n) {
          accept();
          return;
        }
        for (std::int64_t v = -B; v <= B; ++v) {
          y[i] = v;
          self(self, i + 1);
        }
      };
      rec(rec, 1);
    }
  });

  LatticeShell shell;
  shell.lambda = lambda;
  shell.n = n;
  // Slices are already in increasing first coordinate and each slice is
  // produced in lexicographic order.
  for (auto& s : slices) shell.coords.insert(shell.coords.end(), s.begin(), s.end());
  const std::size_t count = shell.coords.size() / n;
  shell.weights.resize(count);
  CompensatedSum<double> r;
  std::vector<double> yd(n);
  for (std::size_t i = 0; i < count; ++i) {
    for (int j = 0; j < n; ++j) yd[j] = shell.coords[i * n + j] / t;
    shell.weights[i] = phi(yd);
    r.add(shell.weights[i]);
  }
  shell.r_value = r.value();
  return shell;
}

// ---------------------------------------------------------------------------
// Cache

/// Shells on disk under <root>/<key>/<lambda>.shell, where key hashes the
/// canonical form and cutoff. Little-endian binary records.
class ShellCache {
 public:
  explicit ShellCache(std::filesystem::path root = default_root()) : root_(std::move(root)) {}

  static std::filesystem::path default_root() {
    if (const char* env = std::getenv("BMLAB_CACHE")) return env;
    return "cache";
  }

  const std::filesystem::path& root() const { return root_; }

  static std::string key(const IntegralForm& form, const CutoffFunction& phi) {
    return hex64(fnv1a(form.canonical() + "|" + phi.canonical()));
  }

  std::filesystem::path path(const IntegralForm& form, const CutoffFunction& phi,
                             std::int64_t lambda) const {
    return root_ / key(form, phi) / (std::to_string(lambda) + ".shell");
  }

  void store(const IntegralForm& form, const CutoffFunction& phi,
             const LatticeShell& shell) const {
    const auto dir = root_ / key(form, phi);
    std::filesystem::create_directories(dir);
    const auto meta = dir / "form.json";
    if (!std::filesystem::exists(meta)) {
      std::ofstream m(meta);
      m << nlohmann::json{{"form", form.to_json()}, {"phi", phi.canonical()}}.dump(2);
    }
    write_shell(path(form, phi, shell.lambda), shell);
  }

  std::optional<LatticeShell> load(const IntegralForm& form, const CutoffFunction& phi,
                                   std::int64_t lambda) const {
    const auto p = path(form, phi, lambda);
    if (!std::filesystem::exists(p)) return std::nullopt;
    return read_shell(p);
  }

  LatticeShell get(const IntegralForm& form, const CutoffFunction& phi,
                   std::int64_t lambda, EnumerationOptions opt = {}) const {
    if (auto s = load(form, phi, lambda)) return *s;
    auto s = enumerate_shell(form, phi, lambda, opt);
    store(form, phi, s);
    return s;
  }

  struct Entry {
    std::string key;
    std::int64_t lambda;
    std::size_t points;
    std::filesystem::path file;
  };

  std::vector<Entry> list() const {
    std::vector<Entry> out;
    if (!std::filesystem::exists(root_)) return out;
    for (auto& dir : std::filesystem::directory_iterator(root_)) {
      if (!dir.is_directory()) continue;
      for (auto& f : std::filesystem::directory_iterator(dir.path())) {
        if (f.path().extension() != ".shell") continue;
        auto s = read_shell(f.path());
        out.push_back({dir.path().filename().string(), s.lambda, s.size(), f.path()});
      }
    }
    std::sort(out.begin(), out.end(), [](const Entry& a, const Entry& b) {
      return std::tie(a.key, a.lambda) < std::tie(b.key, b.lambda);
    });
    return out;
  }

  void purge() const {
    if (std::filesystem::exists(root_))
      for (auto& e : std::filesystem::directory_iterator(root_))
        std::filesystem::remove_all(e.path());
  }

  /// Re-enumerates up to `sample` cached shells (chosen with the seed) and
  /// returns the files that do not match bit-exactly.
  std::vector<std::filesystem::path> verify(std::size_t sample, std::uint64_t seed) const {
    auto entries = list();
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    if (entries.size() > sample) entries.resize(sample);
    std::vector<std::filesystem::path> bad;
    for (auto& e : entries) {
      try {
        std::ifstream m(root_ / e.key / "form.json");
        auto j = nlohmann::json::parse(m);
        auto form = form_from_json(j.at("form"));
        auto phi = CutoffFunction::parse(j.at("phi").get<std::string>());
        auto fresh = enumerate_shell(form, phi, e.lambda);
        auto stored = read_shell(e.file);
        if (fresh.coords != stored.coords || fresh.weights != stored.weights ||
            key(form, phi) != e.key)
          bad.push_back(e.file);
      } catch (const std::exception&) {
        bad.push_back(e.file);
      }
    }
    return bad;
  }

  static void write_shell(const std::filesystem::path& p, const LatticeShell& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out.write(kMagic, 8);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.n));
    put<std::uint64_t>(out, s.size());
    put<std::int64_t>(out, s.lambda);
    for (int c : s.coords) put<std::int32_t>(out, c);
    for (double w : s.weights) put<double>(out, w);
  }

  static LatticeShell read_shell(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
      throw Error("corrupt shell file " + p.string());
    LatticeShell s;
    s.n = static_cast<int>(get<std::uint32_t>(in));
    const auto count = get<std::uint64_t>(in);
    s.lambda = get<std::int64_t>(in);
    s.coords.resize(count * s.n);
    for (auto& c : s.coords) c = get<std::int32_t>(in);
    s.weights.resize(count);
    CompensatedSum<double> r;
    for (auto& w : s.weights) {
      w = get<double>(in);
      r.add(w);
    }
    if (!in) throw Error("truncated shell file " + p.string());
    s.r_value = r.value();
    return s;
  }

 private:
  static constexpr char kMagic[9] = "BMSHELL1";

  // Host is little-endian (checked at compile time below).
  template <typename T>
  static void put(std::ostream& o, T v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <typename T>
  static T get(std::istream& i) {
    T v{};
    i.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  std::filesystem::path root_;
};

static_assert(std::endian::native == std::endian::little);

// ---------------------------------------------------------------------------
// Regular values

struct Progression {
  std::int64_t residue;
  std::int64_t modulus;
  std::size_t members;
};

struct RegularValueReport {
  std::vector<std::int64_t> lambdas;
  std::vector<double> ratios;
  std::vector<bool> flagged;
  std::vector<Progression> detected_progressions;
};

/// Ratios r(lambda) / lambda^{n/d - 1}; lambdas with ratio in [lo, hi] are
/// flagged, and residue classes mod m (m <= max_modulus) that are flagged
/// throughout the range with at least 3 members are reported. Classes implied
/// by a reported class of smaller modulus are omitted.
inline RegularValueReport scan_regular_values(const IntegralForm& form,
                                              const CutoffFunction& phi,
                                              std::int64_t lo, std::int64_t hi,
                                              double band_lo, double band_hi,
                                              std::int64_t max_modulus = 64,
                                              EnumerationOptions opt = {}) {
  if (!(band_lo > 0)) throw InvalidArgument("band lower end must be positive");
  if (lo < 1 || hi < lo) throw InvalidArgument("bad lambda range");
  RegularValueReport rep;
  const double expo = static_cast<double>(form.dimension()) / form.degree() - 1.0;
  for (std::int64_t l = lo; l <= hi; ++l) {
    auto shell = enumerate_shell(form, phi, l, opt);
    const double ratio = shell.r_value / std::pow(static_cast<double>(l), expo);
    rep.lambdas.push_back(l);
    rep.ratios.push_back(ratio);
    rep.flagged.push_back(ratio >= band_lo && ratio <= band_hi);
  }
  for (std::int64_t m = 1; m <= max_modulus; ++m) {
    for (std::int64_t res = 0; res < m; ++res) {
      bool implied = false;
      for (auto& p : rep.detected_progressions)
        if (m % p.modulus == 0 && res % p.modulus == p.residue) implied = true;
      if (implied) continue;
      std::size_t members = 0;
      bool all = true;
      for (std::size_t i = 0; i < rep.lambdas.size(); ++i) {
        if (mod(rep.lambdas[i], m) != res) continue;
        ++members;
        all = all && rep.flagged[i];
      }
      if (all && members >= 3) rep.detected_progressions.push_back({res, m, members});
    }
  }
  return rep;
}

}  // namespace bml
