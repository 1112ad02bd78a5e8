#pragma once
//! \file
//! \brief Shared vocabulary: error types, exact rationals, compensated sums,
//! deterministic parallel loops and small numeric helpers.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <boost/rational.hpp>

namespace bml {

using Complex = std::complex<double>;
using Rational = boost::rational<std::int64_t>;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// e(x) = exp(2 pi i x)
inline Complex expi(double x) {
  return std::polar(1.0, kTwoPi * x);
}

/// e(num / den) with the numerator reduced first, so large numerators keep
/// full precision.
inline Complex expi_frac(std::int64_t num, std::int64_t den) {
  std::int64_t r = num % den;
  if (r < 0) r += den;
  return expi(static_cast<double>(r) / static_cast<double>(den));
}

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Work estimate above the configured budget; carries the estimate.
class BudgetExceeded : public Error {
 public:
  BudgetExceeded(const std::string& what, double estimated_cost, double budget)
      : Error(what + ": estimated cost " + std::to_string(estimated_cost) +
              " exceeds budget " + std::to_string(budget)),
        estimated_cost_(estimated_cost),
        budget_(budget) {}
  double estimated_cost() const { return estimated_cost_; }
  double budget() const { return budget_; }

 private:
  double estimated_cost_;
  double budget_;
};

inline void check_budget(const std::string& what, double cost, double budget) {
  if (cost > budget) throw BudgetExceeded(what, cost, budget);
}

// ---------------------------------------------------------------------------
// Rationals

inline double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) /
         static_cast<double>(r.denominator());
}

inline std::string to_string(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

// ---------------------------------------------------------------------------
// Compensated (Neumaier) summation

template <typename T>
class CompensatedSum {
 public:
  void add(T x) {
    if constexpr (std::is_same_v<T, Complex>) {
      re_.add(x.real());
      im_.add(x.imag());
    } else {
      T t = sum_ + x;
      if (std::abs(sum_) >= std::abs(x))
        c_ += (sum_ - t) + x;
      else
        c_ += (x - t) + sum_;
      sum_ = t;
    }
  }
  T value() const {
    if constexpr (std::is_same_v<T, Complex>)
      return {re_.value(), im_.value()};
    else
      return sum_ + c_;
  }

 private:
  T sum_{};
  T c_{};
  // only used for Complex
  struct Part {
    double s = 0, c = 0;
    void add(double x) {
      double t = s + x;
      if (std::abs(s) >= std::abs(x))
        c += (s - t) + x;
      else
        c += (x - t) + s;
      s = t;
    }
    double value() const { return s + c; }
  };
  Part re_, im_;
};

// ---------------------------------------------------------------------------
// Deterministic parallelism
//
// Work is cut into chunks whose boundaries depend only on the problem size,
// never on the worker count; reductions combine chunk results in chunk order.

namespace detail {
inline std::atomic<int>& worker_knob() {
  static std::atomic<int> workers{1};
  return workers;
}
}  // namespace detail

inline void set_workers(int workers) {
  detail::worker_knob() = std::max(1, workers);
}
inline int workers() { return detail::worker_knob(); }

/// Calls fn(begin, end) for fixed-size chunks of [0, count).
inline void parallel_chunks(std::size_t count, std::size_t chunk,
                            const std::function<void(std::size_t, std::size_t)>& fn) {
  if (count == 0) return;
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t nchunks = (count + chunk - 1) / chunk;
  const auto nthreads =
      static_cast<std::size_t>(std::min<std::size_t>(workers(), nchunks));
  if (nthreads <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c)
      fn(c * chunk, std::min(count, (c + 1) * chunk));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < nchunks; c = next++)
        fn(c * chunk, std::min(count, (c + 1) * chunk));
    });
  }
}

/// Deterministic map-reduce: per-chunk partials are combined in chunk order.
template <typename T, typename Map, typename Combine>
T parallel_reduce(std::size_t count, std::size_t chunk, T init, Map map,
                  Combine combine) {
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t nchunks = (count + chunk - 1) / chunk;
  std::vector<T> partial(nchunks, init);
  parallel_chunks(count, chunk, [&](std::size_t b, std::size_t e) {
    partial[b / chunk] = map(b, e);
  });
  T acc = init;
  for (auto& p : partial) acc = combine(acc, p);
  return acc;
}

// ---------------------------------------------------------------------------
// Small integer helpers

inline std::int64_t gcd64(std::int64_t a, std::int64_t b) {
  a = a < 0 ? -a : a;
  b = b < 0 ? -b : b;
  while (b != 0) {
    std::int64_t t = a % b;
    a = b;
    b = t;
  }
  return a;
}

inline std::int64_t mod(std::int64_t a, std::int64_t m) {
  std::int64_t r = a % m;
  return r < 0 ? r + m : r;
}

inline bool is_prime(std::int64_t p) {
  if (p < 2) return false;
  for (std::int64_t d = 2; d * d <= p; ++d)
    if (p % d == 0) return false;
  return true;
}

/// Integer power with overflow check.
inline std::int64_t ipow(std::int64_t base, int exp) {
  std::int64_t r = 1;
  for (int i = 0; i < exp; ++i) {
    if (base != 0 && std::abs(r) > INT64_MAX / std::abs(base))
      throw InvalidArgument("integer overflow in ipow");
    r *= base;
  }
  return r;
}

/// Smallest 2^a 3^b 5^c 7^d >= n.
inline std::size_t next_smooth(std::size_t n) {
  for (std::size_t m = std::max<std::size_t>(n, 1);; ++m) {
    std::size_t r = m;
    for (std::size_t p : {2u, 3u, 5u, 7u})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit) for cache keys and config fingerprints

inline std::uint64_t fnv1a(std::string_view data,
                           std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[h & 0xF];
    h >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Regression helpers

/// Least-squares slope of y against x.
inline double ls_slope(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0 ? sxy / sxx : 0.0;
}

/// Theil-Sen slope: median of pairwise slopes.
inline double theil_sen_slope(std::span<const double> x,
                              std::span<const double> y) {
  std::vector<double> s;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j)
      if (x[j] != x[i]) s.push_back((y[j] - y[i]) / (x[j] - x[i]));
  if (s.empty()) return 0.0;
  std::sort(s.begin(), s.end());
  const std::size_t m = s.size() / 2;
  return s.size() % 2 ? s[m] : 0.5 * (s[m - 1] + s[m]);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace bml
