#pragma once

// Shared plumbing: error types, counter-keyed random streams, deterministic
// parallel loops, and fixed-precision number formatting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <initializer_list>
#include <limits>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace earnlab {

enum class ErrorKind {
  Parameter,
  Schema,
  Estimation,
  Tokenization,
  Context,
  Calibration,
  Config,
  Stage,
  Io,
  Numeric,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Estimation: return "estimation";
    case ErrorKind::Tokenization: return "tokenization";
    case ErrorKind::Context: return "context";
    case ErrorKind::Calibration: return "calibration";
    case ErrorKind::Config: return "config";
    case ErrorKind::Stage: return "stage";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t x) {
  std::uint64_t s = x;
  return splitmix64(s);
}

/// xoshiro256** generator whose state is derived from a key tuple, so every
/// (seed, individual, year, purpose) cell owns an independent stream and
/// results never depend on the order in which cells are visited.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { init(seed); }

  Rng(std::uint64_t seed, std::initializer_list<std::int64_t> keys) {
    std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC908ULL);
    std::uint64_t i = 1;
    for (std::int64_t k : keys) {
      h = mix64(h ^ mix64(static_cast<std::uint64_t>(k) + 0x9E3779B97F4A7C15ULL * i));
      ++i;
    }
    init(h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  void init(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& v : s_) v = splitmix64(s);
  }

  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream tags keep the purposes of draws apart.
namespace stream {
inline constexpr std::int64_t kFixedEffect = 1;
inline constexpr std::int64_t kPermanent = 2;
inline constexpr std::int64_t kTransitory = 3;
inline constexpr std::int64_t kZero = 4;
inline constexpr std::int64_t kGap = 5;
inline constexpr std::int64_t kCategorical = 6;
inline constexpr std::int64_t kContinuous = 7;
inline constexpr std::int64_t kMissing = 8;
inline constexpr std::int64_t kDecode = 9;
inline constexpr std::int64_t kImpute = 10;
inline constexpr std::int64_t kParticle = 11;
inline constexpr std::int64_t kBurnIn = 12;
inline constexpr std::int64_t kInit = 13;
inline constexpr std::int64_t kReplicate = 14;
inline constexpr std::int64_t kShuffle = 15;
inline constexpr std::int64_t kTraining = 16;
}  // namespace stream

// ---------------------------------------------------------------------------
// Parallel loops
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n). Each index must write only to its own output
/// slot; the result is then independent of the thread count.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Inverse standard normal CDF (Acklam's rational approximation refined by
/// one Halley step; absolute error below 1e-12 on (0, 1)).
inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, ErrorKind::Parameter, "normal_quantile needs p in (0,1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

/// Type-7 sample quantile (linear interpolation between order statistics) of
/// already-sorted data: h = (n-1)p, result x[floor h] + frac(h) * gap.
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), ErrorKind::Parameter, "quantile of empty sample");
  if (sorted.size() == 1) return sorted.front();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Six-significant-digit rendering used by every report file.
inline std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v == 0.0 ? 0.0 : v);
  return buf;
}

/// Round-trip rendering (17 significant digits).
inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace earnlab
