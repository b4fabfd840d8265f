#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pinnpi/errors.hpp"

namespace pinnpi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Warnings go to stderr unless silenced (tests and the acceptance runner
// turn them off to keep logs readable).
inline bool& warnings_enabled() {
  static bool enabled = true;
  return enabled;
}

inline void warn(const std::string& msg) {
  if (warnings_enabled()) std::cerr << "[pinnpi] warning: " << msg << '\n';
}

/// Axis-aligned box [lo, hi] in R^n.
struct Box {
  Vec lo;
  Vec hi;

  Box() = default;
  Box(Vec lower, Vec upper) : lo(std::move(lower)), hi(std::move(upper)) {}

  static Box cube(int dim, double lower, double upper) {
    return Box(Vec::Constant(dim, lower), Vec::Constant(dim, upper));
  }

  int dim() const { return static_cast<int>(lo.size()); }
  Vec width() const { return hi - lo; }
  Vec center() const { return 0.5 * (lo + hi); }
  double volume() const { return width().prod(); }

  bool contains(const Vec& x) const {
    if (x.size() != lo.size()) return false;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (!(x[i] >= lo[i] && x[i] <= hi[i])) return false;
    return true;
  }

  Vec clamp(const Vec& x) const { return x.cwiseMax(lo).cwiseMin(hi); }

  /// Box scaled about its center by `factor` per axis.
  Box scaled(double factor) const {
    const Vec c = center();
    const Vec half = 0.5 * factor * width();
    return Box(c - half, c + half);
  }

  /// n i.i.d. uniform points as columns of a dim x n matrix.
  Mat sample_uniform(Eigen::Index n, Rng& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Mat pts(dim(), n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (int i = 0; i < dim(); ++i)
        pts(i, j) = lo[i] + (hi[i] - lo[i]) * unit(rng);
    return pts;
  }
};

/// Radical-inverse Halton points (first `dim` primes), shifted into `box`.
inline Mat halton_points(const Box& box, Eigen::Index n) {
  static constexpr int kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29,
                                    31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
  const int d = box.dim();
  if (d > static_cast<int>(std::size(kPrimes)))
    throw std::invalid_argument("halton_points: dimension too large");
  Mat pts(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int i = 0; i < d; ++i) {
      const int base = kPrimes[i];
      double f = 1.0, r = 0.0;
      // skip index 0 (the origin corner)
      auto k = static_cast<std::uint64_t>(j + 1);
      while (k > 0) {
        f /= base;
        r += f * static_cast<double>(k % base);
        k /= base;
      }
      pts(i, j) = box.lo[i] + r * (box.hi[i] - box.lo[i]);
    }
  }
  return pts;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t offset) {
  // splitmix64 finalizer keeps nearby offsets decorrelated
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (offset + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline std::string format_vec(const Vec& v) {
  std::ostringstream os;
  os << '(';
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  os << ')';
  return os.str();
}

inline void set_num_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

}  // namespace pinnpi
