#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace mfcscore {

/// Mean and covariance (dim x dim, row-major) of a Gaussian.
struct GaussianSummary {
  std::vector<double> mean;
  std::vector<double> covariance;

  std::size_t dim() const { return mean.size(); }

  static GaussianSummary isotropic(std::vector<double> mean, double variance) {
    const std::size_t d = mean.size();
    GaussianSummary g{std::move(mean), std::vector<double>(d * d, 0.0)};
    for (std::size_t k = 0; k < d; ++k) g.covariance[k * d + k] = variance;
    return g;
  }

  void validate() const {
    const std::size_t d = dim();
    if (d == 0 || covariance.size() != d * d) throw std::invalid_argument("gaussian: bad shape");
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (std::abs(covariance[i * d + j] - covariance[j * d + i]) > 1e-12) {
          throw std::invalid_argument("gaussian: covariance not symmetric");
        }
      }
    }
  }
};

/// Standard normal stream via Box-Muller on a 64-bit Mersenne twister, so
/// draws are identical across standard library implementations.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : rng_(seed) {}

  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::vector<double> draw(std::size_t n) {
    std::vector<double> out(n);
    for (double& v : out) v = (*this)();
    return out;
  }

 private:
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// n rows of N(mean, stddev^2 I).
inline std::vector<double> sample_isotropic(std::uint64_t seed, std::size_t n,
                                            const std::vector<double>& mean, double stddev) {
  NormalStream normal(seed);
  const std::size_t d = mean.size();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = mean[k] + stddev * normal();
  }
  return out;
}

/// Mixes a run seed with a stream tag (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mfcscore
