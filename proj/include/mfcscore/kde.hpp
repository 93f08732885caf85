#pragma once

// Gaussian kernel density estimate over a particle cloud and its score
// grad_x log rho_hat. Kernel weights are evaluated as a softmax with
// max-subtraction so the score stays finite far in the tails.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mfcscore/tape.hpp"

namespace mfcscore {

struct KdeCloud {
  std::vector<double> samples;  // N x dim, row-major
  std::size_t dim = 1;
  double bandwidth = 1.0;

  KdeCloud() = default;
  KdeCloud(std::vector<double> s, std::size_t d, double h)
      : samples(std::move(s)), dim(d), bandwidth(h) {
    validate();
  }

  std::size_t size() const { return dim == 0 ? 0 : samples.size() / dim; }
  std::span<const double> sample(std::size_t i) const { return {samples.data() + i * dim, dim}; }

  void validate() const {
    if (dim == 0 || samples.size() % dim != 0) throw std::invalid_argument("kde: bad sample shape");
    if (size() < 1) throw std::invalid_argument("kde: empty cloud");
    if (!(bandwidth > 0.0)) throw std::invalid_argument("kde: bandwidth must be positive");
    for (double v : samples) {
      if (!std::isfinite(v)) throw std::invalid_argument("kde: non-finite sample");
    }
  }
};

namespace detail {

// Log-weights l_i = -|x - s_i|^2 / (2 h^2) for one evaluation point; returns
// their maximum.
inline double kernel_logits(std::span<const double> samples, std::size_t dim,
                            std::span<const double> x, double h, std::vector<double>& logits) {
  const std::size_t n = samples.size() / dim;
  const double inv = -0.5 / (h * h);
  logits.resize(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double r2 = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double e = x[k] - samples[i * dim + k];
      r2 += e * e;
    }
    logits[i] = inv * r2;
    mx = std::max(mx, logits[i]);
  }
  return mx;
}

// Turns logits into normalized weights in place; returns log sum exp.
inline double softmax_inplace(std::vector<double>& w, double mx) {
  double z = 0.0;
  for (double& v : w) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : w) v /= z;
  return mx + std::log(z);
}

inline double log_normalizer(std::size_t n, std::size_t dim, double h) {
  return -std::log(static_cast<double>(n)) -
         0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * h * h);
}

}  // namespace detail

inline double log_density(const KdeCloud& cloud, std::span<const double> x) {
  if (x.size() != cloud.dim) throw std::invalid_argument("kde: point dimension mismatch");
  std::vector<double> w;
  const double mx = detail::kernel_logits(cloud.samples, cloud.dim, x, cloud.bandwidth, w);
  const double lse = detail::softmax_inplace(w, mx);
  return lse + detail::log_normalizer(cloud.size(), cloud.dim, cloud.bandwidth);
}

/// rho_hat(x) = (1/N) sum_i (2 pi h^2)^(-d/2) exp(-|x - x_i|^2 / (2 h^2)).
inline double density(const KdeCloud& cloud, std::span<const double> x) {
  return std::exp(log_density(cloud, x));
}

/// grad_x log rho_hat(x) = -(1/h^2) sum_i w_i(x) (x - x_i).
inline std::vector<double> score(const KdeCloud& cloud, std::span<const double> x) {
  if (x.size() != cloud.dim) throw std::invalid_argument("kde: point dimension mismatch");
  const std::size_t d = cloud.dim;
  std::vector<double> w;
  const double mx = detail::kernel_logits(cloud.samples, d, x, cloud.bandwidth, w);
  detail::softmax_inplace(w, mx);
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) out[k] += w[i] * cloud.samples[i * d + k];
  }
  const double inv = 1.0 / (cloud.bandwidth * cloud.bandwidth);
  for (std::size_t k = 0; k < d; ++k) out[k] = -(x[k] - out[k]) * inv;
  return out;
}

/// Scores at every row of `points` (M x dim).
inline std::vector<double> score_batch(const KdeCloud& cloud, std::span<const double> points) {
  const std::size_t d = cloud.dim;
  std::vector<double> out(points.size());
  for (std::size_t m = 0; m < points.size() / d; ++m) {
    const auto s = score(cloud, points.subspan(m * d, d));
    std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(m * d));
  }
  return out;
}

inline std::vector<double> log_density_batch(const KdeCloud& cloud, std::span<const double> points) {
  const std::size_t d = cloud.dim;
  std::vector<double> out(points.size() / d);
  for (std::size_t m = 0; m < out.size(); ++m) out[m] = log_density(cloud, points.subspan(m * d, d));
  return out;
}

struct SelfEvaluation {
  std::vector<double> score;        // N x dim
  std::vector<double> log_density;  // N
};

/// Score and log density of the cloud at its own samples in one pass over
/// the symmetric kernel matrix. All logits are <= 0 with a zero diagonal, so
/// no max shift is needed.
inline SelfEvaluation self_evaluate(const KdeCloud& cloud) {
  const std::size_t n = cloud.size(), d = cloud.dim;
  const auto& s = cloud.samples;
  const double inv = -0.5 / (cloud.bandwidth * cloud.bandwidth);
  std::vector<double> z(n, 1.0), mean(s.begin(), s.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double e = s[i * d + k] - s[j * d + k];
        r2 += e * e;
      }
      const double kij = std::exp(inv * r2);
      if (kij == 0.0) continue;
      z[i] += kij;
      z[j] += kij;
      for (std::size_t k = 0; k < d; ++k) {
        mean[i * d + k] += kij * s[j * d + k];
        mean[j * d + k] += kij * s[i * d + k];
      }
    }
  }
  SelfEvaluation out{std::vector<double>(n * d), std::vector<double>(n)};
  const double h2 = cloud.bandwidth * cloud.bandwidth;
  const double norm = detail::log_normalizer(n, d, cloud.bandwidth);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      out.score[i * d + k] = -(s[i * d + k] - mean[i * d + k] / z[i]) / h2;
    }
    out.log_density[i] = std::log(z[i]) + norm;
  }
  return out;
}

/// Adjoints of score(cloud, x) contracted with `adjoint`: accumulates
/// adjoint^T d score / d x into `dx` and adjoint^T d score / d s_i into
/// row i of `dsamples`.
inline void score_vjp(std::span<const double> samples, std::size_t dim, double h,
                      std::span<const double> x, std::span<const double> adjoint,
                      std::span<double> dx, std::span<double> dsamples) {
  const std::size_t n = samples.size() / dim;
  std::vector<double> w;
  const double mx = detail::kernel_logits(samples, dim, x, h, w);
  detail::softmax_inplace(w, mx);
  const double inv = 1.0 / (h * h);
  // score = -(x - mu) / h^2, mu = sum_i w_i s_i.
  // d/dx direct: -adjoint / h^2; d/dmu: adjoint / h^2.
  double wbar_mean = 0.0;  // sum_i w_i wbar_i with wbar_i = mubar . s_i
  std::vector<double> wbar(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    for (std::size_t k = 0; k < dim; ++k) v += adjoint[k] * inv * samples[i * dim + k];
    wbar[i] = v;
    wbar_mean += w[i] * v;
  }
  for (std::size_t k = 0; k < dim; ++k) dx[k] -= adjoint[k] * inv;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) dsamples[i * dim + k] += w[i] * adjoint[k] * inv;
    // Softmax backward, then the logits -|x - s_i|^2 / (2 h^2).
    const double lbar = w[i] * (wbar[i] - wbar_mean);
    if (lbar == 0.0) continue;
    for (std::size_t k = 0; k < dim; ++k) {
      const double e = x[k] - samples[i * dim + k];
      dx[k] -= lbar * e * inv;
      dsamples[i * dim + k] += lbar * e * inv;
    }
  }
}

namespace detail {

// Inputs: points (M x d), samples (N x d). Output: scores (M x d).
class KdeScoreOp final : public tape::Composite {
 public:
  KdeScoreOp(std::size_t dim, double h) : dim_(dim), h_(h) {}
  std::string_view name() const override { return "kde_score"; }
  void backward(std::span<const std::span<const double>> in, std::span<const double>,
                std::span<const double> g, std::span<const std::span<double>> gin) const override {
    const auto points = in[0];
    for (std::size_t m = 0; m < points.size() / dim_; ++m) {
      score_vjp(in[1], dim_, h_, points.subspan(m * dim_, dim_), g.subspan(m * dim_, dim_),
                gin[0].subspan(m * dim_, dim_), gin[1]);
    }
  }

 private:
  std::size_t dim_;
  double h_;
};

// Inputs: points (M x d), samples (N x d). Output: log rho_hat (M).
class KdeLogDensityOp final : public tape::Composite {
 public:
  KdeLogDensityOp(std::size_t dim, double h) : dim_(dim), h_(h) {}
  std::string_view name() const override { return "kde_log_density"; }
  void backward(std::span<const std::span<const double>> in, std::span<const double>,
                std::span<const double> g, std::span<const std::span<double>> gin) const override {
    const auto points = in[0];
    const auto samples = in[1];
    const double inv = 1.0 / (h_ * h_);
    std::vector<double> w;
    for (std::size_t m = 0; m < points.size() / dim_; ++m) {
      if (g[m] == 0.0) continue;
      const auto x = points.subspan(m * dim_, dim_);
      const double mx = kernel_logits(samples, dim_, x, h_, w);
      softmax_inplace(w, mx);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double c = g[m] * w[i] * inv;
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < dim_; ++k) {
          const double e = x[k] - samples[i * dim_ + k];
          gin[0][m * dim_ + k] -= c * e;
          gin[1][i * dim_ + k] += c * e;
        }
      }
    }
  }

 private:
  std::size_t dim_;
  double h_;
};

}  // namespace detail

/// Records the KDE score of the cloud `samples` at `points`. With `detach`
/// the result is a constant on the tape.
/// `values`, when given, are the already computed scores.
inline tape::ExprId record_score(tape::Recording& rec, tape::ExprId points, tape::ExprId samples,
                                 std::size_t dim, double bandwidth, bool detach = false,
                                 std::optional<std::vector<double>> values = std::nullopt) {
  std::vector<double> out;
  if (values) {
    if (values->size() != rec.value(points).size()) throw std::invalid_argument("kde: bad score values");
    out = std::move(*values);
  } else {
    KdeCloud cloud(std::vector<double>(rec.value(samples).begin(), rec.value(samples).end()), dim,
                   bandwidth);
    out = score_batch(cloud, rec.value(points));
  }
  if (detach) return rec.constant(std::move(out));
  const tape::ExprId inputs[] = {points, samples};
  return rec.record_composite(std::make_shared<const detail::KdeScoreOp>(dim, bandwidth), inputs,
                              std::move(out));
}

inline tape::ExprId record_log_density(tape::Recording& rec, tape::ExprId points,
                                       tape::ExprId samples, std::size_t dim, double bandwidth,
                                       bool detach = false,
                                       std::optional<std::vector<double>> values = std::nullopt) {
  std::vector<double> out;
  if (values) {
    if (values->size() * dim != rec.value(points).size()) {
      throw std::invalid_argument("kde: bad log-density values");
    }
    out = std::move(*values);
  } else {
    KdeCloud cloud(std::vector<double>(rec.value(samples).begin(), rec.value(samples).end()), dim,
                   bandwidth);
    out = log_density_batch(cloud, rec.value(points));
  }
  if (detach) return rec.constant(std::move(out));
  const tape::ExprId inputs[] = {points, samples};
  return rec.record_composite(std::make_shared<const detail::KdeLogDensityOp>(dim, bandwidth),
                              inputs, std::move(out));
}

}  // namespace mfcscore
