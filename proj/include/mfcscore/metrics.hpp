#pragma once

// Error metrics: relative L2 errors, the closed-form Wasserstein-2 distance
// between Gaussians, sample moments and the run report.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mfcscore/dynamics.hpp"
#include "mfcscore/gaussian.hpp"
#include "mfcscore/problems.hpp"

namespace mfcscore {

/// |approx - exact|_2 / |exact|_2.
inline double rel_l2(std::span<const double> approx, std::span<const double> exact) {
  if (approx.size() != exact.size()) throw std::invalid_argument("rel_l2: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double e = approx[i] - exact[i];
    num += e * e;
    den += exact[i] * exact[i];
  }
  if (den == 0.0) throw std::invalid_argument("rel_l2: exact values are identically zero");
  return std::sqrt(num / den);
}

namespace detail {

inline Eigen::MatrixXd to_matrix(const GaussianSummary& g) {
  const auto d = static_cast<Eigen::Index>(g.dim());
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g.covariance[static_cast<std::size_t>(i * d + j)];
  }
  return m;
}

// Square root of a symmetric PSD matrix; eigenvalues below zero (down to
// -1e-10) are clamped.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) throw std::runtime_error("gaussian_w2: eigendecomposition failed");
  Eigen::VectorXd ev = eig.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-10) throw std::invalid_argument("gaussian_w2: covariance is not PSD");
    ev(i) = ev(i) > 0.0 ? std::sqrt(ev(i)) : 0.0;
  }
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// W2^2 = |m1 - m2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2).
inline double gaussian_w2(const GaussianSummary& g1, const GaussianSummary& g2) {
  g1.validate();
  g2.validate();
  if (g1.dim() != g2.dim()) throw std::invalid_argument("gaussian_w2: dimension mismatch");
  double w2 = 0.0;
  for (std::size_t k = 0; k < g1.dim(); ++k) {
    const double e = g1.mean[k] - g2.mean[k];
    w2 += e * e;
  }
  const Eigen::MatrixXd s1 = detail::to_matrix(g1);
  const Eigen::MatrixXd s2 = detail::to_matrix(g2);
  const Eigen::MatrixXd r2 = detail::psd_sqrt(s2);
  Eigen::MatrixXd inner = r2 * s1 * r2;
  inner = 0.5 * (inner + inner.transpose());
  const Eigen::MatrixXd cross = detail::psd_sqrt(inner);
  w2 += s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::sqrt(std::max(w2, 0.0));
}

/// Sample mean and unbiased covariance of the rows of `samples`.
inline GaussianSummary empirical_moments(std::span<const double> samples, std::size_t dim) {
  if (dim == 0 || samples.size() % dim != 0) throw std::invalid_argument("moments: bad shape");
  const std::size_t n = samples.size() / dim;
  if (n < 2) throw std::invalid_argument("moments: need at least two samples");
  GaussianSummary g{std::vector<double>(dim, 0.0), std::vector<double>(dim * dim, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) g.mean[k] += samples[i * dim + k];
  }
  for (double& m : g.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < dim; ++a) {
      const double ea = samples[i * dim + a] - g.mean[a];
      for (std::size_t b = 0; b <= a; ++b) {
        g.covariance[a * dim + b] += ea * (samples[i * dim + b] - g.mean[b]);
      }
    }
  }
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      g.covariance[a * dim + b] /= static_cast<double>(n - 1);
      g.covariance[b * dim + a] = g.covariance[a * dim + b];
    }
  }
  return g;
}

/// W2 between the exact terminal density and a Gaussian fitted to n samples
/// drawn from it: the sampling noise floor of the W2 protocol.
inline double systemic_error(const Problem& problem, std::size_t n, std::uint64_t seed) {
  const GaussianSummary exact = problem.exact_moments(problem.horizon());
  const std::size_t d = exact.dim();
  const Eigen::MatrixXd chol = detail::to_matrix(exact).llt().matrixL();
  NormalStream normal(seed);
  std::vector<double> samples(n * d);
  Eigen::VectorXd xi(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) xi(static_cast<Eigen::Index>(k)) = normal();
    const Eigen::VectorXd x = chol * xi;
    for (std::size_t k = 0; k < d; ++k) samples[i * d + k] = exact.mean[k] + x(static_cast<Eigen::Index>(k));
  }
  return gaussian_w2(empirical_moments(samples, d), exact);
}

/// Unbiased per-dimension variance at each node, indexed [node][dim].
inline std::vector<std::vector<double>> variance_curve(const TrajectoryBatch& traj) {
  if (traj.batch < 2) throw std::invalid_argument("variance_curve: need at least two particles");
  std::vector<std::vector<double>> out;
  for (std::size_t j = 0; j < traj.nodes(); ++j) {
    const auto g = empirical_moments(traj.x_at(j), traj.dim);
    std::vector<double> v(traj.dim);
    for (std::size_t k = 0; k < traj.dim; ++k) v[k] = g.covariance[k * traj.dim + k];
    out.push_back(std::move(v));
  }
  return out;
}

struct FieldErrors {
  double phi = 0.0;
  double grad = 0.0;
  double laplacian = 0.0;
};

struct RunReport {
  std::string problem;
  std::string mode;
  std::uint64_t seed = 0;
  std::string status = "completed";  // or "diverged"
  std::string message;
  std::vector<double> loss;
  std::vector<double> err_phi, err_grad, err_lap;
  FieldErrors final_errors;
  double w2 = 0.0;
  double systemic_error = 0.0;
  std::vector<std::vector<double>> variance;     // validation rollout, [node][dim]
  std::vector<std::vector<double>> exact_variance;
  nlohmann::json config;
  nlohmann::json plots;  // grid data for figures

  std::size_t steps() const { return loss.size(); }
};

inline nlohmann::json to_json(const RunReport& r) {
  return {
      {"problem", r.problem},
      {"mode", r.mode},
      {"seed", r.seed},
      {"status", r.status},
      {"message", r.message},
      {"loss", r.loss},
      {"err_phi", r.err_phi},
      {"err_grad", r.err_grad},
      {"err_lap", r.err_lap},
      {"final_errors",
       {{"phi", r.final_errors.phi}, {"grad", r.final_errors.grad}, {"laplacian", r.final_errors.laplacian}}},
      {"w2", r.w2},
      {"systemic_error", r.systemic_error},
      {"variance", r.variance},
      {"exact_variance", r.exact_variance},
      {"config", r.config},
      {"plots", r.plots},
  };
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.problem = j.at("problem").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.status = j.at("status").get<std::string>();
  r.message = j.value("message", "");
  r.loss = j.at("loss").get<std::vector<double>>();
  r.err_phi = j.at("err_phi").get<std::vector<double>>();
  r.err_grad = j.at("err_grad").get<std::vector<double>>();
  r.err_lap = j.at("err_lap").get<std::vector<double>>();
  const auto& fe = j.at("final_errors");
  r.final_errors = {fe.at("phi").get<double>(), fe.at("grad").get<double>(),
                    fe.at("laplacian").get<double>()};
  r.w2 = j.at("w2").get<double>();
  r.systemic_error = j.at("systemic_error").get<double>();
  r.variance = j.value("variance", std::vector<std::vector<double>>{});
  r.exact_variance = j.value("exact_variance", std::vector<std::vector<double>>{});
  r.config = j.value("config", nlohmann::json::object());
  r.plots = j.value("plots", nlohmann::json::object());
  return r;
}

}  // namespace mfcscore
