#pragma once

// Benchmark mean field control problems with closed-form solutions:
//   EntropyPotentialProblem  H = |p|^2/2, f = |x|^2/2 + gamma log rho, 1/beta = 1
//   LQProblem                H = |p|^2/2, f = gamma (rho - rho*)
//   SystemicRiskProblem      mean-reverting interbank lending, soft terminal
//
// Each problem exposes pointwise functions, exact-solution oracles and tape
// recorders used by the rollouts.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfcscore/gaussian.hpp"
#include "mfcscore/net.hpp"
#include "mfcscore/population.hpp"
#include "mfcscore/riccati.hpp"
#include "mfcscore/tape.hpp"

namespace mfcscore {

enum class PenaltyReading { squared, literal };

struct HamiltonianExpr {
  tape::ExprId value;   // N
  tape::ExprId grad_p;  // N x dim
};

class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual double horizon() const = 0;
  /// Diffusion coefficient 1/beta.
  virtual double inv_beta() const = 0;
  virtual bool mean_field_coupled() const { return false; }

  virtual double hamiltonian(double t, std::span<const double> x, std::span<const double> p,
                             const PopulationState* pop) const = 0;
  virtual std::vector<double> grad_p_hamiltonian(double t, std::span<const double> x,
                                                 std::span<const double> p,
                                                 const PopulationState* pop) const = 0;
  virtual double lagrangian(double t, std::span<const double> x, std::span<const double> v,
                            const PopulationState* pop) const = 0;
  virtual double running_f(double t, std::span<const double> x, double rho,
                           const PopulationState* pop) const = 0;

  /// Hard wrapper with V for problems with an explicit terminal cost,
  /// soft otherwise.
  virtual TerminalWrapper wrapper() const = 0;
  /// phi(T, x); `mean` is the population mean (empty = reference mean).
  virtual double terminal_phi(std::span<const double> x, std::span<const double> mean) const = 0;

  virtual std::vector<double> sample_initial(std::uint64_t seed, std::size_t n) const = 0;

  // Exact-solution oracles. `mean` as in terminal_phi.
  virtual double exact_phi(double t, std::span<const double> x,
                           std::span<const double> mean = {}) const = 0;
  virtual std::vector<double> exact_grad_phi(double t, std::span<const double> x,
                                             std::span<const double> mean = {}) const = 0;
  virtual double exact_lap_phi(double t, std::span<const double> x,
                               std::span<const double> mean = {}) const = 0;
  virtual std::vector<double> exact_score(double t, std::span<const double> x,
                                          std::span<const double> mean = {}) const = 0;
  virtual double exact_density(double t, std::span<const double> x) const = 0;
  virtual GaussianSummary exact_moments(double t) const = 0;

  // Tape recorders over a batch of N particles.
  virtual HamiltonianExpr record_hamiltonian(tape::Recording& rec, double t, tape::ExprId x,
                                             tape::ExprId p, PopulationExpr& pop) const = 0;
  virtual tape::ExprId record_lagrangian(tape::Recording& rec, double t, tape::ExprId x,
                                         tape::ExprId v, PopulationExpr& pop) const = 0;
  virtual tape::ExprId record_running_f(tape::Recording& rec, double t, tape::ExprId x,
                                        PopulationExpr& pop) const = 0;
  /// Soft-terminal target phi(T, x) with the population mean (N values).
  virtual tape::ExprId record_terminal_phi(tape::Recording& rec, tape::ExprId x,
                                           PopulationExpr& pop) const {
    (void)x;
    (void)pop;
    (void)rec;
    throw std::logic_error("problem: no soft terminal target");
  }
};

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline void check_dim(std::span<const double> v, std::size_t d, const char* what) {
  if (v.size() != d) throw std::invalid_argument(std::string("problem: dimension mismatch in ") + what);
}

// Shared pieces of the two problems with H(p) = |p|^2 / 2.
class QuadraticHamiltonianProblem : public Problem {
 public:
  double hamiltonian(double, std::span<const double> x, std::span<const double> p,
                     const PopulationState*) const override {
    check_dim(x, dim(), "hamiltonian");
    check_dim(p, dim(), "hamiltonian");
    return 0.5 * norm2(p);
  }
  std::vector<double> grad_p_hamiltonian(double, std::span<const double> x,
                                         std::span<const double> p,
                                         const PopulationState*) const override {
    check_dim(x, dim(), "grad_p_hamiltonian");
    check_dim(p, dim(), "grad_p_hamiltonian");
    return {p.begin(), p.end()};
  }
  double lagrangian(double, std::span<const double>, std::span<const double> v,
                    const PopulationState*) const override {
    return 0.5 * norm2(v);
  }
  HamiltonianExpr record_hamiltonian(tape::Recording& rec, double, tape::ExprId,
                                     tape::ExprId p, PopulationExpr&) const override {
    return {rec.scale(rec.row_sum(rec.square(p), dim()), 0.5), p};
  }
  tape::ExprId record_lagrangian(tape::Recording& rec, double, tape::ExprId, tape::ExprId v,
                                 PopulationExpr&) const override {
    return rec.scale(rec.row_sum(rec.square(v), dim()), 0.5);
  }
  double terminal_phi(std::span<const double> x, std::span<const double>) const override {
    return -wrapper().terminal->value(x);
  }
};

}  // namespace detail

/// Stationary entropy-regularized problem: alpha^2 + gamma alpha = 1 makes
/// N(0, I/alpha) invariant under the optimal flow.
class EntropyPotentialProblem final : public detail::QuadraticHamiltonianProblem {
 public:
  struct Params {
    std::size_t dim = 1;
    double horizon = 0.5;
    double gamma = 0.1;
  };

  explicit EntropyPotentialProblem(Params p) : p_(p) {
    if (p.dim < 1) throw std::invalid_argument("entropy: dim must be >= 1");
    if (!(p.gamma > 0.0)) throw std::invalid_argument("entropy: gamma must be positive");
    if (!(p.horizon > 0.0)) throw std::invalid_argument("entropy: horizon must be positive");
    alpha_ = 0.5 * (-p.gamma + std::sqrt(p.gamma * p.gamma + 4.0));
    const double d = static_cast<double>(p.dim);
    rate_ = d * alpha_ + 0.5 * p.gamma * d * std::log(alpha_ / (2.0 * std::numbers::pi));
  }

  double alpha() const { return alpha_; }
  double gamma() const { return p_.gamma; }
  /// Time slope C of the exact solution phi = C t - alpha |x|^2 / 2.
  double rate() const { return rate_; }

  std::string id() const override { return p_.dim == 1 ? "entropy1d" : "entropy" + std::to_string(p_.dim) + "d"; }
  std::size_t dim() const override { return p_.dim; }
  double horizon() const override { return p_.horizon; }
  double inv_beta() const override { return 1.0; }

  double running_f(double, std::span<const double> x, double rho,
                   const PopulationState*) const override {
    if (!(rho > 0.0)) throw std::domain_error("entropy: density must be positive");
    return 0.5 * detail::norm2(x) + p_.gamma * std::log(rho);
  }

  // V(x) = alpha |x|^2 / 2 - C T, so that phi(T, .) = -V matches the exact solution.
  TerminalWrapper wrapper() const override {
    return TerminalWrapper::hard({alpha_, -rate_ * p_.horizon}, p_.horizon);
  }

  std::vector<double> sample_initial(std::uint64_t seed, std::size_t n) const override {
    return sample_isotropic(seed, n, std::vector<double>(p_.dim, 0.0), 1.0 / std::sqrt(alpha_));
  }

  double exact_phi(double t, std::span<const double> x, std::span<const double> = {}) const override {
    return rate_ * t - 0.5 * alpha_ * detail::norm2(x);
  }
  std::vector<double> exact_grad_phi(double, std::span<const double> x,
                                     std::span<const double> = {}) const override {
    std::vector<double> g(x.begin(), x.end());
    for (double& v : g) v *= -alpha_;
    return g;
  }
  double exact_lap_phi(double, std::span<const double>, std::span<const double> = {}) const override {
    return -alpha_ * static_cast<double>(p_.dim);
  }
  std::vector<double> exact_score(double t, std::span<const double> x,
                                  std::span<const double> m = {}) const override {
    return exact_grad_phi(t, x, m);
  }
  double exact_density(double, std::span<const double> x) const override {
    const double d = static_cast<double>(p_.dim);
    return std::pow(alpha_ / (2.0 * std::numbers::pi), 0.5 * d) *
           std::exp(-0.5 * alpha_ * detail::norm2(x));
  }
  GaussianSummary exact_moments(double) const override {
    return GaussianSummary::isotropic(std::vector<double>(p_.dim, 0.0), 1.0 / alpha_);
  }

  tape::ExprId record_running_f(tape::Recording& rec, double, tape::ExprId x,
                                PopulationExpr& pop) const override {
    const auto potential = rec.scale(rec.row_sum(rec.square(x), p_.dim), 0.5);
    return rec.add(potential, rec.scale(pop.log_density(), p_.gamma));
  }

 private:
  Params p_;
  double alpha_ = 1.0;
  double rate_ = 0.0;
};

/// Linear-quadratic problem whose optimal density is the shrinking Gaussian
/// rho*(t) = N(0, 2 (T - t + 1) I / beta).
class LQProblem final : public detail::QuadraticHamiltonianProblem {
 public:
  struct Params {
    std::size_t dim = 1;
    double horizon = 0.5;
    double beta = 5.0;
    double gamma = 0.1;
  };

  explicit LQProblem(Params p) : p_(p) {
    if (p.dim < 1) throw std::invalid_argument("lq: dim must be >= 1");
    if (!(p.beta > 0.0)) throw std::invalid_argument("lq: beta must be positive");
    if (!(p.horizon > 0.0)) throw std::invalid_argument("lq: horizon must be positive");
  }

  double beta() const { return p_.beta; }
  double gamma() const { return p_.gamma; }

  std::string id() const override { return p_.dim == 1 ? "lq1d" : "lq" + std::to_string(p_.dim) + "d"; }
  std::size_t dim() const override { return p_.dim; }
  double horizon() const override { return p_.horizon; }
  double inv_beta() const override { return 1.0 / p_.beta; }

  /// rho*(t, x).
  double target_density(double t, std::span<const double> x) const {
    const double tau = remaining(t);
    const double d = static_cast<double>(p_.dim);
    return std::pow(4.0 * std::numbers::pi * tau / p_.beta, -0.5 * d) *
           std::exp(-p_.beta * detail::norm2(x) / (4.0 * tau));
  }

  double running_f(double t, std::span<const double> x, double rho,
                   const PopulationState*) const override {
    return p_.gamma * (rho - target_density(t, x));
  }

  TerminalWrapper wrapper() const override { return TerminalWrapper::hard({1.0, 0.0}, p_.horizon); }

  std::vector<double> sample_initial(std::uint64_t seed, std::size_t n) const override {
    return sample_isotropic(seed, n, std::vector<double>(p_.dim, 0.0),
                            std::sqrt(2.0 * (p_.horizon + 1.0) / p_.beta));
  }

  double exact_phi(double t, std::span<const double> x, std::span<const double> = {}) const override {
    const double tau = remaining(t);
    return static_cast<double>(p_.dim) / p_.beta * std::log(1.0 / tau) -
           detail::norm2(x) / (2.0 * tau);
  }
  std::vector<double> exact_grad_phi(double t, std::span<const double> x,
                                     std::span<const double> = {}) const override {
    std::vector<double> g(x.begin(), x.end());
    for (double& v : g) v /= -remaining(t);
    return g;
  }
  double exact_lap_phi(double t, std::span<const double>, std::span<const double> = {}) const override {
    return -static_cast<double>(p_.dim) / remaining(t);
  }
  std::vector<double> exact_score(double t, std::span<const double> x,
                                  std::span<const double> = {}) const override {
    std::vector<double> s(x.begin(), x.end());
    for (double& v : s) v *= -p_.beta / (2.0 * remaining(t));
    return s;
  }
  double exact_density(double t, std::span<const double> x) const override {
    return target_density(t, x);
  }
  GaussianSummary exact_moments(double t) const override {
    return GaussianSummary::isotropic(std::vector<double>(p_.dim, 0.0),
                                      2.0 * remaining(t) / p_.beta);
  }

  tape::ExprId record_running_f(tape::Recording& rec, double t, tape::ExprId x,
                                PopulationExpr& pop) const override {
    const double tau = remaining(t);
    const double d = static_cast<double>(p_.dim);
    const double coef = std::pow(4.0 * std::numbers::pi * tau / p_.beta, -0.5 * d);
    const auto r2 = rec.row_sum(rec.square(x), p_.dim);
    const auto target = rec.scale(rec.exp(rec.scale(r2, -p_.beta / (4.0 * tau))), coef);
    return rec.scale(rec.sub(rec.exp(pop.log_density()), target), p_.gamma);
  }

 private:
  double remaining(double t) const { return p_.horizon - t + 1.0; }
  Params p_;
};

/// Systemic-risk model in one dimension. With k = a + q and
/// e = (eps - q^2) / 2,
///   H(x, p) = p^2 / 2 + k (xbar - x) p - e (xbar - x)^2,
/// and the exact solution is phi = -(eta_t / 2) (xbar - x)^2 + chi_t.
class SystemicRiskProblem final : public Problem {
 public:
  struct Params {
    double horizon = 0.1;
    double a = 0.1;
    double q = 0.5;
    double eps = 0.1;
    double c = 1.0;
    double sigma = 1.0;
    double initial_mean = 0.0;
    double initial_std = 0.5;
    std::size_t riccati_steps = 10000;
    // Terminal target used by the soft penalty: -(c/2)(xbar - x)^2, or the
    // unsquared -(c/2)(xbar - x) as literally displayed for this model.
    PenaltyReading penalty = PenaltyReading::squared;
  };

  explicit SystemicRiskProblem(Params p)
      : p_(p),
        eta_(solve_riccati({p.a, p.q, p.eps, p.c}, p.horizon, p.riccati_steps)),
        chi_(chi_table(eta_, p.sigma)) {
    if (!(p.initial_std > 0.0)) throw std::invalid_argument("systemic: initial_std must be positive");
    const double k = p.a + p.q;
    const double s2 = p.sigma * p.sigma;
    // Variance of the optimal flow, drift (k + eta)(xbar - x).
    variance_ = integrate_forward(eta_, p.initial_std * p.initial_std, [&](double t, double v) {
      return -2.0 * (k + eta_.at(t)) * v + s2;
    });
  }

  const Params& params() const { return p_; }
  const UniformTable& eta() const { return eta_; }
  const UniformTable& chi() const { return chi_; }
  const UniformTable& variance() const { return variance_; }

  std::string id() const override { return "systemic"; }
  std::size_t dim() const override { return 1; }
  double horizon() const override { return p_.horizon; }
  double inv_beta() const override { return 0.5 * p_.sigma * p_.sigma; }
  bool mean_field_coupled() const override { return true; }

  double hamiltonian(double, std::span<const double> x, std::span<const double> p,
                     const PopulationState* pop) const override {
    const double dev = deviation(x, pop, "hamiltonian");
    detail::check_dim(p, 1, "hamiltonian");
    return 0.5 * p[0] * p[0] + k() * dev * p[0] - e() * dev * dev;
  }
  std::vector<double> grad_p_hamiltonian(double, std::span<const double> x,
                                         std::span<const double> p,
                                         const PopulationState* pop) const override {
    const double dev = deviation(x, pop, "grad_p_hamiltonian");
    detail::check_dim(p, 1, "grad_p_hamiltonian");
    return {p[0] + k() * dev};
  }
  double lagrangian(double, std::span<const double> x, std::span<const double> v,
                    const PopulationState* pop) const override {
    const double dev = deviation(x, pop, "lagrangian");
    const double u = v[0] - k() * dev;
    return 0.5 * u * u + e() * dev * dev;
  }
  double running_f(double, std::span<const double>, double, const PopulationState*) const override {
    return 0.0;
  }

  TerminalWrapper wrapper() const override { return TerminalWrapper::soft(p_.horizon); }
  double terminal_phi(std::span<const double> x, std::span<const double> mean) const override {
    const double dev = mean_or_reference(mean) - x[0];
    return -0.5 * p_.c * dev * dev;
  }

  std::vector<double> sample_initial(std::uint64_t seed, std::size_t n) const override {
    return sample_isotropic(seed, n, {p_.initial_mean}, p_.initial_std);
  }

  double exact_phi(double t, std::span<const double> x, std::span<const double> mean = {}) const override {
    const double dev = mean_or_reference(mean) - x[0];
    return -0.5 * eta_.at(t) * dev * dev + chi_.at(t);
  }
  std::vector<double> exact_grad_phi(double t, std::span<const double> x,
                                     std::span<const double> mean = {}) const override {
    return {eta_.at(t) * (mean_or_reference(mean) - x[0])};
  }
  double exact_lap_phi(double t, std::span<const double>, std::span<const double> = {}) const override {
    return -eta_.at(t);
  }
  std::vector<double> exact_score(double t, std::span<const double> x,
                                  std::span<const double> mean = {}) const override {
    return {-(x[0] - mean_or_reference(mean)) / variance_.at(t)};
  }
  double exact_density(double t, std::span<const double> x) const override {
    const double v = variance_.at(t);
    const double dev = x[0] - p_.initial_mean;
    return std::exp(-0.5 * dev * dev / v) / std::sqrt(2.0 * std::numbers::pi * v);
  }
  GaussianSummary exact_moments(double t) const override {
    return GaussianSummary::isotropic({p_.initial_mean}, variance_.at(t));
  }

  HamiltonianExpr record_hamiltonian(tape::Recording& rec, double, tape::ExprId x, tape::ExprId p,
                                     PopulationExpr& pop) const override {
    const auto dev = rec.sub(pop.mean_per_particle(), x);
    const auto h = rec.add(rec.sub(rec.scale(rec.square(p), 0.5), rec.scale(rec.square(dev), e())),
                           rec.scale(rec.mul(dev, p), k()));
    return {h, rec.add(p, rec.scale(dev, k()))};
  }
  tape::ExprId record_lagrangian(tape::Recording& rec, double, tape::ExprId x, tape::ExprId v,
                                 PopulationExpr& pop) const override {
    const auto dev = rec.sub(pop.mean_per_particle(), x);
    const auto u = rec.sub(v, rec.scale(dev, k()));
    return rec.add(rec.scale(rec.square(u), 0.5), rec.scale(rec.square(dev), e()));
  }
  tape::ExprId record_running_f(tape::Recording& rec, double, tape::ExprId x,
                                PopulationExpr&) const override {
    return rec.constant(std::vector<double>(rec.value(x).size(), 0.0));
  }
  tape::ExprId record_terminal_phi(tape::Recording& rec, tape::ExprId x,
                                   PopulationExpr& pop) const override {
    const auto dev = rec.sub(pop.mean_per_particle(), x);
    if (p_.penalty == PenaltyReading::literal) return rec.scale(dev, -0.5 * p_.c);
    return rec.scale(rec.square(dev), -0.5 * p_.c);
  }

 private:
  double k() const { return p_.a + p_.q; }
  double e() const { return 0.5 * (p_.eps - p_.q * p_.q); }
  double mean_or_reference(std::span<const double> mean) const {
    return mean.empty() ? p_.initial_mean : mean[0];
  }
  double deviation(std::span<const double> x, const PopulationState* pop, const char* what) const {
    if (pop == nullptr) {
      throw std::invalid_argument(std::string("systemic: population required in ") + what);
    }
    detail::check_dim(x, 1, what);
    return pop->mean[0] - x[0];
  }

  Params p_;
  UniformTable eta_;
  UniformTable chi_;
  UniformTable variance_;
};

}  // namespace mfcscore
