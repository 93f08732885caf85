#pragma once

// Forward-Euler rollout of the forward-backward score ODE system and the
// Euler-Maruyama FBSDE baseline. Every rollout is recorded on a tape so the
// trajectory-matching loss can be differentiated with respect to the network
// parameters through the whole unrolled computation.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfcscore/gaussian.hpp"
#include "mfcscore/net.hpp"
#include "mfcscore/population.hpp"
#include "mfcscore/problems.hpp"
#include "mfcscore/tape.hpp"

namespace mfcscore {

enum class RolloutMode { score, fbsde };

/// Where the score and density come from in score mode: the particle KDE,
/// or the problem's exact density (test oracle).
enum class DensitySource { kde, exact };

struct RolloutConfig {
  std::size_t intervals = 10;
  double bandwidth = 0.35;
  RolloutMode mode = RolloutMode::score;
  bool score_detach = false;
  DensitySource density = DensitySource::kde;
  std::uint64_t noise_seed = 0;

  void validate() const {
    if (intervals < 1) throw std::invalid_argument("rollout: need at least one interval");
    if (!(bandwidth > 0.0)) throw std::invalid_argument("rollout: bandwidth must be positive");
  }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t node, const std::string& what)
      : std::runtime_error("rollout diverged at node " + std::to_string(node) + ": " + what),
        node_(node) {}
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

/// Per-node, per-particle states. Arrays are indexed [node][particle] with
/// x and z holding `dim` components per particle.
struct TrajectoryBatch {
  std::size_t intervals = 0;
  std::size_t batch = 0;
  std::size_t dim = 0;
  double horizon = 0.0;
  std::vector<double> x, y, z, h;
  std::vector<double> phi;  // model value at (t_j, x_j)
  // Tape handles per node.
  std::vector<tape::ExprId> x_ids, y_ids, phi_ids;

  std::size_t nodes() const { return intervals + 1; }
  double dt() const { return horizon / static_cast<double>(intervals); }
  double time(std::size_t j) const { return static_cast<double>(j) * dt(); }

  std::span<const double> x_at(std::size_t j) const { return {x.data() + j * batch * dim, batch * dim}; }
  std::span<const double> z_at(std::size_t j) const { return {z.data() + j * batch * dim, batch * dim}; }
  std::span<const double> y_at(std::size_t j) const { return {y.data() + j * batch, batch}; }
  std::span<const double> h_at(std::size_t j) const { return {h.data() + j * batch, batch}; }
  std::span<const double> phi_at(std::size_t j) const { return {phi.data() + j * batch, batch}; }
};

template <class M>
concept PhiModel = requires(const M& m, tape::Recording& rec, tape::ExprId x, double t,
                            PopulationExpr& pop) {
  { m.record(rec, x, t, pop) } -> std::same_as<JetExpr>;
};

/// The value network phi_N.
struct NetModel {
  tape::ExprId params;
  NetConfig config;
  TerminalWrapper wrapper;

  JetExpr record(tape::Recording& rec, tape::ExprId x, double t, PopulationExpr&) const {
    return record_jet(rec, params, x, config, wrapper, t);
  }
};

/// The exact solution of a problem, recorded as constants. The population
/// mean of the current slice is passed to mean-field-coupled oracles.
struct ExactModel {
  const Problem* problem;

  JetExpr record(tape::Recording& rec, tape::ExprId x, double t, PopulationExpr& pop) const {
    const std::size_t d = problem->dim();
    const auto xs = rec.value(x);
    const auto mean = rec.value(pop.mean());
    const std::vector<double> m(mean.begin(), mean.end());
    const std::size_t n = xs.size() / d;
    std::vector<double> value(n), grad(n * d), lap(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto xi = xs.subspan(i * d, d);
      value[i] = problem->exact_phi(t, xi, m);
      const auto g = problem->exact_grad_phi(t, xi, m);
      std::copy(g.begin(), g.end(), grad.begin() + static_cast<std::ptrdiff_t>(i * d));
      lap[i] = problem->exact_lap_phi(t, xi, m);
    }
    return {rec.constant(std::move(value)), rec.constant(std::move(grad)), rec.constant(std::move(lap))};
  }
};

namespace detail {

inline void install_exact_density(const Problem& problem, double t, PopulationExpr& pop) {
  auto& rec = pop.recording();
  const std::size_t d = problem.dim();
  const auto xs = rec.value(pop.states());
  const auto mean = rec.value(pop.mean());
  const std::vector<double> m(mean.begin(), mean.end());
  std::vector<double> score(xs.size()), logd(xs.size() / d);
  for (std::size_t i = 0; i < logd.size(); ++i) {
    const auto xi = xs.subspan(i * d, d);
    const auto s = problem.exact_score(t, xi, m);
    std::copy(s.begin(), s.end(), score.begin() + static_cast<std::ptrdiff_t>(i * d));
    logd[i] = std::log(problem.exact_density(t, xi));
  }
  pop.use_fixed_density(std::move(score), std::move(logd));
}

inline void append(std::vector<double>& dst, std::span<const double> src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

inline void check_states(std::span<const double> xs, std::size_t node) {
  for (double v : xs) {
    if (!std::isfinite(v)) throw DivergenceError(node, "non-finite state");
    if (std::abs(v) > 1e6) throw DivergenceError(node, "state exceeds 1e6");
  }
}

}  // namespace detail

/// Rolls out `x0` (N x dim) over [0, T]. In score mode
///   x_{j+1} = x_j + (DpH - (1/beta) s_j) dt
///   y_{j+1} = y_j + (f_j - (1/beta) h_j - H + z_j . DpH - (1/beta) z_j . s_j) dt
/// with s_j the score of the current cloud; in fbsde mode
///   X_{j+1} = X_j + DpH dt + sqrt(2 dt / beta) xi_j
///   Y_{j+1} = Y_j + (L(X_j, DpH) + f_j) dt + sqrt(2 dt / beta) Z_j . xi_j.
/// y_0 is the model value at t = 0.
template <PhiModel M>
TrajectoryBatch rollout(tape::Recording& rec, const Problem& problem, const M& model,
                        const RolloutConfig& cfg, std::span<const double> x0) {
  cfg.validate();
  const std::size_t d = problem.dim();
  if (x0.empty() || x0.size() % d != 0) throw std::invalid_argument("rollout: bad initial batch");
  const std::size_t n = x0.size() / d;
  const double ib = problem.inv_beta();

  TrajectoryBatch traj;
  traj.intervals = cfg.intervals;
  traj.batch = n;
  traj.dim = d;
  traj.horizon = problem.horizon();
  const double dt = traj.dt();
  const std::size_t nodes = traj.nodes();
  traj.x.reserve(nodes * n * d);
  traj.z.reserve(nodes * n * d);
  traj.y.reserve(nodes * n);
  traj.h.reserve(nodes * n);
  traj.phi.reserve(nodes * n);

  NormalStream noise(cfg.noise_seed);
  const double noise_scale = std::sqrt(2.0 * dt * ib);

  detail::check_states(x0, 0);
  tape::ExprId x = rec.constant(std::vector<double>(x0.begin(), x0.end()));
  tape::ExprId y{};
  for (std::size_t j = 0;; ++j) {
    const double t = traj.time(j);
    try {
      PopulationExpr pop(rec, x, d, cfg.bandwidth, cfg.score_detach);
      if (cfg.density == DensitySource::exact) detail::install_exact_density(problem, t, pop);
      const JetExpr jet = model.record(rec, x, t, pop);
      if (j == 0) y = jet.value;

      traj.x_ids.push_back(x);
      traj.y_ids.push_back(y);
      traj.phi_ids.push_back(jet.value);
      detail::append(traj.x, rec.value(x));
      detail::append(traj.y, rec.value(y));
      detail::append(traj.z, rec.value(jet.grad));
      detail::append(traj.h, rec.value(jet.laplacian));
      detail::append(traj.phi, rec.value(jet.value));
      if (j == cfg.intervals) break;

      const HamiltonianExpr H = problem.record_hamiltonian(rec, t, x, jet.grad, pop);
      const tape::ExprId f = problem.record_running_f(rec, t, x, pop);
      tape::ExprId x_next, ydot;
      if (cfg.mode == RolloutMode::score) {
        const tape::ExprId s = pop.score();
        const tape::ExprId drift = rec.sub(H.grad_p, rec.scale(s, ib));
        x_next = rec.add(x, rec.scale(drift, dt));
        ydot = rec.sub(f, rec.scale(jet.laplacian, ib));
        ydot = rec.sub(ydot, H.value);
        ydot = rec.add(ydot, rec.row_dot(jet.grad, H.grad_p, d));
        ydot = rec.sub(ydot, rec.scale(rec.row_dot(jet.grad, s, d), ib));
        y = rec.add(y, rec.scale(ydot, dt));
      } else {
        const tape::ExprId xi = rec.constant(noise.draw(n * d));
        x_next = rec.add(rec.add(x, rec.scale(H.grad_p, dt)), rec.scale(xi, noise_scale));
        const tape::ExprId L = problem.record_lagrangian(rec, t, x, H.grad_p, pop);
        y = rec.add(y, rec.scale(rec.add(L, f), dt));
        y = rec.add(y, rec.scale(rec.row_dot(jet.grad, xi, d), noise_scale));
      }
      x = x_next;
    } catch (const std::domain_error& e) {
      throw DivergenceError(j, e.what());
    }
    detail::check_states(rec.value(x), j + 1);
  }
  return traj;
}

inline TrajectoryBatch rollout_score(tape::Recording& rec, const Problem& problem,
                                     const NetModel& model, const RolloutConfig& cfg,
                                     std::span<const double> x0) {
  if (cfg.mode != RolloutMode::score) throw std::invalid_argument("rollout_score: mode is not score");
  return rollout(rec, problem, model, cfg, x0);
}

inline TrajectoryBatch rollout_fbsde(tape::Recording& rec, const Problem& problem,
                                     const NetModel& model, const RolloutConfig& cfg,
                                     std::span<const double> x0) {
  if (cfg.mode != RolloutMode::fbsde) throw std::invalid_argument("rollout_fbsde: mode is not fbsde");
  return rollout(rec, problem, model, cfg, x0);
}

/// One row per (particle, node): t, x..., y, z..., h.
inline void write_trajectory_csv(std::ostream& os, const TrajectoryBatch& traj) {
  os << "particle,node,t";
  for (std::size_t k = 0; k < traj.dim; ++k) os << ",x" << k;
  os << ",y";
  for (std::size_t k = 0; k < traj.dim; ++k) os << ",z" << k;
  os << ",h\n";
  os.precision(17);
  for (std::size_t i = 0; i < traj.batch; ++i) {
    for (std::size_t j = 0; j < traj.nodes(); ++j) {
      os << i << ',' << j << ',' << traj.time(j);
      for (std::size_t k = 0; k < traj.dim; ++k) os << ',' << traj.x_at(j)[i * traj.dim + k];
      os << ',' << traj.y_at(j)[i];
      for (std::size_t k = 0; k < traj.dim; ++k) os << ',' << traj.z_at(j)[i * traj.dim + k];
      os << ',' << traj.h_at(j)[i] << '\n';
    }
  }
}

}  // namespace mfcscore
