#pragma once

// Trajectory-matching loss, soft terminal penalty, Adam and the training loop.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfcscore/dynamics.hpp"
#include "mfcscore/gaussian.hpp"
#include "mfcscore/metrics.hpp"
#include "mfcscore/net.hpp"
#include "mfcscore/problems.hpp"
#include "mfcscore/tape.hpp"

namespace mfcscore {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam step. Returns false, leaving params and state
/// untouched, when the gradient has a non-finite entry.
inline bool adam_update(std::span<double> params, std::span<const double> grads, AdamState& s,
                        double lr, const AdamConfig& c = {}) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
    throw std::invalid_argument("adam: shape mismatch");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) return false;
  }
  ++s.step;
  const double k = static_cast<double>(s.step);
  const double bc1 = 1.0 - std::pow(c.beta1, k);
  const double bc2 = 1.0 - std::pow(c.beta2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * grads[i];
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
    const double denom = std::sqrt(s.v[i] / bc2) + c.eps;
    params[i] -= lr * (s.m[i] / bc1) / denom;
  }
  return true;
}

inline nlohmann::json to_json(const AdamState& s) { return {{"m", s.m}, {"v", s.v}, {"step", s.step}}; }

inline AdamState adam_state_from_json(const nlohmann::json& j) {
  AdamState s;
  s.m = j.at("m").get<std::vector<double>>();
  s.v = j.at("v").get<std::vector<double>>();
  s.step = j.at("step").get<std::uint64_t>();
  if (s.m.size() != s.v.size()) throw std::invalid_argument("adam: moment sizes differ");
  return s;
}

struct TrainConfig {
  std::size_t steps = 200;
  double lr = 0.02;
  std::size_t batch = 200;
  std::size_t intervals = 10;
  double bandwidth = 0.35;
  AdamConfig adam;
  std::uint64_t seed = 0;
  RolloutMode mode = RolloutMode::score;
  bool score_detach = false;
  std::size_t width = 30;
  std::size_t validation_size = 0;  // 0 = 1000 * dim

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (batch < 2) throw std::invalid_argument("train: batch must be >= 2");
    if (intervals < 1) throw std::invalid_argument("train: N_T must be >= 1");
    if (!(bandwidth > 0.0)) throw std::invalid_argument("train: bandwidth must be positive");
    if (width < 1) throw std::invalid_argument("train: width must be >= 1");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw std::invalid_argument("train: Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw std::invalid_argument("train: Adam epsilon must be positive");
  }
};

inline std::string to_string(RolloutMode m) { return m == RolloutMode::score ? "score" : "fbsde"; }

inline RolloutMode rollout_mode_from_string(const std::string& s) {
  if (s == "score") return RolloutMode::score;
  if (s == "fbsde") return RolloutMode::fbsde;
  throw std::invalid_argument("unknown mode '" + s + "' (expected score or fbsde)");
}

/// (1/N) sum_i sum_{j=1..N_T} (phi_N(t_j, x_j^i) - y_j^i)^2 dt.
inline tape::ExprId path_loss(tape::Recording& rec, const TrajectoryBatch& traj) {
  if (traj.phi_ids.size() != traj.nodes() || traj.y_ids.size() != traj.nodes()) {
    throw std::invalid_argument("path_loss: trajectory is missing tape nodes");
  }
  tape::ExprId total = rec.constant(0.0);
  for (std::size_t j = 1; j < traj.nodes(); ++j) {
    const auto misfit = rec.sub(traj.phi_ids[j], traj.y_ids[j]);
    if (rec.value(misfit).size() != traj.batch) throw std::invalid_argument("path_loss: shape mismatch");
    total = rec.add(total, rec.sum(rec.square(misfit)));
  }
  return rec.scale(total, traj.dt() / static_cast<double>(traj.batch));
}

/// T (1/N) sum_i (phi_N(T, x_T^i) - phi_T(x_T^i))^2 against the problem's
/// terminal target evaluated with the terminal population mean.
inline tape::ExprId terminal_penalty(tape::Recording& rec, const TrajectoryBatch& traj,
                                     const Problem& problem) {
  if (problem.wrapper().mode != TerminalMode::soft) {
    throw std::logic_error("terminal_penalty: problem uses a hard terminal condition");
  }
  if (traj.phi_ids.size() != traj.nodes()) throw std::invalid_argument("terminal_penalty: no tape nodes");
  PopulationExpr pop(rec, traj.x_ids.back(), traj.dim, 1.0, false);
  const auto target = problem.record_terminal_phi(rec, traj.x_ids.back(), pop);
  const auto misfit = rec.sub(traj.phi_ids.back(), target);
  return rec.scale(rec.sum(rec.square(misfit)), traj.horizon / static_cast<double>(traj.batch));
}

/// Relative L2 errors of the model's phi, grad phi and Lap phi recorded
/// along a rollout, pooled over every node and particle. Mean-field oracles
/// use the reference mean.
inline FieldErrors field_errors(const Problem& problem, const TrajectoryBatch& traj) {
  const std::size_t d = traj.dim;
  std::vector<double> phi_x, grad_x, lap_x;
  phi_x.reserve(traj.phi.size());
  grad_x.reserve(traj.z.size());
  lap_x.reserve(traj.h.size());
  for (std::size_t j = 0; j < traj.nodes(); ++j) {
    const double t = traj.time(j);
    const auto xs = traj.x_at(j);
    for (std::size_t i = 0; i < traj.batch; ++i) {
      const auto xi = xs.subspan(i * d, d);
      phi_x.push_back(problem.exact_phi(t, xi));
      const auto g = problem.exact_grad_phi(t, xi);
      grad_x.insert(grad_x.end(), g.begin(), g.end());
      lap_x.push_back(problem.exact_lap_phi(t, xi));
    }
  }
  return {rel_l2(traj.phi, phi_x), rel_l2(traj.z, grad_x), rel_l2(traj.h, lap_x)};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"k_end", c.steps},        {"lr", c.lr},
          {"N", c.batch},            {"N_T", c.intervals},
          {"sigma_K", c.bandwidth},  {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2}, {"adam_eps", c.adam.eps},
          {"seed", c.seed},          {"mode", to_string(c.mode)},
          {"score_detach", c.score_detach}, {"width", c.width},
          {"validation_size", c.validation_size}};
}

struct TrainResult {
  NetParams params;
  AdamState adam;
  TerminalWrapper wrapper;
  RunReport report;
  TrajectoryBatch validation;  // last validation rollout (values only)
  bool diverged = false;
};

using StepCallback = std::function<void(std::size_t step, double loss, const FieldErrors&)>;

namespace detail {

inline TrajectoryBatch validation_rollout(const Problem& problem, const NetParams& params,
                                          const TerminalWrapper& wrapper, const TrainConfig& cfg,
                                          std::span<const double> x0) {
  tape::Recording rec;
  const NetModel model{rec.constant(params.vector()), params.config(), wrapper};
  RolloutConfig rc{cfg.intervals, cfg.bandwidth, cfg.mode, true, DensitySource::kde,
                   derive_seed(cfg.seed, 3)};
  auto traj = rollout(rec, problem, model, rc, x0);
  traj.x_ids.clear();
  traj.y_ids.clear();
  traj.phi_ids.clear();
  return traj;
}

}  // namespace detail

/// Runs k_end steps of: fresh batch from rho0, rollout, loss (+ terminal
/// penalty when soft), backward, Adam. Validation errors on a fixed held-out
/// set are logged after every update. A divergence halts the loop and marks
/// the report; curves then hold the completed steps only.
inline TrainResult train(const Problem& problem, const TrainConfig& cfg,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  const std::size_t d = problem.dim();
  const NetConfig net{d, cfg.width, 2, problem.horizon()};
  TrainResult out;
  out.wrapper = problem.wrapper();
  out.params = init_params(net, derive_seed(cfg.seed, 1));
  out.adam = AdamState(out.params.size());

  RunReport& rep = out.report;
  rep.problem = problem.id();
  rep.mode = to_string(cfg.mode);
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);

  const std::size_t n_val = cfg.validation_size > 0 ? cfg.validation_size : 1000 * d;
  const auto x_val = problem.sample_initial(derive_seed(cfg.seed, 2), n_val);
  const bool soft = out.wrapper.mode == TerminalMode::soft;

  auto halt = [&](const std::exception& e) {
    out.diverged = true;
    rep.status = "diverged";
    rep.message = e.what();
  };

  for (std::size_t k = 0; k < cfg.steps; ++k) {
    double loss_value = 0.0;
    try {
      tape::Recording rec;
      const auto pid = rec.leaf(out.params.vector());
      const NetModel model{pid, net, out.wrapper};
      const RolloutConfig rc{cfg.intervals, cfg.bandwidth, cfg.mode, cfg.score_detach,
                             DensitySource::kde, derive_seed(derive_seed(cfg.seed, 5), k)};
      const auto x0 = problem.sample_initial(derive_seed(derive_seed(cfg.seed, 4), k), cfg.batch);
      const auto traj = rollout(rec, problem, model, rc, x0);
      auto loss = path_loss(rec, traj);
      if (soft) loss = rec.add(loss, terminal_penalty(rec, traj, problem));
      loss_value = rec.scalar(loss);
      const auto grads = tape::backward(rec, loss).wrt(pid);
      adam_update(out.params.flat(), grads, out.adam, cfg.lr, cfg.adam);
      out.validation = detail::validation_rollout(problem, out.params, out.wrapper, cfg, x_val);
    } catch (const DivergenceError& e) {
      halt(e);
      break;
    }
    const FieldErrors fe = field_errors(problem, out.validation);
    rep.loss.push_back(loss_value);
    rep.err_phi.push_back(fe.phi);
    rep.err_grad.push_back(fe.grad);
    rep.err_lap.push_back(fe.laplacian);
    rep.final_errors = fe;
    if (on_step) on_step(k, loss_value, fe);
  }

  if (out.validation.batch == 0 && !out.diverged) {
    try {
      out.validation = detail::validation_rollout(problem, out.params, out.wrapper, cfg, x_val);
      rep.final_errors = field_errors(problem, out.validation);
    } catch (const DivergenceError& e) {
      halt(e);
    }
  }
  if (out.validation.batch > 0) {
    const auto terminal = empirical_moments(out.validation.x_at(out.validation.intervals), d);
    rep.w2 = gaussian_w2(terminal, problem.exact_moments(problem.horizon()));
    rep.variance = variance_curve(out.validation);
    for (std::size_t j = 0; j < out.validation.nodes(); ++j) {
      const auto g = problem.exact_moments(out.validation.time(j));
      std::vector<double> v(d);
      for (std::size_t a = 0; a < d; ++a) v[a] = g.covariance[a * d + a];
      rep.exact_variance.push_back(std::move(v));
    }
  }
  rep.systemic_error = systemic_error(problem, n_val, derive_seed(cfg.seed, 6));
  return out;
}

}  // namespace mfcscore
