#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "fd.hpp"
#include "mfcscore/training.hpp"

using namespace mfcscore;

namespace {

// Loss of the tiny instance as a function of the flat parameters.
struct TinyInstance {
  const Problem& problem;
  NetConfig net;
  RolloutConfig rc;
  std::vector<double> x0;

  double loss(const std::vector<double>& flat) const {
    tape::Recording rec;
    const auto pid = rec.leaf(flat);
    const auto traj = rollout(rec, problem, NetModel{pid, net, problem.wrapper()}, rc, x0);
    auto l = path_loss(rec, traj);
    if (problem.wrapper().mode == TerminalMode::soft) l = rec.add(l, terminal_penalty(rec, traj, problem));
    return rec.scalar(l);
  }

  std::vector<double> grad(const std::vector<double>& flat) const {
    tape::Recording rec;
    const auto pid = rec.leaf(flat);
    const auto traj = rollout(rec, problem, NetModel{pid, net, problem.wrapper()}, rc, x0);
    auto l = path_loss(rec, traj);
    if (problem.wrapper().mode == TerminalMode::soft) l = rec.add(l, terminal_penalty(rec, traj, problem));
    return tape::backward(rec, l).wrt(pid);
  }
};

void check_end_to_end(const Problem& problem, RolloutMode mode, std::uint64_t seed) {
  const NetConfig net{problem.dim(), 5, 2, problem.horizon()};
  const auto params = init_params(net, seed);
  TinyInstance inst{problem, net, RolloutConfig{3, 0.5, mode, false, DensitySource::kde, 9},
                    problem.sample_initial(seed + 1, 4)};
  const auto g = inst.grad(params.vector());
  const auto g_fd = fd::gradient([&](const std::vector<double>& p) { return inst.loss(p); },
                                 params.vector(), 1e-5);
  EXPECT_LE(fd::rel_norm(g, g_fd), 1e-3) << problem.id() << " mode " << to_string(mode) << " seed " << seed;
}

}  // namespace

TEST(PathLoss, ZeroWhenYMatchesPhi) {
  TrajectoryBatch traj;
  traj.intervals = 2;
  traj.batch = 3;
  traj.dim = 1;
  traj.horizon = 0.5;
  tape::Recording rec;
  for (int j = 0; j < 3; ++j) {
    const auto v = rec.leaf({0.1 * j, -0.4, 2.0});
    traj.phi_ids.push_back(v);
    traj.y_ids.push_back(v);
  }
  EXPECT_EQ(rec.scalar(path_loss(rec, traj)), 0.0);
}

TEST(PathLoss, ConstantOffsetGivesDeltaSquaredT) {
  TrajectoryBatch traj;
  traj.intervals = 4;
  traj.batch = 5;
  traj.dim = 1;
  traj.horizon = 0.8;
  tape::Recording rec;
  const double delta = 0.3;
  for (int j = 0; j < 5; ++j) {
    std::vector<double> phi(5), y(5);
    for (int i = 0; i < 5; ++i) {
      phi[i] = 0.1 * i - 0.2 * j;
      y[i] = phi[i] + delta;
    }
    traj.phi_ids.push_back(rec.leaf(phi));
    traj.y_ids.push_back(rec.leaf(y));
  }
  EXPECT_NEAR(rec.scalar(path_loss(rec, traj)), delta * delta * 0.8, 1e-14);
}

TEST(PathLoss, RejectsMissingNodes) {
  TrajectoryBatch traj;
  traj.intervals = 2;
  traj.batch = 1;
  traj.dim = 1;
  tape::Recording rec;
  EXPECT_THROW(path_loss(rec, traj), std::invalid_argument);
}

TEST(TerminalPenalty, Examples) {
  const SystemicRiskProblem problem({});
  const double c = problem.params().c, T = problem.horizon();
  const std::vector<double> xs{-0.4, 0.1, 0.9};
  const double mean = (xs[0] + xs[1] + xs[2]) / 3.0;
  auto make = [&](tape::Recording& rec, const std::vector<double>& phi_T, const std::vector<double>& x) {
    TrajectoryBatch traj;
    traj.intervals = 1;
    traj.batch = x.size();
    traj.dim = 1;
    traj.horizon = T;
    const auto xid = rec.leaf(x);
    traj.x_ids = {xid, xid};
    traj.phi_ids = {rec.leaf(phi_T), rec.leaf(phi_T)};
    traj.y_ids = traj.phi_ids;
    return traj;
  };
  {
    std::vector<double> exact(3);
    for (int i = 0; i < 3; ++i) exact[i] = -0.5 * c * (mean - xs[i]) * (mean - xs[i]);
    tape::Recording rec;
    EXPECT_NEAR(rec.scalar(terminal_penalty(rec, make(rec, exact, xs), problem)), 0.0, 1e-15);
  }
  {
    tape::Recording rec;
    EXPECT_EQ(rec.scalar(terminal_penalty(rec, make(rec, {0.0, 0.0}, {0.5, 0.5}), problem)), 0.0);
  }
  {
    const double delta = 0.25;
    std::vector<double> off(3);
    for (int i = 0; i < 3; ++i) off[i] = -0.5 * c * (mean - xs[i]) * (mean - xs[i]) + delta;
    tape::Recording rec;
    EXPECT_NEAR(rec.scalar(terminal_penalty(rec, make(rec, off, xs), problem)), T * delta * delta, 1e-15);
  }
  {
    const LQProblem lq({});
    tape::Recording rec;
    EXPECT_THROW(terminal_penalty(rec, make(rec, {0.0}, {0.0}), lq), std::logic_error);
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  std::vector<double> p{1.0, -2.0};
  AdamState s(2);
  EXPECT_TRUE(adam_update(p, std::vector<double>{0.0, 0.0}, s, 0.1));
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepIsSignStep) {
  std::vector<double> p{0.0, 0.0, 0.0};
  const std::vector<double> g{3.0, -0.5, 1e-2};
  AdamState s(3);
  adam_update(p, g, s, 0.01);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], -0.01 * (g[i] > 0 ? 1.0 : -1.0), 1e-8);
}

TEST(Adam, TwoStepsClosedForm) {
  // m1 = 0.1 g, v1 = 0.001 g^2; m2 = 0.19 g, v2 = 0.001999 g^2.
  const double g = 2.0, lr = 0.05, eps = 1e-8;
  std::vector<double> p{1.0};
  AdamState s(1);
  adam_update(p, std::vector<double>{g}, s, lr);
  const double after1 = p[0];
  adam_update(p, std::vector<double>{g}, s, lr);
  const double step1 = lr * (0.1 * g / 0.1) / (std::sqrt(0.001 * g * g / 0.001) + eps);
  const double step2 = lr * (0.19 * g / 0.19) / (std::sqrt(0.001999 * g * g / 0.001999) + eps);
  EXPECT_NEAR(after1, 1.0 - step1, 1e-14);
  EXPECT_NEAR(p[0], 1.0 - step1 - step2, 1e-14);
  EXPECT_LT(p[0], after1);
}

TEST(Adam, NonFiniteGradientSkipped) {
  std::vector<double> p{1.0};
  AdamState s(1);
  EXPECT_FALSE(adam_update(p, std::vector<double>{NAN}, s, 0.1));
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(s.step, 0u);
  EXPECT_THROW(adam_update(p, std::vector<double>{1.0, 2.0}, s, 0.1), std::invalid_argument);
}

TEST(Adam, JsonRoundTrip) {
  AdamState s(3);
  std::vector<double> p{0.1, 0.2, 0.3};
  adam_update(p, std::vector<double>{1.0, -1.0, 0.5}, s, 0.1);
  const auto t = adam_state_from_json(nlohmann::json::parse(to_json(s).dump()));
  EXPECT_EQ(t.m, s.m);
  EXPECT_EQ(t.v, s.v);
  EXPECT_EQ(t.step, s.step);
}

TEST(EndToEnd, PathLossGradientMatchesFiniteDifferences) {
  const EntropyPotentialProblem entropy({1, 0.5, 0.1});
  const LQProblem lq({1, 0.5, 5.0, 0.1});
  const SystemicRiskProblem systemic({});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    check_end_to_end(entropy, RolloutMode::score, seed);
    check_end_to_end(lq, RolloutMode::score, seed);
    check_end_to_end(systemic, RolloutMode::score, seed);
    check_end_to_end(entropy, RolloutMode::fbsde, seed);
    check_end_to_end(systemic, RolloutMode::fbsde, seed);
  }
}

TEST(EndToEnd, TwoDimensionalGradientMatchesFiniteDifferences) {
  const EntropyPotentialProblem entropy({2, 0.5, 0.1});
  const LQProblem lq({2, 0.5, 5.0, 0.1});
  for (std::uint64_t seed : {1u, 2u}) {
    check_end_to_end(entropy, RolloutMode::score, seed);
    check_end_to_end(lq, RolloutMode::score, seed);
    check_end_to_end(entropy, RolloutMode::fbsde, seed);
  }
}

TEST(EndToEnd, DetachDoesNotChangeLossValue) {
  const EntropyPotentialProblem problem({1, 0.5, 0.1});
  const NetConfig net{1, 5, 2, 0.5};
  const auto params = init_params(net, 4);
  const auto x0 = problem.sample_initial(5, 4);
  TinyInstance a{problem, net, RolloutConfig{3, 0.5, RolloutMode::score, false, DensitySource::kde, 0}, x0};
  TinyInstance b{problem, net, RolloutConfig{3, 0.5, RolloutMode::score, true, DensitySource::kde, 0}, x0};
  EXPECT_EQ(a.loss(params.vector()), b.loss(params.vector()));
  EXPECT_NE(a.grad(params.vector()), b.grad(params.vector()));
}

TEST(EndToEnd, LossIsNonNegative) {
  const LQProblem problem({1, 0.5, 5.0, 0.1});
  const NetConfig net{1, 5, 2, 0.5};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TinyInstance inst{problem, net, RolloutConfig{3, 0.5, RolloutMode::score, false, DensitySource::kde, 0},
                      problem.sample_initial(seed, 4)};
    EXPECT_GE(inst.loss(init_params(net, seed).vector()), 0.0);
  }
}

TEST(Train, ZeroStepsReturnsInitialParams) {
  const EntropyPotentialProblem problem({1, 0.5, 0.1});
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.batch = 20;
  cfg.validation_size = 50;
  cfg.seed = 3;
  const auto r = train(problem, cfg);
  EXPECT_EQ(r.params, init_params({1, cfg.width, 2, 0.5}, derive_seed(3, 1)));
  EXPECT_TRUE(r.report.loss.empty());
  EXPECT_TRUE(r.report.err_phi.empty());
  EXPECT_FALSE(r.diverged);
}

TEST(Train, ReproducibleAndCurveLengths) {
  const LQProblem problem({1, 0.5, 5.0, 0.1});
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 30;
  cfg.lr = 0.1;
  cfg.validation_size = 60;
  cfg.seed = 11;
  const auto a = train(problem, cfg);
  const auto b = train(problem, cfg);
  EXPECT_EQ(a.report.loss.size(), 5u);
  EXPECT_EQ(a.report.err_phi.size(), 5u);
  EXPECT_EQ(a.report.err_grad.size(), 5u);
  EXPECT_EQ(a.report.err_lap.size(), 5u);
  EXPECT_EQ(a.report.loss, b.report.loss);
  EXPECT_EQ(to_json(a.report).dump(), to_json(b.report).dump());
  EXPECT_EQ(a.params, b.params);
  cfg.seed = 12;
  EXPECT_NE(train(problem, cfg).report.loss, a.report.loss);
}

TEST(Train, DivergenceHaltsWithPartialReport) {
  // A huge learning rate blows the network up within a few steps.
  const EntropyPotentialProblem problem({1, 0.5, 0.1});
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch = 20;
  cfg.lr = 50.0;
  cfg.validation_size = 40;
  const auto r = train(problem, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.report.status, "diverged");
  EXPECT_LT(r.report.loss.size(), 50u);
  EXPECT_EQ(r.report.loss.size(), r.report.err_phi.size());
}

TEST(Train, InvalidConfigRejected) {
  const EntropyPotentialProblem problem({1, 0.5, 0.1});
  TrainConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(train(problem, cfg), std::invalid_argument);
  cfg.lr = 0.1;
  cfg.bandwidth = -1.0;
  EXPECT_THROW(train(problem, cfg), std::invalid_argument);
}
