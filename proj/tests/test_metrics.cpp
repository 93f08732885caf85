#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mfcscore/metrics.hpp"
#include "mfcscore/training.hpp"

using namespace mfcscore;

namespace {

GaussianSummary gauss2(std::vector<double> m, double a, double b, double c) {
  return {std::move(m), {a, b, b, c}};
}

// Closed-form square root of a 2x2 SPD matrix:
// sqrt(A) = (A + s I) / sqrt(tr A + 2 s), s = sqrt(det A).
std::vector<double> sqrt2x2(const std::vector<double>& a) {
  const double s = std::sqrt(a[0] * a[3] - a[1] * a[2]);
  const double t = std::sqrt(a[0] + a[3] + 2.0 * s);
  return {(a[0] + s) / t, a[1] / t, a[2] / t, (a[3] + s) / t};
}

std::vector<double> mul2x2(const std::vector<double>& a, const std::vector<double>& b) {
  return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
          a[2] * b[1] + a[3] * b[3]};
}

double w2_oracle_2d(const GaussianSummary& g1, const GaussianSummary& g2) {
  const auto r = sqrt2x2(g2.covariance);
  const auto cross = sqrt2x2(mul2x2(mul2x2(r, g1.covariance), r));
  const double dm = std::pow(g1.mean[0] - g2.mean[0], 2) + std::pow(g1.mean[1] - g2.mean[1], 2);
  const double tr = g1.covariance[0] + g1.covariance[3] + g2.covariance[0] + g2.covariance[3] -
                    2.0 * (cross[0] + cross[3]);
  return std::sqrt(dm + tr);
}

GaussianSummary rotate(const GaussianSummary& g, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  const std::vector<double> R{c, -s, s, c}, Rt{c, s, -s, c};
  return {{c * g.mean[0] - s * g.mean[1], s * g.mean[0] + c * g.mean[1]},
          mul2x2(mul2x2(R, g.covariance), Rt)};
}

GaussianSummary random_spd(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  // M M^T + 0.1 I
  return gauss2({u(rng), u(rng)}, a * a + b * b + 0.1, a * c + b * d, c * c + d * d + 0.1);
}

}  // namespace

TEST(RelL2, Examples) {
  const std::vector<double> exact{3.0, 4.0};
  EXPECT_EQ(rel_l2(exact, exact), 0.0);
  EXPECT_DOUBLE_EQ(rel_l2(std::vector<double>{3.0, 4.5}, exact), 0.1);
  EXPECT_DOUBLE_EQ(rel_l2(std::vector<double>{0.0, 0.0}, exact), 1.0);
  EXPECT_THROW(rel_l2(std::vector<double>{1.0}, exact), std::invalid_argument);
  EXPECT_THROW(rel_l2(exact, std::vector<double>{0.0, 0.0}), std::invalid_argument);
}

TEST(GaussianW2, OneDimensionalClosedForm) {
  for (double m1 : {0.0, 1.5}) {
    for (double s1 : {0.5, 2.0}) {
      const auto a = GaussianSummary::isotropic({m1}, s1 * s1);
      const auto b = GaussianSummary::isotropic({-0.3}, 1.0);
      EXPECT_NEAR(gaussian_w2(a, b), std::hypot(m1 + 0.3, s1 - 1.0), 1e-12);
    }
  }
}

TEST(GaussianW2, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 10; ++k) {
    const auto g = random_spd(rng);
    EXPECT_NEAR(gaussian_w2(g, g), 0.0, 1e-7);
  }
}

TEST(GaussianW2, CommutingCovariances) {
  const auto a = gauss2({1.0, 0.0}, 4.0, 0.0, 1.0);
  const auto b = gauss2({0.0, 2.0}, 1.0, 0.0, 9.0);
  const double expected = std::sqrt(1.0 + 4.0 + (2.0 - 1.0) * (2.0 - 1.0) + (1.0 - 3.0) * (1.0 - 3.0));
  EXPECT_NEAR(gaussian_w2(a, b), expected, 1e-12);
}

TEST(GaussianW2, MatchesTwoByTwoOracle) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 50; ++k) {
    const auto a = random_spd(rng), b = random_spd(rng);
    EXPECT_NEAR(gaussian_w2(a, b), w2_oracle_2d(a, b), 1e-8);
  }
}

TEST(GaussianW2, SymmetryTriangleAndRotationInvariance) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 50; ++k) {
    const auto a = random_spd(rng), b = random_spd(rng), c = random_spd(rng);
    const double ab = gaussian_w2(a, b);
    EXPECT_NEAR(ab, gaussian_w2(b, a), 1e-8);
    EXPECT_LE(ab, gaussian_w2(a, c) + gaussian_w2(c, b) + 1e-8);
    const double theta = 0.1 * k;
    EXPECT_NEAR(gaussian_w2(rotate(a, theta), rotate(b, theta)), ab, 1e-8);
  }
}

TEST(GaussianW2, InvalidInputs) {
  const auto a = GaussianSummary::isotropic({0.0}, 1.0);
  const auto b = GaussianSummary::isotropic({0.0, 0.0}, 1.0);
  EXPECT_THROW(gaussian_w2(a, b), std::invalid_argument);
  EXPECT_THROW(gaussian_w2(gauss2({0.0, 0.0}, 1.0, 2.0, 1.0), b), std::invalid_argument);
  EXPECT_THROW(gaussian_w2(GaussianSummary{{0.0, 0.0}, {1.0, 0.5, 0.0, 1.0}}, b), std::invalid_argument);
}

TEST(Moments, Examples) {
  const std::vector<double> s{1.0, 2.0, 3.0, 6.0};
  const auto g = empirical_moments(s, 1);
  EXPECT_DOUBLE_EQ(g.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(g.covariance[0], (4.0 + 1.0 + 0.0 + 9.0) / 3.0);
  const std::vector<double> pairs{0.0, 0.0, 1.0, 2.0, 2.0, 4.0};
  const auto h = empirical_moments(pairs, 2);
  EXPECT_DOUBLE_EQ(h.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(h.mean[1], 2.0);
  EXPECT_DOUBLE_EQ(h.covariance[0], 1.0);
  EXPECT_DOUBLE_EQ(h.covariance[1], 2.0);
  EXPECT_DOUBLE_EQ(h.covariance[2], 2.0);
  EXPECT_DOUBLE_EQ(h.covariance[3], 4.0);
  EXPECT_THROW(empirical_moments(std::vector<double>{1.0}, 1), std::invalid_argument);
  EXPECT_THROW(empirical_moments(std::vector<double>{1.0, 2.0, 3.0}, 2), std::invalid_argument);
}

TEST(SystemicError, MatchesSamplingTheory) {
  // For N samples from N(m, s^2), E[W2] ~ (s / sqrt(N)) E sqrt(Z1^2 + Z2^2 / 2)
  // with E sqrt(Z1^2 + Z2^2 / 2) = 1.0772 (numerical quadrature).
  const EntropyPotentialProblem e({1, 0.5, 0.1});
  const LQProblem l({1, 0.5, 5.0, 0.1});
  const SystemicRiskProblem s({});
  for (const Problem* p : std::vector<const Problem*>{&e, &l, &s}) {
    const double sd = std::sqrt(p->exact_moments(p->horizon()).covariance[0]);
    double total = 0.0;
    const int seeds = 300;
    for (int k = 0; k < seeds; ++k) total += systemic_error(*p, 1000, static_cast<std::uint64_t>(k));
    EXPECT_NEAR(total / seeds, 1.0772 * sd / std::sqrt(1000.0), 0.1 * 1.0772 * sd / std::sqrt(1000.0))
        << p->id();
  }
  EXPECT_EQ(systemic_error(e, 100, 5), systemic_error(e, 100, 5));
}

TEST(VarianceCurve, HandExample) {
  TrajectoryBatch traj;
  traj.intervals = 1;
  traj.batch = 3;
  traj.dim = 2;
  traj.horizon = 1.0;
  traj.x = {0.0, 0.0, 1.0, 2.0, 2.0, 4.0, /* node 1 */ 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  const auto v = variance_curve(traj);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_DOUBLE_EQ(v[0][0], 1.0);
  EXPECT_DOUBLE_EQ(v[0][1], 4.0);
  EXPECT_DOUBLE_EQ(v[1][0], 0.0);
  EXPECT_DOUBLE_EQ(v[1][1], 0.0);
}

TEST(RunReport, JsonRoundTrip) {
  RunReport r;
  r.problem = "lq1d";
  r.mode = "score";
  r.seed = 3;
  r.loss = {1.0, 0.5};
  r.err_phi = {0.1, 0.05};
  r.err_grad = {0.2, 0.1};
  r.err_lap = {0.3, 0.2};
  r.final_errors = {0.05, 0.1, 0.2};
  r.w2 = 0.04;
  r.systemic_error = 0.03;
  r.variance = {{1.0}, {0.9}};
  r.exact_variance = {{1.0}, {0.95}};
  r.config = {{"lr", 0.1}};
  const auto s = run_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(to_json(s).dump(), to_json(r).dump());
  EXPECT_EQ(s.steps(), 2u);
}

TEST(FieldErrors, ExactModelRolloutHasZeroError) {
  const LQProblem p({1, 0.5, 5.0, 0.1});
  tape::Recording rec;
  const auto x0 = p.sample_initial(1, 50);
  const auto traj = rollout(rec, p, ExactModel{&p}, RolloutConfig{5, 0.3}, x0);
  const auto e = field_errors(p, traj);
  EXPECT_EQ(e.phi, 0.0);
  EXPECT_EQ(e.grad, 0.0);
  EXPECT_EQ(e.laplacian, 0.0);
}
