#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "fd.hpp"
#include "mfcscore/gaussian.hpp"
#include "mfcscore/kde.hpp"

using namespace mfcscore;

namespace {

std::vector<double> random_cloud(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s(n * d);
  for (double& v : s) v = g(rng);
  return s;
}

}  // namespace

TEST(Kde, SingleSampleAtCenter) {
  const KdeCloud c({0.0}, 1, 1.0);
  const std::vector<double> x{0.0};
  EXPECT_NEAR(density(c, x), 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
}

TEST(Kde, SymmetricPairMatchesSingleSample) {
  const double a = 0.7;
  const KdeCloud pair({-a, a}, 1, 0.4), single({a}, 1, 0.4);
  const std::vector<double> x{0.0};
  EXPECT_NEAR(density(pair, x), density(single, x), 1e-15);
  EXPECT_NEAR(score(pair, x)[0], 0.0, 1e-15);
}

TEST(Kde, IntegratesToOne) {
  std::mt19937_64 rng(1);
  const KdeCloud c(random_cloud(rng, 30, 1), 1, 0.3);
  const double lo = -12.0, hi = 12.0;
  const int m = 24000;
  const double h = (hi - lo) / m;
  double total = 0.0;
  for (int i = 0; i <= m; ++i) {
    const std::vector<double> x{lo + h * i};
    total += (i == 0 || i == m ? 0.5 : 1.0) * density(c, x);
  }
  EXPECT_NEAR(total * h, 1.0, 1e-6);
}

TEST(Kde, SingleSampleScoreIsLinear) {
  const double s = 0.4, bw = 0.3;
  const KdeCloud c({s}, 1, bw);
  for (double x : {-1.0, 0.4, 2.0}) {
    const std::vector<double> xv{x};
    EXPECT_NEAR(score(c, xv)[0], -(x - s) / (bw * bw), 1e-12);
  }
}

TEST(Kde, ScoreMatchesFiniteDifferencesOfLogDensity) {
  std::mt19937_64 rng(2);
  for (std::size_t d : {1u, 2u}) {
    const KdeCloud c(random_cloud(rng, 40, d), d, 0.35);
    for (int k = 0; k < 10; ++k) {
      const auto x = random_cloud(rng, 1, d);
      const auto s = score(c, x);
      const auto g = fd::gradient([&](const std::vector<double>& y) { return log_density(c, y); }, x);
      for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(s[i], g[i], 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  }
}

TEST(Kde, SelfEvaluationMatchesPointwise) {
  std::mt19937_64 rng(3);
  for (std::size_t d : {1u, 2u}) {
    const KdeCloud c(random_cloud(rng, 60, d), d, 0.3);
    const auto self = self_evaluate(c);
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto x = c.sample(i);
      const auto s = score(c, x);
      for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(self.score[i * d + k], s[k], 1e-10);
      EXPECT_NEAR(self.log_density[i], log_density(c, x), 1e-12);
    }
  }
}

TEST(Kde, TranslationEquivariance) {
  std::mt19937_64 rng(4);
  auto samples = random_cloud(rng, 20, 2);
  const KdeCloud c(samples, 2, 0.5);
  for (std::size_t i = 0; i < samples.size(); i += 2) {
    samples[i] += 3.0;
    samples[i + 1] -= 1.5;
  }
  const KdeCloud shifted(samples, 2, 0.5);
  const std::vector<double> x{0.2, -0.1}, y{3.2, -1.6};
  EXPECT_NEAR(density(c, x), density(shifted, y), 1e-13);
  EXPECT_NEAR(score(c, x)[0], score(shifted, y)[0], 1e-11);
  EXPECT_NEAR(score(c, x)[1], score(shifted, y)[1], 1e-11);
}

TEST(Kde, NoOverflowFarFromCloud) {
  const KdeCloud c({0.0, 1.0}, 1, 0.1);
  const std::vector<double> x{10.0};  // |x - s|^2 / h^2 = 1e4
  const auto s = score(c, x);
  EXPECT_TRUE(std::isfinite(s[0]));
  EXPECT_NEAR(s[0], -(10.0 - 1.0) / 0.01, 1e-6);
  EXPECT_TRUE(std::isfinite(log_density(c, x)));
}

TEST(Kde, LargeCloudScoreApproachesGaussianScore) {
  // Pointwise sampling noise at this (N, bandwidth) is about 0.3, so the
  // absolute error is checked at 0.2 and the signed (bias) error at 0.1.
  const auto samples = sample_isotropic(5, 10000, {0.0}, 1.0);
  const KdeCloud c(samples, 1, 0.1);
  double abs_err = 0.0, signed_err = 0.0;
  int m = 0;
  for (int i = 0; i <= 40; ++i, ++m) {
    const std::vector<double> xv{-1.0 + 0.05 * i};
    const double e = score(c, xv)[0] + xv[0];
    abs_err += std::abs(e);
    signed_err += e;
  }
  EXPECT_LE(abs_err / m, 0.2);
  EXPECT_LE(std::abs(signed_err / m), 0.1);
}

TEST(Kde, SingleSampleJacobians) {
  const double bw = 0.5;
  std::vector<double> dx(1, 0.0), ds(1, 0.0);
  const std::vector<double> samples{0.3}, x{-0.2}, adj{1.0};
  score_vjp(samples, 1, bw, x, adj, dx, ds);
  EXPECT_NEAR(dx[0], -1.0 / (bw * bw), 1e-12);
  EXPECT_NEAR(ds[0], 1.0 / (bw * bw), 1e-12);
}

TEST(Kde, ScoreAdjointsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const std::size_t d = 2, n = 5;
  const double bw = 0.6;
  const auto samples = random_cloud(rng, n, d);
  const auto x = random_cloud(rng, 1, d);
  const auto adj = random_cloud(rng, 1, d);
  std::vector<double> dx(d, 0.0), ds(n * d, 0.0);
  score_vjp(samples, d, bw, x, adj, dx, ds);

  auto contract = [&](const std::vector<double>& s, const std::vector<double>& y) {
    const auto v = score(KdeCloud(s, d, bw), y);
    return v[0] * adj[0] + v[1] * adj[1];
  };
  const auto dx_fd = fd::gradient([&](const std::vector<double>& y) { return contract(samples, y); }, x);
  const auto ds_fd = fd::gradient([&](const std::vector<double>& s) { return contract(s, x); }, samples);
  EXPECT_LE(fd::max_rel(dx, dx_fd, 1e-2), 1e-5);
  EXPECT_LE(fd::max_rel(ds, ds_fd, 1e-2), 1e-5);

  // Translating x and every sample together leaves the score unchanged.
  for (std::size_t k = 0; k < d; ++k) {
    double total = dx[k];
    for (std::size_t i = 0; i < n; ++i) total += ds[i * d + k];
    EXPECT_NEAR(total, 0.0, 1e-10);
  }
}

TEST(Kde, TapeNodesMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  const std::size_t d = 2, n = 6;
  const double bw = 0.5;
  const auto cloud = random_cloud(rng, n, d);
  const auto w_score = random_cloud(rng, n, d);
  const auto w_log = random_cloud(rng, n, 1);
  // Self-evaluation, as inside a rollout: points and samples are the same node.
  auto value = [&](const std::vector<double>& s) {
    const KdeCloud c(s, d, bw);
    const auto sc = score_batch(c, s);
    const auto ld = log_density_batch(c, s);
    double v = 0.0;
    for (std::size_t i = 0; i < sc.size(); ++i) v += w_score[i] * sc[i];
    for (std::size_t i = 0; i < ld.size(); ++i) v += w_log[i] * ld[i];
    return v;
  };
  tape::Recording rec;
  const auto xs = rec.leaf(cloud);
  const auto sc = record_score(rec, xs, xs, d, bw);
  const auto ld = record_log_density(rec, xs, xs, d, bw);
  const auto seed = rec.add(rec.dot(sc, rec.constant(w_score)), rec.dot(ld, rec.constant(w_log)));
  EXPECT_NEAR(rec.scalar(seed), value(cloud), 1e-12);
  const auto g = tape::backward(rec, seed).wrt(xs);
  const auto g_fd = fd::gradient(value, cloud);
  EXPECT_LE(fd::rel_norm(g, g_fd), 1e-6);
}

TEST(Kde, DetachedNodesAreConstants) {
  tape::Recording rec;
  const auto xs = rec.leaf({0.0, 0.5, 1.0});
  const auto sc = record_score(rec, xs, xs, 1, 0.4, true);
  const auto g = tape::backward(rec, rec.sum(sc)).wrt(xs);
  EXPECT_EQ(g, std::vector<double>(3, 0.0));
}

TEST(Kde, InvalidCloudRejected) {
  EXPECT_THROW(KdeCloud({}, 1, 0.3).validate(), std::invalid_argument);
  EXPECT_THROW(KdeCloud({0.0}, 1, 0.0).validate(), std::invalid_argument);
  EXPECT_THROW(KdeCloud({NAN}, 1, 0.3).validate(), std::invalid_argument);
}
