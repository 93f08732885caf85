#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fd.hpp"
#include "mfcscore/tape.hpp"

using mfcscore::tape::backward;
using mfcscore::tape::ExprId;
using mfcscore::tape::Op;
using mfcscore::tape::Recording;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Builds seed = dot(weights, op(inputs...)) on a fresh tape; checks the
// reverse-mode gradient for every input against central differences.
using Builder = std::function<ExprId(Recording&, const std::vector<ExprId>&)>;

void check_primitive(const char* name, const std::vector<std::vector<double>>& inputs, const Builder& build,
                     std::mt19937_64& rng) {
  std::vector<double> weights;
  auto eval = [&](const std::vector<std::vector<double>>& in) {
    Recording rec;
    std::vector<ExprId> ids;
    for (const auto& v : in) ids.push_back(rec.leaf(v));
    const ExprId out = build(rec, ids);
    const auto val = rec.value(out);
    if (weights.empty()) weights = uniform(rng, val.size(), 0.5, 1.5);
    double s = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) s += weights[i] * val[i];
    return s;
  };
  eval(inputs);

  Recording rec;
  std::vector<ExprId> ids;
  for (const auto& v : inputs) ids.push_back(rec.leaf(v));
  const ExprId out = build(rec, ids);
  const ExprId seed = rec.dot(out, rec.constant(weights));
  const auto grads = backward(rec, seed);

  for (std::size_t a = 0; a < inputs.size(); ++a) {
    auto fd_grad = fd::gradient(
        [&](const std::vector<double>& x) {
          auto in = inputs;
          in[a] = x;
          return eval(in);
        },
        inputs[a]);
    const auto g = grads.wrt(ids[a]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double err = std::abs(g[i] - fd_grad[i]);
      EXPECT_TRUE(err <= 1e-8 || err <= 1e-5 * std::abs(fd_grad[i]))
          << name << " input " << a << " entry " << i << ": tape " << g[i] << " fd " << fd_grad[i];
    }
  }
}

}  // namespace

TEST(Tape, RecordsPrimalValues) {
  Recording rec;
  const auto a = rec.leaf({3.0});
  const auto b = rec.leaf({4.0});
  EXPECT_EQ(rec.scalar(rec.record(Op::mul, {a, b})), 12.0);
  EXPECT_EQ(rec.scalar(rec.max0sq(rec.constant(-1.0))), 0.0);
  EXPECT_EQ(rec.scalar(rec.max0sq(rec.constant(2.0))), 4.0);
}

TEST(Tape, DomainAndArityErrors) {
  Recording rec;
  const auto z = rec.constant(0.0);
  EXPECT_THROW(rec.log(z), std::domain_error);
  EXPECT_THROW(rec.sqrt(rec.constant(-1.0)), std::domain_error);
  EXPECT_THROW(rec.div(rec.constant(1.0), z), std::domain_error);
  EXPECT_THROW(rec.record(Op::mul, {z}), std::invalid_argument);
  EXPECT_THROW(rec.record(Op::exp, {z, z}), std::invalid_argument);
  EXPECT_THROW(rec.add(rec.constant({1.0, 2.0}), z), std::invalid_argument);
}

TEST(Tape, ForeignHandleRejected) {
  Recording a, b;
  const auto x = a.leaf({1.0});
  EXPECT_THROW(b.value(x), std::invalid_argument);
  EXPECT_THROW(backward(b, x), std::invalid_argument);
}

TEST(Tape, SeedMustBeScalar) {
  Recording rec;
  const auto x = rec.leaf({1.0, 2.0});
  EXPECT_THROW(backward(rec, x), std::invalid_argument);
}

TEST(Tape, HandExamples) {
  {
    Recording rec;
    const auto x = rec.leaf({3.0});
    EXPECT_DOUBLE_EQ(backward(rec, rec.square(x)).wrt(x)[0], 6.0);
  }
  {
    Recording rec;
    const auto u = rec.leaf({2.0});
    const auto v = rec.leaf({5.0});
    const auto g = backward(rec, rec.mul(u, v));
    EXPECT_DOUBLE_EQ(g.wrt(u)[0], 5.0);
    EXPECT_DOUBLE_EQ(g.wrt(v)[0], 2.0);
  }
  {
    Recording rec;
    const auto u = rec.leaf({2.0});
    EXPECT_DOUBLE_EQ(backward(rec, rec.max0sq(u)).wrt(u)[0], 4.0);
  }
  {
    Recording rec;
    const std::vector<double> uv{0.3, -1.2, 0.7};
    const auto u = rec.leaf(uv);
    const auto g = backward(rec, rec.dot(u, u)).wrt(u);
    for (std::size_t i = 0; i < uv.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * uv[i]);
  }
}

TEST(Tape, LogSumExpGradientIsSoftmax) {
  Recording rec;
  const auto u = rec.leaf({0.0, 1.0});
  const auto lse = rec.log(rec.sum(rec.exp(u)));
  const auto g = backward(rec, lse).wrt(u);
  const auto fd_grad = fd::gradient(
      [](const std::vector<double>& x) { return std::log(std::exp(x[0]) + std::exp(x[1])); }, {0.0, 1.0});
  EXPECT_NEAR(g[0], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(g[1], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(g[0], fd_grad[0], 1e-9);
  EXPECT_NEAR(g[1], fd_grad[1], 1e-9);
}

TEST(Tape, AffineIdentity) {
  Recording rec;
  const auto w = rec.constant({1.0, 0.0, 0.0, 1.0});
  const auto v = rec.leaf({0.4, -2.5});
  const auto b = rec.constant({0.0, 0.0});
  const auto out = rec.affine(w, v, b, 2);
  EXPECT_EQ(rec.value(out)[0], 0.4);
  EXPECT_EQ(rec.value(out)[1], -2.5);
}

TEST(Tape, UnusedLeafHasZeroAdjoint) {
  Recording rec;
  const auto x = rec.leaf({1.0});
  const auto unused = rec.leaf({1.0, 2.0, 3.0});
  const auto g = backward(rec, rec.exp(x));
  EXPECT_EQ(g.wrt(unused), std::vector<double>(3, 0.0));
}

TEST(Tape, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = uniform(rng, 6), b = uniform(rng, 6);
    auto pos = uniform(rng, 6, 0.2, 2.0);
    auto nonzero = uniform(rng, 6, 0.5, 2.0);
    check_primitive("add", {a, b}, [](Recording& r, auto& i) { return r.add(i[0], i[1]); }, rng);
    check_primitive("sub", {a, b}, [](Recording& r, auto& i) { return r.sub(i[0], i[1]); }, rng);
    check_primitive("mul", {a, b}, [](Recording& r, auto& i) { return r.mul(i[0], i[1]); }, rng);
    check_primitive("div", {a, nonzero}, [](Recording& r, auto& i) { return r.div(i[0], i[1]); }, rng);
    check_primitive("neg", {a}, [](Recording& r, auto& i) { return r.neg(i[0]); }, rng);
    check_primitive("scale", {a}, [](Recording& r, auto& i) { return r.scale(i[0], -1.7); }, rng);
    check_primitive("shift", {a}, [](Recording& r, auto& i) { return r.shift(i[0], 0.3); }, rng);
    check_primitive("exp", {a}, [](Recording& r, auto& i) { return r.exp(i[0]); }, rng);
    check_primitive("log", {pos}, [](Recording& r, auto& i) { return r.log(i[0]); }, rng);
    check_primitive("square", {a}, [](Recording& r, auto& i) { return r.square(i[0]); }, rng);
    check_primitive("sqrt", {pos}, [](Recording& r, auto& i) { return r.sqrt(i[0]); }, rng);
    check_primitive("max0sq", {a}, [](Recording& r, auto& i) { return r.max0sq(i[0]); }, rng);
    check_primitive("sum", {a}, [](Recording& r, auto& i) { return r.sum(i[0]); }, rng);
    check_primitive("dot", {a, b}, [](Recording& r, auto& i) { return r.dot(i[0], i[1]); }, rng);
    check_primitive("affine", {uniform(rng, 6), uniform(rng, 3), uniform(rng, 2)},
                    [](Recording& r, auto& i) { return r.affine(i[0], i[1], i[2], 3); }, rng);
    check_primitive("row_sum", {a}, [](Recording& r, auto& i) { return r.row_sum(i[0], 2); }, rng);
    check_primitive("row_dot", {a, b}, [](Recording& r, auto& i) { return r.row_dot(i[0], i[1], 3); }, rng);
    check_primitive("row_scale", {a, uniform(rng, 3)},
                    [](Recording& r, auto& i) { return r.row_scale(i[0], i[1], 2); }, rng);
    check_primitive("mean_rows", {a}, [](Recording& r, auto& i) { return r.mean_rows(i[0], 2); }, rng);
    check_primitive("broadcast_rows", {uniform(rng, 2)},
                    [](Recording& r, auto& i) { return r.broadcast_rows(i[0], 4); }, rng);
    check_primitive("slice", {a}, [](Recording& r, auto& i) { return r.slice(i[0], 1, 3); }, rng);
  }
}

TEST(Tape, CompositeExpressionMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto w = uniform(rng, 12), v = uniform(rng, 4), b = uniform(rng, 3);
  check_primitive(
      "mlp", {w, v, b},
      [](Recording& r, auto& i) {
        const auto h = r.max0sq(r.affine(i[0], i[1], i[2], 4));
        return r.log(r.shift(r.sum(r.square(h)), 1.0));
      },
      rng);
}

TEST(Tape, AdjointsAreLinearInTheSeed) {
  Recording rec;
  const auto x = rec.leaf({0.3, -0.8, 1.1});
  const auto f = rec.sum(rec.exp(x));
  const auto g = rec.dot(x, rec.square(x));
  const auto fg = rec.add(f, g);
  const auto df = backward(rec, f).wrt(x);
  const auto dg = backward(rec, g).wrt(x);
  const auto dfg = backward(rec, fg).wrt(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(dfg[i], df[i] + dg[i], 1e-14);
}

TEST(Tape, BackwardIsDeterministic) {
  Recording rec;
  std::mt19937_64 rng(3);
  const auto x = rec.leaf(uniform(rng, 50));
  const auto y = rec.sum(rec.mul(rec.exp(x), rec.max0sq(x)));
  EXPECT_EQ(backward(rec, y).wrt(x), backward(rec, y).wrt(x));
}
