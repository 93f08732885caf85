#pragma once

// Value network phi_N(t, x): two hidden layers with squared-ReLU activation,
// its closed-form spatial gradient and Laplacian, and the hard terminal
// wrapper ((T - t)/T) N(t, x) - (t/T) V(x).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfcscore/tape.hpp"

namespace mfcscore {

struct NetConfig {
  std::size_t dim = 1;
  std::size_t width = 30;
  std::size_t depth = 2;
  double horizon = 1.0;

  void validate() const {
    if (dim < 1) throw std::invalid_argument("net: dim must be >= 1");
    if (width < 1) throw std::invalid_argument("net: width must be >= 1");
    if (depth != 2) throw std::invalid_argument("net: only depth 2 is supported");
    if (!(horizon > 0.0)) throw std::invalid_argument("net: horizon must be positive");
  }

  bool operator==(const NetConfig&) const = default;
};

/// Weights and biases stored contiguously: W1 (width x (dim+1), row-major,
/// column 0 multiplies t), b1, W2 (width x width), b2, w3, b3.
class NetParams {
 public:
  NetParams() = default;
  explicit NetParams(const NetConfig& config) : config_(config) {
    config_.validate();
    values_.assign(count(config_), 0.0);
  }

  static std::size_t count(const NetConfig& c) {
    const std::size_t m = c.width;
    return m * (c.dim + 1) + m + m * m + m + m + 1;
  }

  const NetConfig& config() const { return config_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }
  const std::vector<double>& vector() const { return values_; }

  std::span<double> W1() { return block(0, w() * (d() + 1)); }
  std::span<double> b1() { return block(off_b1(), w()); }
  std::span<double> W2() { return block(off_W2(), w() * w()); }
  std::span<double> b2() { return block(off_b2(), w()); }
  std::span<double> w3() { return block(off_w3(), w()); }
  double& b3() { return values_[off_b3()]; }
  std::span<const double> W1() const { return cblock(0, w() * (d() + 1)); }
  std::span<const double> b1() const { return cblock(off_b1(), w()); }
  std::span<const double> W2() const { return cblock(off_W2(), w() * w()); }
  std::span<const double> b2() const { return cblock(off_b2(), w()); }
  std::span<const double> w3() const { return cblock(off_w3(), w()); }
  double b3() const { return values_[off_b3()]; }

  std::size_t off_b1() const { return w() * (d() + 1); }
  std::size_t off_W2() const { return off_b1() + w(); }
  std::size_t off_b2() const { return off_W2() + w() * w(); }
  std::size_t off_w3() const { return off_b2() + w(); }
  std::size_t off_b3() const { return off_w3() + w(); }

  bool operator==(const NetParams&) const = default;

 private:
  std::size_t w() const { return config_.width; }
  std::size_t d() const { return config_.dim; }
  std::span<double> block(std::size_t off, std::size_t n) { return {values_.data() + off, n}; }
  std::span<const double> cblock(std::size_t off, std::size_t n) const {
    return {values_.data() + off, n};
  }

  NetConfig config_;
  std::vector<double> values_;
};

/// V(x) = curvature |x|^2 / 2 + offset. Both hard-terminal benchmarks use
/// this form.
struct QuadraticTerminal {
  double curvature = 1.0;
  double offset = 0.0;

  template <class Range>
  double value(const Range& x) const {
    double r2 = 0.0;
    for (double v : x) r2 += v * v;
    return 0.5 * curvature * r2 + offset;
  }
};

enum class TerminalMode { hard, soft };

struct TerminalWrapper {
  TerminalMode mode = TerminalMode::soft;
  std::optional<QuadraticTerminal> terminal;
  double horizon = 1.0;

  static TerminalWrapper hard(QuadraticTerminal v, double horizon) {
    return {TerminalMode::hard, v, horizon};
  }
  static TerminalWrapper soft(double horizon) { return {TerminalMode::soft, std::nullopt, horizon}; }

  void validate() const {
    if (mode == TerminalMode::hard && !terminal) {
      throw std::invalid_argument("net: hard terminal mode requires V");
    }
    if (!(horizon > 0.0)) throw std::invalid_argument("net: horizon must be positive");
  }
  // Weights (a, b) in phi = a N - b V.
  double net_weight(double t) const {
    return mode == TerminalMode::hard ? (horizon - t) / horizon : 1.0;
  }
  double terminal_weight(double t) const {
    return mode == TerminalMode::hard ? t / horizon : 0.0;
  }
};

struct Jet {
  double value = 0.0;
  std::vector<double> grad;
  double laplacian = 0.0;
};

namespace detail {

inline double relu(double u) { return u > 0.0 ? u : 0.0; }

// Intermediates of one forward pass through the two layers plus everything
// the closed-form derivatives need.
struct NetWorkspace {
  std::size_t d = 0, m = 0;
  std::vector<double> u0;              // [t; x]
  std::vector<double> a1, h1, s1, r1;  // pre-activation, sigma, sigma', sigma''
  std::vector<double> a2, h2, s2, r2;
  std::vector<double> v2;  // s2 .* w3
  std::vector<double> c;   // W2^T v2
  std::vector<double> v1;  // s1 .* c
  std::vector<double> G;   // W2 diag(s1) A, m x d
  std::vector<double> n;   // row norms of A squared
  double raw = 0.0;
  std::vector<double> raw_grad;
  double raw_lap = 0.0;

  // Backward buffers.
  std::vector<double> dG, dA, ds1, dc, dv1, dv2, ds2, dh2, da2, dh1, da1;

  void resize(std::size_t dim, std::size_t width) {
    if (d == dim && m == width) return;
    d = dim;
    m = width;
    u0.assign(d + 1, 0.0);
    for (auto* v : {&a1, &h1, &s1, &r1, &a2, &h2, &s2, &r2, &v2, &c, &v1, &n, &ds1, &dc, &dv1,
                    &dv2, &ds2, &dh2, &da2, &dh1, &da1}) {
      v->assign(m, 0.0);
    }
    G.assign(m * d, 0.0);
    dG.assign(m * d, 0.0);
    dA.assign(m * d, 0.0);
    raw_grad.assign(d, 0.0);
  }
};

// Evaluates N, and when `derivatives` is set also grad_x N and Lap_x N.
inline void net_forward(const NetParams& p, double t, std::span<const double> x, NetWorkspace& ws,
                        bool derivatives) {
  const std::size_t d = p.config().dim, m = p.config().width;
  if (x.size() != d) throw std::invalid_argument("net: state dimension mismatch");
  ws.resize(d, m);
  const auto W1 = p.W1();
  const auto b1 = p.b1();
  const auto W2 = p.W2();
  const auto b2 = p.b2();
  const auto w3 = p.w3();
  const std::size_t in = d + 1;

  ws.u0[0] = t;
  for (std::size_t k = 0; k < d; ++k) ws.u0[k + 1] = x[k];

  for (std::size_t j = 0; j < m; ++j) {
    double a = b1[j];
    for (std::size_t k = 0; k < in; ++k) a += W1[j * in + k] * ws.u0[k];
    const double r = relu(a);
    ws.a1[j] = a;
    ws.h1[j] = r * r;
    ws.s1[j] = 2.0 * r;
    ws.r1[j] = a > 0.0 ? 2.0 : 0.0;
  }
  double out = p.b3();
  for (std::size_t i = 0; i < m; ++i) {
    double a = b2[i];
    for (std::size_t j = 0; j < m; ++j) a += W2[i * m + j] * ws.h1[j];
    const double r = relu(a);
    ws.a2[i] = a;
    ws.h2[i] = r * r;
    ws.s2[i] = 2.0 * r;
    ws.r2[i] = a > 0.0 ? 2.0 : 0.0;
    out += w3[i] * ws.h2[i];
  }
  ws.raw = out;
  if (!derivatives) return;

  for (std::size_t i = 0; i < m; ++i) ws.v2[i] = ws.s2[i] * w3[i];
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += W2[i * m + j] * ws.v2[i];
    ws.c[j] = s;
    ws.v1[j] = ws.s1[j] * s;
  }
  // grad = A^T v1 with A the x-columns of W1.
  for (std::size_t k = 0; k < d; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += W1[j * in + k + 1] * ws.v1[j];
    ws.raw_grad[k] = s;
  }
  // G = W2 diag(s1) A.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < d; ++k) ws.G[i * d + k] = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double wij = W2[i * m + j] * ws.s1[j];
      if (wij == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) ws.G[i * d + k] += wij * W1[j * in + k + 1];
    }
  }
  double lap = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (ws.r2[i] == 0.0) continue;
    double q = 0.0;
    for (std::size_t k = 0; k < d; ++k) q += ws.G[i * d + k] * ws.G[i * d + k];
    lap += w3[i] * ws.r2[i] * q;
  }
  for (std::size_t j = 0; j < m; ++j) {
    double nj = 0.0;
    for (std::size_t k = 0; k < d; ++k) nj += W1[j * in + k + 1] * W1[j * in + k + 1];
    ws.n[j] = nj;
    lap += ws.c[j] * ws.r1[j] * nj;
  }
  ws.raw_lap = lap;
}

// Vector-Jacobian product of (N, grad_x N, Lap_x N) at one point. Requires a
// preceding net_forward(..., derivatives = true) on the same workspace.
// Accumulates into dparams (flat layout) and dx.
inline void net_backward(const NetParams& p, NetWorkspace& ws, double g_value,
                         std::span<const double> g_grad, double g_lap, std::span<double> dparams,
                         std::span<double> dx) {
  const std::size_t d = ws.d, m = ws.m, in = d + 1;
  const auto W1 = p.W1();
  const auto W2 = p.W2();
  const auto w3 = p.w3();
  double* dW1 = dparams.data();
  double* db1 = dparams.data() + p.off_b1();
  double* dW2 = dparams.data() + p.off_W2();
  double* db2 = dparams.data() + p.off_b2();
  double* dw3 = dparams.data() + p.off_w3();
  double& db3 = dparams[p.off_b3()];

  std::fill(ws.dA.begin(), ws.dA.end(), 0.0);
  std::fill(ws.ds1.begin(), ws.ds1.end(), 0.0);
  std::fill(ws.dc.begin(), ws.dc.end(), 0.0);
  std::fill(ws.ds2.begin(), ws.ds2.end(), 0.0);

  if (g_lap != 0.0) {
    // First Laplacian term: sum_i w3_i r2_i |G_i|^2.
    for (std::size_t i = 0; i < m; ++i) {
      double q = 0.0;
      for (std::size_t k = 0; k < d; ++k) q += ws.G[i * d + k] * ws.G[i * d + k];
      dw3[i] += g_lap * ws.r2[i] * q;
      const double dq = g_lap * w3[i] * ws.r2[i];
      for (std::size_t k = 0; k < d; ++k) ws.dG[i * d + k] = 2.0 * ws.G[i * d + k] * dq;
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;  // sum_k dG_ik A_jk
        for (std::size_t k = 0; k < d; ++k) acc += ws.dG[i * d + k] * W1[j * in + k + 1];
        dW2[i * m + j] += acc * ws.s1[j];
        ws.ds1[j] += acc * W2[i * m + j];
        const double wij = W2[i * m + j] * ws.s1[j];
        for (std::size_t k = 0; k < d; ++k) ws.dA[j * d + k] += wij * ws.dG[i * d + k];
      }
    }
    // Second term: sum_j c_j r1_j |A_j|^2.
    for (std::size_t j = 0; j < m; ++j) {
      ws.dc[j] += g_lap * ws.r1[j] * ws.n[j];
      const double dn = g_lap * ws.c[j] * ws.r1[j];
      for (std::size_t k = 0; k < d; ++k) ws.dA[j * d + k] += 2.0 * W1[j * in + k + 1] * dn;
    }
  }

  bool has_grad = false;
  for (double g : g_grad) has_grad = has_grad || g != 0.0;
  if (has_grad) {
    for (std::size_t j = 0; j < m; ++j) {
      double dv1 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        ws.dA[j * d + k] += ws.v1[j] * g_grad[k];
        dv1 += W1[j * in + k + 1] * g_grad[k];
      }
      ws.ds1[j] += dv1 * ws.c[j];
      ws.dc[j] += dv1 * ws.s1[j];
    }
  }

  // c = W2^T v2, v2 = s2 .* w3.
  for (std::size_t i = 0; i < m; ++i) {
    double dv2 = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      dW2[i * m + j] += ws.v2[i] * ws.dc[j];
      dv2 += W2[i * m + j] * ws.dc[j];
    }
    ws.ds2[i] += dv2 * w3[i];
    dw3[i] += dv2 * ws.s2[i];
  }

  // Output layer.
  db3 += g_value;
  for (std::size_t i = 0; i < m; ++i) {
    dw3[i] += g_value * ws.h2[i];
    ws.da2[i] = g_value * w3[i] * ws.s2[i] + ws.ds2[i] * ws.r2[i];
  }
  for (std::size_t j = 0; j < m; ++j) ws.dh1[j] = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double da = ws.da2[i];
    db2[i] += da;
    if (da == 0.0) continue;
    for (std::size_t j = 0; j < m; ++j) {
      dW2[i * m + j] += da * ws.h1[j];
      ws.dh1[j] += W2[i * m + j] * da;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    const double da = ws.dh1[j] * ws.s1[j] + ws.ds1[j] * ws.r1[j];
    db1[j] += da;
    for (std::size_t k = 0; k < in; ++k) dW1[j * in + k] += da * ws.u0[k];
    for (std::size_t k = 0; k < d; ++k) {
      dW1[j * in + k + 1] += ws.dA[j * d + k];
      dx[k] += da * W1[j * in + k + 1];
    }
  }
}

}  // namespace detail

/// N(t, x) without the terminal wrapper.
inline double raw_eval(const NetParams& params, double t, std::span<const double> x) {
  detail::NetWorkspace ws;
  detail::net_forward(params, t, x, ws, false);
  return ws.raw;
}

/// Value, spatial gradient and Laplacian of the wrapped network.
inline Jet eval_jet(const NetParams& params, const TerminalWrapper& wrapper, double t,
                    std::span<const double> x) {
  wrapper.validate();
  detail::NetWorkspace ws;
  detail::net_forward(params, t, x, ws, true);
  const double a = wrapper.net_weight(t);
  const double b = wrapper.terminal_weight(t);
  Jet jet;
  jet.value = a * ws.raw;
  jet.grad.resize(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) jet.grad[k] = a * ws.raw_grad[k];
  jet.laplacian = a * ws.raw_lap;
  if (wrapper.mode == TerminalMode::hard) {
    const auto& V = *wrapper.terminal;
    jet.value -= b * V.value(x);
    for (std::size_t k = 0; k < x.size(); ++k) jet.grad[k] -= b * V.curvature * x[k];
    jet.laplacian -= b * V.curvature * static_cast<double>(x.size());
  }
  return jet;
}

inline double phi_eval(const NetParams& params, const TerminalWrapper& wrapper, double t,
                       std::span<const double> x) {
  wrapper.validate();
  const double raw = raw_eval(params, t, x);
  double v = wrapper.net_weight(t) * raw;
  if (wrapper.mode == TerminalMode::hard) v -= wrapper.terminal_weight(t) * wrapper.terminal->value(x);
  return v;
}

inline std::vector<double> phi_spatial_grad(const NetParams& params, const TerminalWrapper& wrapper,
                                            double t, std::span<const double> x) {
  return eval_jet(params, wrapper, t, x).grad;
}

inline double phi_spatial_laplacian(const NetParams& params, const TerminalWrapper& wrapper,
                                    double t, std::span<const double> x) {
  return eval_jet(params, wrapper, t, x).laplacian;
}

/// Uniform entries in +-gain / sqrt(fan_in) per layer, biases included.
/// gain = 1 is the PyTorch default for linear layers; gain = sqrt(6) is
/// He-uniform.
inline NetParams init_params(const NetConfig& config, std::uint64_t seed, double gain = 1.0) {
  if (!(gain > 0.0)) throw std::invalid_argument("net: init gain must be positive");
  NetParams p(config);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::span<double> block, std::size_t fan_in) {
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    for (double& v : block) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
      v = bound * (2.0 * u - 1.0);
    }
  };
  fill(p.W1(), config.dim + 1);
  fill(p.b1(), config.dim + 1);
  fill(p.W2(), config.width);
  fill(p.b2(), config.width);
  fill(p.w3(), config.width);
  fill({&p.b3(), 1}, config.width);
  return p;
}

// ---------------------------------------------------------------------------
// Tape integration.

/// Tape nodes of a batched jet: value (N), grad (N x d), laplacian (N).
struct JetExpr {
  tape::ExprId value;
  tape::ExprId grad;
  tape::ExprId laplacian;
};

namespace detail {

// Fused node: output layout [values (N) | grads (N*d) | laplacians (N)].
// Inputs: flat params, states (N x d).
class PhiJetOp final : public tape::Composite {
 public:
  PhiJetOp(NetConfig config, TerminalWrapper wrapper, double t)
      : config_(config), wrapper_(std::move(wrapper)), t_(t) {}

  std::string_view name() const override { return "phi_jet"; }

  std::vector<double> forward(std::span<const double> params, std::span<const double> xs) const {
    const NetParams p = view(params);
    const std::size_t d = config_.dim;
    const std::size_t n = xs.size() / d;
    std::vector<double> out(n * (d + 2));
    NetWorkspace ws;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = xs.subspan(i * d, d);
      net_forward(p, t_, x, ws, true);
      double value = a() * ws.raw;
      double lap = a() * ws.raw_lap;
      for (std::size_t k = 0; k < d; ++k) out[n + i * d + k] = a() * ws.raw_grad[k];
      if (wrapper_.mode == TerminalMode::hard) {
        const auto& V = *wrapper_.terminal;
        value -= b() * V.value(x);
        lap -= b() * V.curvature * static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) out[n + i * d + k] -= b() * V.curvature * x[k];
      }
      out[i] = value;
      out[n + n * d + i] = lap;
    }
    return out;
  }

  void backward(std::span<const std::span<const double>> inputs, std::span<const double> /*output*/,
                std::span<const double> g, std::span<const std::span<double>> gin) const override {
    const NetParams p = view(inputs[0]);
    const auto xs = inputs[1];
    const std::size_t d = config_.dim;
    const std::size_t n = xs.size() / d;
    NetWorkspace ws;
    std::vector<double> g_grad(d);
    for (std::size_t i = 0; i < n; ++i) {
      const double g_value = g[i];
      const double g_lap = g[n + n * d + i];
      bool any = g_value != 0.0 || g_lap != 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        g_grad[k] = g[n + i * d + k];
        any = any || g_grad[k] != 0.0;
      }
      if (!any) continue;
      const auto x = xs.subspan(i * d, d);
      auto dx = gin[1].subspan(i * d, d);
      if (wrapper_.mode == TerminalMode::hard) {
        const double kv = b() * wrapper_.terminal->curvature;
        for (std::size_t k = 0; k < d; ++k) dx[k] -= kv * (g_value * x[k] + g_grad[k]);
      }
      if (a() == 0.0) continue;
      net_forward(p, t_, x, ws, true);
      for (double& v : g_grad) v *= a();
      net_backward(p, ws, a() * g_value, g_grad, a() * g_lap, gin[0], dx);
    }
  }

 private:
  double a() const { return wrapper_.net_weight(t_); }
  double b() const { return wrapper_.terminal_weight(t_); }

  NetParams view(std::span<const double> flat) const {
    NetParams p(config_);
    if (flat.size() != p.size()) throw std::invalid_argument("net: parameter size mismatch");
    std::copy(flat.begin(), flat.end(), p.flat().begin());
    return p;
  }

  NetConfig config_;
  TerminalWrapper wrapper_;
  double t_;
};

}  // namespace detail

/// Records phi_N, grad_x phi_N and Lap_x phi_N for every row of `states`
/// (N x dim) as differentiable functions of `params` and `states`.
inline JetExpr record_jet(tape::Recording& rec, tape::ExprId params, tape::ExprId states,
                          const NetConfig& config, const TerminalWrapper& wrapper, double t) {
  wrapper.validate();
  const std::size_t d = config.dim;
  const auto xs = rec.value(states);
  if (xs.size() % d != 0) throw std::invalid_argument("net: states not a multiple of dim");
  const std::size_t n = xs.size() / d;
  auto op = std::make_shared<const detail::PhiJetOp>(config, wrapper, t);
  auto out = op->forward(rec.value(params), xs);
  const tape::ExprId inputs[] = {params, states};
  const auto fused = rec.record_composite(op, inputs, std::move(out));
  return {rec.slice(fused, 0, n), rec.slice(fused, n, n * d), rec.slice(fused, n + n * d, n)};
}

// ---------------------------------------------------------------------------
// Checkpoint format.

inline nlohmann::json to_json(const NetParams& p) {
  const auto& c = p.config();
  return {
      {"config", {{"dim", c.dim}, {"width", c.width}, {"depth", c.depth}, {"horizon", c.horizon}}},
      {"W1", std::vector<double>(p.W1().begin(), p.W1().end())},
      {"b1", std::vector<double>(p.b1().begin(), p.b1().end())},
      {"W2", std::vector<double>(p.W2().begin(), p.W2().end())},
      {"b2", std::vector<double>(p.b2().begin(), p.b2().end())},
      {"w3", std::vector<double>(p.w3().begin(), p.w3().end())},
      {"b3", p.b3()},
  };
}

inline NetParams net_params_from_json(const nlohmann::json& j) {
  NetConfig c;
  const auto& jc = j.at("config");
  c.dim = jc.at("dim").get<std::size_t>();
  c.width = jc.at("width").get<std::size_t>();
  c.depth = jc.at("depth").get<std::size_t>();
  c.horizon = jc.at("horizon").get<double>();
  NetParams p(c);
  auto copy = [&](const char* key, std::span<double> dst) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != dst.size()) throw std::invalid_argument(std::string("net: bad size for ") + key);
    std::copy(v.begin(), v.end(), dst.begin());
  };
  copy("W1", p.W1());
  copy("b1", p.b1());
  copy("W2", p.W2());
  copy("b2", p.b2());
  copy("w3", p.w3());
  p.b3() = j.at("b3").get<double>();
  return p;
}

}  // namespace mfcscore
