#pragma once

// Scalar Riccati equation of the systemic-risk model,
//   d eta / dt = 2 (a + q) eta + eta^2 + q^2 - eps,   eta(T) = c,
// integrated backward from T with classical RK4 on a uniform grid.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace mfcscore {

/// Values on the uniform grid t_i = i * T / steps, i = 0..steps, with linear
/// interpolation in between.
struct UniformTable {
  double horizon = 0.0;
  std::vector<double> values;

  std::size_t steps() const { return values.size() - 1; }
  double step() const { return horizon / static_cast<double>(steps()); }
  double time(std::size_t i) const {
    return horizon * static_cast<double>(i) / static_cast<double>(steps());
  }

  double at(double t) const {
    if (t <= 0.0) return values.front();
    if (t >= horizon) return values.back();
    const double s = t / step();
    auto i = static_cast<std::size_t>(s);
    if (i >= steps()) i = steps() - 1;
    const double w = s - static_cast<double>(i);
    return (1.0 - w) * values[i] + w * values[i + 1];
  }
};

struct RiccatiCoefficients {
  double a = 0.1;
  double q = 0.5;
  double eps = 0.1;
  double c = 1.0;

  double rhs(double eta) const { return 2.0 * (a + q) * eta + eta * eta + q * q - eps; }
};

inline UniformTable solve_riccati(const RiccatiCoefficients& k, double horizon,
                                  std::size_t steps = 10000) {
  if (steps < 100) throw std::invalid_argument("riccati: need at least 100 steps");
  if (!(horizon > 0.0)) throw std::invalid_argument("riccati: horizon must be positive");
  UniformTable table{horizon, std::vector<double>(steps + 1)};
  const double h = -horizon / static_cast<double>(steps);
  double eta = k.c;
  table.values[steps] = eta;
  for (std::size_t i = steps; i-- > 0;) {
    const double k1 = k.rhs(eta);
    const double k2 = k.rhs(eta + 0.5 * h * k1);
    const double k3 = k.rhs(eta + 0.5 * h * k2);
    const double k4 = k.rhs(eta + h * k3);
    eta += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!std::isfinite(eta) || std::abs(eta) > 1e6) {
      throw std::runtime_error("riccati: solution blows up, no solution on [0, T]");
    }
    table.values[i] = eta;
  }
  return table;
}

/// chi(t) = -(sigma^2 / 2) int_t^T eta(s) ds by the composite trapezoid rule
/// on the eta grid.
inline UniformTable chi_table(const UniformTable& eta, double sigma) {
  UniformTable chi{eta.horizon, std::vector<double>(eta.values.size(), 0.0)};
  const double h = eta.step();
  double integral = 0.0;
  for (std::size_t i = eta.steps(); i-- > 0;) {
    integral += 0.5 * h * (eta.values[i] + eta.values[i + 1]);
    chi.values[i] = -0.5 * sigma * sigma * integral;
  }
  return chi;
}

/// Forward RK4 for y' = f(t, y) on the grid of `like`, starting at y(0) = y0.
inline UniformTable integrate_forward(const UniformTable& like, double y0,
                                      const std::function<double(double, double)>& f) {
  UniformTable out{like.horizon, std::vector<double>(like.values.size())};
  const double h = like.step();
  double y = y0;
  out.values[0] = y;
  for (std::size_t i = 0; i < like.steps(); ++i) {
    const double t = like.time(i);
    const double k1 = f(t, y);
    const double k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
    const double k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
    const double k4 = f(t + h, y + h * k3);
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    out.values[i + 1] = y;
  }
  return out;
}

}  // namespace mfcscore
