#pragma once

// Flat-tape reverse-mode differentiation over vector-valued nodes.
//
// Nodes are recorded in creation order, which is also a valid topological
// order, so backward() is a single reverse sweep. Spatial derivatives of the
// value network and the KDE score enter as Composite nodes that carry their
// own hand-written adjoints.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mfcscore::tape {

enum class Op {
  leaf,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  shift,
  exp,
  log,
  square,
  sqrt,
  max0sq,
  sum,
  dot,
  affine,
  row_sum,
  row_dot,
  row_scale,
  mean_rows,
  broadcast_rows,
  slice,
  composite,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::max0sq: return "max0sq";
    case Op::sum: return "sum";
    case Op::dot: return "dot";
    case Op::affine: return "affine";
    case Op::row_sum: return "row_sum";
    case Op::row_dot: return "row_dot";
    case Op::row_scale: return "row_scale";
    case Op::mean_rows: return "mean_rows";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::slice: return "slice";
    case Op::composite: return "composite";
  }
  return "unknown";
}

/// Handle to a node of one Recording.
struct ExprId {
  std::uint64_t recording = 0;
  std::size_t index = 0;
};

/// Operation-specific attributes. `scalar` is the constant of scale/shift,
/// `cols` the row length of row-wise ops (or the column count of W in
/// affine), `offset`/`length` the window of a slice, `rows` the replication
/// count of broadcast_rows.
struct Attr {
  double scalar = 0.0;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// A primitive with a hand-written vector-Jacobian product.
class Composite {
 public:
  virtual ~Composite() = default;
  virtual std::string_view name() const = 0;
  // Adds the contribution of `output_adjoint` to each entry of
  // `input_adjoints`. Spans are parallel to the node's inputs.
  virtual void backward(std::span<const std::span<const double>> inputs,
                        std::span<const double> output,
                        std::span<const double> output_adjoint,
                        std::span<const std::span<double>> input_adjoints) const = 0;
};

struct Node {
  Op op = Op::constant;
  std::vector<std::size_t> inputs;
  std::vector<double> value;
  Attr attr;
  std::shared_ptr<const Composite> composite;
};

namespace detail {
inline std::uint64_t next_recording_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

inline std::size_t expected_arity(Op op) {
  switch (op) {
    case Op::leaf:
    case Op::constant: return 0;
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div:
    case Op::dot:
    case Op::row_dot:
    case Op::row_scale: return 2;
    case Op::affine: return 3;
    case Op::composite: return static_cast<std::size_t>(-1);
    default: return 1;
  }
}
}  // namespace detail

class Gradients;

class Recording {
 public:
  Recording() : id_(detail::next_recording_id()) {}

  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;
  Recording(Recording&&) noexcept = default;
  Recording& operator=(Recording&&) noexcept = default;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(ExprId e) const { return nodes_[check(e)]; }
  std::span<const double> value(ExprId e) const { return nodes_[check(e)].value; }
  double scalar(ExprId e) const {
    const auto& v = nodes_[check(e)].value;
    if (v.size() != 1) throw std::invalid_argument("tape: node is not scalar");
    return v[0];
  }
  const std::vector<std::size_t>& leaves() const { return leaves_; }

  /// Records a parameter (differentiable leaf).
  ExprId leaf(std::vector<double> values) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(values);
    require_finite(n.value, Op::leaf);
    leaves_.push_back(nodes_.size());
    return push(std::move(n));
  }

  ExprId constant(std::vector<double> values) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(values);
    require_finite(n.value, Op::constant);
    return push(std::move(n));
  }
  ExprId constant(double v) { return constant(std::vector<double>{v}); }

  /// Records `op` applied to `inputs` and evaluates its primal.
  ExprId record(Op op, std::span<const ExprId> inputs, const Attr& attr = {}) {
    if (op == Op::leaf || op == Op::constant) {
      throw std::invalid_argument("tape: use leaf()/constant() for inputs");
    }
    if (op == Op::composite) {
      throw std::invalid_argument("tape: use record_composite() for composites");
    }
    if (inputs.size() != detail::expected_arity(op)) {
      throw std::invalid_argument("tape: arity mismatch for " + std::string(op_name(op)));
    }
    Node n;
    n.op = op;
    n.attr = attr;
    n.inputs.reserve(inputs.size());
    for (const auto& e : inputs) n.inputs.push_back(check(e));
    n.value = evaluate(n);
    require_finite(n.value, op);
    return push(std::move(n));
  }
  ExprId record(Op op, std::initializer_list<ExprId> inputs, const Attr& attr = {}) {
    return record(op, std::span<const ExprId>(inputs.begin(), inputs.size()), attr);
  }

  /// Records a composite node whose primal was computed by the caller.
  ExprId record_composite(std::shared_ptr<const Composite> op, std::span<const ExprId> inputs,
                          std::vector<double> primal) {
    if (!op) throw std::invalid_argument("tape: null composite");
    Node n;
    n.op = Op::composite;
    n.composite = std::move(op);
    for (const auto& e : inputs) n.inputs.push_back(check(e));
    n.value = std::move(primal);
    require_finite(n.value, Op::composite);
    return push(std::move(n));
  }

  ExprId add(ExprId a, ExprId b) { return record(Op::add, {a, b}); }
  ExprId sub(ExprId a, ExprId b) { return record(Op::sub, {a, b}); }
  ExprId mul(ExprId a, ExprId b) { return record(Op::mul, {a, b}); }
  ExprId div(ExprId a, ExprId b) { return record(Op::div, {a, b}); }
  ExprId neg(ExprId a) { return record(Op::neg, {a}); }
  ExprId scale(ExprId a, double c) { return record(Op::scale, {a}, Attr{.scalar = c}); }
  ExprId shift(ExprId a, double c) { return record(Op::shift, {a}, Attr{.scalar = c}); }
  ExprId exp(ExprId a) { return record(Op::exp, {a}); }
  ExprId log(ExprId a) { return record(Op::log, {a}); }
  ExprId square(ExprId a) { return record(Op::square, {a}); }
  ExprId sqrt(ExprId a) { return record(Op::sqrt, {a}); }
  ExprId max0sq(ExprId a) { return record(Op::max0sq, {a}); }
  ExprId sum(ExprId a) { return record(Op::sum, {a}); }
  ExprId dot(ExprId a, ExprId b) { return record(Op::dot, {a, b}); }
  /// W (rows x cols, row-major) times v plus b.
  ExprId affine(ExprId w, ExprId v, ExprId b, std::size_t cols) {
    return record(Op::affine, {w, v, b}, Attr{.cols = cols});
  }
  ExprId row_sum(ExprId a, std::size_t cols) { return record(Op::row_sum, {a}, Attr{.cols = cols}); }
  ExprId row_dot(ExprId a, ExprId b, std::size_t cols) {
    return record(Op::row_dot, {a, b}, Attr{.cols = cols});
  }
  /// Multiplies row r of `a` by s[r].
  ExprId row_scale(ExprId a, ExprId s, std::size_t cols) {
    return record(Op::row_scale, {a, s}, Attr{.cols = cols});
  }
  ExprId mean_rows(ExprId a, std::size_t cols) {
    return record(Op::mean_rows, {a}, Attr{.cols = cols});
  }
  ExprId broadcast_rows(ExprId v, std::size_t rows) {
    return record(Op::broadcast_rows, {v}, Attr{.rows = rows});
  }
  ExprId slice(ExprId a, std::size_t offset, std::size_t length) {
    return record(Op::slice, {a}, Attr{.offset = offset, .length = length});
  }

  /// Node index of `e`; throws if `e` was issued by another recording.
  std::size_t check(ExprId e) const {
    if (e.recording != id_ || e.index >= nodes_.size()) {
      throw std::invalid_argument("tape: expression does not belong to this recording");
    }
    return e.index;
  }

 private:
  ExprId push(Node n) {
    nodes_.push_back(std::move(n));
    return ExprId{id_, nodes_.size() - 1};
  }

  static void require_finite(const std::vector<double>& v, Op op) {
    for (double x : v) {
      if (!std::isfinite(x)) {
        throw std::domain_error("tape: non-finite primal in " + std::string(op_name(op)));
      }
    }
  }

  static void same_size(const std::vector<double>& a, const std::vector<double>& b, Op op) {
    if (a.size() != b.size()) {
      throw std::invalid_argument("tape: size mismatch in " + std::string(op_name(op)));
    }
  }

  static void rows_of(const std::vector<double>& a, std::size_t cols, Op op) {
    if (cols == 0 || a.size() % cols != 0) {
      throw std::invalid_argument("tape: bad row length in " + std::string(op_name(op)));
    }
  }

  std::vector<double> evaluate(const Node& n) const {
    const auto& a = nodes_[n.inputs[0]].value;
    std::vector<double> out;
    switch (n.op) {
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::div: {
        const auto& b = nodes_[n.inputs[1]].value;
        same_size(a, b, n.op);
        out.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
          switch (n.op) {
            case Op::add: out[i] = a[i] + b[i]; break;
            case Op::sub: out[i] = a[i] - b[i]; break;
            case Op::mul: out[i] = a[i] * b[i]; break;
            default:
              if (b[i] == 0.0) throw std::domain_error("tape: division by zero");
              out[i] = a[i] / b[i];
          }
        }
        return out;
      }
      case Op::neg:
      case Op::scale:
      case Op::shift:
      case Op::exp:
      case Op::log:
      case Op::square:
      case Op::sqrt:
      case Op::max0sq: {
        out.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double u = a[i];
          switch (n.op) {
            case Op::neg: out[i] = -u; break;
            case Op::scale: out[i] = n.attr.scalar * u; break;
            case Op::shift: out[i] = u + n.attr.scalar; break;
            case Op::exp: out[i] = std::exp(u); break;
            case Op::log:
              if (!(u > 0.0)) throw std::domain_error("tape: log of non-positive value");
              out[i] = std::log(u);
              break;
            case Op::square: out[i] = u * u; break;
            case Op::sqrt:
              if (u < 0.0) throw std::domain_error("tape: sqrt of negative value");
              out[i] = std::sqrt(u);
              break;
            default: {
              const double r = u > 0.0 ? u : 0.0;
              out[i] = r * r;
            }
          }
        }
        return out;
      }
      case Op::sum: {
        double s = 0.0;
        for (double u : a) s += u;
        return {s};
      }
      case Op::dot: {
        const auto& b = nodes_[n.inputs[1]].value;
        same_size(a, b, n.op);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return {s};
      }
      case Op::affine: {
        const auto& v = nodes_[n.inputs[1]].value;
        const auto& b = nodes_[n.inputs[2]].value;
        const std::size_t cols = n.attr.cols;
        if (cols == 0 || v.size() != cols || a.size() != b.size() * cols) {
          throw std::invalid_argument("tape: shape mismatch in affine");
        }
        out = b;
        for (std::size_t r = 0; r < b.size(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c] * v[c];
          out[r] += s;
        }
        return out;
      }
      case Op::row_sum: {
        rows_of(a, n.attr.cols, n.op);
        const std::size_t cols = n.attr.cols;
        out.assign(a.size() / cols, 0.0);
        for (std::size_t r = 0; r < out.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) out[r] += a[r * cols + c];
        }
        return out;
      }
      case Op::row_dot: {
        const auto& b = nodes_[n.inputs[1]].value;
        same_size(a, b, n.op);
        rows_of(a, n.attr.cols, n.op);
        const std::size_t cols = n.attr.cols;
        out.assign(a.size() / cols, 0.0);
        for (std::size_t r = 0; r < out.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) out[r] += a[r * cols + c] * b[r * cols + c];
        }
        return out;
      }
      case Op::row_scale: {
        const auto& s = nodes_[n.inputs[1]].value;
        rows_of(a, n.attr.cols, n.op);
        const std::size_t cols = n.attr.cols;
        if (s.size() * cols != a.size()) {
          throw std::invalid_argument("tape: shape mismatch in row_scale");
        }
        out.resize(a.size());
        for (std::size_t r = 0; r < s.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] * s[r];
        }
        return out;
      }
      case Op::mean_rows: {
        rows_of(a, n.attr.cols, n.op);
        const std::size_t cols = n.attr.cols;
        const std::size_t rows = a.size() / cols;
        if (rows == 0) throw std::invalid_argument("tape: mean of zero rows");
        out.assign(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) out[c] += a[r * cols + c];
        }
        for (double& u : out) u /= static_cast<double>(rows);
        return out;
      }
      case Op::broadcast_rows: {
        const std::size_t rows = n.attr.rows;
        out.resize(rows * a.size());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < a.size(); ++c) out[r * a.size() + c] = a[c];
        }
        return out;
      }
      case Op::slice: {
        if (n.attr.offset + n.attr.length > a.size()) {
          throw std::invalid_argument("tape: slice out of range");
        }
        const auto first = a.begin() + static_cast<std::ptrdiff_t>(n.attr.offset);
        return {first, first + static_cast<std::ptrdiff_t>(n.attr.length)};
      }
      default: throw std::logic_error("tape: unexpected op in evaluate");
    }
  }

  friend class Gradients;
  friend Gradients backward(const Recording& rec, ExprId seed);

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> leaves_;
};

/// Adjoints produced by one backward sweep.
class Gradients {
 public:
  /// d(seed)/d(e); zeros when `e` does not influence the seed.
  std::vector<double> wrt(ExprId e) const {
    const std::size_t i = rec_->check(e);
    if (adjoints_[i].empty()) return std::vector<double>(rec_->nodes_[i].value.size(), 0.0);
    return adjoints_[i];
  }

 private:
  friend Gradients backward(const Recording& rec, ExprId seed);
  const Recording* rec_ = nullptr;
  std::vector<std::vector<double>> adjoints_;
};

/// Reverse sweep from a scalar seed.
inline Gradients backward(const Recording& rec, ExprId seed) {
  const std::size_t s = rec.check(seed);
  const auto& nodes = rec.nodes_;
  if (nodes[s].value.size() != 1) throw std::invalid_argument("tape: seed must be scalar");

  Gradients g;
  g.rec_ = &rec;
  g.adjoints_.resize(nodes.size());
  auto& adj = g.adjoints_;
  adj[s] = {1.0};

  auto grad_of = [&](std::size_t i) -> std::vector<double>& {
    if (adj[i].empty()) adj[i].assign(nodes[i].value.size(), 0.0);
    return adj[i];
  };

  for (std::size_t k = s + 1; k-- > 0;) {
    if (adj[k].empty()) continue;
    const Node& n = nodes[k];
    const std::vector<double>& gout = adj[k];
    const std::vector<double>& out = n.value;
    switch (n.op) {
      case Op::leaf:
      case Op::constant: break;
      case Op::add:
      case Op::sub: {
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
        auto& gb = grad_of(n.inputs[1]);
        const double sign = n.op == Op::add ? 1.0 : -1.0;
        for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += sign * gout[i];
        break;
      }
      case Op::mul: {
        const auto& a = nodes[n.inputs[0]].value;
        const auto& b = nodes[n.inputs[1]].value;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * b[i];
        auto& gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * a[i];
        break;
      }
      case Op::div: {
        const auto& b = nodes[n.inputs[1]].value;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] / b[i];
        auto& gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < gout.size(); ++i) gb[i] -= gout[i] * out[i] / b[i];
        break;
      }
      case Op::neg:
      case Op::scale:
      case Op::shift:
      case Op::exp:
      case Op::log:
      case Op::square:
      case Op::sqrt:
      case Op::max0sq: {
        const auto& a = nodes[n.inputs[0]].value;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::neg: d = -1.0; break;
            case Op::scale: d = n.attr.scalar; break;
            case Op::shift: d = 1.0; break;
            case Op::exp: d = out[i]; break;
            case Op::log: d = 1.0 / a[i]; break;
            case Op::square: d = 2.0 * a[i]; break;
            case Op::sqrt: d = 0.5 / out[i]; break;
            default: d = a[i] > 0.0 ? 2.0 * a[i] : 0.0;
          }
          ga[i] += gout[i] * d;
        }
        break;
      }
      case Op::sum: {
        auto& ga = grad_of(n.inputs[0]);
        for (double& u : ga) u += gout[0];
        break;
      }
      case Op::dot: {
        const auto& a = nodes[n.inputs[0]].value;
        const auto& b = nodes[n.inputs[1]].value;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += gout[0] * b[i];
        auto& gb = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < a.size(); ++i) gb[i] += gout[0] * a[i];
        break;
      }
      case Op::affine: {
        const auto& w = nodes[n.inputs[0]].value;
        const auto& v = nodes[n.inputs[1]].value;
        const std::size_t cols = n.attr.cols;
        auto& gw = grad_of(n.inputs[0]);
        auto& gv = grad_of(n.inputs[1]);
        auto& gb = grad_of(n.inputs[2]);
        for (std::size_t r = 0; r < gout.size(); ++r) {
          gb[r] += gout[r];
          for (std::size_t c = 0; c < cols; ++c) {
            gw[r * cols + c] += gout[r] * v[c];
            gv[c] += gout[r] * w[r * cols + c];
          }
        }
        break;
      }
      case Op::row_sum: {
        const std::size_t cols = n.attr.cols;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < gout.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += gout[r];
        }
        break;
      }
      case Op::row_dot: {
        const auto& a = nodes[n.inputs[0]].value;
        const auto& b = nodes[n.inputs[1]].value;
        const std::size_t cols = n.attr.cols;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < gout.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += gout[r] * b[r * cols + c];
        }
        auto& gb = grad_of(n.inputs[1]);
        for (std::size_t r = 0; r < gout.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) gb[r * cols + c] += gout[r] * a[r * cols + c];
        }
        break;
      }
      case Op::row_scale: {
        const auto& a = nodes[n.inputs[0]].value;
        const auto& sc = nodes[n.inputs[1]].value;
        const std::size_t cols = n.attr.cols;
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < sc.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += gout[r * cols + c] * sc[r];
        }
        auto& gs = grad_of(n.inputs[1]);
        for (std::size_t r = 0; r < sc.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) gs[r] += gout[r * cols + c] * a[r * cols + c];
        }
        break;
      }
      case Op::mean_rows: {
        const std::size_t cols = n.attr.cols;
        auto& ga = grad_of(n.inputs[0]);
        const std::size_t rows = ga.size() / cols;
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += gout[c] * inv;
        }
        break;
      }
      case Op::broadcast_rows: {
        auto& ga = grad_of(n.inputs[0]);
        const std::size_t cols = ga.size();
        for (std::size_t r = 0; r < n.attr.rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[c] += gout[r * cols + c];
        }
        break;
      }
      case Op::slice: {
        auto& ga = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[n.attr.offset + i] += gout[i];
        break;
      }
      case Op::composite: {
        std::vector<std::span<const double>> in;
        std::vector<std::span<double>> gin;
        in.reserve(n.inputs.size());
        gin.reserve(n.inputs.size());
        for (std::size_t i : n.inputs) grad_of(i);
        for (std::size_t i : n.inputs) {
          in.emplace_back(nodes[i].value);
          gin.emplace_back(adj[i]);
        }
        n.composite->backward(in, out, gout, gin);
        break;
      }
    }
  }
  return g;
}

}  // namespace mfcscore::tape
