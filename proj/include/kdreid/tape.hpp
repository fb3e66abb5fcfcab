#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kdreid/errors.hpp"
#include "kdreid/tensor.hpp"

namespace kdreid {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;

  const Tensor& value() const;
  double scalar() const;
};

/// Reverse-mode computation tape.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// result and a single reverse sweep visits each node once. Parameter leaves
/// point at externally owned tensors; backward() overwrites their gradient
/// slots, which makes replaying the same tape idempotent.
class Tape {
 public:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> parents;
    std::function<void(Tape&, std::size_t)> backward;
    Tensor* parameter = nullptr;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) {
    value.require_finite("constant");
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to a trainable tensor. The tensor must outlive the tape.
  Var parameter(Tensor& param) {
    param.require_finite("parameter");
    Node n;
    n.op = "parameter";
    n.value = param;
    n.value.clear_grad();
    n.parameter = &param;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Appends a computed node. `backward(tape, self)` reads grad_of(self) and
  /// accumulates into the parents' gradients.
  Var record(std::string op, Tensor value, std::vector<Var> parents,
             std::function<void(Tape&, std::size_t)> backward) {
    value.require_finite(op);
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (const Var& p : parents) {
      own(p, n.op);
      n.parents.push_back(p.index);
      n.requires_grad = n.requires_grad || nodes_[p.index].requires_grad;
    }
    n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  const Tensor& value(Var v) const { return nodes_[v.index].value; }
  std::span<double> grad_of(std::size_t i) { return nodes_[i].grad; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  std::size_t parent(std::size_t i, std::size_t k) const { return nodes_[i].parents[k]; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  /// Populates the gradient slot of every parameter leaf on the tape with
  /// d(loss)/d(param). Parameters not reachable from `loss` get zeros.
  void backward(Var loss) {
    if (loss.tape != this || loss.index >= nodes_.size()) {
      throw UsageError("backward: loss is not a node of this tape");
    }
    if (value(loss).size() != 1) {
      throw UsageError("backward: loss must be a scalar, got " + value(loss).shape());
    }
    for (Node& n : nodes_) n.grad.assign(n.requires_grad ? n.value.size() : 0, 0.0);
    for (Node& n : nodes_) {
      if (n.parameter != nullptr) n.parameter->zero_grad();
    }
    if (!nodes_[loss.index].requires_grad) return;
    nodes_[loss.index].grad[0] = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.parameter != nullptr) {
        auto g = n.parameter->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void own(const Var& v, const std::string& op) const {
    if (v.tape != this || v.index >= nodes_.size()) {
      throw UsageError(op + ": operand recorded on a different tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

inline double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw UsageError("scalar(): node has shape " + v.shape());
  return v[0];
}

// ---------------------------------------------------------------------------
// Differentiable operations.

namespace detail {

inline bool wants(Tape& t, std::size_t node, std::size_t k) {
  return t.requires_grad(t.parent(node, k));
}

}  // namespace detail

inline Var dense_affine(Var input, Var weight, Var bias) {
  Tensor out = dense_affine(input.value(), weight.value(), bias.value());
  return input.tape->record("dense_affine", std::move(out), {input, weight, bias}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.parent(self, 0), wi = t.parent(self, 1), bi = t.parent(self, 2);
    const Tensor& x = t.value(xi);
    const Tensor& w = t.value(wi);
    auto g = t.grad_of(self);
    const std::size_t n = x.rows(), din = x.cols(), dout = w.cols();
    if (t.requires_grad(xi)) {
      auto gx = t.grad_of(xi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < din; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < dout; ++j) s += g[i * dout + j] * w(k, j);
          gx[i * din + k] += s;
        }
    }
    if (t.requires_grad(wi)) {
      auto gw = t.grad_of(wi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < din; ++k) {
          const double xik = x(i, k);
          if (xik == 0.0) continue;
          for (std::size_t j = 0; j < dout; ++j) gw[k * dout + j] += xik * g[i * dout + j];
        }
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad_of(bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
    }
  });
}

/// Subgradient at 0 is 0.
inline Var relu(Var input) {
  return input.tape->record("relu", relu(input.value()), {input}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.parent(self, 0);
    const Tensor& x = t.value(xi);
    auto g = t.grad_of(self);
    auto gx = t.grad_of(xi);
    for (std::size_t k = 0; k < x.size(); ++k)
      if (x[k] > 0.0) gx[k] += g[k];
  });
}

inline Var l2_normalize_rows(Var input, double epsilon = 1e-12) {
  Tensor out = l2_normalize_rows(input.value(), epsilon);
  return input.tape->record("l2_normalize_rows", std::move(out), {input}, [epsilon](Tape& t, std::size_t self) {
    const std::size_t xi = t.parent(self, 0);
    const Tensor& x = t.value(xi);
    const Tensor& y = t.value(self);
    auto g = t.grad_of(self);
    auto gx = t.grad_of(xi);
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double norm = row_norm(x.row(i));
      std::span<const double> gi(g.data() + i * d, d);
      if (norm >= epsilon) {
        const double yg = dot(y.row(i), gi);
        for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += (gi[k] - y(i, k) * yg) / norm;
      } else {
        for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += gi[k] / epsilon;
      }
    }
  });
}

inline Var gram_matrix(Var feats) {
  return feats.tape->record("gram_matrix", gram_matrix(feats.value()), {feats}, [](Tape& t, std::size_t self) {
    const std::size_t xi = t.parent(self, 0);
    const Tensor& x = t.value(xi);
    auto g = t.grad_of(self);
    auto gx = t.grad_of(xi);
    const std::size_t n = x.rows(), d = x.cols();
    // dX = (G + G^T) X
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) {
        const double s = g[j * n + k] + g[k * n + j];
        if (s == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) gx[j * d + c] += s * x(k, c);
      }
  });
}

/// Clamped entries contribute no gradient.
inline Var pairwise_sq_distances(Var a, Var b) {
  Tensor out = pairwise_sq_distances(a.value(), b.value());
  return a.tape->record("pairwise_sq_distances", std::move(out), {a, b}, [](Tape& t, std::size_t self) {
    const std::size_t ai = t.parent(self, 0), bi = t.parent(self, 1);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    const Tensor& out = t.value(self);
    auto g = t.grad_of(self);
    const std::size_t n = av.rows(), m = bv.rows(), d = av.cols();
    const bool ga = t.requires_grad(ai), gb = t.requires_grad(bi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double gij = g[i * m + j];
        if (gij == 0.0 || out(i, j) <= 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = 2.0 * gij * (av(i, c) - bv(j, c));
          if (ga) t.grad_of(ai)[i * d + c] += diff;
          if (gb) t.grad_of(bi)[j * d + c] -= diff;
        }
      }
  });
}

/// Gradient at a == b is defined as 0.
inline Var frobenius_norm_diff(Var a, Var b) {
  const double v = frobenius_norm_diff(a.value(), b.value());
  return a.tape->record("frobenius_norm_diff", Tensor(1, 1, v), {a, b}, [](Tape& t, std::size_t self) {
    const std::size_t ai = t.parent(self, 0), bi = t.parent(self, 1);
    const double norm = t.value(self)[0];
    if (norm == 0.0) return;
    const double g = t.grad_of(self)[0] / norm;
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    for (std::size_t k = 0; k < av.size(); ++k) {
      const double d = g * (av[k] - bv[k]);
      if (t.requires_grad(ai)) t.grad_of(ai)[k] += d;
      if (t.requires_grad(bi)) t.grad_of(bi)[k] -= d;
    }
  });
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b.value()[k];
  return a.tape->record("add", std::move(out), {a, b}, [](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    for (std::size_t p = 0; p < 2; ++p) {
      const std::size_t pi = t.parent(self, p);
      if (!t.requires_grad(pi)) continue;
      auto gp = t.grad_of(pi);
      for (std::size_t k = 0; k < g.size(); ++k) gp[k] += g[k];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  return a.tape->record("scale", std::move(out), {a}, [c](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto ga = t.grad_of(t.parent(self, 0));
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += c * g[k];
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  return a.tape->record("exp", std::move(out), {a}, [](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    const Tensor& y = t.value(self);
    auto ga = t.grad_of(t.parent(self, 0));
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += y[k] * g[k];
  });
}

/// Scalar sum of all entries.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record("sum", Tensor(1, 1, s), {a}, [](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (double& v : t.grad_of(t.parent(self, 0))) v += g;
  });
}

/// Scalar sum of squared entries.
inline Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return a.tape->record("sum_squares", Tensor(1, 1, s), {a}, [](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const std::size_t ai = t.parent(self, 0);
    const Tensor& x = t.value(ai);
    auto ga = t.grad_of(ai);
    for (std::size_t k = 0; k < x.size(); ++k) ga[k] += 2.0 * x[k] * g;
  });
}

/// Scalar sum of entries weighted by a constant matrix of the same shape.
inline Var weighted_sum(Var a, Tensor weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) s += weights[k] * a.value()[k];
  return a.tape->record("weighted_sum", Tensor(1, 1, s), {a},
                        [w = std::move(weights)](Tape& t, std::size_t self) {
                          const double g = t.grad_of(self)[0];
                          auto ga = t.grad_of(t.parent(self, 0));
                          for (std::size_t k = 0; k < w.size(); ++k) ga[k] += w[k] * g;
                        });
}

// ---------------------------------------------------------------------------

/// Largest relative discrepancy between tape gradients and central finite
/// differences, |analytic - numeric| / max(1, |analytic|), over every entry of
/// `params`. `build_loss` must bind each tensor in `params` with
/// Tape::parameter and return a scalar node; it is re-run for every probe.
inline double finite_difference_check(const std::function<Var(Tape&)>& build_loss,
                                      std::span<Tensor* const> params, double step) {
  if (!(step > 0.0)) throw UsageError("finite_difference_check: step must be positive");
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
    for (Tensor* p : params) {
      if (!p->has_grad()) p->zero_grad();
      analytic.emplace_back(p->grad().begin(), p->grad().end());
    }
  }
  auto evaluate = [&] {
    Tape tape;
    return build_loss(tape).scalar();
  };
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double saved = p[k];
      p[k] = saved + step;
      const double up = evaluate();
      p[k] = saved - step;
      const double down = evaluate();
      p[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][k];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace kdreid
