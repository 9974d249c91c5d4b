#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records nodes in creation order; backward() walks them in
// reverse. Parameters can be bound by reference so a forward pass never copies
// model weights.

#include "protosim/common.hpp"

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

namespace protosim {

// Kernels shared by the tape ops and the closed-form layer code.

/// Row-wise numerically stable softmax.
template <class S>
Mat<S> softmax_rows(const Mat<S>& x) {
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

/// Vector-Jacobian product of the row-wise softmax: given y = softmax(x) and
/// upstream gradient g, returns dL/dx.
template <class S>
Mat<S> softmax_rows_backward(const Mat<S>& y, const Mat<S>& g) {
  Mat<S> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S inner = y.row(r).dot(g.row(r));
    dx.row(r) = (y.row(r).array() * (g.row(r).array() - inner)).matrix();
  }
  return dx;
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
template <class S>
std::vector<Eigen::Index> argmax_rows(const Mat<S>& x) {
  std::vector<Eigen::Index> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < x.cols(); ++c)
      if (x(r, c) > x(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

namespace ag {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> v) { return push(std::move(v), false, {}); }

  /// Leaf that references externally owned storage; the referent must outlive
  /// the tape.
  Var<S> reference(const Mat<S>& v, bool requires_grad) {
    Node n;
    n.external = &v;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<S> push(Mat<S> value, bool requires_grad, Backward fn) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Mat<S>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.own;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<S> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulated at a node, or nullptr when none reached it.
  const Mat<S>* grad(Var<S> v) const {
    const Node& n = nodes_[v.id];
    return n.grad.size() == 0 ? nullptr : &n.grad;
  }

  const Mat<S>& upstream(std::size_t id) const { return nodes_[id].grad; }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every node.
  void backward(Var<S> out) {
    if (out.rows() != 1 || out.cols() != 1)
      throw ContractError("backward() requires a scalar output, got " +
                          shape_str(out.rows(), out.cols()));
    if (!nodes_[out.id].requires_grad) return;
    nodes_[out.id].grad = Mat<S>::Ones(1, 1);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> own;
    const Mat<S>* external = nullptr;
    Mat<S> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

namespace detail {
template <class S>
void require_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw ContractError("vars belong to different tapes");
}
template <class S>
void require_shape(bool ok, const char* op, Var<S> a, Var<S> b) {
  if (!ok)
    throw ContractError(std::string(op) + ": incompatible shapes " +
                        shape_str(a.rows(), a.cols()) + " and " +
                        shape_str(b.rows(), b.cols()));
}
}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(a.value() * b.value(), rg, [a, b](Tape<S>& t, std::size_t self) {
    const Mat<S>& g = t.upstream(self);
    if (t.requires_grad(a)) t.accumulate(a.id, g * t.value(b.id).transpose());
    if (t.requires_grad(b)) t.accumulate(b.id, t.value(a.id).transpose() * g);
  });
}

/// a * b^T, the usual layout for weights stored as [out, in].
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(a.value() * b.value().transpose(), rg,
                [a, b](Tape<S>& t, std::size_t self) {
                  const Mat<S>& g = t.upstream(self);
                  if (t.requires_grad(a)) t.accumulate(a.id, g * t.value(b.id));
                  if (t.requires_grad(b))
                    t.accumulate(b.id, g.transpose() * t.value(a.id));
                });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(a.value() + b.value(), rg, [a, b](Tape<S>& t, std::size_t self) {
    t.accumulate(a.id, t.upstream(self));
    t.accumulate(b.id, t.upstream(self));
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a, b);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(a.value() - b.value(), rg, [a, b](Tape<S>& t, std::size_t self) {
    t.accumulate(a.id, t.upstream(self));
    t.accumulate(b.id, -t.upstream(self));
  });
}

/// Adds a 1xC row to every row of a.
template <class S>
Var<S> add_row(Var<S> a, Var<S> row) {
  detail::require_same_tape(a, row);
  detail::require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row", a, row);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(row);
  Mat<S> out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), rg, [a, row](Tape<S>& t, std::size_t self) {
    const Mat<S>& g = t.upstream(self);
    t.accumulate(a.id, g);
    if (t.requires_grad(row)) t.accumulate(row.id, g.colwise().sum());
  });
}

template <class S>
Var<S> scale(Var<S> a, S factor) {
  Tape<S>& t = *a.tape;
  return t.push(a.value() * factor, t.requires_grad(a),
                [a, factor](Tape<S>& t, std::size_t self) {
                  t.accumulate(a.id, t.upstream(self) * factor);
                });
}

template <class S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b);
  detail::require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a, b);
  Tape<S>& t = *a.tape;
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(a.value().cwiseProduct(b.value()), rg,
                [a, b](Tape<S>& t, std::size_t self) {
                  const Mat<S>& g = t.upstream(self);
                  if (t.requires_grad(a)) t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
                  if (t.requires_grad(b)) t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
                });
}

/// Per-row layer normalization with 1xC gain and bias.
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-6)) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  const Eigen::Index n = xv.rows(), c = xv.cols();
  Mat<S> xhat(n, c);
  Mat<S> inv_std(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r).array() - mu).square().mean();
    inv_std(r, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = ((xv.row(r).array() - mu) * inv_std(r, 0)).matrix();
  }
  Mat<S> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(out), rg,
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape<S>& t, std::size_t self) {
                  const Mat<S>& g = t.upstream(self);
                  if (t.requires_grad(gamma))
                    t.accumulate(gamma.id, g.cwiseProduct(xhat).colwise().sum());
                  if (t.requires_grad(beta)) t.accumulate(beta.id, g.colwise().sum());
                  if (!t.requires_grad(x)) return;
                  Mat<S> dxhat = g.array().rowwise() * t.value(gamma.id).row(0).array();
                  Mat<S> dx(dxhat.rows(), dxhat.cols());
                  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                    const S m1 = dxhat.row(r).mean();
                    const S m2 = dxhat.row(r).dot(xhat.row(r)) / S(dxhat.cols());
                    dx.row(r) = ((dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) *
                                 inv_std(r, 0))
                                    .matrix();
                  }
                  t.accumulate(x.id, dx);
                });
}

/// Exact (erf) GELU.
template <class S>
Var<S> gelu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const S inv_sqrt2 = S(0.7071067811865476);
  Mat<S> out = x.value().unaryExpr(
      [inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  return t.push(std::move(out), t.requires_grad(x), [x, inv_sqrt2](Tape<S>& t, std::size_t self) {
    const S inv_sqrt_2pi = S(0.3989422804014327);
    Mat<S> d = t.value(x.id).unaryExpr([&](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) +
             v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    });
    t.accumulate(x.id, t.upstream(self).cwiseProduct(d));
  });
}

template <class S>
Var<S> softmax(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> y = softmax_rows(x.value());
  return t.push(y, t.requires_grad(x), [x, y](Tape<S>& t, std::size_t self) {
    t.accumulate(x.id, softmax_rows_backward(y, t.upstream(self)));
  });
}

/// Straight-through hard selection: the forward value is the row-wise one-hot
/// of argmax(x); the backward pass is that of softmax(x).
template <class S>
Var<S> straight_through_onehot(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> soft = softmax_rows(x.value());
  Mat<S> hard = Mat<S>::Zero(x.rows(), x.cols());
  const auto winners = argmax_rows(x.value());
  for (Eigen::Index r = 0; r < x.rows(); ++r) hard(r, winners[static_cast<std::size_t>(r)]) = S(1);
  return t.push(std::move(hard), t.requires_grad(x),
                [x, soft = std::move(soft)](Tape<S>& t, std::size_t self) {
                  t.accumulate(x.id, softmax_rows_backward(soft, t.upstream(self)));
                });
}

/// log(max(x, floor)); the floor keeps cross-entropy finite.
template <class S>
Var<S> log_floor(Var<S> x, S floor) {
  Tape<S>& t = *x.tape;
  Mat<S> out = x.value().unaryExpr([floor](S v) { return std::log(std::max(v, floor)); });
  return t.push(std::move(out), t.requires_grad(x), [x, floor](Tape<S>& t, std::size_t self) {
    Mat<S> d = t.value(x.id).unaryExpr([floor](S v) { return v > floor ? S(1) / v : S(0); });
    t.accumulate(x.id, t.upstream(self).cwiseProduct(d));
  });
}

template <class S>
Var<S> rows(Var<S> x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows())
    throw ContractError("rows(): slice out of range");
  Tape<S>& t = *x.tape;
  return t.push(x.value().middleRows(begin, count), t.requires_grad(x),
                [x, begin, count](Tape<S>& t, std::size_t self) {
                  Mat<S> g = Mat<S>::Zero(t.value(x.id).rows(), t.value(x.id).cols());
                  g.middleRows(begin, count) = t.upstream(self);
                  t.accumulate(x.id, g);
                });
}

template <class S>
Var<S> cols(Var<S> x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols())
    throw ContractError("cols(): slice out of range");
  Tape<S>& t = *x.tape;
  return t.push(x.value().middleCols(begin, count), t.requires_grad(x),
                [x, begin, count](Tape<S>& t, std::size_t self) {
                  Mat<S> g = Mat<S>::Zero(t.value(x.id).rows(), t.value(x.id).cols());
                  g.middleCols(begin, count) = t.upstream(self);
                  t.accumulate(x.id, g);
                });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows(): no inputs");
  Tape<S>& t = *parts.front().tape;
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ContractError("concat_rows(): column mismatch");
    total += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> out(total, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.push(std::move(out), rg, [parts](Tape<S>& t, std::size_t self) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = t.value(p.id).rows();
      if (t.requires_grad(p)) t.accumulate(p.id, t.upstream(self).middleRows(at, n));
      at += n;
    }
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols(): no inputs");
  Tape<S>& t = *parts.front().tape;
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ContractError("concat_cols(): row mismatch");
    total += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> out(parts.front().rows(), total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.push(std::move(out), rg, [parts](Tape<S>& t, std::size_t self) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = t.value(p.id).cols();
      if (t.requires_grad(p)) t.accumulate(p.id, t.upstream(self).middleCols(at, n));
      at += n;
    }
  });
}

/// Mean over rows, producing a 1xC row.
template <class S>
Var<S> mean_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const S n = S(x.rows());
  return t.push(x.value().colwise().mean(), t.requires_grad(x),
                [x, n](Tape<S>& t, std::size_t self) {
                  Mat<S> g = t.upstream(self).replicate(t.value(x.id).rows(), 1) / n;
                  t.accumulate(x.id, g);
                });
}

template <class S>
Var<S> sum(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> out(1, 1);
  out(0, 0) = x.value().sum();
  return t.push(std::move(out), t.requires_grad(x), [x](Tape<S>& t, std::size_t self) {
    const S g = t.upstream(self)(0, 0);
    t.accumulate(x.id, Mat<S>::Constant(t.value(x.id).rows(), t.value(x.id).cols(), g));
  });
}

/// Scales each row to unit L2 norm (rows with norm below eps are divided by eps).
template <class S>
Var<S> l2_normalize_rows(Var<S> x, S eps = S(1e-12)) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  Mat<S> norms(xv.rows(), 1);
  Mat<S> y(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    norms(r, 0) = std::max(xv.row(r).norm(), eps);
    y.row(r) = xv.row(r) / norms(r, 0);
  }
  return t.push(y, t.requires_grad(x),
                [x, y, norms = std::move(norms), eps](Tape<S>& t, std::size_t self) {
                  const Mat<S>& g = t.upstream(self);
                  Mat<S> dx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    if (norms(r, 0) <= eps) {
                      dx.row(r) = g.row(r) / eps;
                    } else {
                      const S inner = g.row(r).dot(y.row(r));
                      dx.row(r) = (g.row(r) - inner * y.row(r)) / norms(r, 0);
                    }
                  }
                  t.accumulate(x.id, dx);
                });
}

template <class S>
using GradientMap = std::unordered_map<const Mat<S>*, Mat<S>>;

/// Binds model parameters into a tape by reference and later harvests their
/// gradients. A non-trainable binder yields constant leaves.
template <class S>
class ParameterBinder {
 public:
  ParameterBinder(Tape<S>& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  Var<S> operator()(const Mat<S>& param) {
    Var<S> v = tape_.reference(param, trainable_);
    if (trainable_) bound_.emplace_back(&param, v);
    return v;
  }

  bool trainable() const { return trainable_; }
  Tape<S>& tape() { return tape_; }

  /// Adds every reached parameter gradient into `into`.
  void collect(GradientMap<S>& into) const {
    for (const auto& [param, var] : bound_) {
      const Mat<S>* g = tape_.grad(var);
      if (!g) continue;
      auto it = into.find(param);
      if (it == into.end())
        into.emplace(param, *g);
      else
        it->second += *g;
    }
  }

 private:
  Tape<S>& tape_;
  bool trainable_;
  std::vector<std::pair<const Mat<S>*, Var<S>>> bound_;
};

}  // namespace ag
}  // namespace protosim
