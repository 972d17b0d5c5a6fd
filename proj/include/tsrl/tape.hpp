#pragma once

#include <tsrl/common.hpp>
#include <tsrl/rng.hpp>

#include <functional>
#include <utility>
#include <vector>

namespace tsrl::ad {

/// Handle into a Tape. Only valid for the tape that created it.
struct Var {
  std::int32_t i = -1;
  bool valid() const { return i >= 0; }
};

/// Single-use reverse-mode tape over dense matrices (rows = batch).
///
/// Values are computed eagerly as nodes are created; backward() replays the
/// recorded closures in reverse. Nodes that cannot reach a differentiable
/// leaf skip gradient storage entirely, so forward-only subgraphs (target
/// networks, thresholds) cost nothing extra.
///
/// relu_mask() is the one deliberately non-differentiable op: it exposes the
/// ReLU activation pattern as a value while contributing zero backward, which
/// is the almost-everywhere-correct treatment of ReLU curvature. Tangent
/// propagation built from matmul + relu_mask therefore yields parameter
/// gradients of losses that contain a directional derivative of the network
/// itself (a second-order path).
template <class S>
class Tape {
 public:
  using M = Mat<S>;

  Var constant(M v) { return push(std::move(v), false, {}); }

  Var leaf(M v, bool requires_grad) { return push(std::move(v), requires_grad, {}); }

  const M& val(Var x) const { return nodes_[check(x)].value; }

  /// Gradient of the last backward() seed w.r.t. x; zero matrix if x was
  /// never reached.
  M grad(Var x) const {
    const Node& n = nodes_[check(x)];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // ---- ops ----

  /// x * w^T  (batch x in) * (out x in)^T -> batch x out
  Var matmul_nt(Var x, Var w) {
    const M& xv = nodes_[check(x)].value;
    const M& wv = nodes_[check(w)].value;
    require(xv.cols() == wv.cols(), "matmul_nt: inner dims differ");
    M out = xv * wv.transpose();
    return push(std::move(out), needs(x) || needs(w), [this, x, w](const M& g) {
      if (needs(x)) acc(x, g * nodes_[w.i].value);
      if (needs(w)) acc(w, g.transpose() * nodes_[x.i].value);
    });
  }

  /// Broadcast-add a 1 x C bias row to every row of x.
  Var add_rowvec(Var x, Var b) {
    const M& xv = nodes_[check(x)].value;
    const M& bv = nodes_[check(b)].value;
    require(bv.rows() == 1 && bv.cols() == xv.cols(), "add_rowvec: bad bias shape");
    M out = xv.rowwise() + bv.row(0);
    return push(std::move(out), needs(x) || needs(b), [this, x, b](const M& g) {
      if (needs(x)) acc(x, g);
      if (needs(b)) acc(b, g.colwise().sum());
    });
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    M out = nodes_[a.i].value + nodes_[b.i].value;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const M& g) {
      if (needs(a)) acc(a, g);
      if (needs(b)) acc(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    M out = nodes_[a.i].value - nodes_[b.i].value;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const M& g) {
      if (needs(a)) acc(a, g);
      if (needs(b)) acc(b, -g);
    });
  }

  Var hadamard(Var a, Var b) {
    same_shape(a, b, "hadamard");
    M out = nodes_[a.i].value.cwiseProduct(nodes_[b.i].value);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const M& g) {
      if (needs(a)) acc(a, g.cwiseProduct(nodes_[b.i].value));
      if (needs(b)) acc(b, g.cwiseProduct(nodes_[a.i].value));
    });
  }

  Var scale(Var a, S c) {
    M out = nodes_[check(a)].value * c;
    return push(std::move(out), needs(a), [this, a, c](const M& g) {
      if (needs(a)) acc(a, g * c);
    });
  }

  /// Columnwise multiply by a fixed row vector (e.g. action bounds).
  Var mul_rowvec(Var x, RowVec<S> r) {
    const M& xv = nodes_[check(x)].value;
    require(r.cols() == xv.cols(), "mul_rowvec: bad shape");
    M out = (xv.array().rowwise() * r.row(0).array()).matrix();
    return push(std::move(out), needs(x), [this, x, r = std::move(r)](const M& g) {
      if (needs(x)) acc(x, (g.array().rowwise() * r.row(0).array()).matrix());
    });
  }

  Var relu(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out = xv.cwiseMax(S(0));
    return push(std::move(out), needs(x), [this, x](const M& g) {
      if (!needs(x)) return;
      acc(x, ((nodes_[x.i].value.array() > S(0)).template cast<S>() * g.array()).matrix());
    });
  }

  /// Heaviside(x) as a value; backward contributes nothing.
  Var relu_mask(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out = (xv.array() > S(0)).template cast<S>();
    return push(std::move(out), false, {});
  }

  Var tanh_(Var x) {
    M out = nodes_[check(x)].value.array().tanh();
    Var y = push(std::move(out), needs(x), {});
    nodes_[y.i].back = [this, x, y](const M& g) {
      if (!needs(x)) return;
      acc(x, (g.array() * (S(1) - nodes_[y.i].value.array().square())).matrix());
    };
    return y;
  }

  Var concat_cols(Var a, Var b) {
    const M& av = nodes_[check(a)].value;
    const M& bv = nodes_[check(b)].value;
    require(av.rows() == bv.rows(), "concat_cols: row mismatch");
    M out(av.rows(), av.cols() + bv.cols());
    out << av, bv;
    const Eigen::Index ca = av.cols(), cb = bv.cols();
    return push(std::move(out), needs(a) || needs(b), [this, a, b, ca, cb](const M& g) {
      if (needs(a)) acc(a, g.leftCols(ca));
      if (needs(b)) acc(b, g.rightCols(cb));
    });
  }

  Var slice_cols(Var x, Eigen::Index c0, Eigen::Index n) {
    const M& xv = nodes_[check(x)].value;
    require(c0 >= 0 && n >= 0 && c0 + n <= xv.cols(), "slice_cols: out of range");
    M out = xv.middleCols(c0, n);
    return push(std::move(out), needs(x), [this, x, c0, n](const M& g) {
      if (!needs(x)) return;
      M full = M::Zero(nodes_[x.i].value.rows(), nodes_[x.i].value.cols());
      full.middleCols(c0, n) = g;
      acc(x, full);
    });
  }

  /// Per-row squared L2 norm: (B x C) -> (B x 1).
  Var rowwise_sqnorm(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out = xv.rowwise().squaredNorm();
    return push(std::move(out), needs(x), [this, x](const M& g) {
      if (!needs(x)) return;
      acc(x, (S(2) * (nodes_[x.i].value.array().colwise() * g.col(0).array())).matrix());
    });
  }

  Var mean_all(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out(1, 1);
    out(0, 0) = xv.mean();
    const S inv = S(1) / static_cast<S>(xv.size());
    return push(std::move(out), needs(x), [this, x, inv](const M& g) {
      if (!needs(x)) return;
      acc(x, M::Constant(nodes_[x.i].value.rows(), nodes_[x.i].value.cols(), g(0, 0) * inv));
    });
  }

  Var sum_all(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out(1, 1);
    out(0, 0) = xv.sum();
    return push(std::move(out), needs(x), [this, x](const M& g) {
      if (!needs(x)) return;
      acc(x, M::Constant(nodes_[x.i].value.rows(), nodes_[x.i].value.cols(), g(0, 0)));
    });
  }

  /// Sum of absolute values; subgradient sign(x) with sign(0) = 0.
  Var l1_norm(Var x) {
    const M& xv = nodes_[check(x)].value;
    M out(1, 1);
    out(0, 0) = xv.array().abs().sum();
    return push(std::move(out), needs(x), [this, x](const M& g) {
      if (!needs(x)) return;
      acc(x, g(0, 0) * nodes_[x.i].value.array().sign().matrix());
    });
  }

  /// Inverted dropout: keeps with probability 1-rate, rescales by 1/(1-rate).
  Var dropout(Var x, double rate, Rng& rng) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate out of range");
    const M& xv = nodes_[check(x)].value;
    if (rate == 0.0) return x;
    M mask(xv.rows(), xv.cols());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      for (Eigen::Index r = 0; r < mask.rows(); ++r)
        mask(r, c) = rng.uniform() < rate ? S(0) : keep_scale;
    M out = xv.cwiseProduct(mask);
    return push(std::move(out), needs(x), [this, x, mask = std::move(mask)](const M& g) {
      if (needs(x)) acc(x, g.cwiseProduct(mask));
    });
  }

  Var stop_grad(Var x) { return push(nodes_[check(x)].value, false, {}); }

  /// Seeds d(seed)/d(seed) = 1 and accumulates gradients into every
  /// reachable differentiable node. seed must be 1 x 1.
  void backward(Var seed) {
    Node& s = nodes_[check(seed)];
    require(s.value.rows() == 1 && s.value.cols() == 1, "backward: seed must be scalar");
    s.grad = M::Constant(1, 1, S(1));
    for (std::int32_t i = seed.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0 || !n.back) continue;
      n.back(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    std::function<void(const M&)> back;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;

  Var push(M v, bool needs_grad, std::function<void(const M&)> back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::int32_t check(Var x) const {
    require(x.valid() && static_cast<std::size_t>(x.i) < nodes_.size(), "invalid Var");
    return x.i;
  }

  bool needs(Var x) const { return nodes_[static_cast<std::size_t>(x.i)].needs_grad; }

  template <class G>
  void acc(Var x, const G& g) {
    Node& n = nodes_[static_cast<std::size_t>(x.i)];
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void same_shape(Var a, Var b, const char* op) const {
    const M& av = nodes_[check(a)].value;
    const M& bv = nodes_[check(b)].value;
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), op);
  }

  static void require(bool ok, const char* msg) {
    if (!ok) throw std::logic_error(std::string("tape: ") + msg);
  }
};

}  // namespace tsrl::ad
