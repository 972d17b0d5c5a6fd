#pragma once

#include <tsrl/common.hpp>
#include <tsrl/rng.hpp>
#include <tsrl/tape.hpp>

#include <cmath>
#include <vector>

namespace tsrl::nn {

template <class S>
struct Linear {
  Mat<S> W;     // out x in
  RowVec<S> b;  // 1 x out
};

/// Plain feed-forward net: affine layers with ReLU in between, linear output.
/// An empty hidden list gives a single affine map, which is how tests inject
/// exact linear models.
template <class S>
struct Mlp {
  std::vector<Linear<S>> layers;

  Eigen::Index in_dim() const { return layers.front().W.cols(); }
  Eigen::Index out_dim() const { return layers.back().W.rows(); }

  static Mlp init(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out,
                  Rng& rng) {
    Mlp m;
    Eigen::Index prev = in;
    auto make = [&](Eigen::Index rows, Eigen::Index cols) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
      Linear<S> l;
      l.W = rng.uniform_mat<S>(rows, cols, -bound, bound);
      l.b = rng.uniform_mat<S>(1, rows, -bound, bound);
      return l;
    };
    for (Eigen::Index h : hidden) {
      m.layers.push_back(make(h, prev));
      prev = h;
    }
    m.layers.push_back(make(out, prev));
    return m;
  }

  Mat<S> forward(const Mat<S>& x) const {
    Mat<S> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = (h * layers[i].W.transpose()).rowwise() + layers[i].b.row(0);
      if (i + 1 < layers.size()) h = h.cwiseMax(S(0));
    }
    return h;
  }

  /// Forward value together with the directional derivative of the output
  /// along input tangent u (same shape as x). No gradients; see the tape
  /// variant for the trainable path.
  std::pair<Mat<S>, Mat<S>> forward_jvp(const Mat<S>& x, const Mat<S>& u) const {
    Mat<S> h = x, t = u;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Mat<S> pre = (h * layers[i].W.transpose()).rowwise() + layers[i].b.row(0);
      t = t * layers[i].W.transpose();
      if (i + 1 < layers.size()) {
        const auto mask = (pre.array() > S(0)).template cast<S>();
        h = pre.cwiseMax(S(0));
        t = (t.array() * mask).matrix();
      } else {
        h = std::move(pre);
      }
    }
    return {std::move(h), std::move(t)};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.W.size() + l.b.size());
    return n;
  }

  std::uint64_t param_hash(std::uint64_t h = 0xcbf29ce484222325ull) const {
    for (const auto& l : layers) {
      h = hash_matrix<S>(l.W, h);
      h = hash_matrix<S>(Mat<S>(l.b), h);
    }
    return h;
  }
};

/// Tape-side handles for one Mlp's parameters.
template <class S>
struct MlpVars {
  std::vector<std::pair<ad::Var, ad::Var>> layers;  // (W, b)
};

template <class S>
MlpVars<S> register_mlp(ad::Tape<S>& t, const Mlp<S>& m, bool requires_grad) {
  MlpVars<S> v;
  v.layers.reserve(m.layers.size());
  for (const auto& l : m.layers)
    v.layers.emplace_back(t.leaf(l.W, requires_grad), t.leaf(Mat<S>(l.b), requires_grad));
  return v;
}

template <class S>
ad::Var apply(ad::Tape<S>& t, const MlpVars<S>& m, ad::Var x) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = t.add_rowvec(t.matmul_nt(x, m.layers[i].first), m.layers[i].second);
    if (i + 1 < m.layers.size()) x = t.relu(x);
  }
  return x;
}

/// apply() with dropout after every hidden activation. Training-time only.
template <class S>
ad::Var apply_dropout(ad::Tape<S>& t, const MlpVars<S>& m, ad::Var x, double rate, Rng& rng) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = t.add_rowvec(t.matmul_nt(x, m.layers[i].first), m.layers[i].second);
    if (i + 1 < m.layers.size()) x = t.dropout(t.relu(x), rate, rng);
  }
  return x;
}

/// Propagates an input tangent u alongside the primal pass and returns
/// (output, J·u). The tangent path reuses the layer weights, so backward()
/// carries the gradient of any loss on J·u into those weights; the ReLU
/// activation pattern enters through relu_mask and is held constant.
template <class S>
std::pair<ad::Var, ad::Var> apply_with_jvp(ad::Tape<S>& t, const MlpVars<S>& m, ad::Var x,
                                           ad::Var u) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    ad::Var pre = t.add_rowvec(t.matmul_nt(x, m.layers[i].first), m.layers[i].second);
    u = t.matmul_nt(u, m.layers[i].first);
    if (i + 1 < m.layers.size()) {
      u = t.hadamard(u, t.relu_mask(pre));
      x = t.relu(pre);
    } else {
      x = pre;
    }
  }
  return {x, u};
}

/// Sum of L1 norms over all parameters (weights and biases).
template <class S>
ad::Var l1_penalty(ad::Tape<S>& t, const MlpVars<S>& m) {
  ad::Var total;
  for (const auto& [w, b] : m.layers) {
    ad::Var s = t.add(t.l1_norm(w), t.l1_norm(b));
    total = total.valid() ? t.add(total, s) : s;
  }
  return total;
}

/// Adam with bias correction; one instance per Mlp.
template <class S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(const Mlp<S>& m, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& l : m.layers) {
      mw_.push_back(Mat<S>::Zero(l.W.rows(), l.W.cols()));
      vw_.push_back(Mat<S>::Zero(l.W.rows(), l.W.cols()));
      mb_.push_back(RowVec<S>::Zero(l.b.cols()));
      vb_.push_back(RowVec<S>::Zero(l.b.cols()));
    }
  }

  /// One update from the gradients recorded on the tape for `vars`.
  void step(Mlp<S>& m, const ad::Tape<S>& t, const MlpVars<S>& vars) {
    ++t_;
    const S c1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      update(m.layers[i].W, t.grad(vars.layers[i].first), mw_[i], vw_[i], c1, c2);
      RowVec<S> gb = t.grad(vars.layers[i].second).row(0);
      update_row(m.layers[i].b, gb, mb_[i], vb_[i], c1, c2);
    }
  }

  std::int64_t steps() const { return t_; }

  struct State {
    std::vector<Mat<S>> mw, vw;
    std::vector<RowVec<S>> mb, vb;
    std::int64_t t = 0;
  };

  State export_state() const { return {mw_, vw_, mb_, vb_, t_}; }

  void import_state(const State& st) {
    mw_ = st.mw;
    vw_ = st.vw;
    mb_ = st.mb;
    vb_ = st.vb;
    t_ = st.t;
  }

 private:
  template <class MatT, class GradT>
  void upd(MatT& p, const GradT& g, MatT& mo, MatT& vo, S c1, S c2) {
    mo = static_cast<S>(beta1_) * mo + static_cast<S>(1.0 - beta1_) * g;
    vo = (static_cast<S>(beta2_) * vo.array() +
          static_cast<S>(1.0 - beta2_) * g.array().square())
             .matrix();
    p -= (static_cast<S>(lr_) * (mo.array() / c1) /
          ((vo.array() / c2).sqrt() + static_cast<S>(eps_)))
             .matrix();
  }
  void update(Mat<S>& p, const Mat<S>& g, Mat<S>& mo, Mat<S>& vo, S c1, S c2) {
    upd(p, g, mo, vo, c1, c2);
  }
  void update_row(RowVec<S>& p, const RowVec<S>& g, RowVec<S>& mo, RowVec<S>& vo, S c1, S c2) {
    upd(p, g, mo, vo, c1, c2);
  }

  double lr_ = 3e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<Mat<S>> mw_, vw_;
  std::vector<RowVec<S>> mb_, vb_;
};

/// target <- (1 - rho) * target + rho * online, elementwise over all params.
template <class S>
void soft_update(Mlp<S>& target, const Mlp<S>& online, double rho) {
  if (target.layers.size() != online.layers.size())
    throw ArgumentError("soft_update: layer count mismatch");
  const S r = static_cast<S>(rho);
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    auto& tl = target.layers[i];
    const auto& ol = online.layers[i];
    if (tl.W.rows() != ol.W.rows() || tl.W.cols() != ol.W.cols())
      throw ArgumentError("soft_update: shape mismatch");
    tl.W = (S(1) - r) * tl.W + r * ol.W;
    tl.b = (S(1) - r) * tl.b + r * ol.b;
  }
}

}  // namespace tsrl::nn
