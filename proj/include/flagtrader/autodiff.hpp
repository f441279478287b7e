#ifndef FLAGTRADER_AUTODIFF_HPP
#define FLAGTRADER_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "flagtrader/errors.hpp"

namespace flagtrader {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Matrix-valued reverse-mode tape.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for backpropagation. A node only keeps a backward
/// closure when the tape is recording and at least one input requires a
/// gradient; frozen sub-graphs therefore cost nothing in the backward pass.
///
/// Parameter leaves reference caller-owned matrices (no copy) and may carry a
/// gradient sink that receives the accumulated gradient after backward().
template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  struct Seed {
    Var var;
    Mat grad;
  };

  explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(64); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Mat value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to `value`, which must outlive the tape. A null sink marks
  /// the leaf as non-differentiable (frozen).
  Var parameter(const Mat& value, Mat* grad_sink) {
    Node n;
    n.ref = &value;
    n.sink = grad_sink;
    n.requires_grad = recording_ && grad_sink != nullptr;
    return push(std::move(n));
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  bool any_requires_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (requires_grad(v)) return true;
    return false;
  }

  /// Appends an op result. `fn` is dropped unless some parent requires grad.
  Var record(Mat value, std::initializer_list<Var> parents, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    if (recording_ && any_requires_grad(parents)) {
      n.requires_grad = true;
      n.backward = std::move(fn);
    }
    return push(std::move(n));
  }

  /// Adds `g` into the gradient of `v` if it requires one.
  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates the given output gradients and flushes leaf gradients
  /// into their sinks. A tape can be differentiated once.
  void backward(std::span<const Seed> seeds) {
    if (!recording_) throw UsageError("backward: computation was not recorded");
    if (consumed_) throw UsageError("backward: tape already differentiated");
    consumed_ = true;
    for (const Seed& s : seeds) {
      const Mat& v = value(s.var);
      if (s.grad.rows() != v.rows() || s.grad.cols() != v.cols())
        throw UsageError("backward: seed shape does not match node shape");
      accumulate(s.var, s.grad);
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) {
        const Mat g = std::move(n.grad);
        n.has_grad = false;
        n.backward(*this, g);
      } else if (n.sink) {
        *n.sink += n.grad;
      }
    }
  }

  void backward(Var root, Mat seed) {
    const Seed s{root, std::move(seed)};
    backward(std::span<const Seed>(&s, 1));
  }

 private:
  struct Node {
    Mat owned;
    const Mat* ref = nullptr;
    Mat grad;
    Mat* sink = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool recording_;
  bool consumed_ = false;
};

// Ops ----------------------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  using Mat = Matrix<T>;
  if (tape.value(a).cols() != tape.value(b).rows()) throw UsageError("matmul: inner dimensions differ");
  Mat out = tape.value(a) * tape.value(b);
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  using Mat = Matrix<T>;
  const Mat& x = tape.value(a);
  const Mat& y = tape.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw UsageError("add: shape mismatch");
  Mat out = x + y;
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Mat& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// x (n×d) plus a 1×d row broadcast over every row.
template <typename T>
Var add_row(Tape<T>& tape, Var x, Var row) {
  using Mat = Matrix<T>;
  const Mat& xv = tape.value(x);
  const Mat& rv = tape.value(row);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) throw UsageError("add_row: bias shape mismatch");
  Mat out = xv.rowwise() + rv.row(0);
  return tape.record(std::move(out), {x, row}, [x, row](Tape<T>& tp, const Mat& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(row)) tp.accumulate(row, Mat(g.colwise().sum()));
  });
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
  using Mat = Matrix<T>;
  const Mat& xv = tape.value(x);
  const Mat sig = (T(1) + (-xv.array()).exp()).inverse().matrix();
  Mat out = (xv.array() * sig.array()).matrix();
  return tape.record(std::move(out), {x}, [x, sig](Tape<T>& tp, const Mat& g) {
    const auto& xv = tp.value(x);
    // d/dx [x·σ(x)] = σ + x·σ·(1-σ)
    const auto d = sig.array() * (T(1) + xv.array() * (T(1) - sig.array()));
    tp.accumulate(x, Mat((g.array() * d).matrix()));
  });
}

/// Row-wise layer normalization with learned 1×d gain and bias.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  using Mat = Matrix<T>;
  using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const Mat& xv = tape.value(x);
  const auto d = static_cast<T>(xv.cols());
  const Col mu = xv.rowwise().mean();
  Mat xc = xv.colwise() - mu;
  const Col inv_sigma = ((xc.array().square().rowwise().sum() / d) + eps).rsqrt().matrix();
  Mat xhat = xc.array().colwise() * inv_sigma.array();
  Mat out = (xhat.array().rowwise() * tape.value(gain).row(0).array()).matrix();
  out.rowwise() += tape.value(bias).row(0);
  return tape.record(std::move(out), {x, gain, bias},
                     [x, gain, bias, xhat = std::move(xhat), inv_sigma, d](Tape<T>& tp, const Mat& g) {
                       if (tp.requires_grad(gain)) tp.accumulate(gain, Mat((g.array() * xhat.array()).colwise().sum()));
                       if (tp.requires_grad(bias)) tp.accumulate(bias, Mat(g.colwise().sum()));
                       if (!tp.requires_grad(x)) return;
                       const Mat dxhat = (g.array().rowwise() * tp.value(gain).row(0).array()).matrix();
                       const Col m1 = dxhat.rowwise().sum() / d;
                       const Col m2 = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
                       Mat dx = dxhat.colwise() - m1;
                       dx -= (xhat.array().colwise() * m2.array()).matrix();
                       dx = (dx.array().colwise() * inv_sigma.array()).matrix();
                       tp.accumulate(x, dx);
                     });
}

/// Multi-head causal scaled dot-product attention over packed heads:
/// q, k, v are n×d with head h occupying columns [h·d/H, (h+1)·d/H).
template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads) {
  using Mat = Matrix<T>;
  const Mat& qv = tape.value(q);
  const Mat& kv = tape.value(k);
  const Mat& vv = tape.value(v);
  const auto n = qv.rows();
  const auto d = qv.cols();
  if (n_heads == 0 || d % static_cast<Eigen::Index>(n_heads) != 0) throw UsageError("attention: bad head count");
  const auto dh = d / static_cast<Eigen::Index>(n_heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<Mat> probs(n_heads);
  Mat out(n, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dh;
    Mat s = (qv.middleCols(c0, dh) * kv.middleCols(c0, dh).transpose()) * scale;
    Mat& p = probs[h];
    p = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T m = s.row(i).head(i + 1).maxCoeff();
      p.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - m).exp().matrix();
      p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
    }
    out.middleCols(c0, dh) = p * vv.middleCols(c0, dh);
  }
  return tape.record(std::move(out), {q, k, v},
                     [q, k, v, probs = std::move(probs), dh, scale](Tape<T>& tp, const Mat& g) {
                       const Mat& qv = tp.value(q);
                       const Mat& kv = tp.value(k);
                       const Mat& vv = tp.value(v);
                       const auto n = qv.rows();
                       const auto d = qv.cols();
                       Mat dq = Mat::Zero(n, d), dk = Mat::Zero(n, d), dv = Mat::Zero(n, d);
                       for (std::size_t h = 0; h < probs.size(); ++h) {
                         const auto c0 = static_cast<Eigen::Index>(h) * dh;
                         const Mat& p = probs[h];
                         const auto go = g.middleCols(c0, dh);
                         dv.middleCols(c0, dh) = p.transpose() * go;
                         const Mat dp = go * vv.middleCols(c0, dh).transpose();
                         // softmax Jacobian; masked entries have p = 0 and stay 0
                         const auto rowdot = (dp.array() * p.array()).rowwise().sum();
                         const Mat ds = (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
                         dq.middleCols(c0, dh) = ds * kv.middleCols(c0, dh);
                         dk.middleCols(c0, dh) = ds.transpose() * qv.middleCols(c0, dh);
                       }
                       tp.accumulate(q, dq);
                       tp.accumulate(k, dk);
                       tp.accumulate(v, dv);
                     });
}

/// Rows of `table` selected by `ids`, plus the first ids.size() rows of `positions`.
template <typename T>
Var embed(Tape<T>& tape, Var table, Var positions, std::span<const int> ids) {
  using Mat = Matrix<T>;
  const Mat& tv = tape.value(table);
  const Mat& pv = tape.value(positions);
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (n > pv.rows()) throw UsageError("embed: sequence longer than position table");
  Mat out(n, tv.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= tv.rows()) throw UsageError("embed: token id out of range");
    out.row(i) = tv.row(id) + pv.row(i);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return tape.record(std::move(out), {table, positions}, [table, positions, idv = std::move(idv)](Tape<T>& tp, const Mat& g) {
    const auto n = static_cast<Eigen::Index>(idv.size());
    if (tp.requires_grad(table)) {
      Mat dt = Mat::Zero(tp.value(table).rows(), tp.value(table).cols());
      for (Eigen::Index i = 0; i < n; ++i) dt.row(idv[static_cast<std::size_t>(i)]) += g.row(i);
      tp.accumulate(table, dt);
    }
    if (tp.requires_grad(positions)) {
      Mat dp = Mat::Zero(tp.value(positions).rows(), tp.value(positions).cols());
      dp.topRows(n) = g;
      tp.accumulate(positions, dp);
    }
  });
}

template <typename T>
Var last_row(Tape<T>& tape, Var x) {
  using Mat = Matrix<T>;
  const Mat& xv = tape.value(x);
  Mat out = xv.bottomRows(1);
  const auto n = xv.rows();
  const auto d = xv.cols();
  return tape.record(std::move(out), {x}, [x, n, d](Tape<T>& tp, const Mat& g) {
    Mat dx = Mat::Zero(n, d);
    dx.bottomRows(1) = g;
    tp.accumulate(x, dx);
  });
}

/// Log-softmax of a 1×k row restricted to entries with mask[i] = true.
/// Masked-out entries produce 0 in the output and receive no gradient.
template <typename T>
Var masked_log_softmax(Tape<T>& tape, Var x, std::vector<bool> mask) {
  using Mat = Matrix<T>;
  const Mat& xv = tape.value(x);
  if (xv.rows() != 1 || static_cast<std::size_t>(xv.cols()) != mask.size())
    throw UsageError("masked_log_softmax: expects a single row matching the mask");
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) m = std::max(m, xv(0, static_cast<Eigen::Index>(i)));
  if (!std::isfinite(m)) throw UsageError("masked_log_softmax: empty mask");
  T sum = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) sum += std::exp(xv(0, static_cast<Eigen::Index>(i)) - m);
  const T lse = m + std::log(sum);
  Mat out = Mat::Zero(1, xv.cols());
  Mat p = Mat::Zero(1, xv.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(i);
    if (!mask[i]) continue;
    out(0, j) = xv(0, j) - lse;
    p(0, j) = std::exp(out(0, j));
  }
  return tape.record(std::move(out), {x}, [x, mask = std::move(mask), p](Tape<T>& tp, const Mat& g) {
    T gsum = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) gsum += g(0, static_cast<Eigen::Index>(i));
    Mat dx = Mat::Zero(1, g.cols());
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const auto j = static_cast<Eigen::Index>(i);
      if (mask[i]) dx(0, j) = g(0, j) - p(0, j) * gsum;
    }
    tp.accumulate(x, dx);
  });
}

}  // namespace ad
}  // namespace flagtrader

#endif  // FLAGTRADER_AUTODIFF_HPP
