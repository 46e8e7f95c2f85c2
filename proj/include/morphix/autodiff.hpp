// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Small reverse-mode tape over dense double tensors. Just the operations the
// toy denoiser needs: 3x3 convolution, pooling, upsampling, SiLU, affine
// layers, fused single-head self-attention, and a mean-squared loss.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "morphix/error.hpp"
#include "morphix/score_model.hpp"

namespace morphix::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  using Shape = std::vector<std::size_t>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Var leaf(std::vector<double> value, Shape shape, bool requires_grad) {
    require(numel(shape) == value.size(), ErrorKind::shape_mismatch, "tape leaf shape/value mismatch");
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
  }

  Var node(std::vector<double> value, Shape shape, bool requires_grad, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  const std::vector<double>& value(Var v) const { return nodes_[v.id].value; }
  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  std::vector<double>& grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }

  /// Seeds d(output)/d(v) += seed.
  void seed(Var v, const std::vector<double>& s) {
    auto& g = grad(v);
    require(g.size() == s.size(), ErrorKind::shape_mismatch, "cotangent size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
  }

  /// Runs the recorded backward closures in reverse order.
  void backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward && nodes_[i].requires_grad && !nodes_[i].grad.empty()) {
        current_ = i;
        nodes_[i].backward(*this);
      }
    }
  }

  /// Gradient of the node whose backward closure is currently running.
  const std::vector<double>& current_grad() const { return nodes_[current_].grad; }

  static std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<Node> nodes_;
  std::size_t current_ = 0;
};

namespace detail {

inline bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (auto v : vs)
    if (t.requires_grad(v)) return true;
  return false;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// x [C,H,W] -> cols [C*9, H*W], zero padding 1.
inline std::vector<double> im2col3(const std::vector<double>& x, std::size_t C, std::size_t H, std::size_t W) {
  std::vector<double> cols(C * 9 * H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = &cols[((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * H * W];
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            row[y * W + xx] = x[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
          }
        }
      }
  return cols;
}

inline void col2im3(const double* cols, std::vector<double>& dx, std::size_t C, std::size_t H, std::size_t W) {
  for (std::size_t c = 0; c < C; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = &cols[((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * H * W];
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            dx[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] += row[y * W + xx];
          }
        }
      }
}

}  // namespace detail

/// 3x3 convolution, stride 1, zero padding 1. x [C,H,W], w [O,C,3,3], b [O].
inline Var conv3x3(Tape& tp, Var x, Var w, Var b) {
  const auto& xs = tp.shape(x);
  const std::size_t C = xs[0], H = xs[1], W = xs[2];
  const std::size_t O = tp.shape(w)[0];
  require(tp.shape(w)[1] == C, ErrorKind::shape_mismatch, "conv3x3 channel mismatch");
  auto cols = std::make_shared<std::vector<double>>(detail::im2col3(tp.value(x), C, H, W));
  std::vector<double> out(O * H * W);
  {
    MatMap om(out.data(), static_cast<long>(O), static_cast<long>(H * W));
    ConstMatMap wm(tp.value(w).data(), static_cast<long>(O), static_cast<long>(C * 9));
    ConstMatMap cm(cols->data(), static_cast<long>(C * 9), static_cast<long>(H * W));
    om.noalias() = wm * cm;
    for (std::size_t o = 0; o < O; ++o) om.row(static_cast<long>(o)).array() += tp.value(b)[o];
  }
  const bool rg = detail::any_grad(tp, {x, w, b});
  return tp.node(std::move(out), {O, H, W}, rg, [=](Tape& t) {
    ConstMatMap gm(t.current_grad().data(), static_cast<long>(O), static_cast<long>(H * W));
    ConstMatMap cm(cols->data(), static_cast<long>(C * 9), static_cast<long>(H * W));
    if (t.requires_grad(w)) {
      MatMap gw(t.grad(w).data(), static_cast<long>(O), static_cast<long>(C * 9));
      gw.noalias() += gm * cm.transpose();
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t o = 0; o < O; ++o) gb[o] += gm.row(static_cast<long>(o)).sum();
    }
    if (t.requires_grad(x)) {
      ConstMatMap wm(t.value(w).data(), static_cast<long>(O), static_cast<long>(C * 9));
      RowMat dcols = wm.transpose() * gm;
      detail::col2im3(dcols.data(), t.grad(x), C, H, W);
    }
  });
}

inline Var add(Tape& tp, Var a, Var b) {
  require(tp.shape(a) == tp.shape(b), ErrorKind::shape_mismatch, "add shape mismatch");
  std::vector<double> out = tp.value(a);
  const auto& bv = tp.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tp.node(std::move(out), tp.shape(a), detail::any_grad(tp, {a, b}), [=](Tape& t) {
    const auto& g = t.current_grad();
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

/// x [C,H,W] + bias [C] broadcast over positions.
inline Var add_channel_bias(Tape& tp, Var x, Var bias) {
  const auto& xs = tp.shape(x);
  const std::size_t C = xs[0], HW = xs[1] * xs[2];
  require(tp.value(bias).size() == C, ErrorKind::shape_mismatch, "channel bias mismatch");
  std::vector<double> out = tp.value(x);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] += tp.value(bias)[c];
  return tp.node(std::move(out), xs, detail::any_grad(tp, {x, bias}), [=](Tape& t) {
    const auto& g = t.current_grad();
    if (t.requires_grad(x)) {
      auto& gx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad(bias);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gb[c] += g[c * HW + i];
    }
  });
}

inline Var silu(Tape& tp, Var x) {
  const auto& xv = tp.value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = detail::silu(xv[i]);
  return tp.node(std::move(out), tp.shape(x), tp.requires_grad(x), [=](Tape& t) {
    const auto& g = t.current_grad();
    const auto& xin = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * detail::silu_grad(xin[i]);
  });
}

/// 2x2 average pooling. H and W must be even.
inline Var avgpool2(Tape& tp, Var x) {
  const auto& xs = tp.shape(x);
  const std::size_t C = xs[0], H = xs[1], W = xs[2];
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::shape_mismatch, "avgpool2 needs even dims");
  const std::size_t h = H / 2, w = W / 2;
  const auto& xv = tp.value(x);
  std::vector<double> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t z = 0; z < w; ++z) {
        const std::size_t base = (c * H + 2 * y) * W + 2 * z;
        out[(c * h + y) * w + z] = 0.25 * (xv[base] + xv[base + 1] + xv[base + W] + xv[base + W + 1]);
      }
  return tp.node(std::move(out), {C, h, w}, tp.requires_grad(x), [=](Tape& t) {
    const auto& g = t.current_grad();
    auto& gx = t.grad(x);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t z = 0; z < w; ++z) {
          const double q = 0.25 * g[(c * h + y) * w + z];
          const std::size_t base = (c * H + 2 * y) * W + 2 * z;
          gx[base] += q;
          gx[base + 1] += q;
          gx[base + W] += q;
          gx[base + W + 1] += q;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2(Tape& tp, Var x) {
  const auto& xs = tp.shape(x);
  const std::size_t C = xs[0], h = xs[1], w = xs[2], H = 2 * h, W = 2 * w;
  const auto& xv = tp.value(x);
  std::vector<double> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t z = 0; z < W; ++z) out[(c * H + y) * W + z] = xv[(c * h + y / 2) * w + z / 2];
  return tp.node(std::move(out), {C, H, W}, tp.requires_grad(x), [=](Tape& t) {
    const auto& g = t.current_grad();
    auto& gx = t.grad(x);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t z = 0; z < W; ++z) gx[(c * h + y / 2) * w + z / 2] += g[(c * H + y) * W + z];
  });
}

/// y = W x + b for vectors. w [M,N], x [N], b [M].
inline Var linear(Tape& tp, Var x, Var w, Var b) {
  const std::size_t M = tp.shape(w)[0], N = tp.shape(w)[1];
  require(tp.value(x).size() == N, ErrorKind::shape_mismatch, "linear input mismatch");
  std::vector<double> out(M);
  {
    ConstMatMap wm(tp.value(w).data(), static_cast<long>(M), static_cast<long>(N));
    Eigen::Map<const Eigen::VectorXd> xm(tp.value(x).data(), static_cast<long>(N));
    Eigen::Map<Eigen::VectorXd> om(out.data(), static_cast<long>(M));
    om.noalias() = wm * xm;
    for (std::size_t i = 0; i < M; ++i) out[i] += tp.value(b)[i];
  }
  return tp.node(std::move(out), {M}, detail::any_grad(tp, {x, w, b}), [=](Tape& t) {
    Eigen::Map<const Eigen::VectorXd> gm(t.current_grad().data(), static_cast<long>(M));
    Eigen::Map<const Eigen::VectorXd> xm(t.value(x).data(), static_cast<long>(N));
    if (t.requires_grad(w)) {
      MatMap gw(t.grad(w).data(), static_cast<long>(M), static_cast<long>(N));
      gw.noalias() += gm * xm.transpose();
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < M; ++i) gb[i] += gm[static_cast<long>(i)];
    }
    if (t.requires_grad(x)) {
      ConstMatMap wm(t.value(w).data(), static_cast<long>(M), static_cast<long>(N));
      Eigen::Map<Eigen::VectorXd> gx(t.grad(x).data(), static_cast<long>(N));
      gx.noalias() += wm.transpose() * gm;
    }
  });
}

/// Weights of one self-attention block.
struct AttentionParams {
  Var wq, wk, wv, wo;  // each [C,C], acting on token rows
};

/// Optional capture of the row-stochastic attention matrix (tokens x tokens).
struct AttentionCapture {
  std::size_t layer = 0;
  std::vector<double>* weights = nullptr;
};

/// Residual single-head self-attention over the H*W positions of x [C,H,W]:
///   out = x + (softmax(Q K^T / sqrt(C)) V Wo^T)^T
/// K and V are rounded to float32 and offered to the attention hook, which
/// may substitute cached values; substituted K/V carry no gradient.
inline Var self_attention(Tape& tp, Var x, const AttentionParams& p, std::size_t layer, AttentionControl* control,
                          AttentionCapture capture = {}) {
  const auto& xs = tp.shape(x);
  const std::size_t C = xs[0], N = xs[1] * xs[2];
  const long n = static_cast<long>(N), c = static_cast<long>(C);
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));

  auto X = std::make_shared<RowMat>(ConstMatMap(tp.value(x).data(), c, n).transpose());
  ConstMatMap wq(tp.value(p.wq).data(), c, c), wk(tp.value(p.wk).data(), c, c), wv(tp.value(p.wv).data(), c, c),
      wo(tp.value(p.wo).data(), c, c);
  auto Q = std::make_shared<RowMat>(*X * wq.transpose());
  auto K = std::make_shared<RowMat>(*X * wk.transpose());
  auto V = std::make_shared<RowMat>(*X * wv.transpose());

  AttentionKV kv{N, C, std::vector<float>(N * C), std::vector<float>(N * C)};
  for (std::size_t i = 0; i < N * C; ++i) {
    kv.keys[i] = static_cast<float>(K->data()[i]);
    kv.values[i] = static_cast<float>(V->data()[i]);
  }
  bool injected = false;
  if (control != nullptr) {
    injected = control->on_attention(layer, kv);
    require(kv.tokens == N && kv.dim == C && kv.keys.size() == N * C && kv.values.size() == N * C,
            ErrorKind::shape_mismatch, "attention hook changed K/V geometry at layer " + std::to_string(layer));
  }
  for (std::size_t i = 0; i < N * C; ++i) {
    K->data()[i] = kv.keys[i];
    V->data()[i] = kv.values[i];
  }

  auto A = std::make_shared<RowMat>((*Q * K->transpose()) * scale);
  for (long r = 0; r < n; ++r) {
    auto row = A->row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  if (capture.weights != nullptr && capture.layer == layer) capture.weights->assign(A->data(), A->data() + N * N);
  auto O = std::make_shared<RowMat>(*A * *V);
  RowMat P = *O * wo.transpose();

  std::vector<double> out = tp.value(x);
  MatMap om(out.data(), c, n);
  om += P.transpose();

  const bool rg = detail::any_grad(tp, {x, p.wq, p.wk, p.wv, p.wo});
  return tp.node(std::move(out), xs, rg, [=](Tape& t) {
    ConstMatMap gout(t.current_grad().data(), c, n);
    const RowMat dP = gout.transpose();
    ConstMatMap wqm(t.value(p.wq).data(), c, c), wkm(t.value(p.wk).data(), c, c), wvm(t.value(p.wv).data(), c, c),
        wom(t.value(p.wo).data(), c, c);
    if (t.requires_grad(p.wo)) {
      MatMap g(t.grad(p.wo).data(), c, c);
      g.noalias() += dP.transpose() * *O;
    }
    const RowMat dO = dP * wom;
    const RowMat dA = dO * V->transpose();
    RowMat dS = A->cwiseProduct(dA);
    const Eigen::VectorXd rs = dS.rowwise().sum();
    dS = A->cwiseProduct(dA.colwise() - rs) * scale;
    const RowMat dQ = dS * *K;
    if (t.requires_grad(p.wq)) {
      MatMap g(t.grad(p.wq).data(), c, c);
      g.noalias() += dQ.transpose() * *X;
    }
    RowMat dX = dQ * wqm;
    if (!injected) {
      const RowMat dK = dS.transpose() * *Q;
      const RowMat dV = A->transpose() * dO;
      if (t.requires_grad(p.wk)) {
        MatMap g(t.grad(p.wk).data(), c, c);
        g.noalias() += dK.transpose() * *X;
      }
      if (t.requires_grad(p.wv)) {
        MatMap g(t.grad(p.wv).data(), c, c);
        g.noalias() += dV.transpose() * *X;
      }
      dX.noalias() += dK * wkm;
      dX.noalias() += dV * wvm;
    }
    if (t.requires_grad(x)) {
      MatMap gx(t.grad(x).data(), c, n);
      gx += gout;
      gx += dX.transpose();
    }
  });
}

/// Mean squared error against a constant target; returns a scalar node.
inline Var mse(Tape& tp, Var pred, const std::vector<double>& target) {
  const auto& pv = tp.value(pred);
  require(pv.size() == target.size(), ErrorKind::shape_mismatch, "mse size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - target[i]) * (pv[i] - target[i]);
  const double inv = 1.0 / static_cast<double>(pv.size());
  auto tgt = std::make_shared<std::vector<double>>(target);
  return tp.node({s * inv}, {1}, tp.requires_grad(pred), [=](Tape& t) {
    const double g = t.current_grad()[0];
    const auto& p = t.value(pred);
    auto& gp = t.grad(pred);
    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += 2.0 * inv * g * (p[i] - (*tgt)[i]);
  });
}

}  // namespace morphix::ad
