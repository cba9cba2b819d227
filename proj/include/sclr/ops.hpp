#pragma once

// Expression-style free functions over Tensor. Each op computes its forward
// value eagerly through Eigen and, when an input requires a gradient,
// attaches the matching reverse-mode closure.

#include <cmath>
#include <numbers>

#include "sclr/tensor.hpp"

namespace sclr {

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

namespace detail {

template <typename S>
inline MapM<S> grad_of(const NodePtr<S>& n) {
  n->ensure_grad();
  return MapM<S>(n->grad.data(), n->rows(), n->cols());
}

template <typename S>
inline MapV<S> gradv_of(const NodePtr<S>& n) {
  n->ensure_grad();
  return MapV<S>(n->grad.data(), long(n->value.size()));
}

template <typename S>
inline CMapM<S> val_of(const NodePtr<S>& n) {
  return CMapM<S>(n->value.data(), n->rows(), n->cols());
}

template <typename S>
inline CMapV<S> valv_of(const NodePtr<S>& n) {
  return CMapV<S>(n->value.data(), long(n->value.size()));
}

template <typename S>
inline CMapM<S> self_grad(Node<S>& self) {
  return CMapM<S>(self.grad.data(), self.rows(), self.cols());
}

template <typename S>
inline CMapV<S> self_gradv(Node<S>& self) {
  return CMapV<S>(self.grad.data(), long(self.grad.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& x, Fwd fwd, Bwd bwd) {
  auto xn = x.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad(), {xn}, [xn, bwd](Node<S>& self) {
        auto g = detail::self_gradv(self);
        auto gx = detail::gradv_of(xn);
        auto xv = detail::valv_of(xn);
        for (long i = 0; i < g.size(); ++i) gx[i] += bwd(xv[i]) * g[i];
      });
  const S* in = x.data();
  S* o = out.data();
  for (long i = 0; i < x.size(); ++i) o[i] = fwd(in[i]);
  return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  auto xn = x.node();
  auto out = Tensor<S>::make(x.shape(), x.requires_grad(), {xn},
                             [xn](Node<S>& self) {
                               auto g = detail::self_gradv(self);
                               auto gx = detail::gradv_of(xn);
                               CMapV<S> y(self.value.data(), g.size());
                               gx.array() +=
                                   (S(1) - y.array().square()) * g.array();
                             });
  out.vec() = x.vec().array().tanh();
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v) { return v > S(0) ? S(1) : S(0); });
}

namespace detail {
template <typename S>
inline S norm_pdf(S x) {
  return S(std::exp(-0.5 * double(x) * double(x)) /
           std::sqrt(2.0 * std::numbers::pi));
}
template <typename S>
inline S norm_cdf(S x) {
  return S(0.5 * (1.0 + std::erf(double(x) / std::numbers::sqrt2)));
}
}  // namespace detail

// Exact (erf-based) GELU and its first derivative as primitives. The
// derivative is itself differentiable, which the Jacobian penalty needs.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  return unary_op(
      x, [](S v) { return v * detail::norm_cdf(v); },
      [](S v) { return detail::norm_cdf(v) + v * detail::norm_pdf(v); });
}

template <typename S>
Tensor<S> gelu_grad(const Tensor<S>& x) {
  return unary_op(
      x, [](S v) { return detail::norm_cdf(v) + v * detail::norm_pdf(v); },
      [](S v) { return detail::norm_pdf(v) * (S(2) - v * v); });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  auto an = a.node();
  auto bn = b.node();
  auto out = Tensor<S>::make(a.shape(), a.requires_grad() || b.requires_grad(),
                             {an, bn}, [an, bn](Node<S>& self) {
                               auto g = detail::self_gradv(self);
                               if (an->requires_grad)
                                 detail::gradv_of(an) += g;
                               if (bn->requires_grad)
                                 detail::gradv_of(bn) += g;
                             });
  out.vec() = a.vec() + b.vec();
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  auto an = a.node();
  auto bn = b.node();
  auto out = Tensor<S>::make(a.shape(), a.requires_grad() || b.requires_grad(),
                             {an, bn}, [an, bn](Node<S>& self) {
                               auto g = detail::self_gradv(self);
                               if (an->requires_grad)
                                 detail::gradv_of(an) += g;
                               if (bn->requires_grad)
                                 detail::gradv_of(bn) -= g;
                             });
  out.vec() = a.vec() - b.vec();
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  auto an = a.node();
  auto bn = b.node();
  auto out = Tensor<S>::make(
      a.shape(), a.requires_grad() || b.requires_grad(), {an, bn},
      [an, bn](Node<S>& self) {
        auto g = detail::self_gradv(self);
        if (an->requires_grad)
          detail::gradv_of(an).array() +=
              detail::valv_of(bn).array() * g.array();
        if (bn->requires_grad)
          detail::gradv_of(bn).array() +=
              detail::valv_of(an).array() * g.array();
      });
  out.vec() = a.vec().array() * b.vec().array();
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  auto xn = x.node();
  auto out = Tensor<S>::make(x.shape(), x.requires_grad(), {xn},
                             [xn, c](Node<S>& self) {
                               detail::gradv_of(xn) +=
                                   c * detail::self_gradv(self);
                             });
  out.vec() = x.vec() * c;
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

// ---------------------------------------------------------------------------
// row/column broadcasts (v broadcast over rows; u over columns)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> rowwise_add(const Tensor<S>& x, const Tensor<S>& v) {
  require(v.size() == x.cols(), "rowwise_add: vector length != cols");
  auto xn = x.node();
  auto vn = v.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad() || v.requires_grad(), {xn, vn},
      [xn, vn](Node<S>& self) {
        auto g = detail::self_grad(self);
        if (xn->requires_grad) detail::grad_of(xn) += g;
        if (vn->requires_grad)
          detail::gradv_of(vn) += g.colwise().sum().transpose();
      });
  out.mat() = x.mat().rowwise() + v.vec().transpose();
  return out;
}

template <typename S>
Tensor<S> rowwise_mul(const Tensor<S>& x, const Tensor<S>& v) {
  require(v.size() == x.cols(), "rowwise_mul: vector length != cols");
  auto xn = x.node();
  auto vn = v.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad() || v.requires_grad(), {xn, vn},
      [xn, vn](Node<S>& self) {
        auto g = detail::self_grad(self);
        if (xn->requires_grad)
          detail::grad_of(xn).array() +=
              g.array().rowwise() * detail::valv_of(vn).transpose().array();
        if (vn->requires_grad)
          detail::gradv_of(vn) +=
              (g.array() * detail::val_of(xn).array())
                  .colwise()
                  .sum()
                  .transpose()
                  .matrix();
      });
  out.mat() = x.mat().array().rowwise() * v.vec().transpose().array();
  return out;
}

template <typename S>
Tensor<S> colwise_mul(const Tensor<S>& x, const Tensor<S>& u) {
  require(u.size() == x.rows(), "colwise_mul: vector length != rows");
  auto xn = x.node();
  auto un = u.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad() || u.requires_grad(), {xn, un},
      [xn, un](Node<S>& self) {
        auto g = detail::self_grad(self);
        if (xn->requires_grad)
          detail::grad_of(xn).array() +=
              g.array().colwise() * detail::valv_of(un).array();
        if (un->requires_grad)
          detail::gradv_of(un) += (g.array() * detail::val_of(xn).array())
                                      .rowwise()
                                      .sum()
                                      .matrix();
      });
  out.mat() = x.mat().array().colwise() * u.vec().array();
  return out;
}

// ---------------------------------------------------------------------------
// matmul with transpose flags
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool ta = false,
                 bool tb = false) {
  const long m = ta ? a.cols() : a.rows();
  const long ka = ta ? a.rows() : a.cols();
  const long kb = tb ? b.cols() : b.rows();
  const long n = tb ? b.rows() : b.cols();
  require(ka == kb, "matmul: inner dimensions mismatch " +
                        shape_str(a.shape()) + (ta ? "^T" : "") + " * " +
                        shape_str(b.shape()) + (tb ? "^T" : ""));
  auto an = a.node();
  auto bn = b.node();
  auto out = Tensor<S>::make(
      Shape{m, n}, a.requires_grad() || b.requires_grad(), {an, bn},
      [an, bn, ta, tb](Node<S>& self) {
        auto g = detail::self_grad(self);
        auto av = detail::val_of(an);
        auto bv = detail::val_of(bn);
        if (an->requires_grad) {
          auto ga = detail::grad_of(an);
          if (!ta && !tb)
            ga.noalias() += g * bv.transpose();
          else if (!ta && tb)
            ga.noalias() += g * bv;
          else if (ta && !tb)
            ga.noalias() += bv * g.transpose();
          else
            ga.noalias() += bv.transpose() * g.transpose();
        }
        if (bn->requires_grad) {
          auto gb = detail::grad_of(bn);
          if (!ta && !tb)
            gb.noalias() += av.transpose() * g;
          else if (!ta && tb)
            gb.noalias() += g.transpose() * av;
          else if (ta && !tb)
            gb.noalias() += av * g;
          else
            gb.noalias() += g.transpose() * av.transpose();
        }
      });
  auto am = a.mat();
  auto bm = b.mat();
  auto om = out.mat();
  if (!ta && !tb)
    om.noalias() = am * bm;
  else if (!ta && tb)
    om.noalias() = am * bm.transpose();
  else if (ta && !tb)
    om.noalias() = am.transpose() * bm;
  else
    om.noalias() = am.transpose() * bm.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  auto xn = x.node();
  auto out = Tensor<S>::make(Shape{}, x.requires_grad(), {xn},
                             [xn](Node<S>& self) {
                               detail::gradv_of(xn).array() += self.grad[0];
                             });
  out.data()[0] = x.vec().sum();
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / S(x.size());
  auto xn = x.node();
  auto out = Tensor<S>::make(Shape{}, x.requires_grad(), {xn},
                             [xn, inv](Node<S>& self) {
                               detail::gradv_of(xn).array() +=
                                   self.grad[0] * inv;
                             });
  out.data()[0] = x.vec().sum() * inv;
  return out;
}

template <typename S>
Tensor<S> sq_norm(const Tensor<S>& x) {
  auto xn = x.node();
  auto out = Tensor<S>::make(Shape{}, x.requires_grad(), {xn},
                             [xn](Node<S>& self) {
                               detail::gradv_of(xn) +=
                                   (S(2) * self.grad[0]) * detail::valv_of(xn);
                             });
  out.data()[0] = x.vec().squaredNorm();
  return out;
}

template <typename S>
Tensor<S> l1_norm(const Tensor<S>& x) {
  auto xn = x.node();
  auto out = Tensor<S>::make(
      Shape{}, x.requires_grad(), {xn}, [xn](Node<S>& self) {
        auto gx = detail::gradv_of(xn);
        auto xv = detail::valv_of(xn);
        const S g = self.grad[0];
        for (long i = 0; i < gx.size(); ++i)
          gx[i] += g * (xv[i] > S(0) ? S(1) : (xv[i] < S(0) ? S(-1) : S(0)));
      });
  out.data()[0] = x.vec().template lpNorm<1>();
  return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, long r0, long r1) {
  require(0 <= r0 && r0 < r1 && r1 <= x.rows(), "slice_rows: range out of bounds");
  auto xn = x.node();
  auto out = Tensor<S>::make(Shape{r1 - r0, x.cols()}, x.requires_grad(), {xn},
                             [xn, r0](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               detail::grad_of(xn).middleRows(r0, g.rows()) += g;
                             });
  out.mat() = x.mat().middleRows(r0, r1 - r0);
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, long c0, long c1) {
  require(0 <= c0 && c0 < c1 && c1 <= x.cols(), "slice_cols: range out of bounds");
  auto xn = x.node();
  auto out = Tensor<S>::make(Shape{x.rows(), c1 - c0}, x.requires_grad(), {xn},
                             [xn, c0](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               detail::grad_of(xn).middleCols(c0, g.cols()) += g;
                             });
  out.mat() = x.mat().middleCols(c0, c1 - c0);
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat_rows: empty list");
  long rows = 0;
  const long cols = parts[0].cols();
  bool rg = false;
  std::vector<NodePtr<S>> nodes;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
    nodes.push_back(p.node());
  }
  auto out = Tensor<S>::make(Shape{rows, cols}, rg, nodes,
                             [nodes](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               long r = 0;
                               for (const auto& n : nodes) {
                                 const long pr = n->rows();
                                 if (n->requires_grad)
                                   detail::grad_of(n) += g.middleRows(r, pr);
                                 r += pr;
                               }
                             });
  long r = 0;
  for (const auto& p : parts) {
    out.mat().middleRows(r, p.rows()) = p.mat();
    r += p.rows();
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat_cols: empty list");
  long cols = 0;
  const long rows = parts[0].rows();
  bool rg = false;
  std::vector<NodePtr<S>> nodes;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
    nodes.push_back(p.node());
  }
  auto out = Tensor<S>::make(Shape{rows, cols}, rg, nodes,
                             [nodes](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               long c = 0;
                               for (const auto& n : nodes) {
                                 const long pc = n->cols();
                                 if (n->requires_grad)
                                   detail::grad_of(n) += g.middleCols(c, pc);
                                 c += pc;
                               }
                             });
  long c = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(c, p.cols()) = p.mat();
    c += p.cols();
  }
  return out;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<long> idx) {
  for (long i : idx)
    require(0 <= i && i < x.rows(), "gather_rows: index out of range");
  auto xn = x.node();
  auto ids = std::make_shared<std::vector<long>>(std::move(idx));
  auto out = Tensor<S>::make(Shape{long(ids->size()), x.cols()},
                             x.requires_grad(), {xn},
                             [xn, ids](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               auto gx = detail::grad_of(xn);
                               for (long r = 0; r < g.rows(); ++r)
                                 gx.row((*ids)[r]) += g.row(r);
                             });
  auto om = out.mat();
  auto xm = x.mat();
  for (std::size_t r = 0; r < ids->size(); ++r) om.row(long(r)) = xm.row((*ids)[r]);
  return out;
}

template <typename S>
Tensor<S> gather_cols(const Tensor<S>& x, std::vector<long> idx) {
  for (long i : idx)
    require(0 <= i && i < x.cols(), "gather_cols: index out of range");
  auto xn = x.node();
  auto ids = std::make_shared<std::vector<long>>(std::move(idx));
  auto out = Tensor<S>::make(Shape{x.rows(), long(ids->size())},
                             x.requires_grad(), {xn},
                             [xn, ids](Node<S>& self) {
                               auto g = detail::self_grad(self);
                               auto gx = detail::grad_of(xn);
                               for (long c = 0; c < g.cols(); ++c)
                                 gx.col((*ids)[c]) += g.col(c);
                             });
  auto om = out.mat();
  auto xm = x.mat();
  for (std::size_t c = 0; c < ids->size(); ++c) om.col(long(c)) = xm.col((*ids)[c]);
  return out;
}

// Value-only copy; gradients do not flow past it.
template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  return Tensor<S>::from(x.shape(), x.values());
}

}  // namespace sclr
