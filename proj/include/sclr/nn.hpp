#pragma once

// Neural-net primitives: row softmax (plain and causal), cross entropy,
// KL divergence between logit rows, and the TopK-after-ReLU activation.
// The tape ops and the tape-free fast paths share the same selection and
// reduction helpers so both routes make identical choices.

#include <algorithm>
#include <vector>

#include "sclr/ops.hpp"

namespace sclr {

// Indices of the K largest strictly-positive entries, ties broken by lowest
// index. May return fewer than K (ReLU can leave less than K positive).
template <typename S>
void topk_select(const S* v, long d, long k, std::vector<long>& kept) {
  kept.clear();
  for (long i = 0; i < d; ++i)
    if (v[i] > S(0)) kept.push_back(i);
  if (long(kept.size()) > k) {
    auto better = [v](long a, long b) {
      return v[a] > v[b] || (v[a] == v[b] && a < b);
    };
    std::nth_element(kept.begin(), kept.begin() + k, kept.end(), better);
    kept.resize(std::size_t(k));
    std::sort(kept.begin(), kept.end());
  }
}

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  require(x.cols() >= 1, "softmax_rows: empty rows");
  auto xn = x.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad(), {xn}, [xn](Node<S>& self) {
        auto g = detail::self_grad(self);
        CMapM<S> y(self.value.data(), self.rows(), self.cols());
        auto gx = detail::grad_of(xn);
        for (long r = 0; r < g.rows(); ++r) {
          const S dot = (g.row(r).array() * y.row(r).array()).sum();
          gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
      });
  auto xm = x.mat();
  auto om = out.mat();
  for (long r = 0; r < xm.rows(); ++r) {
    const S mx = xm.row(r).maxCoeff();
    om.row(r) = (xm.row(r).array() - mx).exp();
    om.row(r) /= om.row(r).sum();
  }
  return out;
}

// Softmax over the causal prefix of each row of a square score matrix:
// row i is a distribution over columns 0..i, columns > i are exactly zero
// and are never read, so later positions cannot leak into earlier ones.
template <typename S>
Tensor<S> causal_softmax(const Tensor<S>& x) {
  require(x.rows() == x.cols(), "causal_softmax: matrix must be square");
  auto xn = x.node();
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad(), {xn}, [xn](Node<S>& self) {
        auto g = detail::self_grad(self);
        CMapM<S> y(self.value.data(), self.rows(), self.cols());
        auto gx = detail::grad_of(xn);
        for (long r = 0; r < g.rows(); ++r) {
          const long w = r + 1;
          const S dot = (g.row(r).head(w).array() * y.row(r).head(w).array()).sum();
          gx.row(r).head(w).array() +=
              y.row(r).head(w).array() * (g.row(r).head(w).array() - dot);
        }
      });
  auto xm = x.mat();
  auto om = out.mat();
  om.setZero();
  for (long r = 0; r < xm.rows(); ++r) {
    const long w = r + 1;
    const S mx = xm.row(r).head(w).maxCoeff();
    om.row(r).head(w) = (xm.row(r).head(w).array() - mx).exp();
    om.row(r).head(w) /= om.row(r).head(w).sum();
  }
  return out;
}

// out[i,:] = sum_{j<=i} P[i,j] V[j,:]. Only the lower triangle of P is read.
template <typename S>
Tensor<S> causal_matmul(const Tensor<S>& p, const Tensor<S>& v) {
  require(p.rows() == p.cols() && p.cols() == v.rows(),
          "causal_matmul: shape mismatch");
  auto pn = p.node();
  auto vn = v.node();
  auto out = Tensor<S>::make(
      Shape{p.rows(), v.cols()}, p.requires_grad() || v.requires_grad(),
      {pn, vn}, [pn, vn](Node<S>& self) {
        auto g = detail::self_grad(self);
        auto pv = detail::val_of(pn);
        auto vv = detail::val_of(vn);
        if (pn->requires_grad) {
          Mat<S> full = g * vv.transpose();
          full.template triangularView<Eigen::StrictlyUpper>().setZero();
          detail::grad_of(pn) += full;
        }
        if (vn->requires_grad) {
          detail::grad_of(vn).noalias() +=
              pv.transpose().template triangularView<Eigen::Upper>() * g;
        }
      });
  out.mat().noalias() = p.mat().template triangularView<Eigen::Lower>() * v.mat();
  return out;
}

// Mean over rows of -log softmax(logits)[target].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets) {
  require(long(targets.size()) == logits.rows(),
          "cross_entropy: one target per row required");
  for (int t : targets)
    require(0 <= t && t < logits.cols(), "cross_entropy: target id out of range");
  auto xn = logits.node();
  auto ids = std::make_shared<std::vector<int>>(targets);
  auto out = Tensor<S>::make(
      Shape{}, logits.requires_grad(), {xn}, [xn, ids](Node<S>& self) {
        const S g = self.grad[0] / S(ids->size());
        auto xv = detail::val_of(xn);
        auto gx = detail::grad_of(xn);
        Vec<S> row(xv.cols());
        for (long r = 0; r < xv.rows(); ++r) {
          const S mx = xv.row(r).maxCoeff();
          row = (xv.row(r).array() - mx).exp();
          row /= row.sum();
          gx.row(r) += g * row.transpose();
          gx(r, (*ids)[std::size_t(r)]) -= g;
        }
      });
  double acc = 0;
  auto xm = logits.mat();
  for (long r = 0; r < xm.rows(); ++r) {
    const S mx = xm.row(r).maxCoeff();
    const double lse =
        std::log(double((xm.row(r).array() - mx).exp().sum())) + double(mx);
    acc += lse - double(xm(r, targets[std::size_t(r)]));
  }
  out.data()[0] = S(acc / double(xm.rows()));
  return out;
}

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
template <typename S>
Tensor<S> kl_divergence(const Tensor<S>& p_logits, const Tensor<S>& q_logits) {
  require(p_logits.shape() == q_logits.shape(), "kl_divergence: shape mismatch");
  auto pn = p_logits.node();
  auto qn = q_logits.node();
  const long n = p_logits.rows();
  auto out = Tensor<S>::make(
      Shape{}, p_logits.requires_grad() || q_logits.requires_grad(), {pn, qn},
      [pn, qn, n](Node<S>& self) {
        const S g = self.grad[0] / S(n);
        auto pv = detail::val_of(pn);
        auto qv = detail::val_of(qn);
        Vec<S> p(pv.cols()), q(pv.cols()), d(pv.cols());
        for (long r = 0; r < pv.rows(); ++r) {
          S mp = pv.row(r).maxCoeff(), mq = qv.row(r).maxCoeff();
          p = (pv.row(r).array() - mp).exp();
          p /= p.sum();
          q = (qv.row(r).array() - mq).exp();
          q /= q.sum();
          d = (p.array().max(S(1e-30)).log() - q.array().max(S(1e-30)).log()).matrix();
          const S row_kl = p.dot(d);
          if (qn->requires_grad)
            detail::grad_of(qn).row(r) += g * (q - p).transpose();
          if (pn->requires_grad)
            detail::grad_of(pn).row(r) +=
                g * (p.array() * (d.array() - row_kl)).matrix().transpose();
        }
      });
  double acc = 0;
  auto pm = p_logits.mat();
  auto qm = q_logits.mat();
  Eigen::VectorXd p(pm.cols()), q(pm.cols());
  for (long r = 0; r < pm.rows(); ++r) {
    const double mp = double(pm.row(r).maxCoeff());
    const double mq = double(qm.row(r).maxCoeff());
    p = (pm.row(r).template cast<double>().array() - mp).exp();
    p /= p.sum();
    q = (qm.row(r).template cast<double>().array() - mq).exp();
    q /= q.sum();
    acc += std::max(
        0.0,
        (p.array() * (p.array().max(1e-300).log() - q.array().max(1e-300).log()))
            .sum());
  }
  out.data()[0] = S(acc / double(n));
  return out;
}

// ReLU followed by keep-K-largest, applied independently to every row.
// Gradients flow only through the surviving coordinates.
template <typename S>
Tensor<S> topk_relu(const Tensor<S>& x, long k) {
  require(k >= 1 && k <= x.cols(), "topk_relu: K out of range");
  auto xn = x.node();
  auto kept = std::make_shared<std::vector<std::vector<long>>>();
  kept->resize(std::size_t(x.rows()));
  auto out = Tensor<S>::make(
      x.shape(), x.requires_grad(), {xn}, [xn, kept](Node<S>& self) {
        auto g = detail::self_grad(self);
        auto gx = detail::grad_of(xn);
        for (long r = 0; r < g.rows(); ++r)
          for (long c : (*kept)[std::size_t(r)]) gx(r, c) += g(r, c);
      });
  auto xm = x.mat();
  auto om = out.mat();
  om.setZero();
  for (long r = 0; r < xm.rows(); ++r) {
    auto& rows_kept = (*kept)[std::size_t(r)];
    topk_select(xm.row(r).data(), xm.cols(), k, rows_kept);
    for (long c : rows_kept) om(r, c) = xm(r, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// tape-free fast-path reductions (evaluation only)
// ---------------------------------------------------------------------------

// Per-row KL(softmax(p) || softmax(q)) accumulated in double.
template <typename S>
std::vector<double> kl_rows(const Mat<S>& p_logits, const Mat<S>& q_logits) {
  require(p_logits.rows() == q_logits.rows() &&
              p_logits.cols() == q_logits.cols(),
          "kl_rows: shape mismatch");
  std::vector<double> out(std::size_t(p_logits.rows()));
  Eigen::VectorXd p(p_logits.cols()), q(p_logits.cols());
  for (long r = 0; r < p_logits.rows(); ++r) {
    const double mp = double(p_logits.row(r).maxCoeff());
    const double mq = double(q_logits.row(r).maxCoeff());
    p = (p_logits.row(r).template cast<double>().array() - mp).exp();
    p /= p.sum();
    q = (q_logits.row(r).template cast<double>().array() - mq).exp();
    q /= q.sum();
    out[std::size_t(r)] = std::max(
        0.0, (p.array() *
              (p.array().max(1e-300).log() - q.array().max(1e-300).log()))
                 .sum());
  }
  return out;
}

template <typename S>
double cross_entropy_rows(const Mat<S>& logits, const std::vector<int>& targets) {
  require(long(targets.size()) == logits.rows(), "cross_entropy_rows: size");
  double acc = 0;
  for (long r = 0; r < logits.rows(); ++r) {
    const double mx = double(logits.row(r).maxCoeff());
    const double lse =
        std::log((logits.row(r).template cast<double>().array() - mx).exp().sum()) +
        mx;
    acc += lse - double(logits(r, targets[std::size_t(r)]));
  }
  return acc / double(logits.rows());
}

}  // namespace sclr
