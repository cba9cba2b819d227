#pragma once

// Closed-form Jacobians between the latent spaces of a TopK SAE pair across
// a feedforward layer or a full feedforward block (skip connection + DyT +
// MLP), the JSAE training loss, and the coefficient sweep harness.
//
// The active Jacobian block is assembled from gathered rows/columns of the
// encoder/decoder stores, so nothing of size d_sae x d_sae is ever
// materialized; peak auxiliary memory stays O(K * d_mlp + K^2).

#include <string>
#include <vector>

#include "sclr/sae.hpp"

namespace sclr {

struct JsaeConfig {
  double lambda = 0.0;

  // E12-series coefficients plus zero.
  static std::vector<double> sweep_set() {
    return {0.0,    1e-3,   1.2e-3, 1.5e-3, 1.8e-3, 2.2e-3, 2.7e-3,
            3.3e-3, 3.9e-3, 4.7e-3, 5.6e-3, 6.8e-3, 10e-3};
  }
};

// Active block of the latent-to-latent Jacobian. Entries outside k2 x k1 are
// identically zero. `block` participates in the tape, so penalties on it are
// differentiable with respect to both SAEs' weights.
template <typename S>
struct ActiveJacobian {
  std::vector<long> k1, k2;
  Tensor<S> block;  // [|k2| x |k1|], undefined when either set is empty

  bool empty() const { return k1.empty() || k2.empty(); }
};

namespace detail {

template <typename S>
std::vector<long> support_of_row(const Tensor<S>& z_row) {
  std::vector<long> idx;
  const S* v = z_row.data();
  for (long i = 0; i < z_row.size(); ++i)
    if (v[i] != S(0)) idx.push_back(i);
  return idx;
}

// Downstream active set at the mapped point (tape-free; selection is data).
template <typename S>
std::vector<long> downstream_active(const SaeInstance<S>& sae_y,
                                    const Mat<S>& y_hat) {
  Mat<S> pre = encode_pre_eval(sae_y, y_hat);
  std::vector<long> k2;
  topk_select(pre.row(0).data(), pre.cols(), sae_y.k, k2);
  return k2;
}

template <typename S>
void check_jacobian_pair(const SaeInstance<S>& sx, const SaeInstance<S>& sy,
                         const LmLayer<S>& l) {
  require(sx.detach_prefix == 0 && sy.detach_prefix == 0,
          "jacobian: detached staircase views are not supported");
  require(sx.d_model() == l.w1.cols() && sy.d_model() == l.w2.rows(),
          "jacobian: SAE/MLP width mismatch");
}

// DyT derivative on the tape: alpha .* gamma .* (1 - tanh(alpha x)^2).
template <typename S>
Tensor<S> dyt_grad_tape(const Tensor<S>& x, const DytParams<S>& p) {
  Tensor<S> t = tanh(rowwise_mul(x, p.alpha));
  Tensor<S> ones = const_tensor<S>(x.shape(), S(1), false);
  return rowwise_mul(rowwise_mul(sub(ones, mul(t, t)), p.alpha), p.gamma);
}

}  // namespace detail

// J = W_enc_y[k2,:] * W2 * diag(gelu'(z)) * W1 * W_dec_x[:,k1] with z the
// MLP pre-activation at the decoded point. `z_up` is one latent row.
template <typename S>
ActiveJacobian<S> jacobian_ff_layer(const SaeInstance<S>& sae_x,
                                    const SaeInstance<S>& sae_y,
                                    const LmLayer<S>& l,
                                    const Tensor<S>& z_up) {
  detail::check_jacobian_pair(sae_x, sae_y, l);
  require(z_up.rows() == 1 && z_up.cols() == sae_x.d_sae,
          "jacobian_ff_layer: expected one latent row");
  ActiveJacobian<S> out;
  out.k1 = detail::support_of_row(z_up);
  if (out.k1.empty()) return out;

  Tensor<S> wx_act = gather_cols(sae_x.w_dec_store, out.k1);  // [d x |k1|]
  Tensor<S> z_act = gather_cols(z_up, out.k1);                // [1 x |k1|]
  Tensor<S> x_hat = rowwise_add(matmul(z_act, wx_act, false, true), sae_x.b_dec);
  Tensor<S> z_mlp = rowwise_add(matmul(x_hat, l.w1, false, true), l.b1);

  Mat<S> y_hat = (Mat<S>(z_mlp.mat().unaryExpr([](S v) {
                   return v * detail::norm_cdf(v);
                 })) *
                  l.w2.mat().transpose())
                     .rowwise() +
                 l.b2.vec().transpose();
  out.k2 = detail::downstream_active(sae_y, y_hat);
  if (out.k2.empty()) return out;

  Tensor<S> wy_act = gather_rows(sae_y.w_enc_store, out.k2);  // [|k2| x d]
  Tensor<S> a = matmul(wy_act, l.w2);                         // [|k2| x m]
  Tensor<S> a_phi = rowwise_mul(a, gelu_grad(z_mlp));
  Tensor<S> c = matmul(l.w1, wx_act);                         // [m x |k1|]
  out.block = matmul(a_phi, c);
  return out;
}

// J = J_skip + J_FFh for g(x) = x + FF(DyT(x)):
//   J_skip = W_enc_y[k2,:] W_dec_x[:,k1]
//   J_FFh  = W_enc_y[k2,:] W2 diag(gelu'(z)) W1 diag(DyT'(x)) W_dec_x[:,k1]
template <typename S>
ActiveJacobian<S> jacobian_ff_block(const SaeInstance<S>& sae_x,
                                    const SaeInstance<S>& sae_y,
                                    const LmLayer<S>& l,
                                    const Tensor<S>& z_up) {
  detail::check_jacobian_pair(sae_x, sae_y, l);
  require(z_up.rows() == 1 && z_up.cols() == sae_x.d_sae,
          "jacobian_ff_block: expected one latent row");
  ActiveJacobian<S> out;
  out.k1 = detail::support_of_row(z_up);
  if (out.k1.empty()) return out;

  Tensor<S> wx_act = gather_cols(sae_x.w_dec_store, out.k1);
  Tensor<S> z_act = gather_cols(z_up, out.k1);
  Tensor<S> x_hat = rowwise_add(matmul(z_act, wx_act, false, true), sae_x.b_dec);
  Tensor<S> f_in = dyt(x_hat, l.dyt_mlp);
  Tensor<S> z_mlp = rowwise_add(matmul(f_in, l.w1, false, true), l.b1);

  Mat<S> y_hat = x_hat.mat() + ((Mat<S>(z_mlp.mat().unaryExpr([](S v) {
                                  return v * detail::norm_cdf(v);
                                })) *
                                 l.w2.mat().transpose())
                                    .rowwise() +
                                l.b2.vec().transpose());
  out.k2 = detail::downstream_active(sae_y, y_hat);
  if (out.k2.empty()) return out;

  Tensor<S> wy_act = gather_rows(sae_y.w_enc_store, out.k2);
  Tensor<S> skip = matmul(wy_act, wx_act);  // [|k2| x |k1|]

  Tensor<S> h_prime = detail::dyt_grad_tape(x_hat, l.dyt_mlp);  // [1 x d]
  Tensor<S> a = matmul(wy_act, l.w2);
  Tensor<S> a_phi = rowwise_mul(a, gelu_grad(z_mlp));
  Tensor<S> c = matmul(l.w1, colwise_mul(wx_act, h_prime));
  out.block = add(skip, matmul(a_phi, c));
  return out;
}

// ---------------------------------------------------------------------------
// tape-free closed form (evaluation/metrics)
// ---------------------------------------------------------------------------

template <typename S>
struct JacobianEval {
  std::vector<long> k1, k2;
  Mat<S> block;

  bool empty() const { return k1.empty() || k2.empty(); }
  double l1() const {
    return empty() ? 0.0 : double(block.template lpNorm<1>());
  }
};

template <typename S>
JacobianEval<S> jacobian_eval(const SaeInstance<S>& sae_x,
                              const SaeInstance<S>& sae_y, const LmLayer<S>& l,
                              const Vec<S>& z_up, bool block_with_skip) {
  JacobianEval<S> out;
  for (long i = 0; i < z_up.size(); ++i)
    if (z_up[i] != S(0)) out.k1.push_back(i);
  if (out.k1.empty()) return out;

  const long d = sae_x.d_model();
  Mat<S> wx_act(d, long(out.k1.size()));
  for (std::size_t j = 0; j < out.k1.size(); ++j)
    wx_act.col(long(j)) = sae_x.w_dec_store.mat().col(out.k1[j]);
  Vec<S> z_act(long(out.k1.size()));
  for (std::size_t j = 0; j < out.k1.size(); ++j) z_act[long(j)] = z_up[out.k1[j]];

  Mat<S> x_hat = (wx_act * z_act).transpose();  // [1 x d]
  x_hat.row(0) += sae_x.b_dec.vec().transpose();
  Vec<S> h_prime;
  Mat<S> f_in = x_hat;
  if (block_with_skip) {
    h_prime = dyt_prime(x_hat, l.dyt_mlp).row(0).transpose();
    dyt_eval(f_in, l.dyt_mlp);
  }
  Mat<S> z_mlp = (f_in * l.w1.mat().transpose()).rowwise() + l.b1.vec().transpose();
  Mat<S> act = z_mlp;
  gelu_eval(act);
  Mat<S> y_hat = (act * l.w2.mat().transpose()).rowwise() + l.b2.vec().transpose();
  if (block_with_skip) y_hat += x_hat;
  Mat<S> pre = encode_pre_eval(sae_y, y_hat);
  topk_select(pre.row(0).data(), pre.cols(), sae_y.k, out.k2);
  if (out.k2.empty()) return out;

  Mat<S> wy_act(long(out.k2.size()), d);
  for (std::size_t i = 0; i < out.k2.size(); ++i)
    wy_act.row(long(i)) = sae_y.w_enc_store.mat().row(out.k2[i]);

  Mat<S> gp = gelu_prime(z_mlp);
  Mat<S> a = wy_act * l.w2.mat();  // [|k2| x m]
  a.array().rowwise() *= gp.row(0).array();
  Mat<S> rhs = block_with_skip
                   ? Mat<S>(l.w1.mat() * (wx_act.array().colwise() *
                                          h_prime.array())
                                             .matrix())
                   : Mat<S>(l.w1.mat() * wx_act);
  out.block = a * rhs;
  if (block_with_skip) out.block += wy_act * wx_act;
  return out;
}

// ---------------------------------------------------------------------------
// JSAE loss and training
// ---------------------------------------------------------------------------

template <typename S>
struct JsaePair {
  SaeInstance<S> sae_x, sae_y;
  PairLocation loc = PairLocation::FfLayer;
  int layer = 0;
};

template <typename S>
struct JsaeLossParts {
  Tensor<S> total;
  double recon_x = 0, recon_y = 0, j_l1 = 0;
};

// L_JSAE = ||h_x - h_x'||^2 + ||h_y - h_y'||^2 + lambda * mean_b ||J_b||_1.
template <typename S>
JsaeLossParts<S> jsae_loss(const JsaePair<S>& pair, const LmLayer<S>& l,
                           const Tensor<S>& h_x, const Tensor<S>& h_y,
                           double lambda) {
  require(lambda >= 0, "jsae_loss: lambda must be non-negative");
  require(h_x.rows() == h_y.rows(), "jsae_loss: unpaired samples");
  const long b = h_x.rows();
  JsaeLossParts<S> out;

  Tensor<S> z_x = encode(pair.sae_x, h_x);
  Tensor<S> loss_x =
      scale(sq_norm(sub(decode(pair.sae_x, z_x), h_x)), S(1) / S(b));
  Tensor<S> loss_y = sae_recon_loss(pair.sae_y, h_y);
  out.recon_x = double(loss_x.item());
  out.recon_y = double(loss_y.item());
  out.total = add(loss_x, loss_y);

  if (lambda > 0) {
    Tensor<S> acc = Tensor<S>::scalar(S(0));
    for (long i = 0; i < b; ++i) {
      Tensor<S> row = slice_rows(z_x, i, i + 1);
      ActiveJacobian<S> jac =
          pair.loc == PairLocation::FfLayer
              ? jacobian_ff_layer(pair.sae_x, pair.sae_y, l, row)
              : jacobian_ff_block(pair.sae_x, pair.sae_y, l, row);
      if (!jac.empty()) acc = add(acc, l1_norm(jac.block));
    }
    out.j_l1 = double(acc.item()) / double(b);
    out.total = add(out.total, scale(acc, S(lambda) / S(b)));
  }
  return out;
}

// Mean ||J||_1 over rows of upstream activations (tape-free).
template <typename S>
double mean_jacobian_l1(const JsaePair<S>& pair, const LmLayer<S>& l,
                        const Mat<S>& h_x) {
  double acc = 0;
  Mat<S> z = encode_eval(pair.sae_x, h_x);
  for (long r = 0; r < z.rows(); ++r) {
    Vec<S> row = z.row(r).transpose();
    acc += jacobian_eval(pair.sae_x, pair.sae_y, l, row,
                         pair.loc != PairLocation::FfLayer)
               .l1();
  }
  return acc / double(z.rows());
}

struct JsaeTrainConfig {
  long steps = 1200;
  long batch = 32;
  double lr = 1e-3;
};

template <typename S>
struct JsaeTrainResult {
  JsaePair<S> pair;
  std::vector<double> loss_history;
  std::vector<double> j_l1_history;
  double final_recon_x = 0, final_recon_y = 0, final_j_l1 = 0;
};

// Joint training of both SAEs on paired activations from the same forward
// passes. The LM layer weights are frozen copies, so no gradient reaches the
// model.
template <typename S>
JsaeTrainResult<S> train_jsae_pair(const LmWeights<S>& w, PairLocation loc,
                                   int layer, double lambda,
                                   const HarvestSet<S>& data,
                                   const JsaeTrainConfig& tc,
                                   std::uint64_t seed) {
  require(loc != PairLocation::TransformerBlock,
          "JSAEs train only across feedforward layers and blocks");
  const SitePair sites = make_site_pair(loc, layer);
  const auto itx = data.acts.find(sites.up);
  const auto ity = data.acts.find(sites.down);
  require(itx != data.acts.end() && ity != data.acts.end() &&
              itx->second.rows() == ity->second.rows(),
          "train_jsae_pair: paired activations missing");

  const LmConfig& cfg = w.config;
  RngState rng = RngState(seed).fork("jsae-init/" + std::to_string(layer));
  JsaeTrainResult<S> out;
  out.pair.loc = loc;
  out.pair.layer = layer;
  const long n = 8 * cfg.d_model;
  auto make_inst = [&](const ActivationSite& site) {
    SaeInstance<S> inst;
    inst.site = site;
    inst.variant = "jsae";
    inst.d_sae = n;
    inst.k = 10;
    detail::init_sae_stores(inst.w_enc_store, inst.w_dec_store, n, cfg.d_model,
                            rng);
    inst.b_enc = const_tensor<S>({n}, S(0));
    inst.b_dec = const_tensor<S>({cfg.d_model}, S(0));
    return inst;
  };
  out.pair.sae_x = make_inst(sites.up);
  out.pair.sae_y = make_inst(sites.down);

  const auto& src = w.layers[std::size_t(layer)];
  LmLayer<S> frozen;
  frozen.dyt_mlp = {stop_gradient(src.dyt_mlp.alpha),
                    stop_gradient(src.dyt_mlp.gamma),
                    stop_gradient(src.dyt_mlp.beta)};
  frozen.w1 = stop_gradient(src.w1);
  frozen.b1 = stop_gradient(src.b1);
  frozen.w2 = stop_gradient(src.w2);
  frozen.b2 = stop_gradient(src.b2);

  std::vector<Tensor<S>> params{
      out.pair.sae_x.w_enc_store, out.pair.sae_x.w_dec_store,
      out.pair.sae_x.b_enc,       out.pair.sae_x.b_dec,
      out.pair.sae_y.w_enc_store, out.pair.sae_y.w_dec_store,
      out.pair.sae_y.b_enc,       out.pair.sae_y.b_dec};
  AdamState<S> adam(params, AdamConfig{.lr = tc.lr, .beta1 = 0.9,
                                       .beta2 = 0.999, .eps = 1e-8});

  const Mat<S>& hx_all = itx->second;
  const Mat<S>& hy_all = ity->second;
  std::uint64_t cursor = 0;
  for (long step = 0; step < tc.steps; ++step) {
    Tensor<S> hx = Tensor<S>::zeros({tc.batch, cfg.d_model});
    Tensor<S> hy = Tensor<S>::zeros({tc.batch, cfg.d_model});
    for (long i = 0; i < tc.batch; ++i) {
      const auto r = data.perm[std::size_t(cursor % data.perm.size())];
      ++cursor;
      hx.mat().row(i) = hx_all.row(long(r));
      hy.mat().row(i) = hy_all.row(long(r));
    }
    zero_grads(params);
    JsaeLossParts<S> parts = jsae_loss(out.pair, frozen, hx, hy, lambda);
    require(std::isfinite(double(parts.total.item())), "JSAE loss diverged");
    parts.total.backward();
    adam.step(params);
    out.loss_history.push_back(double(parts.total.item()));
    out.j_l1_history.push_back(parts.j_l1);
    out.final_recon_x = parts.recon_x;
    out.final_recon_y = parts.recon_y;
  }
  out.final_j_l1 = mean_jacobian_l1(out.pair, src,
                                    Mat<S>(hx_all.topRows(std::min<long>(
                                        512, hx_all.rows()))));
  return out;
}

template <typename S>
struct SweepRow {
  double lambda = 0;
  bool topk_baseline = false;
  double recon_x = 0, recon_y = 0, j_l1 = 0;
  JsaePair<S> pair;
};

// One trained pair per coefficient; lambda = 0 is the degenerate TopK pair.
template <typename S>
std::vector<SweepRow<S>> lambda_sweep(const LmWeights<S>& w, PairLocation loc,
                                      int layer,
                                      const std::vector<double>& sweep,
                                      const HarvestSet<S>& data,
                                      const JsaeTrainConfig& tc,
                                      std::uint64_t seed) {
  std::vector<SweepRow<S>> rows;
  for (double lambda : sweep) {
    require(lambda >= 0, "lambda_sweep: negative coefficient");
    auto res = train_jsae_pair(w, loc, layer, lambda, data, tc, seed);
    SweepRow<S> row;
    row.lambda = lambda;
    row.topk_baseline = lambda == 0.0;
    row.recon_x = res.final_recon_x;
    row.recon_y = res.final_recon_y;
    row.j_l1 = res.final_j_l1;
    row.pair = res.pair;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace sclr
