#pragma once

// Tape-free evaluation path over the same weights as lm.hpp: hookable full
// forwards, segment forwards between paired activation sites, and an exact
// linearization (JVP) of each segment kind for integrated-gradient scoring.

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "sclr/lm.hpp"

namespace sclr {

template <typename S>
void dyt_eval(Mat<S>& x, const DytParams<S>& p) {
  auto a = p.alpha.vec();
  auto g = p.gamma.vec();
  auto b = p.beta.vec();
  x = ((x.array().rowwise() * a.transpose().array()).tanh().rowwise() *
       g.transpose().array())
          .rowwise() +
      b.transpose().array();
}

// Elementwise derivative of DyT at x: alpha .* gamma .* (1 - tanh(alpha x)^2).
template <typename S>
Mat<S> dyt_prime(const Mat<S>& x, const DytParams<S>& p) {
  auto a = p.alpha.vec();
  auto g = p.gamma.vec();
  Mat<S> t = (x.array().rowwise() * a.transpose().array()).tanh();
  return ((S(1) - t.array().square()).rowwise() *
          (a.array() * g.array()).transpose())
      .matrix();
}

template <typename S>
void gelu_eval(Mat<S>& x) {
  for (long i = 0; i < x.size(); ++i)
    x.data()[i] = x.data()[i] * detail::norm_cdf(x.data()[i]);
}

template <typename S>
Mat<S> gelu_prime(const Mat<S>& x) {
  Mat<S> out(x.rows(), x.cols());
  for (long i = 0; i < x.size(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = detail::norm_cdf(v) + v * detail::norm_pdf(v);
  }
  return out;
}

template <typename S>
Mat<S> embed_eval(const LmWeights<S>& w, const std::vector<int>& tokens) {
  const long t = long(tokens.size());
  require(t <= w.config.context, "sequence too long for context window");
  Mat<S> x(t, w.config.d_model);
  auto te = w.tok_emb.mat();
  auto pe = w.pos_emb.mat();
  for (long i = 0; i < t; ++i) {
    const int id = tokens[std::size_t(i)];
    require(0 <= id && id < w.config.vocab, "token id out of range");
    x.row(i) = te.row(id) + pe.row(i);
  }
  return x;
}

template <typename S>
Mat<S> attn_eval(const LmWeights<S>& w, int k, const Mat<S>& u) {
  const auto& l = w.layers[std::size_t(k)];
  const long t = u.rows();
  const long hd = w.config.head_dim();
  const S inv = S(1.0 / std::sqrt(double(hd)));
  Mat<S> q = (u * l.wq.mat()).rowwise() + l.bq.vec().transpose();
  Mat<S> kk = (u * l.wk.mat()).rowwise() + l.bk.vec().transpose();
  Mat<S> v = (u * l.wv.mat()).rowwise() + l.bv.vec().transpose();
  Mat<S> heads(t, w.config.d_model);
  Mat<S> scores(t, t);
  for (int h = 0; h < w.config.n_heads; ++h) {
    auto qh = q.middleCols(h * hd, hd);
    auto kh = kk.middleCols(h * hd, hd);
    auto vh = v.middleCols(h * hd, hd);
    scores.noalias() = qh * kh.transpose();
    scores *= inv;
    for (long r = 0; r < t; ++r) {
      const long wdt = r + 1;
      auto row = scores.row(r).head(wdt);
      const S mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
      scores.row(r).tail(t - wdt).setZero();
    }
    heads.middleCols(h * hd, hd).noalias() =
        scores.template triangularView<Eigen::Lower>() * vh;
  }
  return (heads * l.wo.mat()).rowwise() + l.bo.vec().transpose();
}

template <typename S>
Mat<S> mlp_eval(const LmWeights<S>& w, int k, const Mat<S>& f_in) {
  const auto& l = w.layers[std::size_t(k)];
  Mat<S> z = (f_in * l.w1.mat().transpose()).rowwise() + l.b1.vec().transpose();
  gelu_eval(z);
  return (z * l.w2.mat().transpose()).rowwise() + l.b2.vec().transpose();
}

// Optional per-site interception: `mutate` may rewrite the value at a site
// in place (splicing); `record` captures post-mutation values.
template <typename S>
struct EvalHooks {
  std::map<ActivationSite, Mat<S>>* record = nullptr;
  std::function<void(const ActivationSite&, Mat<S>&)> mutate;
};

namespace detail {

template <typename S>
inline void visit_site(const ActivationSite& site, Mat<S>& value,
                       const EvalHooks<S>& hooks) {
  if (hooks.mutate) hooks.mutate(site, value);
  if (hooks.record) (*hooks.record)[site] = value;
}

}  // namespace detail

template <typename S>
Mat<S> tail_logits(const LmWeights<S>& w, Mat<S> x, int from_layer,
                   const EvalHooks<S>& hooks = {}) {
  for (int k = from_layer; k < w.config.n_layers; ++k) {
    detail::visit_site({SiteKind::ResidPreBlock, k}, x, hooks);
    Mat<S> u = x;
    dyt_eval(u, w.layers[std::size_t(k)].dyt_attn);
    x += attn_eval(w, k, u);
    detail::visit_site({SiteKind::FfBlockIn, k}, x, hooks);
    Mat<S> f_in = x;
    dyt_eval(f_in, w.layers[std::size_t(k)].dyt_mlp);
    detail::visit_site({SiteKind::FfLayerIn, k}, f_in, hooks);
    Mat<S> m = mlp_eval(w, k, f_in);
    detail::visit_site({SiteKind::FfLayerOut, k}, m, hooks);
    x += m;
    detail::visit_site({SiteKind::FfBlockOut, k}, x, hooks);
    detail::visit_site({SiteKind::ResidPostBlock, k}, x, hooks);
  }
  dyt_eval(x, w.dyt_final);
  return x * w.unembed.mat();
}

template <typename S>
Mat<S> lm_eval_forward(const LmWeights<S>& w, const std::vector<int>& tokens,
                       const EvalHooks<S>& hooks = {}) {
  return tail_logits(w, embed_eval(w, tokens), 0, hooks);
}

template <typename S>
double lm_eval_loss(LmWeights<S>& w, const std::vector<int>& tokens,
                    long n_windows) {
  const long t = w.config.context;
  const long stride = t + 1;
  const long avail = long(tokens.size()) / stride;
  const long n = std::min(n_windows, avail);
  require(n >= 1, "not enough tokens for one evaluation window");
  double acc = 0;
  for (long i = 0; i < n; ++i) {
    std::vector<int> in(tokens.begin() + i * stride,
                        tokens.begin() + i * stride + t);
    std::vector<int> tgt(tokens.begin() + i * stride + 1,
                         tokens.begin() + i * stride + t + 1);
    Mat<S> logits = lm_eval_forward(w, in);
    acc += cross_entropy_rows(logits, tgt);
  }
  return acc / double(n);
}

// ---------------------------------------------------------------------------
// site pairs and model segments
// ---------------------------------------------------------------------------

enum class PairLocation { FfLayer, FfBlock, TransformerBlock };

inline std::string location_name(PairLocation loc) {
  switch (loc) {
    case PairLocation::FfLayer: return "ff_layer";
    case PairLocation::FfBlock: return "ff_block";
    case PairLocation::TransformerBlock: return "transformer_block";
  }
  fail("bad location");
}

inline PairLocation parse_location(const std::string& name) {
  if (name == "ff_layer") return PairLocation::FfLayer;
  if (name == "ff_block") return PairLocation::FfBlock;
  if (name == "transformer_block") return PairLocation::TransformerBlock;
  fail("unknown pair location: " + name);
}

struct SitePair {
  PairLocation loc;
  int layer;
  ActivationSite up, down;
};

// The value after block k is the value before block k+1, so a
// transformer-block pair that is not the last block reads its downstream
// site under the resid_pre.(k+1) name (where SAEs live). Pass n_layers to
// enable this aliasing; the final block keeps resid_post.(L-1).
inline SitePair make_site_pair(PairLocation loc, int layer, int n_layers = 0) {
  switch (loc) {
    case PairLocation::FfLayer:
      return {loc, layer, {SiteKind::FfLayerIn, layer}, {SiteKind::FfLayerOut, layer}};
    case PairLocation::FfBlock:
      return {loc, layer, {SiteKind::FfBlockIn, layer}, {SiteKind::FfBlockOut, layer}};
    case PairLocation::TransformerBlock: {
      const ActivationSite down =
          layer + 1 < n_layers
              ? ActivationSite{SiteKind::ResidPreBlock, layer + 1}
              : ActivationSite{SiteKind::ResidPostBlock, layer};
      return {loc, layer, {SiteKind::ResidPreBlock, layer}, down};
    }
  }
  fail("bad location");
}

// Everything the prefix run must keep so the model can be resumed after the
// downstream site is overwritten. For FF-layer pairs the residual stream at
// the block input is needed to complete the skip connection.
template <typename S>
struct SegmentPrefix {
  Mat<S> h_up;
  Mat<S> resid;
};

template <typename S>
SegmentPrefix<S> segment_prefix(const LmWeights<S>& w, const SitePair& pair,
                                const std::vector<int>& tokens) {
  w.config.check_site(pair.up);
  SegmentPrefix<S> out;
  Mat<S> x = embed_eval(w, tokens);
  for (int k = 0; k < pair.layer; ++k) {
    Mat<S> u = x;
    dyt_eval(u, w.layers[std::size_t(k)].dyt_attn);
    x += attn_eval(w, k, u);
    Mat<S> f_in = x;
    dyt_eval(f_in, w.layers[std::size_t(k)].dyt_mlp);
    x += mlp_eval(w, k, f_in);
  }
  if (pair.loc == PairLocation::TransformerBlock) {
    out.h_up = std::move(x);
    return out;
  }
  Mat<S> u = x;
  dyt_eval(u, w.layers[std::size_t(pair.layer)].dyt_attn);
  x += attn_eval(w, pair.layer, u);
  if (pair.loc == PairLocation::FfBlock) {
    out.h_up = std::move(x);
    return out;
  }
  out.resid = x;
  dyt_eval(x, w.layers[std::size_t(pair.layer)].dyt_mlp);
  out.h_up = std::move(x);
  return out;
}

// Value of the downstream site given a (possibly modified) upstream value.
template <typename S>
Mat<S> segment_forward(const LmWeights<S>& w, const SitePair& pair,
                       const Mat<S>& x_hat) {
  switch (pair.loc) {
    case PairLocation::FfLayer:
      return mlp_eval(w, pair.layer, x_hat);
    case PairLocation::FfBlock: {
      Mat<S> f_in = x_hat;
      dyt_eval(f_in, w.layers[std::size_t(pair.layer)].dyt_mlp);
      return x_hat + mlp_eval(w, pair.layer, f_in);
    }
    case PairLocation::TransformerBlock: {
      Mat<S> x = x_hat;
      Mat<S> u = x;
      dyt_eval(u, w.layers[std::size_t(pair.layer)].dyt_attn);
      x += attn_eval(w, pair.layer, u);
      Mat<S> f_in = x;
      dyt_eval(f_in, w.layers[std::size_t(pair.layer)].dyt_mlp);
      return x + mlp_eval(w, pair.layer, f_in);
    }
  }
  fail("bad location");
}

// Logits from a (possibly modified) downstream-site value.
template <typename S>
Mat<S> segment_finish(const LmWeights<S>& w, const SitePair& pair,
                      const SegmentPrefix<S>& ctx, const Mat<S>& y_down) {
  if (pair.loc == PairLocation::FfLayer)
    return tail_logits(w, Mat<S>(ctx.resid + y_down), pair.layer + 1);
  return tail_logits(w, y_down, pair.layer + 1);
}

// ---------------------------------------------------------------------------
// segment linearization (exact JVP at a point)
// ---------------------------------------------------------------------------

template <typename S>
class SegmentLin {
 public:
  SegmentLin(const LmWeights<S>& w, SitePair pair, const Mat<S>& x_hat)
      : w_(&w), pair_(pair) {
    const auto& l = w.layers[std::size_t(pair.layer)];
    Mat<S> f_in;
    switch (pair.loc) {
      case PairLocation::FfLayer:
        f_in = x_hat;
        break;
      case PairLocation::FfBlock:
        d_mlpnorm_ = dyt_prime(x_hat, l.dyt_mlp);
        f_in = x_hat;
        dyt_eval(f_in, l.dyt_mlp);
        break;
      case PairLocation::TransformerBlock: {
        d_attnnorm_ = dyt_prime(x_hat, l.dyt_attn);
        Mat<S> u = x_hat;
        dyt_eval(u, l.dyt_attn);
        const long hd = w.config.head_dim();
        const S inv = S(1.0 / std::sqrt(double(hd)));
        q_ = (u * l.wq.mat()).rowwise() + l.bq.vec().transpose();
        k_ = (u * l.wk.mat()).rowwise() + l.bk.vec().transpose();
        v_ = (u * l.wv.mat()).rowwise() + l.bv.vec().transpose();
        const long t = x_hat.rows();
        probs_.clear();
        Mat<S> heads(t, w.config.d_model);
        for (int h = 0; h < w.config.n_heads; ++h) {
          Mat<S> p(t, t);
          p.noalias() = q_.middleCols(h * hd, hd) *
                        k_.middleCols(h * hd, hd).transpose();
          p *= inv;
          for (long r = 0; r < t; ++r) {
            auto row = p.row(r).head(r + 1);
            const S mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
            p.row(r).tail(t - r - 1).setZero();
          }
          heads.middleCols(h * hd, hd).noalias() =
              p.template triangularView<Eigen::Lower>() * v_.middleCols(h * hd, hd);
          probs_.push_back(std::move(p));
        }
        x2_ = x_hat + ((heads * l.wo.mat()).rowwise() + l.bo.vec().transpose());
        d_mlpnorm_ = dyt_prime(x2_, l.dyt_mlp);
        f_in = x2_;
        dyt_eval(f_in, l.dyt_mlp);
        break;
      }
    }
    z_ = (f_in * l.w1.mat().transpose()).rowwise() + l.b1.vec().transpose();
    gp_ = gelu_prime(z_);
    Mat<S> zg = z_;
    gelu_eval(zg);
    Mat<S> mlp = (zg * l.w2.mat().transpose()).rowwise() + l.b2.vec().transpose();
    switch (pair.loc) {
      case PairLocation::FfLayer: value_ = std::move(mlp); break;
      case PairLocation::FfBlock: value_ = x_hat + mlp; break;
      case PairLocation::TransformerBlock: value_ = x2_ + mlp; break;
    }
  }

  const Mat<S>& value() const { return value_; }

  Mat<S> jvp(const Mat<S>& dx) const {
    const auto& l = w_->layers[std::size_t(pair_.layer)];
    Mat<S> dx2;
    switch (pair_.loc) {
      case PairLocation::FfLayer: {
        Mat<S> dz = dx * l.w1.mat().transpose();
        return (gp_.array() * dz.array()).matrix() * l.w2.mat().transpose();
      }
      case PairLocation::FfBlock:
        dx2 = dx;
        break;
      case PairLocation::TransformerBlock: {
        Mat<S> du = (d_attnnorm_.array() * dx.array()).matrix();
        Mat<S> dq = du * l.wq.mat();
        Mat<S> dk = du * l.wk.mat();
        Mat<S> dv = du * l.wv.mat();
        const long hd = w_->config.head_dim();
        const S inv = S(1.0 / std::sqrt(double(hd)));
        const long t = dx.rows();
        Mat<S> dheads(t, w_->config.d_model);
        Mat<S> ds(t, t);
        for (int h = 0; h < w_->config.n_heads; ++h) {
          const Mat<S>& p = probs_[std::size_t(h)];
          ds.noalias() = dq.middleCols(h * hd, hd) *
                         k_.middleCols(h * hd, hd).transpose();
          ds.noalias() += q_.middleCols(h * hd, hd) *
                          dk.middleCols(h * hd, hd).transpose();
          ds *= inv;
          for (long r = 0; r < t; ++r) {
            auto pr = p.row(r).head(r + 1);
            auto dr = ds.row(r).head(r + 1);
            const S dot = (pr.array() * dr.array()).sum();
            ds.row(r).head(r + 1) =
                (pr.array() * (dr.array() - dot)).matrix();
            ds.row(r).tail(t - r - 1).setZero();
          }
          dheads.middleCols(h * hd, hd).noalias() =
              ds.template triangularView<Eigen::Lower>() * v_.middleCols(h * hd, hd);
          dheads.middleCols(h * hd, hd).noalias() +=
              p.template triangularView<Eigen::Lower>() * dv.middleCols(h * hd, hd);
        }
        dx2 = dx + dheads * l.wo.mat();
        break;
      }
    }
    Mat<S> df = (d_mlpnorm_.array() * dx2.array()).matrix();
    Mat<S> dz = df * l.w1.mat().transpose();
    Mat<S> dy = (gp_.array() * dz.array()).matrix() * l.w2.mat().transpose();
    return dx2 + dy;
  }

 private:
  const LmWeights<S>* w_;
  SitePair pair_;
  Mat<S> value_;
  Mat<S> d_attnnorm_, d_mlpnorm_;
  Mat<S> q_, k_, v_, x2_;
  std::vector<Mat<S>> probs_;
  Mat<S> z_, gp_;
};

// ---------------------------------------------------------------------------
// activation harvesting
// ---------------------------------------------------------------------------

template <typename S>
struct HarvestSet {
  long n_windows = 0;
  long window_len = 0;
  long n_rows = 0;  // harvested (window, position) vectors per site
  std::vector<int> tokens;  // [n_windows * window_len]
  std::map<ActivationSite, Mat<S>> acts;  // each [n_rows x d_model]
  std::vector<std::uint64_t> perm;        // seeded row order for training

  std::vector<int> window(long i) const {
    return std::vector<int>(tokens.begin() + i * window_len,
                            tokens.begin() + (i + 1) * window_len);
  }
};

template <typename S>
HarvestSet<S> harvest(const LmWeights<S>& w, const std::vector<int>& corpus,
                      const std::vector<ActivationSite>& sites,
                      long max_samples, std::uint64_t seed) {
  for (const auto& s : sites) w.config.check_site(s);
  const long t = w.config.context;
  const long avail_windows = long(corpus.size()) / t;
  require(avail_windows >= 1, "corpus too small to harvest");
  const long avail_rows = avail_windows * t;
  const long rows = std::min(max_samples, avail_rows);
  const long windows = (rows + t - 1) / t;

  RngState rng = RngState(seed).fork("harvest");
  std::vector<std::uint64_t> order = rng.permutation(std::uint64_t(avail_windows));

  HarvestSet<S> out;
  out.n_windows = windows;
  out.window_len = t;
  out.n_rows = rows;
  out.tokens.resize(std::size_t(windows * t));
  for (const auto& s : sites)
    out.acts[s] = Mat<S>(rows, w.config.d_model);

  std::map<ActivationSite, Mat<S>> rec;
  EvalHooks<S> hooks;
  hooks.record = &rec;
  std::vector<ActivationSite> all(sites.begin(), sites.end());
  for (long i = 0; i < windows; ++i) {
    const long start = long(order[std::size_t(i)]) * t;
    std::vector<int> win(corpus.begin() + start, corpus.begin() + start + t);
    std::copy(win.begin(), win.end(), out.tokens.begin() + i * t);
    rec.clear();
    lm_eval_forward(w, win, hooks);
    const long take = std::min(t, rows - i * t);
    for (const auto& s : sites)
      out.acts[s].middleRows(i * t, take) = rec[s].topRows(take);
  }
  out.perm = rng.permutation(std::uint64_t(rows));
  return out;
}

// First n non-overlapping validation windows of the given length.
inline std::vector<std::vector<int>> eval_prompts(const std::vector<int>& val,
                                                  long n, long len) {
  std::vector<std::vector<int>> out;
  for (long i = 0; (i + 1) * len <= long(val.size()) && long(out.size()) < n; ++i)
    out.emplace_back(val.begin() + i * len, val.begin() + (i + 1) * len);
  require(!out.empty(), "validation split too small for prompts");
  return out;
}

}  // namespace sclr
