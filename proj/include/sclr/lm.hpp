#pragma once

// Character-level GPT-2-style toy model with DynamicTanh in place of
// LayerNorm, pre-norm residual blocks, learned positional embeddings and an
// untied unembedding. This header holds the trainable (tape) forward pass and
// the trainer; the tape-free evaluation path lives in lm_eval.hpp.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sclr/adam.hpp"
#include "sclr/nn.hpp"
#include "sclr/ops.hpp"
#include "sclr/rng.hpp"

namespace sclr {

// ---------------------------------------------------------------------------
// tokenizer: bytes < 128 map to themselves, anything else becomes '?' (63)
// ---------------------------------------------------------------------------

constexpr int kVocab = 128;
constexpr int kReplacementToken = 63;

inline std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text)
    ids.push_back(c < 128 ? int(c) : kReplacementToken);
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int t : ids) out.push_back(char(t & 0x7f));
  return out;
}

// ---------------------------------------------------------------------------
// activation sites
// ---------------------------------------------------------------------------

enum class SiteKind {
  ResidPreBlock,
  FfLayerIn,
  FfLayerOut,
  FfBlockIn,
  FfBlockOut,
  ResidPostBlock,
};

struct ActivationSite {
  SiteKind kind;
  int layer = 0;

  bool operator==(const ActivationSite&) const = default;
  auto operator<=>(const ActivationSite&) const = default;
};

inline std::string site_name(const ActivationSite& s) {
  const char* base = nullptr;
  switch (s.kind) {
    case SiteKind::ResidPreBlock: base = "resid_pre"; break;
    case SiteKind::FfLayerIn: base = "ff_layer_in"; break;
    case SiteKind::FfLayerOut: base = "ff_layer_out"; break;
    case SiteKind::FfBlockIn: base = "ff_block_in"; break;
    case SiteKind::FfBlockOut: base = "ff_block_out"; break;
    case SiteKind::ResidPostBlock: base = "resid_post"; break;
  }
  return std::string(base) + "." + std::to_string(s.layer);
}

inline ActivationSite parse_site(const std::string& name) {
  const auto dot = name.rfind('.');
  require(dot != std::string::npos, "unknown site: " + name);
  const std::string base = name.substr(0, dot);
  const int layer = std::stoi(name.substr(dot + 1));
  if (base == "resid_pre") return {SiteKind::ResidPreBlock, layer};
  if (base == "ff_layer_in") return {SiteKind::FfLayerIn, layer};
  if (base == "ff_layer_out") return {SiteKind::FfLayerOut, layer};
  if (base == "ff_block_in") return {SiteKind::FfBlockIn, layer};
  if (base == "ff_block_out") return {SiteKind::FfBlockOut, layer};
  if (base == "resid_post") return {SiteKind::ResidPostBlock, layer};
  fail("unknown site: " + name);
}

// ---------------------------------------------------------------------------
// model configuration and weights
// ---------------------------------------------------------------------------

struct LmConfig {
  int n_layers = 4;
  int d_model = 64;
  int vocab = kVocab;
  int n_heads = 4;
  int d_mlp = 256;
  int context = 128;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(vocab == kVocab, "ASCII tokenizer requires vocab == 128");
    require(n_layers >= 1 && context >= 2, "degenerate model config");
  }

  void check_site(const ActivationSite& s) const {
    require(0 <= s.layer && s.layer < n_layers,
            "unknown site: layer out of range for " + site_name(s));
  }
};

template <typename S>
struct DytParams {
  Tensor<S> alpha, gamma, beta;
};

template <typename S>
struct LmLayer {
  DytParams<S> dyt_attn;
  Tensor<S> wq, wk, wv, wo;
  Tensor<S> bq, bk, bv, bo;
  DytParams<S> dyt_mlp;
  Tensor<S> w1, b1;  // w1: [d_mlp x d_model]
  Tensor<S> w2, b2;  // w2: [d_model x d_mlp]
};

template <typename S>
struct LmWeights {
  LmConfig config;
  Tensor<S> tok_emb;  // [vocab x d_model]
  Tensor<S> pos_emb;  // [context x d_model]
  std::vector<LmLayer<S>> layers;
  DytParams<S> dyt_final;
  Tensor<S> unembed;  // [d_model x vocab]

  std::vector<Tensor<S>> params() {
    std::vector<Tensor<S>> out{tok_emb, pos_emb};
    auto push_dyt = [&](DytParams<S>& d) {
      out.push_back(d.alpha);
      out.push_back(d.gamma);
      out.push_back(d.beta);
    };
    for (auto& l : layers) {
      push_dyt(l.dyt_attn);
      out.insert(out.end(), {l.wq, l.wk, l.wv, l.wo, l.bq, l.bk, l.bv, l.bo});
      push_dyt(l.dyt_mlp);
      out.insert(out.end(), {l.w1, l.b1, l.w2, l.b2});
    }
    push_dyt(dyt_final);
    out.push_back(unembed);
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out{"tok_emb", "pos_emb"};
    auto push_dyt = [&](const std::string& p) {
      out.push_back(p + ".alpha");
      out.push_back(p + ".gamma");
      out.push_back(p + ".beta");
    };
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const std::string p = "layer" + std::to_string(k);
      push_dyt(p + ".dyt_attn");
      for (const char* n : {".wq", ".wk", ".wv", ".wo", ".bq", ".bk", ".bv", ".bo"})
        out.push_back(p + n);
      push_dyt(p + ".dyt_mlp");
      for (const char* n : {".w1", ".b1", ".w2", ".b2"}) out.push_back(p + n);
    }
    push_dyt("dyt_final");
    out.push_back("unembed");
    return out;
  }
};

template <typename S>
Tensor<S> gaussian_tensor(Shape shape, double std_dev, RngState& rng,
                          bool requires_grad = true) {
  std::vector<S> data(std::size_t(numel(shape)));
  for (auto& v : data) v = S(rng.gaussian() * std_dev);
  return Tensor<S>::from(std::move(shape), std::move(data), requires_grad);
}

template <typename S>
Tensor<S> const_tensor(Shape shape, S value, bool requires_grad = true) {
  std::vector<S> data(std::size_t(numel(shape)), value);
  return Tensor<S>::from(std::move(shape), std::move(data), requires_grad);
}

template <typename S>
DytParams<S> init_dyt(long d) {
  // alpha starts positive; tanh(0.5 x) stays well inside its linear range
  // for unit-scale residuals.
  return {const_tensor<S>({d}, S(0.5)), const_tensor<S>({d}, S(1)),
          const_tensor<S>({d}, S(0))};
}

template <typename S>
LmWeights<S> init_lm(const LmConfig& cfg) {
  cfg.validate();
  RngState rng = RngState(cfg.seed).fork("lm-init");
  const long d = cfg.d_model;
  const long m = cfg.d_mlp;
  const double w_std = 0.02;
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);

  LmWeights<S> w;
  w.config = cfg;
  w.tok_emb = gaussian_tensor<S>({cfg.vocab, d}, w_std, rng);
  w.pos_emb = gaussian_tensor<S>({cfg.context, d}, w_std, rng);
  for (int k = 0; k < cfg.n_layers; ++k) {
    LmLayer<S> l;
    l.dyt_attn = init_dyt<S>(d);
    l.wq = gaussian_tensor<S>({d, d}, w_std, rng);
    l.wk = gaussian_tensor<S>({d, d}, w_std, rng);
    l.wv = gaussian_tensor<S>({d, d}, w_std, rng);
    l.wo = gaussian_tensor<S>({d, d}, w_std * resid_scale, rng);
    l.bq = const_tensor<S>({d}, S(0));
    l.bk = const_tensor<S>({d}, S(0));
    l.bv = const_tensor<S>({d}, S(0));
    l.bo = const_tensor<S>({d}, S(0));
    l.dyt_mlp = init_dyt<S>(d);
    l.w1 = gaussian_tensor<S>({m, d}, w_std, rng);
    l.b1 = const_tensor<S>({m}, S(0));
    l.w2 = gaussian_tensor<S>({d, m}, w_std * resid_scale, rng);
    l.b2 = const_tensor<S>({d}, S(0));
    w.layers.push_back(std::move(l));
  }
  w.dyt_final = init_dyt<S>(d);
  w.unembed = gaussian_tensor<S>({d, cfg.vocab}, w_std, rng);
  return w;
}

// DyT(x) = tanh(alpha .* x) .* gamma + beta, applied per row of x.
template <typename S>
Tensor<S> dyt(const Tensor<S>& x, const Tensor<S>& alpha,
              const Tensor<S>& gamma, const Tensor<S>& beta) {
  require(alpha.size() == x.cols() && gamma.size() == x.cols() &&
              beta.size() == x.cols(),
          "dyt: parameter vectors must have length d");
  return rowwise_add(rowwise_mul(tanh(rowwise_mul(x, alpha)), gamma), beta);
}

template <typename S>
Tensor<S> dyt(const Tensor<S>& x, const DytParams<S>& p) {
  return dyt(x, p.alpha, p.gamma, p.beta);
}

// ---------------------------------------------------------------------------
// trainable forward pass
// ---------------------------------------------------------------------------

// Forward over a batch of equally long sequences, flattening positions into
// rows. Attention runs per sequence and head on row/column slices. When
// `record` is non-null the listed sites are captured (flattened [B*T x d]).
template <typename S>
Tensor<S> lm_forward(LmWeights<S>& w, const std::vector<int>& tokens,
                     long batch, long t,
                     std::map<ActivationSite, Tensor<S>>* record = nullptr,
                     const std::vector<ActivationSite>* sites = nullptr) {
  const LmConfig& cfg = w.config;
  require(t <= cfg.context, "sequence too long for context window");
  require(long(tokens.size()) == batch * t, "lm_forward: token count mismatch");
  if (sites)
    for (const auto& s : *sites) cfg.check_site(s);

  auto want = [&](const ActivationSite& s) {
    if (!record || !sites) return false;
    for (const auto& q : *sites)
      if (q == s) return true;
    return false;
  };
  auto capture = [&](const ActivationSite& s, const Tensor<S>& v) {
    if (want(s)) (*record)[s] = v;
  };

  std::vector<long> ids(tokens.begin(), tokens.end());
  for (long id : ids) require(0 <= id && id < cfg.vocab, "token id out of range");
  Tensor<S> emb = gather_rows(w.tok_emb, ids);
  Tensor<S> pos = slice_rows(w.pos_emb, 0, t);
  std::vector<Tensor<S>> seqs;
  for (long b = 0; b < batch; ++b)
    seqs.push_back(add(slice_rows(emb, b * t, (b + 1) * t), pos));
  Tensor<S> x = concat_rows(seqs);

  const long hd = cfg.head_dim();
  const S inv_sqrt_hd = S(1.0 / std::sqrt(double(hd)));

  for (int k = 0; k < cfg.n_layers; ++k) {
    auto& l = w.layers[std::size_t(k)];
    capture({SiteKind::ResidPreBlock, k}, x);

    Tensor<S> a_in = dyt(x, l.dyt_attn);
    Tensor<S> qf = rowwise_add(matmul(a_in, l.wq), l.bq);
    Tensor<S> kf = rowwise_add(matmul(a_in, l.wk), l.bk);
    Tensor<S> vf = rowwise_add(matmul(a_in, l.wv), l.bv);
    std::vector<Tensor<S>> seq_outs;
    for (long b = 0; b < batch; ++b) {
      std::vector<Tensor<S>> heads;
      Tensor<S> qs = slice_rows(qf, b * t, (b + 1) * t);
      Tensor<S> ks = slice_rows(kf, b * t, (b + 1) * t);
      Tensor<S> vs = slice_rows(vf, b * t, (b + 1) * t);
      for (int h = 0; h < cfg.n_heads; ++h) {
        Tensor<S> qh = slice_cols(qs, h * hd, (h + 1) * hd);
        Tensor<S> kh = slice_cols(ks, h * hd, (h + 1) * hd);
        Tensor<S> vh = slice_cols(vs, h * hd, (h + 1) * hd);
        Tensor<S> scores = scale(matmul(qh, kh, false, true), inv_sqrt_hd);
        Tensor<S> probs = causal_softmax(scores);
        heads.push_back(causal_matmul(probs, vh));
      }
      seq_outs.push_back(concat_cols(heads));
    }
    Tensor<S> attn = rowwise_add(matmul(concat_rows(seq_outs), l.wo), l.bo);
    x = add(x, attn);
    capture({SiteKind::FfBlockIn, k}, x);

    Tensor<S> f_in = dyt(x, l.dyt_mlp);
    capture({SiteKind::FfLayerIn, k}, f_in);
    Tensor<S> z = rowwise_add(matmul(f_in, l.w1, false, true), l.b1);
    Tensor<S> mlp = rowwise_add(matmul(gelu(z), l.w2, false, true), l.b2);
    capture({SiteKind::FfLayerOut, k}, mlp);
    x = add(x, mlp);
    capture({SiteKind::FfBlockOut, k}, x);
    capture({SiteKind::ResidPostBlock, k}, x);
  }

  Tensor<S> final_in = dyt(x, w.dyt_final);
  return matmul(final_in, w.unembed);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct LmTrainConfig {
  long steps = 400;
  long batch = 16;
  double lr = 2e-3;
  long eval_every = 50;
  long eval_windows = 16;
};

struct LossPoint {
  long step;
  double train_loss;
  double val_loss;
};

struct CorpusSplit {
  std::vector<int> train;
  std::vector<int> val;
};

// 90/10 contiguous split.
inline CorpusSplit split_corpus(const std::vector<int>& tokens) {
  require(!tokens.empty(), "empty corpus");
  const std::size_t cut = tokens.size() * 9 / 10;
  return {std::vector<int>(tokens.begin(), tokens.begin() + long(cut)),
          std::vector<int>(tokens.begin() + long(cut), tokens.end())};
}

template <typename S>
double lm_eval_loss(LmWeights<S>& w, const std::vector<int>& tokens,
                    long n_windows);

template <typename S>
std::vector<LossPoint> train_lm(LmWeights<S>& w, const CorpusSplit& corpus,
                                const LmTrainConfig& tc) {
  const LmConfig& cfg = w.config;
  const long t = cfg.context;
  require(long(corpus.train.size()) > t + 1, "corpus too small for context");
  RngState rng = RngState(cfg.seed).fork("lm-batches");

  auto params = w.params();
  AdamState<S> adam(params, AdamConfig{.lr = tc.lr, .beta1 = 0.9,
                                       .beta2 = 0.99, .eps = 1e-8});
  std::vector<LossPoint> history;
  const std::uint64_t span = std::uint64_t(corpus.train.size() - t - 1);

  for (long step = 0; step < tc.steps; ++step) {
    std::vector<int> inputs(std::size_t(tc.batch * t));
    std::vector<int> targets(std::size_t(tc.batch * t));
    for (long b = 0; b < tc.batch; ++b) {
      const long start = long(rng.uniform_int(span));
      for (long i = 0; i < t; ++i) {
        inputs[std::size_t(b * t + i)] = corpus.train[std::size_t(start + i)];
        targets[std::size_t(b * t + i)] =
            corpus.train[std::size_t(start + i + 1)];
      }
    }
    zero_grads(params);
    Tensor<S> logits = lm_forward(w, inputs, tc.batch, t);
    Tensor<S> loss = cross_entropy(logits, targets);
    const double train_loss = double(loss.item());
    require(std::isfinite(train_loss), "training loss diverged");
    loss.backward();
    adam.step(params);

    if (step % tc.eval_every == 0 || step == tc.steps - 1) {
      const double val = lm_eval_loss(w, corpus.val, tc.eval_windows);
      history.push_back({step, train_loss, val});
    }
  }
  return history;
}

}  // namespace sclr

#include "sclr/lm_eval.hpp"
