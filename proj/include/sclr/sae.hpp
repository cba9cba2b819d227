#pragma once

// TopK sparse autoencoders and the Staircase family. A Staircase member is a
// view over the family's shared encoder/decoder stores: slicing happens on
// the tape, so joint training sends gradients from every member into the
// shared slices it can reach. Member biases are always independent.

#include <map>
#include <string>
#include <vector>

#include "sclr/adam.hpp"
#include "sclr/lm_eval.hpp"

namespace sclr {

template <typename S>
struct SaeInstance {
  ActivationSite site{};
  std::string variant;
  long d_sae = 0;
  long k = 0;
  long detach_prefix = 0;  // rows [0, detach_prefix) receive no weight grads
  Tensor<S> w_enc_store;   // [N x d_model], first d_sae rows in use
  Tensor<S> w_dec_store;   // [d_model x N], first d_sae columns in use
  Tensor<S> b_enc;         // [d_sae]
  Tensor<S> b_dec;         // [d_model]

  long d_model() const { return w_dec_store.rows(); }

  Tensor<S> w_enc_tape() const {
    if (detach_prefix > 0) {
      std::vector<Tensor<S>> parts{
          stop_gradient(slice_rows(w_enc_store, 0, detach_prefix)),
          slice_rows(w_enc_store, detach_prefix, d_sae)};
      return concat_rows(parts);
    }
    if (d_sae == w_enc_store.rows()) return w_enc_store;
    return slice_rows(w_enc_store, 0, d_sae);
  }

  Tensor<S> w_dec_tape() const {
    if (detach_prefix > 0) {
      std::vector<Tensor<S>> parts{
          stop_gradient(slice_cols(w_dec_store, 0, detach_prefix)),
          slice_cols(w_dec_store, detach_prefix, d_sae)};
      return concat_cols(parts);
    }
    if (d_sae == w_dec_store.cols()) return w_dec_store;
    return slice_cols(w_dec_store, 0, d_sae);
  }

  // Read-only Eigen views of the active slices.
  auto enc_view() const { return w_enc_store.mat().topRows(d_sae); }
  auto dec_view() const { return w_dec_store.mat().leftCols(d_sae); }
};

// z = TopK(ReLU(W_enc (h - b_dec) + b_enc)), rows of h are samples.
template <typename S>
Tensor<S> encode(const SaeInstance<S>& sae, const Tensor<S>& h) {
  require(h.cols() == sae.d_model(), "encode: activation width mismatch");
  Tensor<S> centered = rowwise_add(h, neg(sae.b_dec));
  Tensor<S> pre = rowwise_add(matmul(centered, sae.w_enc_tape(), false, true),
                              sae.b_enc);
  return topk_relu(pre, sae.k);
}

// h' = W_dec z + b_dec.
template <typename S>
Tensor<S> decode(const SaeInstance<S>& sae, const Tensor<S>& z) {
  require(z.cols() == sae.d_sae, "decode: latent width mismatch");
  return rowwise_add(matmul(z, sae.w_dec_tape(), false, true), sae.b_dec);
}

// Tape-free paths. encode_pre_eval returns raw pre-activations (before ReLU
// and TopK); encode_eval applies both.
template <typename S>
Mat<S> encode_pre_eval(const SaeInstance<S>& sae, const Mat<S>& h) {
  require(h.cols() == sae.d_model(), "encode: activation width mismatch");
  Mat<S> centered = h.rowwise() - sae.b_dec.vec().transpose();
  return (centered * sae.enc_view().transpose()).rowwise() +
         sae.b_enc.vec().transpose();
}

template <typename S>
Mat<S> topk_relu_eval(const Mat<S>& pre, long k) {
  Mat<S> z = Mat<S>::Zero(pre.rows(), pre.cols());
  std::vector<long> kept;
  for (long r = 0; r < pre.rows(); ++r) {
    topk_select(pre.row(r).data(), pre.cols(), k, kept);
    for (long c : kept) z(r, c) = pre(r, c);
  }
  return z;
}

template <typename S>
Mat<S> encode_eval(const SaeInstance<S>& sae, const Mat<S>& h) {
  return topk_relu_eval(encode_pre_eval(sae, h), sae.k);
}

template <typename S>
Mat<S> decode_eval(const SaeInstance<S>& sae, const Mat<S>& z) {
  require(z.cols() == sae.d_sae, "decode: latent width mismatch");
  return (z * sae.dec_view().transpose()).rowwise() +
         sae.b_dec.vec().transpose();
}

template <typename S>
Mat<S> reconstruct_eval(const SaeInstance<S>& sae, const Mat<S>& h) {
  return decode_eval(sae, encode_eval(sae, h));
}

// ---------------------------------------------------------------------------
// staircase family
// ---------------------------------------------------------------------------

template <typename S>
struct StaircaseMember {
  ActivationSite site{};
  long index = 1;  // slice index i; member uses the first chunk*i features
  Tensor<S> b_enc, b_dec;
  Tensor<S> w_enc_own, w_dec_own;  // untied variant only
};

template <typename S>
struct StaircaseFamily {
  std::string variant;
  long chunk = 0;  // n
  long k = 0;
  bool detach = false;
  bool untied = false;
  Tensor<S> w_enc_store;  // [N x d_model] shared across members
  Tensor<S> w_dec_store;  // [d_model x N]
  std::vector<StaircaseMember<S>> members;

  long member_count() const { return long(members.size()); }
};

// View of member i (1-based). Mutations through the view hit the shared store.
template <typename S>
SaeInstance<S> staircase_member(const StaircaseFamily<S>& f, long i) {
  require(1 <= i && i <= f.member_count(), "staircase_member: index out of range");
  const auto& m = f.members[std::size_t(i - 1)];
  SaeInstance<S> v;
  v.site = m.site;
  v.variant = f.variant;
  v.k = f.k;
  v.b_enc = m.b_enc;
  v.b_dec = m.b_dec;
  if (f.untied) {
    v.w_enc_store = m.w_enc_own;
    v.w_dec_store = m.w_dec_own;
    v.d_sae = m.w_enc_own.rows();
  } else {
    v.w_enc_store = f.w_enc_store;
    v.w_dec_store = f.w_dec_store;
    v.d_sae = f.chunk * m.index;
    if (f.detach) v.detach_prefix = f.chunk * (m.index - 1);
  }
  return v;
}

// ---------------------------------------------------------------------------
// variant zoo
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& sae_variant_names() {
  static const std::vector<std::string> names = {
      "topk-x8",       "topk-x40",       "topk-x40-tied",
      "staircase-x8",  "staircase-untied-x8", "staircase-detach"};
  return names;
}

// (site, slice index) plan along depth. Block k's output shares its slice
// index with block k+1's input, so the progressive widths reproduce the
// (k+1)(k+2) edge-count growth for consecutive pairs.
inline std::vector<std::pair<ActivationSite, long>> staircase_plan(
    PairLocation loc, int n_layers) {
  std::vector<std::pair<ActivationSite, long>> plan;
  switch (loc) {
    case PairLocation::TransformerBlock:
      for (int k = 0; k < n_layers; ++k)
        plan.push_back({{SiteKind::ResidPreBlock, k}, k + 1});
      plan.push_back({{SiteKind::ResidPostBlock, n_layers - 1}, n_layers + 1});
      break;
    case PairLocation::FfBlock:
      for (int k = 0; k < n_layers; ++k) {
        plan.push_back({{SiteKind::FfBlockIn, k}, k + 1});
        plan.push_back({{SiteKind::FfBlockOut, k}, k + 2});
      }
      break;
    case PairLocation::FfLayer:
      for (int k = 0; k < n_layers; ++k) {
        plan.push_back({{SiteKind::FfLayerIn, k}, k + 1});
        plan.push_back({{SiteKind::FfLayerOut, k}, k + 2});
      }
      break;
  }
  return plan;
}

inline std::vector<ActivationSite> location_sites(PairLocation loc,
                                                  int n_layers) {
  std::vector<ActivationSite> out;
  for (const auto& [site, idx] : staircase_plan(loc, n_layers))
    out.push_back(site);
  return out;
}

namespace detail {

// Decoder columns drawn as unit-norm gaussians, encoder tied to the
// transpose, biases zero.
template <typename S>
void init_sae_stores(Tensor<S>& w_enc, Tensor<S>& w_dec, long n, long d,
                     RngState& rng) {
  w_dec = Tensor<S>::zeros({d, n}, true);
  auto dec = w_dec.mat();
  for (long c = 0; c < n; ++c) {
    Vec<S> col(d);
    for (long r = 0; r < d; ++r) col[r] = S(rng.gaussian());
    col /= col.norm();
    dec.col(c) = col;
  }
  w_enc = Tensor<S>::zeros({n, d}, true);
  w_enc.mat() = dec.transpose();
}

}  // namespace detail

// One configuration surface for all App-style variants at a pair location.
template <typename S>
struct SaeSet {
  std::string variant;
  PairLocation loc{};
  bool is_family = false;
  StaircaseFamily<S> family;
  std::vector<SaeInstance<S>> independent;

  SaeInstance<S> at(const ActivationSite& site) const {
    if (is_family) {
      for (long i = 1; i <= family.member_count(); ++i)
        if (family.members[std::size_t(i - 1)].site == site)
          return staircase_member(family, i);
    } else {
      for (const auto& inst : independent)
        if (inst.site == site) return inst;
    }
    fail("no SAE at site " + site_name(site) + " in variant " + variant);
  }

  long member_count() const {
    return is_family ? family.member_count() : long(independent.size());
  }

  ActivationSite member_site(long i) const {
    return is_family ? family.members[std::size_t(i)].site
                     : independent[std::size_t(i)].site;
  }

  std::vector<Tensor<S>> params() {
    std::vector<Tensor<S>> out;
    if (is_family) {
      if (!family.untied) {
        out.push_back(family.w_enc_store);
        out.push_back(family.w_dec_store);
      }
      for (auto& m : family.members) {
        if (family.untied) {
          out.push_back(m.w_enc_own);
          out.push_back(m.w_dec_own);
        }
        out.push_back(m.b_enc);
        out.push_back(m.b_dec);
      }
    } else {
      for (auto& inst : independent) {
        out.push_back(inst.w_enc_store);
        out.push_back(inst.w_dec_store);
        out.push_back(inst.b_enc);
        out.push_back(inst.b_dec);
      }
    }
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    if (is_family) {
      if (!family.untied) {
        out.push_back("w_enc");
        out.push_back("w_dec");
      }
      for (const auto& m : family.members) {
        const std::string p = site_name(m.site);
        if (family.untied) {
          out.push_back(p + ".w_enc");
          out.push_back(p + ".w_dec");
        }
        out.push_back(p + ".b_enc");
        out.push_back(p + ".b_dec");
      }
    } else {
      for (const auto& inst : independent) {
        const std::string p = site_name(inst.site);
        out.push_back(p + ".w_enc");
        out.push_back(p + ".w_dec");
        out.push_back(p + ".b_enc");
        out.push_back(p + ".b_dec");
      }
    }
    return out;
  }

  long param_count() {
    long n = 0;
    for (const auto& p : params()) n += p.size();
    return n;
  }
};

template <typename S>
SaeSet<S> make_sae_set(const std::string& variant, PairLocation loc,
                       const LmConfig& lm, long k, long expansion,
                       std::uint64_t seed) {
  const long d = lm.d_model;
  RngState rng = RngState(seed).fork("sae-init/" + variant + "/" +
                                     location_name(loc));
  SaeSet<S> set;
  set.variant = variant;
  set.loc = loc;
  const auto plan = staircase_plan(loc, lm.n_layers);

  auto make_member_biases = [&](StaircaseMember<S>& m, long width) {
    m.b_enc = const_tensor<S>({width}, S(0));
    m.b_dec = const_tensor<S>({d}, S(0));
  };

  // "x40" variants are 5x the configured base expansion (40 = 5 * 8 at the
  // default), so shrunken desk-scale configs keep the capacity ratios.
  if (variant == "topk-x8" || variant == "topk-x40") {
    const long n = (variant == "topk-x40" ? 5 * expansion : expansion) * d;
    for (const auto& [site, idx] : plan) {
      SaeInstance<S> inst;
      inst.site = site;
      inst.variant = variant;
      inst.d_sae = n;
      inst.k = k;
      detail::init_sae_stores(inst.w_enc_store, inst.w_dec_store, n, d, rng);
      inst.b_enc = const_tensor<S>({n}, S(0));
      inst.b_dec = const_tensor<S>({d}, S(0));
      set.independent.push_back(std::move(inst));
    }
    return set;
  }

  set.is_family = true;
  auto& f = set.family;
  f.variant = variant;
  f.k = k;
  if (variant == "topk-x40-tied") {
    f.chunk = 5 * expansion * d;
    detail::init_sae_stores(f.w_enc_store, f.w_dec_store, f.chunk, d, rng);
    for (const auto& [site, idx] : plan) {
      StaircaseMember<S> m;
      m.site = site;
      m.index = 1;
      make_member_biases(m, f.chunk);
      f.members.push_back(std::move(m));
    }
    return set;
  }

  require(variant == "staircase-x8" || variant == "staircase-untied-x8" ||
              variant == "staircase-detach",
          "unknown SAE variant: " + variant);
  f.chunk = expansion * d;
  f.detach = variant == "staircase-detach";
  f.untied = variant == "staircase-untied-x8";
  long max_index = 0;
  for (const auto& [site, idx] : plan) max_index = std::max(max_index, idx);
  if (!f.untied)
    detail::init_sae_stores(f.w_enc_store, f.w_dec_store, f.chunk * max_index,
                            d, rng);
  for (const auto& [site, idx] : plan) {
    StaircaseMember<S> m;
    m.site = site;
    m.index = idx;
    make_member_biases(m, f.chunk * idx);
    if (f.untied)
      detail::init_sae_stores(m.w_enc_own, m.w_dec_own, f.chunk * idx, d, rng);
    f.members.push_back(std::move(m));
  }
  return set;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct SaeTrainConfig {
  long steps_per_member = 1500;
  long batch = 128;
  double lr = 1e-3;
};

template <typename S>
Tensor<S> sae_recon_loss(const SaeInstance<S>& sae, const Tensor<S>& h) {
  Tensor<S> h_hat = decode(sae, encode(sae, h));
  return scale(sq_norm(sub(h_hat, h)), S(1) / S(h.rows()));
}

namespace detail {

template <typename S>
Tensor<S> harvest_batch(const HarvestSet<S>& data, const ActivationSite& site,
                        long batch, std::uint64_t& cursor) {
  const auto it = data.acts.find(site);
  require(it != data.acts.end(), "no harvested data for " + site_name(site));
  const Mat<S>& rows = it->second;
  Tensor<S> h = Tensor<S>::zeros({batch, rows.cols()});
  auto hm = h.mat();
  for (long b = 0; b < batch; ++b) {
    const auto r = data.perm[std::size_t(cursor % data.perm.size())];
    ++cursor;
    hm.row(b) = rows.row(long(r));
  }
  return h;
}

}  // namespace detail

// Trains every member of the set on its own site's activations. Staircase
// members share one Adam state and take interleaved (round-robin) batches so
// the shared slices are optimized jointly; independent instances are trained
// back to back, each with a fresh optimizer.
template <typename S>
std::map<std::string, std::vector<double>> train_sae(
    SaeSet<S>& set, const HarvestSet<S>& data, const SaeTrainConfig& tc) {
  require(data.n_rows > 0, "empty activation dataset");
  std::map<std::string, std::vector<double>> history;
  const AdamConfig acfg{.lr = tc.lr, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};

  auto train_member = [&](const SaeInstance<S>& view,
                          std::vector<Tensor<S>>& params, AdamState<S>& adam,
                          std::uint64_t& cursor) {
    Tensor<S> h = detail::harvest_batch(data, view.site, tc.batch, cursor);
    zero_grads(params);
    Tensor<S> loss = sae_recon_loss(view, h);
    const double value = double(loss.item());
    require(std::isfinite(value), "SAE loss diverged at " + site_name(view.site));
    loss.backward();
    adam.step(params);
    return value;
  };

  if (set.is_family) {
    auto params = set.params();
    AdamState<S> adam(params, acfg);
    const long m_count = set.member_count();
    std::vector<std::uint64_t> cursors(std::size_t(m_count), 0);
    for (long step = 0; step < tc.steps_per_member * m_count; ++step) {
      const long m = step % m_count;
      auto view = staircase_member(set.family, m + 1);
      const double v = train_member(view, params, adam, cursors[std::size_t(m)]);
      history[site_name(view.site)].push_back(v);
    }
  } else {
    for (auto& inst : set.independent) {
      std::vector<Tensor<S>> params{inst.w_enc_store, inst.w_dec_store,
                                    inst.b_enc, inst.b_dec};
      AdamState<S> adam(params, acfg);
      std::uint64_t cursor = 0;
      for (long step = 0; step < tc.steps_per_member; ++step) {
        const double v = train_member(inst, params, adam, cursor);
        history[site_name(inst.site)].push_back(v);
      }
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

struct SpliceResult {
  double base_ce = 0;
  double spliced_ce = 0;
  double delta_ce() const { return spliced_ce - base_ce; }
};

// Replaces the listed sites' activations with their SAE reconstructions and
// measures the CE-loss increase over the prompt windows.
template <typename S>
SpliceResult splice_eval(const LmWeights<S>& w,
                         const std::vector<SaeInstance<S>>& saes,
                         const std::vector<std::vector<int>>& prompts) {
  for (const auto& sae : saes) w.config.check_site(sae.site);
  EvalHooks<S> hooks;
  hooks.mutate = [&saes](const ActivationSite& site, Mat<S>& v) {
    for (const auto& sae : saes)
      if (sae.site == site) v = reconstruct_eval(sae, v);
  };
  SpliceResult out;
  for (const auto& prompt : prompts) {
    std::vector<int> in(prompt.begin(), prompt.end() - 1);
    std::vector<int> tgt(prompt.begin() + 1, prompt.end());
    out.base_ce += cross_entropy_rows(Mat<S>(lm_eval_forward(w, in)), tgt);
    out.spliced_ce +=
        cross_entropy_rows(Mat<S>(lm_eval_forward(w, in, hooks)), tgt);
  }
  out.base_ce /= double(prompts.size());
  out.spliced_ce /= double(prompts.size());
  return out;
}

struct ChunkUsage {
  // usage[member][chunk] = mean number of active latents in that chunk
  std::vector<std::vector<double>> usage;

  double earlier_chunk_share(long member) const {
    const auto& u = usage[std::size_t(member)];
    double total = 0, earlier = 0;
    for (std::size_t c = 0; c < u.size(); ++c) {
      total += u[c];
      if (c + 1 < u.size()) earlier += u[c];
    }
    return total > 0 ? earlier / total : 0.0;
  }
};

// Mean active-latent count per chunk per member over harvested activations.
template <typename S>
ChunkUsage chunk_usage(const StaircaseFamily<S>& f, const HarvestSet<S>& data,
                       long max_rows = 4096) {
  ChunkUsage out;
  for (long i = 1; i <= f.member_count(); ++i) {
    auto view = staircase_member(f, i);
    const auto it = data.acts.find(view.site);
    require(it != data.acts.end(), "no harvested data for " + site_name(view.site));
    const long rows = std::min(max_rows, long(it->second.rows()));
    Mat<S> z = encode_eval(view, Mat<S>(it->second.topRows(rows)));
    const long chunks = view.d_sae / f.chunk;
    std::vector<double> usage(std::size_t(chunks), 0.0);
    for (long r = 0; r < z.rows(); ++r)
      for (long c = 0; c < z.cols(); ++c)
        if (z(r, c) != S(0)) usage[std::size_t(c / f.chunk)] += 1.0;
    for (auto& u : usage) u /= double(rows);
    out.usage.push_back(std::move(usage));
  }
  return out;
}

}  // namespace sclr
