#pragma once

// Container round trips for model weights, SAE sets, harvested activations
// and edge-score matrices. Structural metadata that is not tensor-valued
// (variant names, member plans) travels in JSON sidecars owned by the
// pipeline.

#include "sclr/container.hpp"
#include "sclr/jsae.hpp"
#include "sclr/sae.hpp"

namespace sclr {

template <typename S>
void save_lm(SclrContainer& c, LmWeights<S>& w) {
  auto params = w.params();
  auto names = w.param_names();
  for (std::size_t i = 0; i < params.size(); ++i)
    c.tensors.push_back(to_named(names[i], params[i]));
}

template <typename S>
LmWeights<S> load_lm(const SclrContainer& c, const LmConfig& cfg) {
  LmWeights<S> w = init_lm<S>(cfg);
  auto params = w.params();
  auto names = w.param_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S> stored = from_named<S>(c.find(names[i]));
    require(stored.shape() == params[i].shape(),
            "stored tensor shape mismatch for " + names[i]);
    params[i].values() = stored.values();
  }
  return w;
}

template <typename S>
void save_sae_set(SclrContainer& c, SaeSet<S>& set) {
  auto params = set.params();
  auto names = set.param_names();
  for (std::size_t i = 0; i < params.size(); ++i)
    c.tensors.push_back(to_named(names[i], params[i]));
}

template <typename S>
SaeSet<S> load_sae_set(const SclrContainer& c, const std::string& variant,
                       PairLocation loc, const LmConfig& lm, long k,
                       long expansion) {
  SaeSet<S> set = make_sae_set<S>(variant, loc, lm, k, expansion, 0);
  auto params = set.params();
  auto names = set.param_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S> stored = from_named<S>(c.find(names[i]));
    require(stored.shape() == params[i].shape(),
            "stored tensor shape mismatch for " + names[i]);
    params[i].values() = stored.values();
  }
  return set;
}

template <typename S>
void save_jsae_pair(SclrContainer& c, JsaePair<S>& pair) {
  for (auto& [name, t] :
       std::initializer_list<std::pair<const char*, Tensor<S>*>>{
           {"x.w_enc", &pair.sae_x.w_enc_store},
           {"x.w_dec", &pair.sae_x.w_dec_store},
           {"x.b_enc", &pair.sae_x.b_enc},
           {"x.b_dec", &pair.sae_x.b_dec},
           {"y.w_enc", &pair.sae_y.w_enc_store},
           {"y.w_dec", &pair.sae_y.w_dec_store},
           {"y.b_enc", &pair.sae_y.b_enc},
           {"y.b_dec", &pair.sae_y.b_dec}})
    c.tensors.push_back(to_named(std::string(name), *t));
}

template <typename S>
void save_harvest(SclrContainer& c, const HarvestSet<S>& data) {
  const Dtype dt = std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;

  NamedTensor tokens;
  tokens.name = "tokens";
  tokens.dtype = dt;
  tokens.dims = {std::uint64_t(data.n_windows), std::uint64_t(data.window_len)};
  for (int t : data.tokens) {
    if (dt == Dtype::F32)
      tokens.f32.push_back(float(t));
    else
      tokens.f64.push_back(double(t));
  }
  c.tensors.push_back(std::move(tokens));

  NamedTensor perm;
  perm.name = "perm";
  perm.dtype = dt;
  perm.dims = {std::uint64_t(data.perm.size())};
  for (auto p : data.perm) {
    require(p < (1u << 24) || dt == Dtype::F64,
            "harvest too large for f32 row indices");
    if (dt == Dtype::F32)
      perm.f32.push_back(float(p));
    else
      perm.f64.push_back(double(p));
  }
  c.tensors.push_back(std::move(perm));

  for (const auto& [site, acts] : data.acts) {
    NamedTensor t;
    t.name = "act/" + site_name(site);
    t.dtype = dt;
    t.dims = {std::uint64_t(acts.rows()), std::uint64_t(acts.cols())};
    for (long i = 0; i < acts.size(); ++i) {
      if (dt == Dtype::F32)
        t.f32.push_back(float(acts.data()[i]));
      else
        t.f64.push_back(double(acts.data()[i]));
    }
    c.tensors.push_back(std::move(t));
  }
}

template <typename S>
HarvestSet<S> load_harvest(const SclrContainer& c) {
  HarvestSet<S> out;
  const NamedTensor& tokens = c.find("tokens");
  out.n_windows = long(tokens.dims.at(0));
  out.window_len = long(tokens.dims.at(1));
  for (std::uint64_t i = 0; i < tokens.numel(); ++i)
    out.tokens.push_back(int(tokens.dtype == Dtype::F32 ? tokens.f32[i]
                                                        : tokens.f64[i]));
  const NamedTensor& perm = c.find("perm");
  for (std::uint64_t i = 0; i < perm.numel(); ++i)
    out.perm.push_back(std::uint64_t(perm.dtype == Dtype::F32 ? perm.f32[i]
                                                              : perm.f64[i]));
  for (const auto& t : c.tensors) {
    if (t.name.rfind("act/", 0) != 0) continue;
    Tensor<S> stored = from_named<S>(t);
    Mat<S> m(stored.rows(), stored.cols());
    std::copy(stored.values().begin(), stored.values().end(), m.data());
    out.acts[parse_site(t.name.substr(4))] = std::move(m);
  }
  out.n_rows = long(out.perm.size());
  return out;
}

template <typename S>
void save_edge_scores(SclrContainer& c, const EdgeScoreMatrix<S>& m) {
  NamedTensor t;
  t.name = "edge_scores";
  t.dtype = std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;
  t.dims = {std::uint64_t(m.scores.rows()), std::uint64_t(m.scores.cols())};
  for (long i = 0; i < m.scores.rows(); ++i)
    for (long j = 0; j < m.scores.cols(); ++j) {
      if (t.dtype == Dtype::F32)
        t.f32.push_back(float(m.scores(i, j)));
      else
        t.f64.push_back(double(m.scores(i, j)));
    }
  c.tensors.push_back(std::move(t));
}

template <typename S>
EdgeScoreMatrix<S> load_edge_scores(const SclrContainer& c, long samples,
                                    int terms) {
  const NamedTensor& t = c.find("edge_scores");
  EdgeScoreMatrix<S> m;
  m.samples = samples;
  m.terms = terms;
  m.scores = Mat<S>(long(t.dims.at(0)), long(t.dims.at(1)));
  for (long i = 0, idx = 0; i < m.scores.rows(); ++i)
    for (long j = 0; j < m.scores.cols(); ++j, ++idx)
      m.scores(i, j) = S(t.dtype == Dtype::F32 ? t.f32[std::size_t(idx)]
                                               : t.f64[std::size_t(idx)]);
  return m;
}

}  // namespace sclr
