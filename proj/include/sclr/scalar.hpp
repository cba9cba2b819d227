#pragma once

// The SCALAR benchmark engine. A subcircuit retains an edge set T between an
// upstream and a downstream SAE; every retained downstream latent is
// recomputed with its upstream support masked in, all other downstream
// latents are zero, and the model is resumed from the reassembled downstream
// value. Curves map retained-edge count to mean KL divergence against the
// full model (or the full circuit for the pure computational-sparsity
// variant), and scores integrate the curve.
//
// Two engines share every numeric kernel: the naive per-latent loop and the
// production engine that stacks the latent masks into a batch, deduplicating
// identical masked inputs. Their outputs are bit-identical by construction
// and this is enforced by tests.

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "sclr/attribution.hpp"
#include "sclr/parallel.hpp"

namespace sclr {

// ---------------------------------------------------------------------------
// edge-count sequences
// ---------------------------------------------------------------------------

// The exact 35-entry sequence used for 512x512 pairs.
inline const std::vector<long>& paper_edge_sequence() {
  static const std::vector<long> seq = {
      1,     2,     4,     5,     7,      11,     16,    22,    32,
      45,    63,    90,    127,   181,    256,    362,   512,   724,
      1024,  1448,  2048,  2896,  4095,   5792,   8191,  11585, 16383,
      23170, 32768, 46340, 65536, 92681,  131072, 185363, 262144};
  return seq;
}

// For 262144 total edges returns the fixed sequence above; otherwise
// sqrt(2)-spaced counts floor(2^(m/2)), deduplicated, capped at total and
// always ending exactly at total.
inline std::vector<long> edge_sequence(long total_edges) {
  require(total_edges >= 1, "edge_sequence: total_edges must be >= 1");
  if (total_edges == 262144) return paper_edge_sequence();
  std::vector<long> seq;
  for (int m = 0;; ++m) {
    const long v = long(std::exp2(0.5 * m));
    if (v > total_edges) break;
    if (seq.empty() || seq.back() != v) seq.push_back(v);
  }
  if (seq.empty() || seq.back() != total_edges) seq.push_back(total_edges);
  return seq;
}

// ---------------------------------------------------------------------------
// subcircuit machinery
// ---------------------------------------------------------------------------

enum class CurveReference { FullModel, FullCircuit };

inline std::string reference_name(CurveReference r) {
  return r == CurveReference::FullModel ? "full_model" : "full_circuit";
}

enum class SubcircuitReadout {
  kFrozenMask,     // masked-pass magnitude gated by the unablated TopK set
  kRecomputedTopk  // re-apply TopK selection inside each masked pass
};

template <typename S>
struct SaePairView {
  SitePair sites{};
  SaeInstance<S> up, down;

  long total_edges() const { return up.d_sae * down.d_sae; }
};

namespace detail {

// Per-prompt context shared by every edge set evaluated on that prompt.
template <typename S>
struct PromptContext {
  std::vector<int> tokens;
  SegmentPrefix<S> prefix;
  Mat<S> z_up;                                // [T x d_up], TopK applied
  std::vector<std::vector<long>> up_active;   // per position, ascending
  Mat<S> z_down_full;                         // full-circuit downstream latents
  std::vector<std::vector<char>> down_sel;    // per position TopK membership
  Mat<S> full_model_logits;
  Mat<S> full_circuit_logits;
};

template <typename S>
PromptContext<S> make_prompt_context(const LmWeights<S>& w,
                                     const SaePairView<S>& pair,
                                     const std::vector<int>& tokens) {
  PromptContext<S> ctx;
  ctx.tokens = tokens;
  ctx.full_model_logits = lm_eval_forward(w, tokens);
  ctx.prefix = segment_prefix(w, pair.sites, tokens);
  ctx.z_up = encode_eval(pair.up, ctx.prefix.h_up);
  const long t = ctx.z_up.rows();
  ctx.up_active.resize(std::size_t(t));
  for (long p = 0; p < t; ++p)
    for (long j = 0; j < ctx.z_up.cols(); ++j)
      if (ctx.z_up(p, j) != S(0)) ctx.up_active[std::size_t(p)].push_back(j);

  Mat<S> x_hat = decode_eval(pair.up, ctx.z_up);
  Mat<S> y_full = segment_forward(w, pair.sites, x_hat);
  ctx.z_down_full = encode_eval(pair.down, y_full);
  ctx.down_sel.assign(std::size_t(t),
                      std::vector<char>(std::size_t(pair.down.d_sae), 0));
  for (long p = 0; p < t; ++p)
    for (long i = 0; i < pair.down.d_sae; ++i)
      if (ctx.z_down_full(p, i) != S(0)) ctx.down_sel[std::size_t(p)][std::size_t(i)] = 1;
  Mat<S> h_down = decode_eval(pair.down, ctx.z_down_full);
  ctx.full_circuit_logits = segment_finish(w, pair.sites, ctx.prefix, h_down);
  return ctx;
}

// The masked upstream pattern of one downstream latent: one bitmask per
// position over that position's active upstream latents (ascending order).
using MaskPattern = std::vector<std::uint32_t>;

template <typename S>
MaskPattern mask_pattern(const PromptContext<S>& ctx,
                         const std::vector<long>& u_sorted) {
  const long t = ctx.z_up.rows();
  MaskPattern pat(std::size_t(t), 0);
  for (long p = 0; p < t; ++p) {
    const auto& act = ctx.up_active[std::size_t(p)];
    require(act.size() <= 32, "subcircuit masks support K <= 32");
    std::uint32_t bits = 0;
    for (std::size_t i = 0; i < act.size(); ++i)
      if (std::binary_search(u_sorted.begin(), u_sorted.end(), act[i]))
        bits |= std::uint32_t(1u << i);
    pat[std::size_t(p)] = bits;
  }
  return pat;
}

// Decode with only the pattern-selected upstream latents retained. Terms are
// accumulated in ascending latent order; both engines go through here.
template <typename S>
Mat<S> masked_decode(const SaePairView<S>& pair, const PromptContext<S>& ctx,
                     const MaskPattern& pat) {
  const long t = ctx.z_up.rows();
  const long d = pair.up.d_model();
  Mat<S> x(t, d);
  x.rowwise() = pair.up.b_dec.vec().transpose();
  auto dec = pair.up.dec_view();
  for (long p = 0; p < t; ++p) {
    const auto& act = ctx.up_active[std::size_t(p)];
    const std::uint32_t bits = pat[std::size_t(p)];
    for (std::size_t i = 0; i < act.size(); ++i)
      if (bits & (1u << i))
        x.row(p) += ctx.z_up(p, act[i]) * dec.col(act[i]).transpose();
  }
  return x;
}

// Pre-activation of a single downstream latent over all positions.
template <typename S>
Vec<S> encode_single_pre(const SaeInstance<S>& sae, const Mat<S>& y, long ell) {
  Mat<S> centered = y.rowwise() - sae.b_dec.vec().transpose();
  Vec<S> pre = centered * sae.w_enc_store.mat().row(ell).transpose();
  pre.array() += sae.b_enc.vec()[ell];
  return pre;
}

// Downstream column written into the assembled latent tensor for latent ell,
// given the masked-pass segment output.
template <typename S>
void write_downstream_column(const SaePairView<S>& pair,
                             const PromptContext<S>& ctx, const Mat<S>& y,
                             long ell, SubcircuitReadout readout, Mat<S>& z_out) {
  const long t = y.rows();
  if (readout == SubcircuitReadout::kRecomputedTopk) {
    Mat<S> z = encode_eval(pair.down, y);
    z_out.col(ell) = z.col(ell);
    return;
  }
  Vec<S> pre = encode_single_pre(pair.down, y, ell);
  for (long p = 0; p < t; ++p) {
    const S v = pre[p] > S(0) ? pre[p] : S(0);
    z_out(p, ell) = ctx.down_sel[std::size_t(p)][std::size_t(ell)] ? v : S(0);
  }
}

template <typename S>
Mat<S> finish_from_latents(const LmWeights<S>& w, const SaePairView<S>& pair,
                           const PromptContext<S>& ctx, const Mat<S>& z_down) {
  Mat<S> h_down = decode_eval(pair.down, z_down);
  return segment_finish(w, pair.sites, ctx.prefix, h_down);
}

template <typename S>
std::map<long, std::vector<long>> upstream_sets(const SaePairView<S>& pair,
                                                const std::vector<Edge>& edges,
                                                std::size_t n) {
  require(n <= edges.size(), "subcircuit: edge count exceeds ranked list");
  std::map<long, std::vector<long>> u;
  for (std::size_t e = 0; e < n; ++e) {
    const Edge& edge = edges[e];
    require(0 <= edge.down && edge.down < pair.down.d_sae &&
                0 <= edge.up && edge.up < pair.up.d_sae,
            "subcircuit: edge index out of range");
    u[edge.down].push_back(edge.up);
  }
  for (auto& [ell, ups] : u) std::sort(ups.begin(), ups.end());
  return u;
}

}  // namespace detail

// Reference per-latent loop: one masked segment forward per retained
// downstream latent, no sharing.
template <typename S>
Mat<S> subcircuit_latents_naive(const LmWeights<S>& w,
                                const SaePairView<S>& pair,
                                const detail::PromptContext<S>& ctx,
                                const std::map<long, std::vector<long>>& u_sets,
                                SubcircuitReadout readout) {
  Mat<S> z_down = Mat<S>::Zero(ctx.z_up.rows(), pair.down.d_sae);
  for (const auto& [ell, ups] : u_sets) {
    const detail::MaskPattern pat = detail::mask_pattern(ctx, ups);
    Mat<S> x_hat = detail::masked_decode(pair, ctx, pat);
    Mat<S> y = segment_forward(w, pair.sites, x_hat);
    detail::write_downstream_column(pair, ctx, y, ell, readout, z_down);
  }
  return z_down;
}

template <typename S>
Mat<S> subcircuit_forward_naive(const LmWeights<S>& w,
                                const SaePairView<S>& pair,
                                const detail::PromptContext<S>& ctx,
                                const std::map<long, std::vector<long>>& u_sets,
                                SubcircuitReadout readout) {
  return detail::finish_from_latents(
      w, pair, ctx, subcircuit_latents_naive(w, pair, ctx, u_sets, readout));
}

// Assembled downstream latent tensor for a retained edge set on one prompt.
template <typename S>
Mat<S> subcircuit_latents(const LmWeights<S>& w, const SaePairView<S>& pair,
                          const std::vector<Edge>& retained,
                          const std::vector<int>& prompt,
                          SubcircuitReadout readout =
                              SubcircuitReadout::kFrozenMask) {
  detail::PromptContext<S> ctx = detail::make_prompt_context(w, pair, prompt);
  auto u = detail::upstream_sets(pair, retained, retained.size());
  return subcircuit_latents_naive(w, pair, ctx, u, readout);
}

// Production engine: latent masks form a batch, and masks with identical
// masked inputs share one segment forward.
template <typename S>
Mat<S> subcircuit_latents_batched(const SaePairView<S>& pair,
                                  const LmWeights<S>& w,
                                  const detail::PromptContext<S>& ctx,
                                  const std::map<long, std::vector<long>>& u_sets,
                                  SubcircuitReadout readout) {
  Mat<S> z_down = Mat<S>::Zero(ctx.z_up.rows(), pair.down.d_sae);

  std::vector<detail::MaskPattern> patterns;
  std::vector<std::vector<long>> group_ells;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> index;
  for (const auto& [ell, ups] : u_sets) {
    detail::MaskPattern pat = detail::mask_pattern(ctx, ups);
    const std::uint64_t h =
        fnv1a64(pat.data(), pat.size() * sizeof(std::uint32_t));
    auto& bucket = index[h];
    std::size_t group = patterns.size();
    for (std::size_t g : bucket) {
      if (patterns[g] == pat) {
        group = g;
        break;
      }
    }
    if (group == patterns.size()) {
      bucket.push_back(group);
      patterns.push_back(std::move(pat));
      group_ells.emplace_back();
    }
    group_ells[group].push_back(ell);
  }

  for (std::size_t g = 0; g < patterns.size(); ++g) {
    Mat<S> x_hat = detail::masked_decode(pair, ctx, patterns[g]);
    Mat<S> y = segment_forward(w, pair.sites, x_hat);
    for (long ell : group_ells[g])
      detail::write_downstream_column(pair, ctx, y, ell, readout, z_down);
  }
  return z_down;
}

template <typename S>
Mat<S> subcircuit_forward_batched(const LmWeights<S>& w,
                                  const SaePairView<S>& pair,
                                  const detail::PromptContext<S>& ctx,
                                  const std::map<long, std::vector<long>>& u_sets,
                                  SubcircuitReadout readout) {
  return detail::finish_from_latents(
      w, pair, ctx, subcircuit_latents_batched(pair, w, ctx, u_sets, readout));
}

// Subcircuit logits for a retained edge set on one prompt (spec entry point,
// naive engine).
template <typename S>
Mat<S> subcircuit_forward(const LmWeights<S>& w, const SaePairView<S>& pair,
                          const std::vector<Edge>& retained,
                          const std::vector<int>& prompt,
                          SubcircuitReadout readout = SubcircuitReadout::kFrozenMask) {
  detail::PromptContext<S> ctx = detail::make_prompt_context(w, pair, prompt);
  auto u = detail::upstream_sets(pair, retained, retained.size());
  return subcircuit_forward_naive(w, pair, ctx, u, readout);
}

// ---------------------------------------------------------------------------
// ablation curves and scores
// ---------------------------------------------------------------------------

struct AblationCurve {
  std::vector<long> edge_counts;
  std::vector<double> mean_kl;                 // one per edge count
  std::vector<std::vector<double>> prompt_kl;  // [edge count][prompt]
  std::string reference;
  long total_edges = 0;
};

template <typename S>
AblationCurve ablation_curve(const LmWeights<S>& w, const SaePairView<S>& pair,
                             const std::vector<Edge>& ranked,
                             const std::vector<long>& sequence,
                             const std::vector<std::vector<int>>& prompts,
                             CurveReference reference,
                             SubcircuitReadout readout =
                                 SubcircuitReadout::kFrozenMask) {
  require(!sequence.empty() && !prompts.empty(), "ablation_curve: empty input");
  for (std::size_t i = 1; i < sequence.size(); ++i)
    require(sequence[i] > sequence[i - 1], "edge sequence must strictly increase");
  require(sequence.back() <= pair.total_edges(),
          "edge sequence exceeds total edges of the pair");
  require(std::size_t(sequence.back()) <= ranked.size(),
          "ranked edge list shorter than sequence");

  const std::size_t n_counts = sequence.size();
  const std::size_t n_prompts = prompts.size();
  std::vector<std::vector<double>> per_prompt(
      n_prompts, std::vector<double>(n_counts, 0.0));

  parallel_for(long(n_prompts), [&](long pi) {
    detail::PromptContext<S> ctx =
        detail::make_prompt_context(w, pair, prompts[std::size_t(pi)]);
    const Mat<S>& ref = reference == CurveReference::FullModel
                            ? ctx.full_model_logits
                            : ctx.full_circuit_logits;
    for (std::size_t ni = 0; ni < n_counts; ++ni) {
      auto u = detail::upstream_sets(pair, ranked,
                                     std::size_t(sequence[ni]));
      Mat<S> logits = subcircuit_forward_batched(w, pair, ctx, u, readout);
      const std::vector<double> kls = kl_rows(ref, logits);
      double acc = 0;
      for (double v : kls) acc += v;
      per_prompt[std::size_t(pi)][ni] = acc / double(kls.size());
    }
  });

  AblationCurve curve;
  curve.edge_counts = sequence;
  curve.reference = reference_name(reference);
  curve.total_edges = pair.total_edges();
  curve.mean_kl.resize(n_counts);
  curve.prompt_kl.assign(n_counts, std::vector<double>(n_prompts));
  for (std::size_t ni = 0; ni < n_counts; ++ni) {
    double acc = 0;
    for (std::size_t pi = 0; pi < n_prompts; ++pi) {
      curve.prompt_kl[ni][pi] = per_prompt[pi][ni];
      acc += per_prompt[pi][ni];
    }
    curve.mean_kl[ni] = acc / double(n_prompts);
  }
  return curve;
}

struct ScalarScore {
  double absolute = 0;
  double relative = 0;
  double sem_absolute = 0;
  double sem_relative = 0;
  long total_edges = 0;
};

namespace detail {

inline double trapezoid(const std::vector<long>& x, const std::vector<double>& y) {
  double area = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    area += 0.5 * (y[i] + y[i - 1]) * double(x[i] - x[i - 1]);
  return area;
}

}  // namespace detail

// Trapezoidal area under the piecewise-linear curve on the linear edge axis;
// the relative score divides by the pair's total edge count. The standard
// error is the SEM of per-prompt areas.
inline ScalarScore auc(const AblationCurve& curve) {
  require(curve.edge_counts.size() >= 2, "auc: single-point curve");
  ScalarScore s;
  s.total_edges = curve.total_edges;
  s.absolute = detail::trapezoid(curve.edge_counts, curve.mean_kl);
  const std::size_t n_prompts = curve.prompt_kl.front().size();
  if (n_prompts > 1) {
    std::vector<double> areas(n_prompts);
    std::vector<double> y(curve.edge_counts.size());
    double mean = 0;
    for (std::size_t p = 0; p < n_prompts; ++p) {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = curve.prompt_kl[i][p];
      areas[p] = detail::trapezoid(curve.edge_counts, y);
      mean += areas[p];
    }
    mean /= double(n_prompts);
    double var = 0;
    for (double a : areas) var += (a - mean) * (a - mean);
    var /= double(n_prompts - 1);
    s.sem_absolute = std::sqrt(var / double(n_prompts));
  }
  s.relative = s.absolute / double(s.total_edges);
  s.sem_relative = s.sem_absolute / double(s.total_edges);
  return s;
}

struct Reduction {
  double percent = 0;  // 100 (a - b) / a; positive means candidate is sparser
  double sem = 0;
};

// First-order uncertainty propagation from the two SEMs.
inline Reduction compare_scores(double base, double base_sem, double cand,
                                double cand_sem) {
  require(base != 0, "compare: baseline score is zero");
  Reduction r;
  r.percent = 100.0 * (base - cand) / base;
  const double da = 100.0 * cand / (base * base);
  const double db = 100.0 / base;
  r.sem = std::sqrt(da * da * base_sem * base_sem + db * db * cand_sem * cand_sem);
  return r;
}

inline Reduction compare_scores(const ScalarScore& base, const ScalarScore& cand,
                                bool relative) {
  return relative ? compare_scores(base.relative, base.sem_relative,
                                   cand.relative, cand.sem_relative)
                  : compare_scores(base.absolute, base.sem_absolute,
                                   cand.absolute, cand.sem_absolute);
}

// Reduction of scores summed across layers (SEMs add in quadrature).
inline Reduction compare_aggregate(const std::vector<ScalarScore>& base,
                                   const std::vector<ScalarScore>& cand,
                                   bool relative) {
  require(base.size() == cand.size() && !base.empty(),
          "compare_aggregate: layer count mismatch");
  double a = 0, b = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    a += relative ? base[i].relative : base[i].absolute;
    b += relative ? cand[i].relative : cand[i].absolute;
    const double sa = relative ? base[i].sem_relative : base[i].sem_absolute;
    const double sb = relative ? cand[i].sem_relative : cand[i].sem_absolute;
    va += sa * sa;
    vb += sb * sb;
  }
  return compare_scores(a, std::sqrt(va), b, std::sqrt(vb));
}

}  // namespace sclr
