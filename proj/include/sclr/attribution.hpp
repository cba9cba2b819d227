#pragma once

// Integrated-gradient scoring of upstream-latent -> downstream-latent
// connections. Per sample (window, position) the path scales that position's
// upstream latent vector from the origin to its observed value; the rest of
// the window stays at its harvested values. Midpoint Riemann terms use the
// exact segment linearization, and scores are the RMS of the per-sample
// attributions.

#include <vector>

#include "sclr/parallel.hpp"
#include "sclr/sae.hpp"

namespace sclr {

// Generic per-coordinate integrated gradients for a scalar-valued function:
// a_i = (v_i - b_i) * (1/T) * sum_t grad_f(b + z_t (v - b))_i at midpoints.
inline std::vector<double> integrated_gradients(
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_f,
    const std::vector<double>& v, const std::vector<double>& base, int terms) {
  require(terms >= 1, "integrated_gradients: terms must be >= 1");
  require(v.size() == base.size(), "integrated_gradients: size mismatch");
  std::vector<double> acc(v.size(), 0.0);
  std::vector<double> point(v.size());
  for (int t = 0; t < terms; ++t) {
    const double z = (t + 0.5) / terms;
    for (std::size_t i = 0; i < v.size(); ++i)
      point[i] = base[i] * (1.0 - z) + z * v[i];
    const std::vector<double> g = grad_f(point);
    require(g.size() == v.size(), "integrated_gradients: bad gradient size");
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += g[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i)
    acc[i] = (v[i] - base[i]) * acc[i] / terms;
  return acc;
}

enum class DownstreamReadout {
  kPreTopk,   // differentiate the post-ReLU, pre-TopK magnitudes
  kTopkMask,  // gate rows by the TopK set recorded at the unablated endpoint
};

template <typename S>
struct LatentMap {
  const LmWeights<S>* model = nullptr;
  SitePair sites{};
  SaeInstance<S> up, down;
};

template <typename S>
struct EdgeScoreMatrix {
  Mat<S> scores;  // [down.d_sae x up.d_sae], RMS attributions, >= 0
  long samples = 0;
  int terms = 0;
};

struct Edge {
  long down = 0, up = 0;
  double score = 0;
};

namespace detail {

// Attribution of one (window, position) sample accumulated into `acc` as
// squared attributions (double precision regardless of S).
template <typename S>
void accumulate_sample(const LatentMap<S>& map, const Mat<S>& up_window_acts,
                       long p, int terms, DownstreamReadout readout,
                       Eigen::MatrixXd& acc) {
  const LmWeights<S>& w = *map.model;
  const bool positionwise = map.sites.loc != PairLocation::TransformerBlock;

  Mat<S> z_up = encode_eval(map.up, up_window_acts);
  std::vector<long> active;
  for (long j = 0; j < z_up.cols(); ++j)
    if (z_up(p, j) != S(0)) active.push_back(j);
  if (active.empty()) return;

  auto dec = map.up.dec_view();
  auto enc = map.down.enc_view();

  std::vector<long> endpoint_mask;
  if (readout == DownstreamReadout::kTopkMask) {
    Mat<S> x_end = decode_eval(map.up, z_up);
    Mat<S> y_end = segment_forward(w, map.sites, positionwise
                                                     ? Mat<S>(x_end.row(p))
                                                     : x_end);
    Mat<S> pre_end = encode_pre_eval(map.down, Mat<S>(y_end.row(positionwise ? 0 : p)));
    topk_select(pre_end.row(0).data(), pre_end.cols(), map.down.k, endpoint_mask);
  }

  // mean-over-terms path gradient per (downstream latent, active upstream j)
  Eigen::MatrixXd g_mean =
      Eigen::MatrixXd::Zero(map.down.d_sae, long(active.size()));

  Mat<S> z_path = z_up;
  for (int t = 0; t < terms; ++t) {
    const S z = S((t + 0.5) / terms);
    z_path.row(p) = z_up.row(p) * z;
    Mat<S> x_hat = decode_eval(map.up, z_path);
    const Mat<S> x_in = positionwise ? Mat<S>(x_hat.row(p)) : x_hat;
    SegmentLin<S> lin(w, map.sites, x_in);
    const long row = positionwise ? 0 : p;

    Mat<S> pre = encode_pre_eval(map.down, Mat<S>(lin.value().row(row)));
    Mat<S> dx = Mat<S>::Zero(x_in.rows(), x_in.cols());
    for (std::size_t jj = 0; jj < active.size(); ++jj) {
      dx.row(row) = dec.col(active[jj]).transpose();
      Mat<S> dy = lin.jvp(dx);
      dx.row(row).setZero();
      Vec<S> dpre = enc * dy.row(row).transpose();
      for (long i = 0; i < map.down.d_sae; ++i)
        if (pre(0, i) > S(0)) g_mean(i, long(jj)) += double(dpre[i]);
    }
  }

  for (std::size_t jj = 0; jj < active.size(); ++jj) {
    const double vj = double(z_up(p, active[jj]));
    for (long i = 0; i < map.down.d_sae; ++i) {
      if (readout == DownstreamReadout::kTopkMask) {
        bool in_mask = false;
        for (long m : endpoint_mask)
          if (m == i) { in_mask = true; break; }
        if (!in_mask) continue;
      }
      const double a = vj * g_mean(i, long(jj)) / terms;
      acc(i, active[jj]) += a * a;
    }
  }
}

}  // namespace detail

// RMS integrated-gradient attribution over sampled (window, position) pairs
// drawn from the harvest. Samples are partitioned into fixed-size blocks and
// block sums are merged in block order, so results do not depend on the
// thread count.
template <typename S>
EdgeScoreMatrix<S> edge_scores(const LatentMap<S>& map,
                               const HarvestSet<S>& data, long n_samples,
                               int terms, std::uint64_t seed,
                               DownstreamReadout readout =
                                   DownstreamReadout::kPreTopk) {
  require(n_samples >= 1, "edge_scores: need at least one sample");
  require(terms >= 1, "edge_scores: terms must be >= 1");
  const auto it = data.acts.find(map.sites.up);
  require(it != data.acts.end(), "edge_scores: upstream site not harvested");

  RngState rng = RngState(seed).fork("attr-samples");
  std::vector<std::uint64_t> rows = rng.permutation(std::uint64_t(data.n_rows));
  rows.resize(std::size_t(std::min(n_samples, data.n_rows)));
  std::sort(rows.begin(), rows.end());

  const long block_size = 16;
  const long n_blocks = (long(rows.size()) + block_size - 1) / block_size;
  std::vector<Eigen::MatrixXd> partial{std::size_t(n_blocks)};

  parallel_for(n_blocks, [&](long b) {
    Eigen::MatrixXd acc =
        Eigen::MatrixXd::Zero(map.down.d_sae, map.up.d_sae);
    const long lo = b * block_size;
    const long hi = std::min<long>(lo + block_size, long(rows.size()));
    for (long s = lo; s < hi; ++s) {
      const long row = long(rows[std::size_t(s)]);
      const long win = row / data.window_len;
      const long pos = row % data.window_len;
      Mat<S> up_acts = it->second.middleRows(win * data.window_len,
                                             data.window_len);
      detail::accumulate_sample(map, up_acts, pos, terms, readout, acc);
    }
    partial[std::size_t(b)] = std::move(acc);
  });

  Eigen::MatrixXd total =
      Eigen::MatrixXd::Zero(map.down.d_sae, map.up.d_sae);
  for (const auto& p : partial) total += p;

  EdgeScoreMatrix<S> out;
  out.samples = long(rows.size());
  out.terms = terms;
  out.scores = (total / double(rows.size())).array().sqrt().template cast<S>();
  return out;
}

// Descending by score; ties broken by (downstream, upstream) ascending.
template <typename S>
std::vector<Edge> rank_edges(const EdgeScoreMatrix<S>& m) {
  for (long i = 0; i < m.scores.size(); ++i)
    require(std::isfinite(double(m.scores.data()[i])),
            "rank_edges: non-finite score");
  std::vector<Edge> edges;
  edges.reserve(std::size_t(m.scores.rows() * m.scores.cols()));
  for (long i = 0; i < m.scores.rows(); ++i)
    for (long j = 0; j < m.scores.cols(); ++j)
      edges.push_back({i, j, double(m.scores(i, j))});
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.down != b.down) return a.down < b.down;
    return a.up < b.up;
  });
  return edges;
}

}  // namespace sclr
