#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sclr/scalar.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace sclr;

namespace {

struct PairWorld {
  LmConfig cfg;
  LmWeights<double> w;
  SaePairView<double> pair;
  std::vector<int> prompt;
  std::vector<Edge> all_edges;
};

PairWorld make_pair_world(PairLocation loc, std::uint64_t seed, long d_sae = 10,
                          long k = 3) {
  PairWorld world{fixtures::tiny_lm_config(seed, 2, 8, 8),
                  init_lm<double>(fixtures::tiny_lm_config(seed, 2, 8, 8)),
                  {},
                  {},
                  {}};
  world.pair.sites = make_site_pair(loc, 1);
  RngState rng(seed + 9);
  world.pair.up = fixtures::random_sae<double>(world.pair.sites.up, d_sae, 8, k,
                                               rng, 0.1);
  world.pair.down = fixtures::random_sae<double>(world.pair.sites.down, d_sae, 8,
                                                 k, rng, 0.1);
  world.prompt = {5, 60, 30, 70, 12, 99, 40, 8};
  for (long i = 0; i < d_sae; ++i)
    for (long j = 0; j < d_sae; ++j)
      world.all_edges.push_back({i, j, 1.0});
  return world;
}

std::vector<Edge> random_edges(long d_down, long d_up, long n, RngState& rng) {
  std::vector<Edge> edges;
  std::vector<char> used(std::size_t(d_down * d_up), 0);
  while (long(edges.size()) < n) {
    const long i = long(rng.uniform_int(std::uint64_t(d_down)));
    const long j = long(rng.uniform_int(std::uint64_t(d_up)));
    if (used[std::size_t(i * d_up + j)]) continue;
    used[std::size_t(i * d_up + j)] = 1;
    edges.push_back({i, j, 1.0});
  }
  return edges;
}

}  // namespace

TEST_CASE("edge_sequence: paper sequence verbatim, small cases, growth cap") {
  const auto seq = edge_sequence(262144);
  REQUIRE(seq.size() == 35);
  const std::vector<long> expected = {
      1,     2,     4,     5,     7,     11,    16,    22,    32,
      45,    63,    90,    127,   181,   256,   362,   512,   724,
      1024,  1448,  2048,  2896,  4095,  5792,  8191,  11585, 16383,
      23170, 32768, 46340, 65536, 92681, 131072, 185363, 262144};
  CHECK(seq == expected);

  CHECK(edge_sequence(4) == std::vector<long>{1, 2, 4});

  const long staircase_total = 512L * 512L * 2L * 3L;
  const auto gen = edge_sequence(staircase_total);
  CHECK(gen.back() == 1572864);
  for (std::size_t i = 1; i < gen.size(); ++i) CHECK(gen[i] > gen[i - 1]);

  CHECK_THROWS(edge_sequence(0));
}

TEST_CASE("subcircuit: retaining every edge reproduces the full circuit") {
  for (PairLocation loc : {PairLocation::FfLayer, PairLocation::FfBlock,
                           PairLocation::TransformerBlock}) {
    PairWorld world = make_pair_world(loc, 400 + std::uint64_t(loc));
    auto ctx = detail::make_prompt_context(world.w, world.pair, world.prompt);
    auto u = detail::upstream_sets(world.pair, world.all_edges,
                                   world.all_edges.size());
    for (SubcircuitReadout readout : {SubcircuitReadout::kFrozenMask,
                                      SubcircuitReadout::kRecomputedTopk}) {
      Mat<double> logits =
          subcircuit_forward_naive(world.w, world.pair, ctx, u, readout);
      CHECK(oracle::max_rel_err(logits, ctx.full_circuit_logits) < 1e-6);
      const auto kls = kl_rows(ctx.full_circuit_logits, logits);
      for (double v : kls) CHECK(std::abs(v) <= 1e-6);
    }
  }
}

TEST_CASE("subcircuit: empty edge set equals the b_dec-only splice oracle") {
  PairWorld world = make_pair_world(PairLocation::FfBlock, 411);
  auto ctx = detail::make_prompt_context(world.w, world.pair, world.prompt);
  Mat<double> logits = subcircuit_forward_naive(
      world.w, world.pair, ctx, {}, SubcircuitReadout::kFrozenMask);

  // oracle: downstream latents all zero -> decoded value is b_dec rows
  Mat<double> h_down(long(world.prompt.size()), 8);
  h_down.rowwise() = world.pair.down.b_dec.vec().transpose();
  Mat<double> expect = segment_finish(world.w, world.pair.sites, ctx.prefix,
                                      h_down);
  CHECK(oracle::max_rel_err(logits, expect) == 0.0);
}

TEST_CASE("subcircuit: one fully connected latent matches its full value") {
  PairWorld world = make_pair_world(PairLocation::FfBlock, 421);
  auto ctx = detail::make_prompt_context(world.w, world.pair, world.prompt);

  const long ell = 4;
  std::vector<Edge> edges;
  for (long j = 0; j < world.pair.up.d_sae; ++j) edges.push_back({ell, j, 1.0});
  Mat<double> z = subcircuit_latents(world.w, world.pair, edges, world.prompt);
  for (long p = 0; p < z.rows(); ++p) {
    // single-latent readout vs the full-circuit GEMM encode: equal to
    // rounding (bit-exactness is only contracted between the two engines)
    CHECK(z(p, ell) ==
          doctest::Approx(ctx.z_down_full(p, ell)).epsilon(1e-12));
    for (long c = 0; c < z.cols(); ++c)
      if (c != ell) CHECK(z(p, c) == 0.0);
  }
}

TEST_CASE("subcircuit: batched engine bit-matches the naive loop") {
  RngState rng(37);
  for (PairLocation loc : {PairLocation::FfLayer, PairLocation::FfBlock,
                           PairLocation::TransformerBlock}) {
    PairWorld world = make_pair_world(loc, 500 + std::uint64_t(loc), 12, 3);
    auto ctx = detail::make_prompt_context(world.w, world.pair, world.prompt);
    for (int trial = 0; trial < 4; ++trial) {
      const long n = 1 + long(rng.uniform_int(100));
      auto edges = random_edges(12, 12, n, rng);
      auto u = detail::upstream_sets(world.pair, edges, edges.size());
      for (SubcircuitReadout readout : {SubcircuitReadout::kFrozenMask,
                                        SubcircuitReadout::kRecomputedTopk}) {
        Mat<double> a =
            subcircuit_forward_naive(world.w, world.pair, ctx, u, readout);
        Mat<double> b =
            subcircuit_forward_batched(world.w, world.pair, ctx, u, readout);
        for (long i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
      }
    }
  }
}

TEST_CASE("subcircuit: growing one latent's support never moves the others") {
  PairWorld world = make_pair_world(PairLocation::TransformerBlock, 433, 10, 3);
  RngState rng(3);
  auto base_edges = random_edges(10, 10, 30, rng);
  Mat<double> before =
      subcircuit_latents(world.w, world.pair, base_edges, world.prompt);

  const long ell0 = base_edges.front().down;
  auto grown = base_edges;
  for (long j = 0; j < 10; ++j) {
    bool present = false;
    for (const auto& e : base_edges)
      present = present || (e.down == ell0 && e.up == j);
    if (!present) grown.push_back({ell0, j, 1.0});
  }
  Mat<double> after =
      subcircuit_latents(world.w, world.pair, grown, world.prompt);
  for (long p = 0; p < before.rows(); ++p)
    for (long c = 0; c < before.cols(); ++c)
      if (c != ell0) CHECK(before(p, c) == after(p, c));

  std::vector<Edge> bad{{99, 0, 1.0}};
  CHECK_THROWS(subcircuit_latents(world.w, world.pair, bad, world.prompt));
}

TEST_CASE("ablation_curve: endpoints, references, determinism") {
  PairWorld world = make_pair_world(PairLocation::FfBlock, 441, 8, 3);
  std::vector<std::vector<int>> prompts{{1, 2, 3, 4, 5, 6},
                                        {60, 61, 62, 63, 64, 65},
                                        {7, 8, 9, 10, 11, 12}};
  // rank all edges with an arbitrary deterministic score
  EdgeScoreMatrix<double> scores;
  scores.scores = Mat<double>(8, 8);
  RngState rng(5);
  for (long i = 0; i < scores.scores.size(); ++i)
    scores.scores.data()[i] = rng.uniform();
  auto ranked = rank_edges(scores);
  const auto sequence = edge_sequence(64);

  AblationCurve pcsm =
      ablation_curve(world.w, world.pair, ranked, sequence, prompts,
                     CurveReference::FullCircuit);
  CHECK(pcsm.reference == "full_circuit");
  CHECK(pcsm.total_edges == 64);
  CHECK(pcsm.mean_kl.back() <= 1e-6);
  for (double v : pcsm.mean_kl) CHECK(v >= 0.0);

  AblationCurve full =
      ablation_curve(world.w, world.pair, ranked, sequence, prompts,
                     CurveReference::FullModel);
  // at n = total the subcircuit equals the full circuit, so the value is the
  // full-model/full-circuit KL measured by an independent splice run
  double expect = 0;
  for (const auto& prompt : prompts) {
    auto ctx = detail::make_prompt_context(world.w, world.pair, prompt);
    const auto kls = kl_rows(ctx.full_model_logits, ctx.full_circuit_logits);
    double acc = 0;
    for (double v : kls) acc += v;
    expect += acc / double(kls.size());
  }
  expect /= double(prompts.size());
  CHECK(full.mean_kl.back() == doctest::Approx(expect).epsilon(1e-9));

  AblationCurve again =
      ablation_curve(world.w, world.pair, ranked, sequence, prompts,
                     CurveReference::FullModel);
  for (std::size_t i = 0; i < full.mean_kl.size(); ++i) {
    CHECK(full.mean_kl[i] == again.mean_kl[i]);
    for (std::size_t p = 0; p < prompts.size(); ++p)
      CHECK(full.prompt_kl[i][p] == again.prompt_kl[i][p]);
  }

  std::vector<long> too_long{1, 65};
  CHECK_THROWS(ablation_curve(world.w, world.pair, ranked, too_long, prompts,
                              CurveReference::FullModel));
}

TEST_CASE("auc: rectangle, triangle, fine-grid oracle, consistency") {
  AblationCurve flat;
  flat.edge_counts = {1, 10, 100};
  flat.mean_kl = {2.0, 2.0, 2.0};
  flat.prompt_kl = {{2.0}, {2.0}, {2.0}};
  flat.total_edges = 100;
  auto s = auc(flat);
  CHECK(s.absolute == doctest::Approx(2.0 * 99));
  CHECK(s.relative == doctest::Approx(2.0 * 99 / 100));
  CHECK(s.relative * double(s.total_edges) == doctest::Approx(s.absolute));

  AblationCurve tri;
  tri.edge_counts = {1, 3};
  tri.mean_kl = {2.0, 0.0};
  tri.prompt_kl = {{2.0}, {0.0}};
  tri.total_edges = 3;
  CHECK(auc(tri).absolute == doctest::Approx(2.0));

  // synthetic smooth curve over the paper sequence vs a fine trapezoid grid
  AblationCurve smooth;
  smooth.edge_counts = edge_sequence(262144);
  smooth.total_edges = 262144;
  auto f = [](double n) { return 3.0 / (1.0 + std::sqrt(n)); };
  for (long n : smooth.edge_counts) {
    smooth.mean_kl.push_back(f(double(n)));
    smooth.prompt_kl.push_back({f(double(n))});
  }
  const double got = auc(smooth).absolute;
  // reference: piecewise-linear interpolation of the same nodes integrated on
  // a unit grid
  double ref = 0;
  for (std::size_t i = 1; i < smooth.edge_counts.size(); ++i) {
    const double x0 = double(smooth.edge_counts[i - 1]);
    const double x1 = double(smooth.edge_counts[i]);
    const double y0 = smooth.mean_kl[i - 1];
    const double y1 = smooth.mean_kl[i];
    const long steps = 64;
    for (long t = 0; t < steps; ++t) {
      const double a = x0 + (x1 - x0) * double(t) / steps;
      const double b = x0 + (x1 - x0) * double(t + 1) / steps;
      const double ya = y0 + (y1 - y0) * (a - x0) / (x1 - x0);
      const double yb = y0 + (y1 - y0) * (b - x0) / (x1 - x0);
      ref += 0.5 * (ya + yb) * (b - a);
    }
  }
  CHECK(got == doctest::Approx(ref).epsilon(1e-9));

  AblationCurve single;
  single.edge_counts = {5};
  single.mean_kl = {1.0};
  single.prompt_kl = {{1.0}};
  single.total_edges = 5;
  CHECK_THROWS(auc(single));
}

TEST_CASE("auc: per-prompt SEM matches a direct computation") {
  AblationCurve c;
  c.edge_counts = {1, 11};
  c.mean_kl = {2.0, 1.0};
  c.prompt_kl = {{1.0, 3.0}, {0.5, 1.5}};
  c.total_edges = 11;
  auto s = auc(c);
  const double a0 = 0.5 * (1.0 + 0.5) * 10;
  const double a1 = 0.5 * (3.0 + 1.5) * 10;
  const double mean = (a0 + a1) / 2;
  const double var = ((a0 - mean) * (a0 - mean) + (a1 - mean) * (a1 - mean)) / 1;
  CHECK(s.absolute == doctest::Approx(mean));
  CHECK(s.sem_absolute == doctest::Approx(std::sqrt(var / 2)));
}

TEST_CASE("compare: fixed points and aggregate spreadsheet oracle") {
  CHECK(compare_scores(2.0, 0.0, 2.0, 0.0).percent == doctest::Approx(0.0));
  CHECK(compare_scores(2.0, 0.0, 1.0, 0.0).percent == doctest::Approx(50.0));
  CHECK_THROWS(compare_scores(0.0, 0.0, 1.0, 0.0));

  std::vector<ScalarScore> base(3), cand(3);
  const double b[3] = {4.0, 2.0, 1.0};
  const double c[3] = {3.0, 1.0, 1.5};
  for (int i = 0; i < 3; ++i) {
    base[std::size_t(i)].absolute = b[i];
    base[std::size_t(i)].sem_absolute = 0.1;
    cand[std::size_t(i)].absolute = c[i];
    cand[std::size_t(i)].sem_absolute = 0.2;
  }
  auto agg = compare_aggregate(base, cand, false);
  const double expect = 100.0 * (7.0 - 5.5) / 7.0;
  CHECK(agg.percent == doctest::Approx(expect));
  // positive iff candidate lower
  CHECK(agg.percent > 0);
  auto worse = compare_aggregate(cand, base, false);
  CHECK(worse.percent < 0);
}
