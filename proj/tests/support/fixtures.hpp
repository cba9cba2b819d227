#pragma once

// Shared fixtures: deterministic English-like synthetic corpus, tiny random
// models and SAE instances for fast tests.

#include <string>
#include <vector>

#include "sclr/lm.hpp"
#include "sclr/sae.hpp"

namespace fixtures {

// Zipf-weighted text over a mixed vocabulary: common English function words
// plus seeded pseudo-words built from syllables, occasional numbers, quoted
// phrases and paragraph structure. Learnable for a character model but with
// enough long-tail variety that activations are not trivially compressible.
inline std::string synthetic_corpus(std::uint64_t seed, std::size_t min_bytes) {
  static const std::vector<std::string> common = {
      "the",  "and",  "to",    "of",    "a",     "in",   "that",  "is",
      "was",  "he",   "for",   "it",    "with",  "as",   "his",   "on",
      "be",   "at",   "by",    "had",   "not",   "are",  "but",   "from",
      "or",   "have", "an",    "they",  "which", "one",  "you",   "were",
      "her",  "all",  "she",   "there", "would", "their", "we",   "him",
      "been", "has",  "when",  "who",   "will",  "more", "no",    "if",
      "out",  "so",   "said",  "what",  "up",    "its",  "about", "into",
      "than", "them", "can",   "only",  "other", "new",  "some",  "could",
      "time", "these", "two",  "may",   "then",  "do",   "first", "any",
      "my",   "now",  "such",  "like",  "our",   "over", "man",   "me"};
  static const std::vector<std::string> onsets = {
      "b", "c",  "d",  "f",  "g",  "h",  "l",  "m",  "n",  "p",
      "r", "s",  "t",  "v",  "w",  "st", "tr", "pl", "br", "gr",
      "sh", "ch", "th", "qu", "sp", "cl", "fr", "dr", "sl", "kn"};
  static const std::vector<std::string> vowels = {
      "a", "e", "i", "o", "u", "ai", "ea", "ou", "ie", "oo", "ay", "ei"};
  static const std::vector<std::string> codas = {
      "",  "",  "n", "r", "s",  "t",  "l",  "d",  "m",
      "ck", "ll", "st", "nd", "ng", "rt", "ss", "th", "p"};

  sclr::RngState rng(seed);
  // vocabulary: common words first (low Zipf ranks), then pseudo-words
  std::vector<std::string> words = common;
  while (words.size() < 800) {
    std::string w;
    const int syllables = 1 + int(rng.uniform_int(3));
    for (int s = 0; s < syllables; ++s) {
      w += onsets[rng.uniform_int(onsets.size())];
      w += vowels[rng.uniform_int(vowels.size())];
      if (s + 1 == syllables || rng.uniform() < 0.4)
        w += codas[rng.uniform_int(codas.size())];
    }
    words.push_back(std::move(w));
  }
  // Zipf sampling via a cumulative table, exponent ~1.05
  std::vector<double> cdf(words.size());
  double total = 0;
  for (std::size_t r = 0; r < words.size(); ++r) {
    total += 1.0 / std::pow(double(r + 2), 1.05);
    cdf[r] = total;
  }
  auto draw_word = [&]() -> const std::string& {
    const double u = rng.uniform() * total;
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return words[std::size_t(it - cdf.begin())];
  };

  std::string out;
  out.reserve(min_bytes + 128);
  while (out.size() < min_bytes) {
    const int sentence_words = 4 + int(rng.uniform_int(10));
    const bool quoted = rng.uniform() < 0.06;
    if (quoted) out += '"';
    for (int i = 0; i < sentence_words; ++i) {
      if (rng.uniform() < 0.03) {
        out += std::to_string(1 + rng.uniform_int(1999));
      } else {
        std::string w = draw_word();
        if (i == 0) w[0] = char(w[0] & ~0x20);
        out += w;
      }
      if (i + 1 < sentence_words) {
        out += rng.uniform() < 0.12 ? ", " : " ";
      }
    }
    const double endr = rng.uniform();
    out += endr < 0.78 ? "." : (endr < 0.9 ? "?" : "!");
    if (quoted) out += '"';
    const double sep = rng.uniform();
    if (sep < 0.12)
      out += "\n\n";
    else if (sep < 0.5)
      out += '\n';
    else
      out += ' ';
  }
  return out;
}

inline sclr::LmConfig tiny_lm_config(std::uint64_t seed, int layers = 2,
                                     int d_model = 8, int context = 8) {
  sclr::LmConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = d_model;
  cfg.n_heads = 2;
  cfg.d_mlp = 2 * d_model;
  cfg.context = context;
  cfg.seed = seed;
  return cfg;
}

template <typename S>
sclr::SaeInstance<S> random_sae(const sclr::ActivationSite& site, long d_sae,
                                long d_model, long k, sclr::RngState& rng,
                                double bias_scale = 0.05) {
  sclr::SaeInstance<S> inst;
  inst.site = site;
  inst.variant = "test";
  inst.d_sae = d_sae;
  inst.k = k;
  sclr::detail::init_sae_stores(inst.w_enc_store, inst.w_dec_store, d_sae,
                                d_model, rng);
  std::vector<S> be(std::size_t(d_sae), S(0));
  std::vector<S> bd(std::size_t(d_model), S(0));
  for (auto& v : be) v = S(rng.gaussian() * bias_scale);
  for (auto& v : bd) v = S(rng.gaussian() * bias_scale);
  inst.b_enc = sclr::Tensor<S>::from({d_sae}, be, true);
  inst.b_dec = sclr::Tensor<S>::from({d_model}, bd, true);
  return inst;
}

template <typename S>
sclr::Tensor<S> random_tensor(sclr::Shape shape, sclr::RngState& rng,
                              double scale = 1.0, bool requires_grad = true) {
  std::vector<S> data(std::size_t(sclr::numel(shape)));
  for (auto& v : data) v = S(rng.gaussian() * scale);
  return sclr::Tensor<S>::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace fixtures
