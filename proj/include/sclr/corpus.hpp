#pragma once

// Corpus ingestion: a plain-text file by path, or (for the ingest stage
// only) an http/https URL. Nothing downloads implicitly at build time or in
// any later stage.

#include <string>
#include <vector>

#include "sclr/lm.hpp"

namespace sclr {

struct Corpus {
  std::string source;
  std::string raw;
  std::vector<int> tokens;

  CorpusSplit split() const { return split_corpus(tokens); }
};

Corpus ingest(const std::string& path_or_url);

}  // namespace sclr
