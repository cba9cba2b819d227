#pragma once

// Stage orchestration: ingest -> train-lm -> harvest -> train-sae ->
// train-jsae -> attribute -> scalar -> report, with a manifest recording the
// config hash, seeds and an FNV-1a hash of every output file. Stages whose
// manifest entry and outputs are intact are skipped on rerun.

#include <string>

#include "sclr/config.hpp"

namespace sclr {

inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {
      "ingest",     "train-lm", "harvest", "train-sae",
      "train-jsae", "attribute", "scalar",  "report"};
  return stages;
}

// Runs one named stage (prerequisite stages are ensured first, resuming from
// the manifest where possible). Throws with the failing stage's name.
void run_stage(const RunConfig& cfg, const std::string& stage);

// Runs every stage in order.
void run_pipeline(const RunConfig& cfg);

}  // namespace sclr
