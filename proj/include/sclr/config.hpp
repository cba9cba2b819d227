#pragma once

// Run configuration: one JSON file drives every pipeline stage. All seeds are
// explicit; desk-scale defaults keep runs laptop-sized and --paper-scale
// restores the full attribution/prompt budgets.

#include <cstdint>
#include <string>
#include <vector>

#include "sclr/lm.hpp"

namespace sclr {

struct RunConfig {
  LmConfig model;
  std::string precision = "f32";
  std::uint64_t seed = 42;
  std::string corpus;
  std::string out = "runs/out";

  long lm_steps = 400;
  long lm_batch = 16;
  double lm_lr = 2e-3;
  long lm_eval_every = 50;
  long lm_eval_windows = 16;

  long harvest_samples = 65536;

  std::vector<std::string> sae_variants = {"topk-x8", "staircase-x8"};
  std::vector<std::string> sae_locations = {"ff_block", "transformer_block"};
  long sae_k = 10;
  long sae_expansion = 8;
  long sae_steps = 1500;
  long sae_batch = 128;
  double sae_lr = 1e-3;

  std::vector<int> jsae_layers = {};
  std::vector<double> jsae_lambdas;  // defaults to the E12 sweep set
  std::string jsae_location = "ff_layer";
  long jsae_steps = 1200;
  long jsae_batch = 32;
  double jsae_lr = 1e-3;
  bool jsae_scalar = false;

  long attr_samples = 128;
  int attr_terms = 5;

  long scalar_prompts = 10;
  long prompt_len = 64;
  std::string scalar_reference = "full_model";

  bool paper_scale = false;

  void apply_paper_scale() {
    attr_samples = 576;
    attr_terms = 5;
    scalar_prompts = 50;
    prompt_len = model.context;
  }
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace sclr
