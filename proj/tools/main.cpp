// Workbench CLI: train the toy model and SAE families, score cross-layer
// edges, run the SCALAR benchmark and emit reports. Every stage is driven by
// one JSON config; outputs land in the config's `out` directory next to a
// manifest that makes reruns resumable.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sclr/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"SCALAR interaction-sparsity workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::string precision_override;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  bool paper_scale = false;
  int threads = 0;

  const std::vector<std::string> verbs = {
      "ingest",     "train-lm",  "train-sae", "train-jsae",
      "attribute",  "scalar",    "report",    "pipeline"};
  for (const auto& verb : verbs) {
    CLI::App* sub = app.add_subcommand(
        verb, verb == "pipeline" ? "run all stages in order"
                                 : "run the " + verb + " stage");
    sub->add_option("--config", config_path, "JSON run configuration")
        ->required();
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--seed", seed_override, "seed override")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--precision", precision_override, "f32 or f64");
    sub->add_flag("--paper-scale", paper_scale,
                  "full attribution/prompt budgets (576 samples, 5 terms, 50 prompts)");
    sub->add_option("--threads", threads, "worker threads for parallel stages");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    sclr::RunConfig cfg = sclr::load_config(config_path);
    if (!out_override.empty()) cfg.out = out_override;
    if (seed_set) {
      cfg.seed = seed_override;
      cfg.model.seed = seed_override;
    }
    if (!precision_override.empty()) {
      sclr::require(precision_override == "f32" || precision_override == "f64",
                    "precision must be f32 or f64");
      cfg.precision = precision_override;
    }
    if (paper_scale) {
      cfg.paper_scale = true;
      cfg.apply_paper_scale();
    }
    if (threads > 0) setenv("SCLR_THREADS", std::to_string(threads).c_str(), 1);

    const std::string verb = app.get_subcommands().front()->get_name();
    if (verb == "pipeline")
      sclr::run_pipeline(cfg);
    else
      sclr::run_stage(cfg, verb);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
