#include "sclr/config.hpp"

#include <fstream>

#include <json.hpp>

#include "sclr/jsae.hpp"
#include "sclr/rng.hpp"

namespace sclr {

using nlohmann::json;

namespace {

template <typename T>
void get_to_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json j = json::parse(json_text);
  RunConfig cfg;
  cfg.jsae_lambdas = JsaeConfig::sweep_set();

  if (j.contains("model")) {
    const json& m = j["model"];
    get_to_if(m, "n_layers", cfg.model.n_layers);
    get_to_if(m, "d_model", cfg.model.d_model);
    get_to_if(m, "n_heads", cfg.model.n_heads);
    get_to_if(m, "d_mlp", cfg.model.d_mlp);
    get_to_if(m, "context", cfg.model.context);
    get_to_if(m, "vocab", cfg.model.vocab);
  }
  get_to_if(j, "precision", cfg.precision);
  require(cfg.precision == "f32" || cfg.precision == "f64",
          "precision must be f32 or f64");
  get_to_if(j, "seed", cfg.seed);
  cfg.model.seed = cfg.seed;
  get_to_if(j, "corpus", cfg.corpus);
  get_to_if(j, "out", cfg.out);

  if (j.contains("train_lm")) {
    const json& t = j["train_lm"];
    get_to_if(t, "steps", cfg.lm_steps);
    get_to_if(t, "batch", cfg.lm_batch);
    get_to_if(t, "lr", cfg.lm_lr);
    get_to_if(t, "eval_every", cfg.lm_eval_every);
    get_to_if(t, "eval_windows", cfg.lm_eval_windows);
  }
  if (j.contains("harvest")) {
    get_to_if(j["harvest"], "max_samples", cfg.harvest_samples);
  }
  if (j.contains("sae")) {
    const json& s = j["sae"];
    get_to_if(s, "variants", cfg.sae_variants);
    get_to_if(s, "locations", cfg.sae_locations);
    get_to_if(s, "k", cfg.sae_k);
    get_to_if(s, "expansion", cfg.sae_expansion);
    get_to_if(s, "steps_per_member", cfg.sae_steps);
    get_to_if(s, "batch", cfg.sae_batch);
    get_to_if(s, "lr", cfg.sae_lr);
    for (const auto& v : cfg.sae_variants) {
      bool known = false;
      for (const auto& name : sae_variant_names()) known = known || name == v;
      require(known, "unknown SAE variant in config: " + v);
    }
    for (const auto& l : cfg.sae_locations) parse_location(l);
  }
  if (j.contains("jsae")) {
    const json& s = j["jsae"];
    get_to_if(s, "layers", cfg.jsae_layers);
    get_to_if(s, "lambdas", cfg.jsae_lambdas);
    get_to_if(s, "location", cfg.jsae_location);
    get_to_if(s, "steps", cfg.jsae_steps);
    get_to_if(s, "batch", cfg.jsae_batch);
    get_to_if(s, "lr", cfg.jsae_lr);
    get_to_if(s, "scalar", cfg.jsae_scalar);
    for (double l : cfg.jsae_lambdas)
      require(l >= 0, "jsae lambda must be non-negative");
  }
  if (j.contains("attribution")) {
    const json& a = j["attribution"];
    get_to_if(a, "samples", cfg.attr_samples);
    get_to_if(a, "terms", cfg.attr_terms);
  }
  if (j.contains("scalar")) {
    const json& s = j["scalar"];
    get_to_if(s, "prompts", cfg.scalar_prompts);
    get_to_if(s, "prompt_len", cfg.prompt_len);
    get_to_if(s, "reference", cfg.scalar_reference);
    require(cfg.scalar_reference == "full_model" ||
                cfg.scalar_reference == "full_circuit",
            "scalar reference must be full_model or full_circuit");
  }
  get_to_if(j, "paper_scale", cfg.paper_scale);
  if (cfg.paper_scale) cfg.apply_paper_scale();
  cfg.prompt_len = std::min(cfg.prompt_len, long(cfg.model.context));
  cfg.model.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

std::string dump_config(const RunConfig& cfg) {
  json j;
  j["model"] = {{"n_layers", cfg.model.n_layers}, {"d_model", cfg.model.d_model},
                {"n_heads", cfg.model.n_heads},   {"d_mlp", cfg.model.d_mlp},
                {"context", cfg.model.context},   {"vocab", cfg.model.vocab}};
  j["precision"] = cfg.precision;
  j["seed"] = cfg.seed;
  j["corpus"] = cfg.corpus;
  j["out"] = cfg.out;
  j["train_lm"] = {{"steps", cfg.lm_steps},
                   {"batch", cfg.lm_batch},
                   {"lr", cfg.lm_lr},
                   {"eval_every", cfg.lm_eval_every},
                   {"eval_windows", cfg.lm_eval_windows}};
  j["harvest"] = {{"max_samples", cfg.harvest_samples}};
  j["sae"] = {{"variants", cfg.sae_variants},
              {"locations", cfg.sae_locations},
              {"k", cfg.sae_k},
              {"expansion", cfg.sae_expansion},
              {"steps_per_member", cfg.sae_steps},
              {"batch", cfg.sae_batch},
              {"lr", cfg.sae_lr}};
  j["jsae"] = {{"layers", cfg.jsae_layers},   {"lambdas", cfg.jsae_lambdas},
               {"location", cfg.jsae_location}, {"steps", cfg.jsae_steps},
               {"batch", cfg.jsae_batch},     {"lr", cfg.jsae_lr},
               {"scalar", cfg.jsae_scalar}};
  j["attribution"] = {{"samples", cfg.attr_samples}, {"terms", cfg.attr_terms}};
  j["scalar"] = {{"prompts", cfg.scalar_prompts},
                 {"prompt_len", cfg.prompt_len},
                 {"reference", cfg.scalar_reference}};
  j["paper_scale"] = cfg.paper_scale;
  return j.dump(2);
}

// The output directory is where results land, not part of the experiment's
// identity; runs into different directories must hash identically.
std::uint64_t config_hash(const RunConfig& cfg) {
  RunConfig canonical = cfg;
  canonical.out.clear();
  const std::string text = dump_config(canonical);
  return fnv1a64(text.data(), text.size());
}

}  // namespace sclr
