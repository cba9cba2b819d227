#include "sclr/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "sclr/attribution.hpp"
#include "sclr/corpus.hpp"
#include "sclr/persist.hpp"
#include "sclr/report.hpp"
#include "sclr/scalar.hpp"

namespace sclr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
  return buf;
}

std::uint64_t file_fnv(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(bool(in), "cannot open '" + p.string() + "'");
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(buf, std::size_t(in.gcount()), h);
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(bool(in), "cannot open '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

struct Manifest {
  fs::path path;
  json j;

  void load(const fs::path& dir, const RunConfig& cfg) {
    path = dir / "manifest.json";
    if (fs::exists(path)) {
      j = json::parse(read_file(path));
      if (j.value("config_hash", "") != hex64(config_hash(cfg))) {
        // Config changed: start a fresh manifest; stale outputs are rewritten.
        j = json::object();
      }
    }
    if (j.is_null() || j.empty()) {
      j = json::object();
      j["config_hash"] = hex64(config_hash(cfg));
      j["seed"] = cfg.seed;
      j["precision"] = cfg.precision;
      j["stages"] = json::object();
    }
  }

  void save() const { write_text_file(path.string(), j.dump(1) + "\n"); }

  bool stage_done(const fs::path& dir, const std::string& stage) const {
    if (!j.contains("stages") || !j["stages"].contains(stage)) return false;
    const json& outputs = j["stages"][stage]["outputs"];
    for (auto it = outputs.begin(); it != outputs.end(); ++it) {
      const fs::path p = dir / it.key();
      if (!fs::exists(p) || hex64(file_fnv(p)) != it.value().get<std::string>())
        return false;
    }
    return true;
  }

  void record(const fs::path& dir, const std::string& stage,
              const std::vector<std::string>& outputs) {
    json entry;
    entry["outputs"] = json::object();
    for (const auto& rel : outputs)
      entry["outputs"][rel] = hex64(file_fnv(dir / rel));
    j["stages"][stage] = std::move(entry);
    save();
  }
};

struct PairJob {
  std::string variant;
  PairLocation loc;
  int layer;

  std::string tag() const {
    return variant + "_" + location_name(loc) + "_" + std::to_string(layer);
  }
};

template <typename S>
struct Stages {
  RunConfig cfg;
  fs::path out;
  Manifest manifest;

  explicit Stages(const RunConfig& c) : cfg(c), out(c.out) {
    fs::create_directories(out);
    manifest.load(out, cfg);
  }

  // ---- artifact loading -------------------------------------------------

  Corpus corpus_cached;
  bool corpus_loaded = false;
  const Corpus& corpus() {
    if (!corpus_loaded) {
      ensure("ingest");
      corpus_cached.source = (out / "corpus.txt").string();
      corpus_cached.raw = read_file(out / "corpus.txt");
      corpus_cached.tokens = tokenize(corpus_cached.raw);
      corpus_loaded = true;
    }
    return corpus_cached;
  }

  std::optional<LmWeights<S>> lm_cached;
  LmWeights<S>& lm() {
    if (!lm_cached) {
      ensure("train-lm");
      lm_cached = load_lm<S>(load_container((out / "lm.sclr").string()),
                             cfg.model);
    }
    return *lm_cached;
  }

  std::optional<HarvestSet<S>> harvest_cached;
  const HarvestSet<S>& harvested() {
    if (!harvest_cached) {
      ensure("harvest");
      harvest_cached =
          load_harvest<S>(load_container((out / "activations.sclr").string()));
    }
    return *harvest_cached;
  }

  SaeSet<S> load_saes(const std::string& variant, PairLocation loc) {
    ensure("train-sae");
    const std::string file =
        "sae_" + variant + "_" + location_name(loc) + ".sclr";
    return load_sae_set<S>(load_container((out / file).string()), variant, loc,
                           cfg.model, cfg.sae_k, cfg.sae_expansion);
  }

  std::vector<PairJob> pair_jobs() const {
    std::vector<PairJob> jobs;
    for (const auto& variant : cfg.sae_variants)
      for (const auto& loc_name : cfg.sae_locations)
        for (int k = 0; k < cfg.model.n_layers; ++k)
          jobs.push_back({variant, parse_location(loc_name), k});
    return jobs;
  }

  // ---- stages -----------------------------------------------------------

  void ingest_stage() {
    require(!cfg.corpus.empty(), "config has no corpus path or URL");
    Corpus c = ingest(cfg.corpus);
    write_text_file((out / "corpus.txt").string(), c.raw);

    SclrContainer tokens;
    NamedTensor t;
    t.name = "tokens";
    t.dtype = std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;
    t.dims = {std::uint64_t(c.tokens.size())};
    for (int id : c.tokens) {
      if (t.dtype == Dtype::F32)
        t.f32.push_back(float(id));
      else
        t.f64.push_back(double(id));
    }
    tokens.tensors.push_back(std::move(t));
    save_container((out / "corpus_tokens.sclr").string(), tokens);

    json meta;
    meta["source"] = cfg.corpus;
    meta["bytes"] = c.raw.size();
    meta["tokens"] = c.tokens.size();
    meta["split_point"] = c.tokens.size() * 9 / 10;
    write_text_file((out / "corpus_meta.json").string(), meta.dump(1) + "\n");

    manifest.record(out, "ingest",
                    {"corpus.txt", "corpus_tokens.sclr", "corpus_meta.json"});
  }

  void train_lm_stage() {
    const CorpusSplit split = corpus().split();
    LmWeights<S> w = init_lm<S>(cfg.model);
    LmTrainConfig tc{.steps = cfg.lm_steps,
                     .batch = cfg.lm_batch,
                     .lr = cfg.lm_lr,
                     .eval_every = cfg.lm_eval_every,
                     .eval_windows = cfg.lm_eval_windows};
    const auto history = train_lm(w, split, tc);

    SclrContainer c;
    save_lm(c, w);
    save_container((out / "lm.sclr").string(), c);

    json meta;
    meta["history"] = json::array();
    for (const auto& p : history)
      meta["history"].push_back({{"step", p.step},
                                 {"train_loss", p.train_loss},
                                 {"val_loss", p.val_loss}});
    write_text_file((out / "lm_meta.json").string(), meta.dump(1) + "\n");
    manifest.record(out, "train-lm", {"lm.sclr", "lm_meta.json"});
    lm_cached.reset();
  }

  std::vector<ActivationSite> harvest_sites() const {
    std::set<ActivationSite> sites;
    for (const auto& loc_name : cfg.sae_locations)
      for (const auto& s :
           location_sites(parse_location(loc_name), cfg.model.n_layers))
        sites.insert(s);
    for (int layer : cfg.jsae_layers) {
      const SitePair p = make_site_pair(parse_location(cfg.jsae_location), layer);
      sites.insert(p.up);
      sites.insert(p.down);
    }
    return std::vector<ActivationSite>(sites.begin(), sites.end());
  }

  void harvest_stage() {
    const CorpusSplit split = corpus().split();
    HarvestSet<S> data = harvest(lm(), split.train, harvest_sites(),
                                 cfg.harvest_samples, cfg.seed);
    SclrContainer c;
    save_harvest(c, data);
    save_container((out / "activations.sclr").string(), c);

    json meta;
    meta["windows"] = data.n_windows;
    meta["window_len"] = data.window_len;
    meta["rows"] = data.n_rows;
    meta["sites"] = json::array();
    for (const auto& [site, acts] : data.acts)
      meta["sites"].push_back(site_name(site));
    write_text_file((out / "harvest_meta.json").string(), meta.dump(1) + "\n");
    manifest.record(out, "harvest", {"activations.sclr", "harvest_meta.json"});
    harvest_cached = std::move(data);
  }

  void train_sae_stage() {
    const HarvestSet<S>& data = harvested();
    SaeTrainConfig tc{.steps_per_member = cfg.sae_steps,
                      .batch = cfg.sae_batch,
                      .lr = cfg.sae_lr};
    std::vector<std::string> outputs;
    json meta = json::array();
    for (const auto& variant : cfg.sae_variants) {
      for (const auto& loc_name : cfg.sae_locations) {
        const PairLocation loc = parse_location(loc_name);
        SaeSet<S> set = make_sae_set<S>(variant, loc, cfg.model, cfg.sae_k,
                                        cfg.sae_expansion, cfg.seed);
        const auto history = train_sae(set, data, tc);
        SclrContainer c;
        save_sae_set(c, set);
        const std::string file = "sae_" + variant + "_" + loc_name + ".sclr";
        save_container((out / file).string(), c);
        outputs.push_back(file);

        json entry;
        entry["variant"] = variant;
        entry["location"] = loc_name;
        entry["k"] = cfg.sae_k;
        entry["expansion"] = cfg.sae_expansion;
        entry["parameters"] = set.param_count();
        json finals = json::object();
        for (const auto& [site, losses] : history)
          finals[site] = losses.back();
        entry["final_loss"] = std::move(finals);
        meta.push_back(std::move(entry));
      }
    }
    write_text_file((out / "sae_meta.json").string(), meta.dump(1) + "\n");
    outputs.push_back("sae_meta.json");
    manifest.record(out, "train-sae", outputs);
  }

  void train_jsae_stage() {
    if (cfg.jsae_layers.empty()) {
      manifest.record(out, "train-jsae", {});
      return;
    }
    const HarvestSet<S>& data = harvested();
    JsaeTrainConfig tc{.steps = cfg.jsae_steps,
                       .batch = cfg.jsae_batch,
                       .lr = cfg.jsae_lr};
    const PairLocation loc = parse_location(cfg.jsae_location);
    std::vector<std::string> outputs;
    json index = json::array();
    for (int layer : cfg.jsae_layers) {
      const auto rows =
          lambda_sweep(lm(), loc, layer, cfg.jsae_lambdas, data, tc, cfg.seed);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        SclrContainer c;
        JsaePair<S> pair = rows[i].pair;
        save_jsae_pair(c, pair);
        const std::string file = "jsae_" + std::to_string(layer) + "_" +
                                 std::to_string(i) + ".sclr";
        save_container((out / file).string(), c);
        outputs.push_back(file);
        index.push_back({{"layer", layer},
                         {"lambda", rows[i].lambda},
                         {"topk_baseline", rows[i].topk_baseline},
                         {"recon_x", rows[i].recon_x},
                         {"recon_y", rows[i].recon_y},
                         {"jacobian_l1", rows[i].j_l1},
                         {"container", file}});
      }
    }
    write_text_file((out / "jsae_metrics.json").string(), index.dump(1) + "\n");
    outputs.push_back("jsae_metrics.json");
    manifest.record(out, "train-jsae", outputs);
  }

  void attribute_stage() {
    const HarvestSet<S>& data = harvested();
    std::vector<std::string> outputs;
    json meta = json::array();
    std::map<std::pair<std::string, std::string>, SaeSet<S>> sets;
    for (const PairJob& job : pair_jobs()) {
      const auto key = std::make_pair(job.variant, location_name(job.loc));
      if (!sets.count(key)) sets.emplace(key, load_saes(job.variant, job.loc));
      const SaeSet<S>& set = sets.at(key);
      const SitePair sites =
          make_site_pair(job.loc, job.layer, cfg.model.n_layers);
      LatentMap<S> map{&lm(), sites, set.at(sites.up), set.at(sites.down)};
      EdgeScoreMatrix<S> scores = edge_scores(
          map, data, cfg.attr_samples, cfg.attr_terms, cfg.seed);
      SclrContainer c;
      save_edge_scores(c, scores);
      const std::string file = "edges_" + job.tag() + ".sclr";
      save_container((out / file).string(), c);
      outputs.push_back(file);
      meta.push_back({{"variant", job.variant},
                      {"location", location_name(job.loc)},
                      {"layer", job.layer},
                      {"up", site_name(sites.up)},
                      {"down", site_name(sites.down)},
                      {"samples", scores.samples},
                      {"terms", scores.terms},
                      {"seed", cfg.seed},
                      {"container", file}});
    }
    write_text_file((out / "attribute_meta.json").string(), meta.dump(1) + "\n");
    outputs.push_back("attribute_meta.json");
    manifest.record(out, "attribute", outputs);
  }

  void scalar_stage() {
    ensure("attribute");
    const CorpusSplit split = corpus().split();
    const auto prompts =
        eval_prompts(split.val, cfg.scalar_prompts, cfg.prompt_len);
    const CurveReference ref = cfg.scalar_reference == "full_model"
                                   ? CurveReference::FullModel
                                   : CurveReference::FullCircuit;
    std::vector<ScoreRow> rows;
    std::vector<CurveRecord> curves;
    std::map<std::pair<std::string, std::string>, SaeSet<S>> sets;
    for (const PairJob& job : pair_jobs()) {
      const auto key = std::make_pair(job.variant, location_name(job.loc));
      if (!sets.count(key)) sets.emplace(key, load_saes(job.variant, job.loc));
      const SaeSet<S>& set = sets.at(key);
      const SitePair sites =
          make_site_pair(job.loc, job.layer, cfg.model.n_layers);
      SaePairView<S> pair{sites, set.at(sites.up), set.at(sites.down)};

      EdgeScoreMatrix<S> scores = load_edge_scores<S>(
          load_container((out / ("edges_" + job.tag() + ".sclr")).string()),
          cfg.attr_samples, cfg.attr_terms);
      const auto ranked = rank_edges(scores);
      const auto sequence = edge_sequence(pair.total_edges());
      AblationCurve curve =
          ablation_curve(lm(), pair, ranked, sequence, prompts, ref);
      ScalarScore score = auc(curve);

      ScoreRow row{job.variant, location_name(job.loc), job.layer, score};
      rows.push_back(row);
      curves.push_back({job.variant, location_name(job.loc), job.layer,
                        std::move(curve)});
    }
    write_text_file((out / "scalar_scores.json").string(),
                    scores_json(rows, curves) + "\n");
    manifest.record(out, "scalar", {"scalar_scores.json"});
  }

  void report_stage() {
    write_report(out.string());
    std::vector<std::string> outputs;
    for (const auto& entry : fs::directory_iterator(out / "report"))
      outputs.push_back("report/" + entry.path().filename().string());
    std::sort(outputs.begin(), outputs.end());
    manifest.record(out, "report", outputs);
  }

  // ---- dispatch ----------------------------------------------------------

  void run(const std::string& stage, bool force = false) {
    if (!force && manifest.stage_done(out, stage)) return;
    try {
      if (stage == "ingest")
        ingest_stage();
      else if (stage == "train-lm")
        train_lm_stage();
      else if (stage == "harvest")
        harvest_stage();
      else if (stage == "train-sae")
        train_sae_stage();
      else if (stage == "train-jsae")
        train_jsae_stage();
      else if (stage == "attribute")
        attribute_stage();
      else if (stage == "scalar")
        scalar_stage();
      else if (stage == "report")
        report_stage();
      else
        fail("unknown stage '" + stage + "'");
    } catch (const std::exception& e) {
      fail("stage " + stage + " failed: " + e.what());
    }
  }

  void ensure(const std::string& stage) { run(stage); }
};

template <typename S>
void run_with_precision(const RunConfig& cfg, const std::string& stage) {
  Stages<S> stages(cfg);
  if (stage == "all") {
    for (const auto& s : pipeline_stages()) stages.run(s);
  } else {
    stages.run(stage);
  }
}

}  // namespace

void run_stage(const RunConfig& cfg, const std::string& stage) {
  if (cfg.precision == "f64")
    run_with_precision<double>(cfg, stage);
  else
    run_with_precision<float>(cfg, stage);
}

void run_pipeline(const RunConfig& cfg) { run_stage(cfg, "all"); }

}  // namespace sclr
