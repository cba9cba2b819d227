#include "sclr/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sclr {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), "cannot open '" + path + "' for writing");
  out << text;
  require(bool(out), "failed writing '" + path + "'");
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::vector<int> layers_of(const std::vector<ScoreRow>& rows,
                           const std::string& location) {
  std::set<int> layers;
  for (const auto& r : rows)
    if (r.location == location) layers.insert(r.layer);
  return std::vector<int>(layers.begin(), layers.end());
}

const ScoreRow* find_row(const std::vector<ScoreRow>& rows,
                         const std::string& variant,
                         const std::string& location, int layer) {
  for (const auto& r : rows)
    if (r.variant == variant && r.location == location && r.layer == layer)
      return &r;
  return nullptr;
}

}  // namespace

std::string scores_csv(const std::vector<ScoreRow>& rows,
                       const std::string& location) {
  std::ostringstream os;
  os << "variant,layer,absolute,abs_sem,relative,rel_sem\n";
  for (const auto& r : rows) {
    if (r.location != location) continue;
    os << r.variant << ',' << r.layer << ',' << fmt(r.score.absolute) << ','
       << fmt(r.score.sem_absolute) << ',' << fmt(r.score.relative) << ','
       << fmt(r.score.sem_relative) << '\n';
  }
  return os.str();
}

// Percentage reductions of candidate variants against the baseline, one row
// per (location, candidate, metric); positive values mean the candidate
// scored lower (sparser).
std::string reductions_csv(const std::vector<ScoreRow>& rows,
                           const std::string& baseline_variant) {
  std::set<std::string> locations;
  std::set<std::string> variants;
  for (const auto& r : rows) {
    locations.insert(r.location);
    variants.insert(r.variant);
  }
  std::ostringstream os;
  os << "location,candidate,metric,layer,reduction_pct,sem\n";
  for (const auto& loc : locations) {
    const auto layers = layers_of(rows, loc);
    for (const auto& cand : variants) {
      if (cand == baseline_variant) continue;
      for (int metric = 0; metric < 2; ++metric) {
        const bool relative = metric == 1;
        std::vector<ScalarScore> base_scores, cand_scores;
        bool complete = true;
        for (int layer : layers) {
          const ScoreRow* b = find_row(rows, baseline_variant, loc, layer);
          const ScoreRow* c = find_row(rows, cand, loc, layer);
          if (!b || !c) {
            complete = false;
            break;
          }
          base_scores.push_back(b->score);
          cand_scores.push_back(c->score);
          const Reduction red = compare_scores(b->score, c->score, relative);
          os << loc << ',' << cand << ','
             << (relative ? "relative" : "absolute") << ',' << layer << ','
             << fmt(red.percent) << ',' << fmt(red.sem) << '\n';
        }
        if (complete && !base_scores.empty()) {
          const Reduction agg =
              compare_aggregate(base_scores, cand_scores, relative);
          os << loc << ',' << cand << ','
             << (relative ? "relative" : "absolute") << ",aggregate,"
             << fmt(agg.percent) << ',' << fmt(agg.sem) << '\n';
        }
      }
    }
  }
  return os.str();
}

std::string scores_json(const std::vector<ScoreRow>& rows,
                        const std::vector<CurveRecord>& curves) {
  json j;
  j["scores"] = json::array();
  for (const auto& r : rows) {
    j["scores"].push_back({{"variant", r.variant},
                           {"location", r.location},
                           {"layer", r.layer},
                           {"total_edges", r.score.total_edges},
                           {"absolute", r.score.absolute},
                           {"abs_sem", r.score.sem_absolute},
                           {"relative", r.score.relative},
                           {"rel_sem", r.score.sem_relative}});
  }
  j["curves"] = json::array();
  for (const auto& c : curves) {
    j["curves"].push_back({{"variant", c.variant},
                           {"location", c.location},
                           {"layer", c.layer},
                           {"reference", c.curve.reference},
                           {"total_edges", c.curve.total_edges},
                           {"edge_counts", c.curve.edge_counts},
                           {"mean_kl", c.curve.mean_kl},
                           {"prompt_kl", c.curve.prompt_kl}});
  }
  return j.dump(1);
}

std::string curve_svg(const std::vector<CurveRecord>& curves,
                      const std::string& location, int layer) {
  static const char* kColors[] = {"#1f6fb2", "#d1495b", "#3a9d5d",
                                  "#946bb3", "#c98a27", "#4f4f4f"};
  const double width = 640, height = 440;
  const double ml = 70, mr = 20, mt = 28, mb = 56;
  const double pw = width - ml - mr, ph = height - mt - mb;

  std::vector<const CurveRecord*> selected;
  double max_kl = 0, max_x = 1;
  for (const auto& c : curves) {
    if (c.location != location || c.layer != layer) continue;
    selected.push_back(&c);
    for (double v : c.curve.mean_kl) max_kl = std::max(max_kl, v);
    max_x = std::max(max_x, double(c.curve.edge_counts.back()));
  }
  require(!selected.empty(), "no curves for " + location + " layer " +
                                 std::to_string(layer));
  if (max_kl <= 0) max_kl = 1;
  const double lx_max = std::log10(max_x);

  auto px = [&](double n) {
    return ml + (lx_max > 0 ? std::log10(std::max(1.0, n)) / lx_max : 0) * pw;
  };
  auto py = [&](double kl) { return mt + (1.0 - kl / max_kl) * ph; };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' '
     << height << "\">\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
     << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-size=\"13\">retained edges (log scale)"
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << mt + ph / 2
     << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
     << mt + ph / 2 << ")\">mean KL divergence</text>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"18\" text-anchor=\"middle\" "
     << "font-size=\"14\">" << location << " / layer " << layer << "</text>\n";

  for (int d = 0; d <= int(lx_max + 0.5); ++d) {
    const double x = px(std::pow(10.0, d));
    os << "<line x1=\"" << x << "\" y1=\"" << mt + ph << "\" x2=\"" << x
       << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"#333\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << mt + ph + 20
       << "\" text-anchor=\"middle\" font-size=\"11\">1e" << d << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double kl = max_kl * i / 4.0;
    os << "<line x1=\"" << ml - 5 << "\" y1=\"" << py(kl) << "\" x2=\"" << ml
       << "\" y2=\"" << py(kl) << "\" stroke=\"#333\"/>\n";
    std::ostringstream v;
    v.precision(3);
    v << kl;
    os << "<text x=\"" << ml - 8 << "\" y=\"" << py(kl) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << v.str() << "</text>\n";
  }

  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto& c = *selected[i];
    const char* color = kColors[i % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t p = 0; p < c.curve.edge_counts.size(); ++p) {
      os << px(double(c.curve.edge_counts[p])) << ','
         << py(c.curve.mean_kl[p]) << ' ';
    }
    os << "\"/>\n";
    const double ly = mt + 16 + double(i) * 16;
    os << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << ly << "\" x2=\""
       << ml + pw - 126 << "\" y2=\"" << ly << "\" stroke=\"" << color
       << "\" stroke-width=\"1.8\"/>\n";
    os << "<text x=\"" << ml + pw - 120 << "\" y=\"" << ly + 4
       << "\" font-size=\"11\">" << c.variant << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_report(const std::string& artifact_dir) {
  const fs::path dir(artifact_dir);
  const fs::path scores_path = dir / "scalar_scores.json";
  require(fs::exists(scores_path),
          "missing stage outputs: run the scalar stage first (" +
              scores_path.string() + ")");
  std::ifstream in(scores_path);
  json j = json::parse(std::string((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>()));

  std::vector<ScoreRow> rows;
  for (const auto& s : j.at("scores")) {
    ScoreRow r;
    r.variant = s.at("variant");
    r.location = s.at("location");
    r.layer = s.at("layer");
    r.score.total_edges = s.at("total_edges");
    r.score.absolute = s.at("absolute");
    r.score.sem_absolute = s.at("abs_sem");
    r.score.relative = s.at("relative");
    r.score.sem_relative = s.at("rel_sem");
    rows.push_back(std::move(r));
  }
  std::vector<CurveRecord> curves;
  for (const auto& c : j.at("curves")) {
    CurveRecord r;
    r.variant = c.at("variant");
    r.location = c.at("location");
    r.layer = c.at("layer");
    r.curve.reference = c.at("reference");
    r.curve.total_edges = c.at("total_edges");
    c.at("edge_counts").get_to(r.curve.edge_counts);
    c.at("mean_kl").get_to(r.curve.mean_kl);
    c.at("prompt_kl").get_to(r.curve.prompt_kl);
    curves.push_back(std::move(r));
  }

  const fs::path rep = dir / "report";
  fs::create_directories(rep);

  std::set<std::string> locations;
  for (const auto& r : rows) locations.insert(r.location);
  for (const auto& loc : locations)
    write_text_file((rep / ("scores_" + loc + ".csv")).string(),
                    scores_csv(rows, loc));
  write_text_file((rep / "reductions.csv").string(),
                  reductions_csv(rows, "topk-x8"));
  write_text_file((rep / "scores.json").string(), scores_json(rows, curves));

  std::set<std::pair<std::string, int>> panels;
  for (const auto& c : curves) panels.insert({c.location, c.layer});
  for (const auto& [loc, layer] : panels)
    write_text_file(
        (rep / ("curves_" + loc + "_" + std::to_string(layer) + ".svg")).string(),
        curve_svg(curves, loc, layer));
}

}  // namespace sclr
