#pragma once

// Report emission: per-location score tables (CSV), reduction tables against
// the TopK baseline mirroring the summary-table layout, a machine-readable
// JSON dump, and dependency-free SVG plots of every ablation curve.

#include <string>
#include <vector>

#include "sclr/scalar.hpp"

namespace sclr {

struct ScoreRow {
  std::string variant;
  std::string location;
  int layer = 0;
  ScalarScore score;
};

struct CurveRecord {
  std::string variant;
  std::string location;
  int layer = 0;
  AblationCurve curve;
};

std::string scores_csv(const std::vector<ScoreRow>& rows,
                       const std::string& location);
std::string reductions_csv(const std::vector<ScoreRow>& rows,
                           const std::string& baseline_variant);
std::string scores_json(const std::vector<ScoreRow>& rows,
                        const std::vector<CurveRecord>& curves);
std::string curve_svg(const std::vector<CurveRecord>& curves,
                      const std::string& location, int layer);

// Reads <artifact_dir>/scalar_scores.json and writes CSV/JSON/SVG files into
// <artifact_dir>/report. Fails if the scalar stage has not produced scores.
void write_report(const std::string& artifact_dir);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace sclr
