#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/harness.hpp"
#include "sclab/metrics.hpp"
#include "sclab/pact.hpp"

namespace sclab {

struct HeatmapCell {
  Segment segment;
  double pact = 0.0;
  double intensity = 0.0;  // pact / max |pact| over the map, in [-1, 1]
  bool exact = true;
  bool failed = false;
};

struct Heatmap {
  std::string prompt;
  std::vector<HeatmapCell> cells;  // ordered by span start
  double scale = 0.0;              // max |pact|
};

Heatmap build_heatmap(const AttributionMap& map);

// Inline CSS color for an intensity: green for support (negative), yellow for
// opposition (positive), alpha = |intensity|.
std::string heatmap_color(double intensity);

// HTML fragment: one <span> per segment, prompt text between segments kept as is,
// hatched background on inexact cells, and a legend describing the scale.
std::string render_heatmap_html(const Heatmap& heatmap);

std::string html_escape(std::string_view text);

struct RunReport {
  std::string model;
  std::vector<std::pair<VariantId, MetricsReport>> rows;
};

// One metrics row per variant present in the run set.
RunReport build_run_report(const RunSet& runset, const MetricsOptions& options = {});
nlohmann::json to_json(const RunReport& r);
std::string run_report_markdown(const RunReport& r);

}  // namespace sclab
