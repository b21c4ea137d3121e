#include "sclab/report.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sclab/errors.hpp"

namespace sclab {

Heatmap build_heatmap(const AttributionMap& map) {
  Heatmap h;
  h.prompt = map.prompt;
  for (const auto& e : map.entries) {
    if (!e.error) h.scale = std::max(h.scale, std::abs(e.pact));
  }
  for (const auto& e : map.entries) {
    if (e.segment.span.end > map.prompt.size() || e.segment.span.begin > e.segment.span.end) {
      throw Error(ErrorKind::kParse, fmt::format("segment [{}, {}) lies outside the prompt", e.segment.span.begin,
                                                 e.segment.span.end));
    }
    HeatmapCell c;
    c.segment = e.segment;
    c.pact = e.pact;
    c.exact = e.exact;
    c.failed = e.error.has_value();
    if (!c.failed && h.scale > 0.0) c.intensity = std::clamp(e.pact / h.scale, -1.0, 1.0);
    h.cells.push_back(std::move(c));
  }
  std::stable_sort(h.cells.begin(), h.cells.end(),
                   [](const HeatmapCell& a, const HeatmapCell& b) { return a.segment.span.begin < b.segment.span.begin; });
  return h;
}

std::string heatmap_color(double intensity) {
  const double alpha = std::min(1.0, std::abs(intensity));
  if (intensity < 0.0) return fmt::format("rgba(0,160,60,{:.3f})", alpha);
  if (intensity > 0.0) return fmt::format("rgba(230,190,0,{:.3f})", alpha);
  return "rgba(0,0,0,0.000)";
}

std::string html_escape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\n': out += "<br>\n"; break;
      default: out += c;
    }
  }
  return out;
}

namespace {

constexpr std::string_view kHatch =
    "background-image:repeating-linear-gradient(45deg,rgba(0,0,0,0.25) 0 2px,transparent 2px 6px);";

}  // namespace

std::string render_heatmap_html(const Heatmap& h) {
  std::string out = "<div class=\"pact-heatmap\">\n<p class=\"pact-prompt\">";
  std::size_t pos = 0;
  for (const auto& c : h.cells) {
    if (c.segment.span.begin < pos) continue;  // overlapping segments are not drawn twice
    out += html_escape(std::string_view(h.prompt).substr(pos, c.segment.span.begin - pos));
    std::string style = "background-color:" + heatmap_color(c.intensity) + ";";
    std::string cls = "seg";
    if (!c.exact || c.failed) {
      style += kHatch;
      cls += c.failed ? " failed" : " inexact";
    }
    out += fmt::format("<span class=\"{}\" data-kind=\"{}\" data-pact=\"{}\" style=\"{}\">", cls,
                       to_string(c.segment.kind), c.failed ? std::string("error") : fmt::format("{:.6g}", c.pact),
                       style);
    out += html_escape(std::string_view(h.prompt).substr(c.segment.span.begin, c.segment.span.size()));
    out += "</span>";
    pos = c.segment.span.end;
  }
  out += html_escape(std::string_view(h.prompt).substr(std::min(pos, h.prompt.size())));
  out += "</p>\n";
  out += fmt::format(
      "<p class=\"pact-legend\">Color scale: score / {:.6g} (largest |score| in this map). "
      "<span style=\"background-color:{}\">green</span> = removing the segment lowers the answer's log "
      "probability (supports it); <span style=\"background-color:{}\">yellow</span> = removing it raises the "
      "log probability (opposes it); opacity = magnitude; no color = zero. "
      "<span style=\"{}\">Hatched</span> cells use a bounded (inexact) log probability or failed to score.</p>\n",
      h.scale, heatmap_color(-1.0), heatmap_color(1.0), kHatch);
  out += "</div>\n";
  return out;
}

RunReport build_run_report(const RunSet& runset, const MetricsOptions& options) {
  if (runset.records.empty()) throw Error(ErrorKind::kIncompleteRunSet, "run set has no records");
  RunReport r;
  r.model = runset.records.front().model;
  for (VariantId v : all_variants()) {
    RunSet subset;
    subset.config = runset.config;
    subset.dataset_digest = runset.dataset_digest;
    for (const auto& rec : runset.records) {
      if (rec.variant == v) subset.records.push_back(rec);
    }
    if (subset.records.empty()) continue;
    r.rows.emplace_back(v, report(subset, options));
  }
  return r;
}

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [v, m] : r.rows) rows.push_back({{"variant", to_string(v)}, {"metrics", to_json(m)}});
  return {{"model", r.model}, {"rows", rows}};
}

std::string run_report_markdown(const RunReport& r) {
  std::vector<ReportRow> rows;
  for (const auto& [v, m] : r.rows) rows.push_back({fmt::format("{} ({})", r.model, to_string(v)), m});
  return markdown_table(rows);
}

}  // namespace sclab
