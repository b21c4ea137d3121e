#pragma once

#include <array>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace sclab {

inline constexpr int kTraceSchemaVersion = 1;

// Decoded layers below this index carry little answer information.
inline constexpr int kDefaultLayerCutoff = 15;

enum class Phase { kInitial, kRefinement };
std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view text);

struct LayerScore {
  int layer = 0;
  double cs_correct = 0.0;
  double cs_incorrect = 0.0;

  friend bool operator==(const LayerScore&, const LayerScore&) = default;
};

struct LayerTrace {
  std::string sample_id;
  Phase phase = Phase::kInitial;
  std::string prompt_tag;
  std::vector<LayerScore> layers;  // strictly increasing layer index

  friend bool operator==(const LayerTrace&, const LayerTrace&) = default;
};

// Trace file, JSON lines:
//   {"schema_version": 1}
//   {"sample_id": ..., "phase": ..., "prompt_tag": ..., "layers": [{"layer", "cs_correct", "cs_incorrect"}, ...]}
//   ...
//   {"end_of_traces": true, "count": N}      (optional validity footer)
struct TraceLoadOptions {
  int cutoff = kDefaultLayerCutoff;
  // Reject files without the footer written by a finished export.
  bool require_footer = false;
};

std::vector<LayerTrace> parse_traces(std::string_view text, const TraceLoadOptions& options = {});
std::vector<LayerTrace> load_traces(const std::string& path, const TraceLoadOptions& options = {});
std::string serialize_traces(const std::vector<LayerTrace>& traces, bool with_footer = true);

nlohmann::json to_json(const LayerTrace& t);

struct DeltaPoint {
  int layer = 0;
  double delta = 0.0;  // cs_correct - cs_incorrect
};
std::vector<DeltaPoint> delta_curve(const LayerTrace& trace);

// Share of consecutive layer pairs (both >= cutoff) whose delta changes sign.
// A zero delta keeps the previous sign; leading zeros take the first non-zero sign.
double flip_frequency(const LayerTrace& trace, int cutoff = kDefaultLayerCutoff);

using TwoClass = std::array<double, 2>;

// Maps a layer's (cs_correct, cs_incorrect) to a two-class distribution.
using Normalizer = std::function<TwoClass(double cs_correct, double cs_incorrect)>;
TwoClass softmax_normalizer(double cs_correct, double cs_incorrect);
// Scores taken as unnormalized non-negative masses.
TwoClass proportional_normalizer(double cs_correct, double cs_incorrect);

// Jensen-Shannon divergence in bits, in [0, 1].
double js_divergence_bits(const TwoClass& p, const TwoClass& q);

struct DivergenceResult {
  double mean_jsd = 0.0;
  std::vector<std::string> samples;
  std::vector<int> layers;
  std::vector<std::vector<double>> per_layer;  // samples x layers
  int cutoff = kDefaultLayerCutoff;
};

// Pairs traces by sample_id and averages the per-layer divergence over every
// (sample, layer >= cutoff) cell.
DivergenceResult js_divergence(const std::vector<LayerTrace>& a, const std::vector<LayerTrace>& b,
                               int cutoff = kDefaultLayerCutoff, const Normalizer& normalize = softmax_normalizer);

nlohmann::json to_json(const DivergenceResult& r);

}  // namespace sclab
