#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/harness.hpp"

namespace sclab {

// How an Ambiguous label is scored. The default treats it as a wrong answer.
enum class AmbiguousPolicy { kIncorrect, kExclude };

struct MetricsOptions {
  AmbiguousPolicy ambiguous = AmbiguousPolicy::kIncorrect;
};

// cc: right then right, ci: right then wrong, ic: wrong then right, ii: wrong then wrong.
struct Confusion {
  std::size_t cc = 0;
  std::size_t ci = 0;
  std::size_t ic = 0;
  std::size_t ii = 0;

  std::size_t total() const { return cc + ci + ic + ii; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

Confusion confusion(const RunSet& runset, const MetricsOptions& options = {});

struct MetricsReport {
  double acc0 = 0.0;       // initial accuracy
  double acc1 = 0.0;       // accuracy after refinement
  double delta_acc = 0.0;  // acc0 - acc1
  std::optional<double> c2i;  // undefined when nothing was initially correct
  std::optional<double> i2c;  // undefined when nothing was initially incorrect
  Confusion counts;
  std::size_t n = 0;
};

MetricsReport report(const RunSet& runset, const MetricsOptions& options = {});
MetricsReport report_from_counts(const Confusion& counts);

nlohmann::json to_json(const MetricsReport& r);

// Percentage with one decimal ("60.0"), or "–" when undefined.
std::string format_percent(std::optional<double> fraction);

// Markdown table: Model | ACC1 (↓ΔACC) | ✓→✗ (%) | ✗→✓ (%).
struct ReportRow {
  std::string label;
  MetricsReport metrics;
};
std::string markdown_table(const std::vector<ReportRow>& rows);

struct WaverDistribution {
  std::size_t rounds = 0;
  std::size_t samples = 0;
  std::vector<std::size_t> counts;  // counts[k] = traces with k changes, k in [0, rounds-1]
  std::vector<double> histogram;    // counts normalized to sum 1
  double mean = 0.0;
  double min = 0.0;
  double p25 = 0.0;
  double median = 0.0;
  double p75 = 0.0;
  double max = 0.0;

  // Fraction of traces whose change count is strictly greater than k.
  double share_changing_more_than(long long k) const;
};

WaverDistribution waver_distribution(const std::vector<WaverTrace>& traces);
nlohmann::json to_json(const WaverDistribution& d);

}  // namespace sclab
