#include "sclab/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sclab/errors.hpp"

namespace sclab {

Confusion confusion(const RunSet& runset, const MetricsOptions& options) {
  if (runset.records.empty()) throw Error(ErrorKind::kIncompleteRunSet, "run set has no records");
  std::vector<std::string> offending;
  for (const auto& r : runset.records) {
    if (!r.complete() || !r.initial || !r.initial->label || !r.refinement->label) {
      offending.push_back(fmt::format("{}/{}", r.question_id, to_string(r.variant)));
    }
  }
  if (!offending.empty()) {
    std::string list;
    for (std::size_t i = 0; i < offending.size() && i < 20; ++i) list += (i ? ", " : "") + offending[i];
    if (offending.size() > 20) list += fmt::format(", ... ({} total)", offending.size());
    throw Error(ErrorKind::kIncompleteRunSet, "incomplete records: " + list);
  }

  Confusion c;
  for (const auto& r : runset.records) {
    const AnswerLabel first = *r.initial->label;
    const AnswerLabel second = *r.refinement->label;
    if (options.ambiguous == AmbiguousPolicy::kExclude &&
        (first == AnswerLabel::kAmbiguous || second == AnswerLabel::kAmbiguous)) {
      continue;
    }
    const AnswerLabel want = label_for(r.gold);
    const bool ok0 = first == want;
    const bool ok1 = second == want;
    if (ok0) {
      ++(ok1 ? c.cc : c.ci);
    } else {
      ++(ok1 ? c.ic : c.ii);
    }
  }
  if (c.total() == 0) throw Error(ErrorKind::kIncompleteRunSet, "every record was excluded as ambiguous");
  return c;
}

MetricsReport report_from_counts(const Confusion& c) {
  MetricsReport r;
  r.counts = c;
  r.n = c.total();
  if (r.n == 0) throw Error(ErrorKind::kIncompleteRunSet, "no records to report");
  const double n = static_cast<double>(r.n);
  r.acc0 = static_cast<double>(c.cc + c.ci) / n;
  r.acc1 = static_cast<double>(c.cc + c.ic) / n;
  r.delta_acc = r.acc0 - r.acc1;
  if (c.cc + c.ci > 0) r.c2i = static_cast<double>(c.ci) / static_cast<double>(c.cc + c.ci);
  if (c.ic + c.ii > 0) r.i2c = static_cast<double>(c.ic) / static_cast<double>(c.ic + c.ii);
  return r;
}

MetricsReport report(const RunSet& runset, const MetricsOptions& options) {
  return report_from_counts(confusion(runset, options));
}

nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {
      {"acc0", r.acc0},
      {"acc1", r.acc1},
      {"delta_acc", r.delta_acc},
      {"c2i", opt(r.c2i)},
      {"i2c", opt(r.i2c)},
      {"n", r.n},
      {"counts", {{"cc", r.counts.cc}, {"ci", r.counts.ci}, {"ic", r.counts.ic}, {"ii", r.counts.ii}}},
  };
}

std::string format_percent(std::optional<double> fraction) {
  if (!fraction) return "–";
  return fmt::format("{:.1f}", *fraction * 100.0);
}

std::string markdown_table(const std::vector<ReportRow>& rows) {
  std::string out = "| Model | ACC₁ (↓ΔACC) | ✓→✗ (%) | ✗→✓ (%) |\n|---|---|---|---|\n";
  for (const auto& row : rows) {
    const MetricsReport& m = row.metrics;
    // A negative drop means refinement helped; show it with an up arrow.
    const char* arrow = m.delta_acc < 0.0 ? "↑" : "↓";
    out += fmt::format("| {} | {} ({}{}) | {} | {} |\n", row.label, format_percent(m.acc1), arrow,
                       format_percent(std::abs(m.delta_acc)), format_percent(m.c2i), format_percent(m.i2c));
  }
  return out;
}

namespace {

// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
}

}  // namespace

double WaverDistribution::share_changing_more_than(long long k) const {
  if (samples == 0) return 0.0;
  std::size_t above = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (static_cast<long long>(c) > k) above += counts[c];
  }
  return static_cast<double>(above) / static_cast<double>(samples);
}

WaverDistribution waver_distribution(const std::vector<WaverTrace>& traces) {
  if (traces.empty()) throw Error(ErrorKind::kPrecondition, "no wavering traces");
  WaverDistribution d;
  d.rounds = traces.front().labels.size();
  for (const auto& t : traces) {
    if (t.labels.size() != d.rounds) {
      throw Error(ErrorKind::kMixedRounds, fmt::format("trace {} has {} rounds, expected {}", t.question_id,
                                                        t.labels.size(), d.rounds));
    }
  }
  if (d.rounds < 1) throw Error(ErrorKind::kPrecondition, "traces have no rounds");
  d.samples = traces.size();
  d.counts.assign(d.rounds, 0);
  std::vector<double> values;
  for (const auto& t : traces) {
    const std::size_t c = count_changes(t.labels);
    ++d.counts[c];
    values.push_back(static_cast<double>(c));
  }
  std::sort(values.begin(), values.end());
  for (std::size_t c : d.counts) d.histogram.push_back(static_cast<double>(c) / static_cast<double>(d.samples));
  double sum = 0.0;
  for (double v : values) sum += v;
  d.mean = sum / static_cast<double>(values.size());
  d.min = values.front();
  d.max = values.back();
  d.p25 = quantile(values, 0.25);
  d.median = quantile(values, 0.5);
  d.p75 = quantile(values, 0.75);
  return d;
}

nlohmann::json to_json(const WaverDistribution& d) {
  return {
      {"rounds", d.rounds},
      {"samples", d.samples},
      {"counts", d.counts},
      {"histogram", d.histogram},
      {"mean", d.mean},
      {"quantiles", {{"min", d.min}, {"p25", d.p25}, {"median", d.median}, {"p75", d.p75}, {"max", d.max}}},
      {"share_changing_more_than_6", d.share_changing_more_than(6)},
  };
}

}  // namespace sclab
