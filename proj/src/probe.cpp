#include "sclab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"

namespace sclab {

std::string_view to_string(Phase p) { return p == Phase::kInitial ? "initial" : "refinement"; }

Phase phase_from_string(std::string_view text) {
  if (text == "initial") return Phase::kInitial;
  if (text == "refinement") return Phase::kRefinement;
  throw Error(ErrorKind::kSchemaMismatch, "unknown phase '" + std::string(text) + "'");
}

nlohmann::json to_json(const LayerTrace& t) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : t.layers) {
    layers.push_back({{"layer", l.layer}, {"cs_correct", l.cs_correct}, {"cs_incorrect", l.cs_incorrect}});
  }
  return {{"sample_id", t.sample_id}, {"phase", to_string(t.phase)}, {"prompt_tag", t.prompt_tag}, {"layers", layers}};
}

namespace {

[[noreturn]] void schema_error(std::size_t line, const std::string& what) {
  throw Error(ErrorKind::kSchemaMismatch, fmt::format("line {}: {}", line, what));
}

LayerTrace trace_from_json(const nlohmann::json& j, std::size_t line, int cutoff) {
  LayerTrace t;
  try {
    t.sample_id = j.at("sample_id").get<std::string>();
    t.phase = phase_from_string(j.at("phase").get<std::string>());
    t.prompt_tag = j.value("prompt_tag", std::string());
    for (const auto& l : j.at("layers")) {
      LayerScore s;
      s.layer = l.at("layer").get<int>();
      s.cs_correct = l.at("cs_correct").get<double>();
      s.cs_incorrect = l.at("cs_incorrect").get<double>();
      t.layers.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    schema_error(line, e.what());
  } catch (const Error& e) {
    schema_error(line, e.what());
  }
  if (t.layers.empty()) schema_error(line, "trace has no layers");
  for (std::size_t i = 0; i < t.layers.size(); ++i) {
    if (t.layers[i].layer < 0) schema_error(line, "negative layer index");
    if (i > 0 && t.layers[i].layer <= t.layers[i - 1].layer) {
      schema_error(line, fmt::format("layer indices not strictly increasing at {}", t.layers[i].layer));
    }
    if (!std::isfinite(t.layers[i].cs_correct) || !std::isfinite(t.layers[i].cs_incorrect)) {
      schema_error(line, "non-finite confidence score");
    }
  }
  if (t.layers.back().layer < cutoff) schema_error(line, fmt::format("no layer at or above cutoff {}", cutoff));
  return t;
}

}  // namespace

std::vector<LayerTrace> parse_traces(std::string_view text, const TraceLoadOptions& options) {
  std::vector<LayerTrace> out;
  bool header = false;
  bool footer = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) schema_error(line_no, "not a JSON object");
    if (footer) schema_error(line_no, "content after the end-of-traces footer");
    if (!header) {
      if (!j.contains("schema_version")) schema_error(line_no, "missing schema_version header");
      if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != kTraceSchemaVersion) {
        schema_error(line_no, fmt::format("schema_version {} is not {}", j["schema_version"].dump(), kTraceSchemaVersion));
      }
      header = true;
      continue;
    }
    if (j.contains("end_of_traces")) {
      if (j.value("count", std::size_t{0}) != out.size()) {
        schema_error(line_no, fmt::format("footer count {} but {} traces read", j.value("count", 0), out.size()));
      }
      footer = true;
      continue;
    }
    out.push_back(trace_from_json(j, line_no, options.cutoff));
  }
  if (options.require_footer && header && !footer) {
    schema_error(line_no, "missing end-of-traces footer (partial export)");
  }
  return out;
}

std::vector<LayerTrace> load_traces(const std::string& path, const TraceLoadOptions& options) {
  return parse_traces(read_file(path), options);
}

std::string serialize_traces(const std::vector<LayerTrace>& traces, bool with_footer) {
  std::string out = nlohmann::json{{"schema_version", kTraceSchemaVersion}}.dump() + "\n";
  for (const auto& t : traces) out += to_json(t).dump() + "\n";
  if (with_footer) out += nlohmann::json{{"end_of_traces", true}, {"count", traces.size()}}.dump() + "\n";
  return out;
}

std::vector<DeltaPoint> delta_curve(const LayerTrace& trace) {
  std::vector<DeltaPoint> out;
  out.reserve(trace.layers.size());
  for (const auto& l : trace.layers) out.push_back({l.layer, l.cs_correct - l.cs_incorrect});
  return out;
}

double flip_frequency(const LayerTrace& trace, int cutoff) {
  std::vector<double> deltas;
  for (const auto& p : delta_curve(trace)) {
    if (p.layer >= cutoff) deltas.push_back(p.delta);
  }
  if (deltas.size() < 2) {
    throw Error(ErrorKind::kInsufficientLayers,
                fmt::format("trace {} has {} layers at or above {}", trace.sample_id, deltas.size(), cutoff));
  }
  int sign = 0;
  for (double d : deltas) {
    if (d != 0.0) {
      sign = d > 0.0 ? 1 : -1;
      break;
    }
  }
  std::size_t flips = 0;
  for (double d : deltas) {
    const int s = d > 0.0 ? 1 : (d < 0.0 ? -1 : sign);
    if (s != sign) ++flips;
    sign = s;
  }
  return static_cast<double>(flips) / static_cast<double>(deltas.size() - 1);
}

TwoClass softmax_normalizer(double cs_correct, double cs_incorrect) {
  const double m = std::max(cs_correct, cs_incorrect);
  const double a = std::exp(cs_correct - m);
  const double b = std::exp(cs_incorrect - m);
  return {a / (a + b), b / (a + b)};
}

TwoClass proportional_normalizer(double cs_correct, double cs_incorrect) {
  if (cs_correct < 0.0 || cs_incorrect < 0.0) {
    throw Error(ErrorKind::kPrecondition, "proportional normalization needs non-negative scores");
  }
  const double total = cs_correct + cs_incorrect;
  if (total == 0.0) return {0.5, 0.5};
  return {cs_correct / total, cs_incorrect / total};
}

double js_divergence_bits(const TwoClass& p, const TwoClass& q) {
  auto kl_to_mid = [](const TwoClass& x, const TwoClass& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      if (x[i] > 0.0) s += x[i] * std::log2(x[i] / m[i]);
    }
    return s;
  };
  const TwoClass m{(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0};
  const double d = 0.5 * kl_to_mid(p, m) + 0.5 * kl_to_mid(q, m);
  return std::clamp(d, 0.0, 1.0);
}

DivergenceResult js_divergence(const std::vector<LayerTrace>& a, const std::vector<LayerTrace>& b, int cutoff,
                               const Normalizer& normalize) {
  auto index = [](const std::vector<LayerTrace>& traces, const char* side) {
    std::map<std::string, const LayerTrace*> out;
    for (const auto& t : traces) {
      if (!out.emplace(t.sample_id, &t).second) {
        throw Error(ErrorKind::kUnpairedSample, fmt::format("sample {} appears twice in set {}", t.sample_id, side));
      }
    }
    return out;
  };
  const auto ia = index(a, "A");
  const auto ib = index(b, "B");
  for (const auto& [id, t] : ia) {
    if (!ib.contains(id)) throw Error(ErrorKind::kUnpairedSample, "sample " + id + " missing from set B");
  }
  for (const auto& [id, t] : ib) {
    if (!ia.contains(id)) throw Error(ErrorKind::kUnpairedSample, "sample " + id + " missing from set A");
  }

  DivergenceResult r;
  r.cutoff = cutoff;
  double sum = 0.0;
  std::size_t cells = 0;
  // Rows follow sample_id order so that swapping A and B sums in the same order.
  for (const auto& [id, ta] : ia) {
    const LayerTrace* tb = ib.at(id);
    std::map<int, const LayerScore*> lb;
    for (const auto& l : tb->layers) {
      if (l.layer >= cutoff) lb[l.layer] = &l;
    }
    std::vector<double> row;
    std::vector<int> layers;
    std::size_t la_count = 0;
    for (const auto& l : ta->layers) {
      if (l.layer < cutoff) continue;
      ++la_count;
      auto it = lb.find(l.layer);
      if (it == lb.end()) {
        throw Error(ErrorKind::kUnpairedSample, fmt::format("sample {} layer {} missing from set B", id, l.layer));
      }
      const double d = js_divergence_bits(normalize(l.cs_correct, l.cs_incorrect),
                                          normalize(it->second->cs_correct, it->second->cs_incorrect));
      row.push_back(d);
      layers.push_back(l.layer);
      sum += d;
      ++cells;
    }
    if (la_count != lb.size()) {
      throw Error(ErrorKind::kUnpairedSample, fmt::format("sample {} has different layers in the two sets", id));
    }
    if (r.layers.empty()) r.layers = layers;
    r.samples.push_back(id);
    r.per_layer.push_back(std::move(row));
  }
  if (cells == 0) throw Error(ErrorKind::kInsufficientLayers, "no paired layers at or above the cutoff");
  r.mean_jsd = sum / static_cast<double>(cells);
  return r;
}

nlohmann::json to_json(const DivergenceResult& r) {
  return {{"mean_jsd", r.mean_jsd},
          {"cutoff", r.cutoff},
          {"samples", r.samples},
          {"layers", r.layers},
          {"per_layer", r.per_layer}};
}

}  // namespace sclab
