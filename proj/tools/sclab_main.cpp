// sclab: command-line front end for the self-correction lab.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sclab/bias.hpp"
#include "sclab/config.hpp"
#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"
#include "sclab/harness.hpp"
#include "sclab/metrics.hpp"
#include "sclab/mitigation.hpp"
#include "sclab/pact.hpp"
#include "sclab/probe.hpp"
#include "sclab/report.hpp"

namespace fs = std::filesystem;
using namespace sclab;

namespace {

constexpr int kExitError = 1;
constexpr int kExitPartial = 3;

struct Globals {
  std::string config_path;
  std::string out;
  bool resume = false;
  int concurrency = 0;
  std::vector<std::pair<const ConfigField*, CLI::Option*>> overrides;
  std::map<std::string, std::string> override_values;
};

LabConfig resolve_config(const Globals& g) {
  LabConfig c = g.config_path.empty() ? LabConfig{} : load_config(g.config_path);
  for (const auto& [field, opt] : g.overrides) {
    if (opt->count() > 0) apply_override(c, *field, g.override_values.at(field->key));
  }
  if (!g.out.empty()) c.out = g.out;
  if (g.concurrency > 0) c.concurrency = g.concurrency;
  return c;
}

std::string out_path(const LabConfig& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

std::string jsonl(const std::vector<nlohmann::json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  return s;
}

RunOptions run_options(const LabConfig& c, const TemplateSet& templates) {
  RunOptions o;
  o.params = c.decoding;
  o.question_repeating = c.question_repeating;
  o.workers = c.concurrency;
  o.templates = &templates;
  return o;
}

int cmd_run(const Globals& g) {
  const LabConfig c = resolve_config(g);
  c.validate();
  if (c.dataset.empty()) throw Error(ErrorKind::kConfig, "run needs a dataset");
  const TemplateSet templates = c.templates();
  const Dataset dataset = load_dataset(c.dataset);
  auto gateway = make_gateway(c.backend);
  RunSetStore store(c.out, to_json(c), dataset.digest, g.resume);
  const RunSet rs = run_dataset(dataset, c.variants, *gateway, run_options(c, templates), &store);
  const std::size_t failed = rs.failed_count();
  fmt::print("{} records, {} complete, {} failed -> {}\n", rs.records.size(), rs.records.size() - failed, failed,
             c.out);
  if (failed == 0) return 0;
  for (const auto& r : rs.records) {
    if (!r.complete()) {
      fmt::print(stderr, "failed {}/{}: {}\n", r.question_id, to_string(r.variant), r.failure.value_or("incomplete"));
    }
  }
  return kExitPartial;
}

int cmd_waver(const Globals& g) {
  const LabConfig c = resolve_config(g);
  c.validate();
  if (c.dataset.empty()) throw Error(ErrorKind::kConfig, "waver needs a dataset");
  const TemplateSet templates = c.templates();
  const Dataset dataset = load_dataset(c.dataset);
  auto gateway = make_gateway(c.backend);
  const auto traces = run_multi_round_dataset(dataset, *gateway, c.rounds, c.waver_variant, run_options(c, templates));
  std::vector<nlohmann::json> rows;
  std::vector<WaverTrace> complete;
  for (const auto& t : traces) {
    rows.push_back(to_json(t));
    if (!t.failure) complete.push_back(t);
  }
  write_file(out_path(c, "waver.jsonl"), jsonl(rows));
  if (!complete.empty()) {
    const auto dist = waver_distribution(complete);
    write_file(out_path(c, "waver_summary.json"), to_json(dist).dump(2) + "\n");
    fmt::print("{} traces, mean changes {:.3f}, share changing more than 6 times {:.3f}\n", dist.samples, dist.mean,
               dist.share_changing_more_than(6));
  }
  const std::size_t failed = traces.size() - complete.size();
  if (failed == 0) return 0;
  for (const auto& t : traces) {
    if (t.failure) fmt::print(stderr, "failed {}: {}\n", t.question_id, *t.failure);
  }
  return kExitPartial;
}

int cmd_pact(const Globals& g, const std::string& runset_path, const std::string& question,
             const std::string& variant) {
  const LabConfig c = resolve_config(g);
  c.validate();
  const RunSet rs = load_runset(runset_path.empty() ? c.out : runset_path);
  auto gateway = make_gateway(c.backend);
  AttributionOptions options;
  options.output_tokens = c.pact_output_tokens;
  options.workers = c.concurrency;
  std::vector<AttributionMap> maps;
  std::vector<nlohmann::json> rows;
  std::size_t partial = 0;
  for (const auto& r : rs.records) {
    if (!r.complete()) continue;
    if (!question.empty() && r.question_id != question) continue;
    if (!variant.empty() && r.variant != variant_from_string(variant)) continue;
    auto m = attribution_map(r, c.pact_granularity, *gateway, options);
    if (m.partial) ++partial;
    rows.push_back(to_json(m));
    maps.push_back(std::move(m));
  }
  if (maps.empty()) throw Error(ErrorKind::kPrecondition, "no complete episodes matched");
  write_file(out_path(c, "attributions.jsonl"), jsonl(rows));
  if (c.pact_granularity == Granularity::kSequence) {
    write_file(out_path(c, "dominant.json"), to_json(dominant_sequence_distribution(maps)).dump(2) + "\n");
  }
  fmt::print("{} attribution maps ({} partial) -> {}\n", maps.size(), partial, c.out);
  return partial == 0 ? 0 : kExitPartial;
}

// "initial", "refinement", "refinement/V2" or "/V2" (any phase).
std::vector<LayerTrace> select_traces(const std::vector<LayerTrace>& all, const std::string& selector) {
  const auto slash = selector.find('/');
  const std::string phase = selector.substr(0, slash);
  const std::optional<std::string> tag =
      slash == std::string::npos ? std::nullopt : std::optional<std::string>(selector.substr(slash + 1));
  std::optional<Phase> want;
  if (!phase.empty()) want = phase_from_string(phase);
  std::vector<LayerTrace> out;
  for (const auto& t : all) {
    if (want && t.phase != *want) continue;
    if (tag && t.prompt_tag != *tag) continue;
    out.push_back(t);
  }
  if (out.empty()) throw Error(ErrorKind::kPrecondition, "no traces match '" + selector + "'");
  return out;
}

int cmd_probe(const Globals& g, const std::vector<std::string>& files, const std::string& a, const std::string& b) {
  const LabConfig c = resolve_config(g);
  c.validate(false);
  TraceLoadOptions load;
  load.cutoff = c.probe_cutoff;
  load.require_footer = c.probe_require_footer;
  std::vector<LayerTrace> all;
  for (const auto& f : files) {
    auto t = load_traces(f, load);
    all.insert(all.end(), t.begin(), t.end());
  }
  const auto set_a = select_traces(all, a);
  const auto set_b = select_traces(all, b);
  const Normalizer norm = c.probe_normalizer == "proportional" ? Normalizer(proportional_normalizer)
                                                               : Normalizer(softmax_normalizer);
  auto mean_flip = [&](const std::vector<LayerTrace>& traces) {
    double sum = 0.0;
    for (const auto& t : traces) sum += flip_frequency(t, c.probe_cutoff);
    return sum / static_cast<double>(traces.size());
  };
  const auto jsd = js_divergence(set_a, set_b, c.probe_cutoff, norm);
  nlohmann::json out = {{"a", {{"selector", a}, {"samples", set_a.size()}, {"mean_flip_frequency", mean_flip(set_a)}}},
                        {"b", {{"selector", b}, {"samples", set_b.size()}, {"mean_flip_frequency", mean_flip(set_b)}}},
                        {"normalizer", c.probe_normalizer},
                        {"divergence", to_json(jsd)}};
  write_file(out_path(c, "probe.json"), out.dump(2) + "\n");
  fmt::print("JSD({}, {}) = {:.4f}; flip frequency {:.3f} vs {:.3f}\n", a, b, jsd.mean_jsd,
             out["a"]["mean_flip_frequency"].get<double>(), out["b"]["mean_flip_frequency"].get<double>());
  return 0;
}

int cmd_sft(const Globals& g, const std::string& runset_path) {
  const LabConfig c = resolve_config(g);
  c.validate(false);
  if (c.dataset.empty()) throw Error(ErrorKind::kConfig, "mitigate sft needs the dataset for gold answers");
  const RunSet rs = load_runset(runset_path.empty() ? c.out : runset_path);
  const Dataset dataset = load_dataset(c.dataset);
  SftOptions options;
  options.mode = c.sft_selection == "seeded" ? SelectionMode::kSeeded : SelectionMode::kDatasetOrder;
  options.seed = c.sft_seed;
  const auto sft = build_sft_dataset(rs, c.sft_size, gold_lookup(dataset), options);
  export_finetune_file(sft, out_path(c, "sft.jsonl"));
  fmt::print("{} fine-tuning samples -> {}\n", sft.samples.size(), out_path(c, "sft.jsonl"));
  return 0;
}

int cmd_bias(const Globals& g, const std::string& corpus, const std::string& log) {
  const LabConfig c = resolve_config(g);
  c.validate(false);
  if (!log.empty()) {
    const AgentTrace trace = parse_agent_log(read_file(log));
    for (const auto& w : trace.warnings) fmt::print(stderr, "{}: {}\n", log, w);
    nlohmann::json out = {{"features", to_json(bias_features(trace, c.bias_feature_options()))},
                          {"outcome", to_string(trace.outcome)},
                          {"steps", trace.steps.size()}};
    write_file(out_path(c, "bias_trace.json"), out.dump(2) + "\n");
    fmt::print("{}\n", out["features"].dump());
    return 0;
  }
  BiasOptions options;
  options.thresholds = c.bias;
  options.features = c.bias_feature_options();
  const auto report = analyze_corpus(load_bias_corpus(corpus), options);
  write_file(out_path(c, "bias.json"), to_json(report).dump(2) + "\n");
  const std::string md = evidence_markdown(report);
  write_file(out_path(c, "bias.md"), md);
  std::cout << md;
  return 0;
}

int cmd_report(const Globals& g, const std::string& runset_path, bool exclude_ambiguous) {
  const LabConfig c = resolve_config(g);
  const RunSet rs = load_runset(runset_path);
  MetricsOptions options;
  if (exclude_ambiguous) options.ambiguous = AmbiguousPolicy::kExclude;
  const RunReport report = build_run_report(rs, options);
  const std::string md = run_report_markdown(report);
  write_file(out_path(c, "report.md"), md);
  write_file(out_path(c, "report.json"), to_json(report).dump(2) + "\n");
  std::cout << md;
  return 0;
}

int cmd_heatmap(const Globals& g, const std::string& map_path, std::size_t index) {
  const LabConfig c = resolve_config(g);
  const std::string text = read_file(map_path);
  std::vector<nlohmann::json> maps;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      maps.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      // A pretty-printed single map spans lines; fall back to parsing the whole file.
      try {
        maps = {nlohmann::json::parse(text)};
        break;
      } catch (const nlohmann::json::parse_error& whole) {
        throw Error(ErrorKind::kParse, fmt::format("{}: line {}: {}", map_path, line_no, e.what()));
      }
    }
  }
  if (index >= maps.size()) {
    throw Error(ErrorKind::kPrecondition, fmt::format("{} holds {} maps, index {} requested", map_path, maps.size(), index));
  }
  AttributionMap map;
  try {
    map = attribution_from_json(maps[index]);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("{}: map {}: {}", map_path, index, e.what()));
  }
  const std::string html = render_heatmap_html(build_heatmap(map));
  write_file(out_path(c, "heatmap.html"), html);
  fmt::print("heatmap for {}/{} -> {}\n", map.question_id, to_string(map.variant), out_path(c, "heatmap.html"));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sclab: run, measure and interpret self-correction experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "lab configuration file (JSON)");
  app.add_option("--out", g.out, "output directory (config key: out)");
  app.add_flag("--resume", g.resume, "continue an interrupted run in the output directory");
  app.add_option("--concurrency", g.concurrency, "worker threads over samples (config key: concurrency)");
  for (const auto& field : config_fields()) {
    if (field.key == "out" || field.key == "concurrency") continue;
    auto* opt = app.add_option(field.flag, g.override_values[field.key], field.help + " (config key: " + field.key + ")")
                    ->group("Configuration overrides");
    g.overrides.emplace_back(&field, opt);
  }

  int rc = 0;
  auto* run = app.add_subcommand("run", "run every (question, variant) episode and store the run set");
  run->callback([&] { rc = cmd_run(g); });

  auto* waver = app.add_subcommand("waver", "repeat the refinement prompt for `rounds` rounds per question");
  waver->callback([&] { rc = cmd_waver(g); });

  std::string pact_runset, pact_question, pact_variant;
  auto* pact = app.add_subcommand("pact", "attribution maps for the complete episodes of a run set");
  pact->add_option("--runset", pact_runset, "run directory or runset.jsonl (default: --out)");
  pact->add_option("--question", pact_question, "only this question id");
  pact->add_option("--variant", pact_variant, "only this variant");
  pact->callback([&] { rc = cmd_pact(g, pact_runset, pact_question, pact_variant); });

  std::vector<std::string> probe_files;
  std::string probe_a = "initial", probe_b = "refinement";
  auto* probe = app.add_subcommand("probe", "flip frequency and divergence of layer traces");
  probe->add_option("--traces", probe_files, "trace file(s)")->required();
  probe->add_option("--a", probe_a, "first set: phase[/prompt_tag]")->capture_default_str();
  probe->add_option("--b", probe_b, "second set: phase[/prompt_tag]")->capture_default_str();
  probe->callback([&] { rc = cmd_probe(g, probe_files, probe_a, probe_b); });

  std::string sft_runset;
  auto* mitigate = app.add_subcommand("mitigate", "mitigation artifacts");
  mitigate->require_subcommand(1);
  mitigate->fallthrough();
  auto* sft = mitigate->add_subcommand("sft", "fine-tuning file from correct-to-incorrect flips");
  sft->add_option("--runset", sft_runset, "run directory or runset.jsonl (default: --out)");
  sft->callback([&] { rc = cmd_sft(g, sft_runset); });

  std::string bias_corpus, bias_log;
  auto* bias = app.add_subcommand("bias", "cognitive-bias patterns in agent transcripts");
  auto* corpus_opt = bias->add_option("--corpus", bias_corpus, "JSON-lines corpus {phase, prompt, log, status, task, episode, model}");
  auto* log_opt = bias->add_option("--log", bias_log, "single plain-text transcript (features only)");
  corpus_opt->excludes(log_opt);
  bias->callback([&] {
    if (bias_corpus.empty() && bias_log.empty()) throw CLI::ValidationError("bias", "--corpus or --log is required");
    rc = cmd_bias(g, bias_corpus, bias_log);
  });

  std::string report_runset;
  bool exclude_ambiguous = false;
  auto* report = app.add_subcommand("report", "metrics table for a run set");
  report->add_option("runset", report_runset, "run directory or runset.jsonl")->required();
  report->add_flag("--exclude-ambiguous", exclude_ambiguous, "drop episodes with an ambiguous answer");
  report->callback([&] {
    if (report_runset.empty()) throw CLI::ValidationError("runset", "path is empty");
    rc = cmd_report(g, report_runset, exclude_ambiguous);
  });

  std::string heat_map;
  std::size_t heat_index = 0;
  auto* heatmap = app.add_subcommand("heatmap", "HTML heatmap of one attribution map");
  heatmap->add_option("map", heat_map, "attribution map JSON or attributions.jsonl")->required();
  heatmap->add_option("--index", heat_index, "map index inside a JSON-lines file");
  heatmap->callback([&] { rc = cmd_heatmap(g, heat_map, heat_index); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    fmt::print(stderr, "sclab: {}\n", e.what());
    return kExitError;
  } catch (const std::exception& e) {
    fmt::print(stderr, "sclab: {}\n", e.what());
    return kExitError;
  }
  return rc;
}
