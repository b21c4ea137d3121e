#include "sclab/bias.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <tuple>

#include <fmt/format.h>

#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"

namespace sclab {

std::string_view to_string(StepKind k) {
  switch (k) {
    case StepKind::kThink: return "think";
    case StepKind::kAction: return "action";
    case StepKind::kObservation: return "observation";
  }
  return "action";
}

std::string_view to_string(TaskOutcome o) {
  switch (o) {
    case TaskOutcome::kSuccess: return "success";
    case TaskOutcome::kFail: return "fail";
    case TaskOutcome::kUnknown: return "unknown";
  }
  return "unknown";
}

TaskOutcome task_outcome_from_string(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "success" || t == "ok" || t == "succeeded") return TaskOutcome::kSuccess;
  if (t == "fail" || t == "failure" || t == "failed") return TaskOutcome::kFail;
  if (t.empty() || t == "unknown") return TaskOutcome::kUnknown;
  throw Error(ErrorKind::kParse, "unknown status '" + std::string(text) + "'");
}

std::string_view to_string(BiasPattern p) {
  switch (p) {
    case BiasPattern::kOverthinking: return "overthinking";
    case BiasPattern::kCognitiveOverload: return "cognitive_overload";
    case BiasPattern::kPerfectionism: return "perfectionism";
  }
  return "overthinking";
}

BiasPattern bias_pattern_from_string(std::string_view text) {
  if (text == "overthinking") return BiasPattern::kOverthinking;
  if (text == "cognitive_overload") return BiasPattern::kCognitiveOverload;
  if (text == "perfectionism") return BiasPattern::kPerfectionism;
  throw Error(ErrorKind::kParse, "unknown bias pattern '" + std::string(text) + "'");
}

namespace {

constexpr std::string_view kNoEffect = "Nothing happens.";

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) != std::tolower(static_cast<unsigned char>(prefix[i]))) {
      return false;
    }
  }
  return true;
}

bool known_reply(std::string_view s) {
  return s == "OK." || s == kNoEffect || s.starts_with("On the ") || s.starts_with("You ") ||
         s.starts_with("STATUS:");
}

// First words of commands seen in household, QA and coding agent logs.
bool looks_like_command(std::string_view s) {
  static const std::set<std::string, std::less<>> verbs = {
      "go",    "take",   "put",    "open",    "close",  "clean", "heat",   "cool",  "use",
      "examine", "inventory", "look", "toggle", "slice", "search", "lookup", "finish", "answer",
      "def",   "return", "import", "class",   "print",  "submit"};
  std::size_t n = 0;
  while (n < s.size() && std::isalpha(static_cast<unsigned char>(s[n]))) ++n;
  std::string word(s.substr(0, n));
  std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
  return verbs.contains(word);
}

}  // namespace

AgentTrace parse_agent_log(std::string_view text) {
  AgentTrace trace;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;

    enum class Tag { kNone, kAssistant, kEnvironment } tag = Tag::kNone;
    if (line.starts_with("LLM:")) {
      tag = Tag::kAssistant;
      line = trim(line.substr(4));
    } else if (line.starts_with("Environment:")) {
      tag = Tag::kEnvironment;
      line = trim(line.substr(12));
    } else if (line.starts_with(">")) {
      tag = Tag::kAssistant;
      line = trim(line.substr(1));
    }
    if (line.empty()) continue;

    AgentStep step;
    if (tag != Tag::kEnvironment && starts_with_ci(line, "think:")) {
      step.kind = StepKind::kThink;
      step.text = std::string(trim(line.substr(6)));
    } else if (tag == Tag::kEnvironment || (tag == Tag::kNone && known_reply(line))) {
      step.kind = StepKind::kObservation;
      step.text = std::string(line);
      if (line.starts_with("STATUS:")) {
        const auto status = trim(line.substr(7));
        if (status == "OK") trace.outcome = TaskOutcome::kSuccess;
        if (status == "FAIL") trace.outcome = TaskOutcome::kFail;
      }
    } else {
      step.kind = StepKind::kAction;
      step.text = std::string(line);
      if (tag == Tag::kNone && !looks_like_command(line)) {
        trace.warnings.push_back(fmt::format("line {}: unrecognized line taken as action", line_no));
      }
    }
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

std::string render_agent_log(const AgentTrace& trace) {
  std::string out;
  for (const auto& s : trace.steps) {
    switch (s.kind) {
      case StepKind::kThink: out += "think: "; break;
      case StepKind::kAction: out += "> "; break;
      case StepKind::kObservation: out += "Environment: "; break;
    }
    out += s.text;
    out += '\n';
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

void attach_prompt(AgentTrace& trace, std::string_view prompt) {
  trace.prompt_char_len = utf8_length(prompt);
  trace.prompt_word_len = word_count(prompt);
}

namespace {

struct NoopLoop {
  long long length = 0;
  std::vector<std::size_t> steps;
};

NoopLoop longest_noop_loop(const AgentTrace& trace) {
  NoopLoop best;
  NoopLoop current;
  const std::string* previous = nullptr;
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& step = trace.steps[i];
    if (step.kind != StepKind::kAction) continue;
    std::size_t j = i + 1;
    while (j < trace.steps.size() && trace.steps[j].kind == StepKind::kThink) ++j;
    const bool noop = j < trace.steps.size() && trace.steps[j].kind == StepKind::kObservation &&
                      trace.steps[j].text == kNoEffect;
    if (!noop) {
      current = {};
      previous = nullptr;
      continue;
    }
    if (previous == nullptr || *previous != step.text) current = {};
    ++current.length;
    current.steps.push_back(i);
    previous = &step.text;
    if (current.length > best.length) best = current;
  }
  return best;
}

}  // namespace

BiasFeatures bias_features(const AgentTrace& trace, const FeatureOptions& options) {
  BiasFeatures f;
  for (const auto& s : trace.steps) {
    if (s.kind == StepKind::kObservation) continue;
    if (s.kind == StepKind::kThink) ++f.think_count;
    if (options.output_unit == OutputUnit::kSteps) {
      ++f.output_len;
    } else {
      // "think:" counts as a word so every assistant step has at least one.
      f.output_len += static_cast<long long>(word_count(s.text)) + (s.kind == StepKind::kThink ? 1 : 0);
    }
  }
  f.prompt_len = static_cast<long long>(options.prompt_unit == PromptUnit::kChars ? trace.prompt_char_len
                                                                                  : trace.prompt_word_len);
  f.noop_loop_len = longest_noop_loop(trace).length;
  return f;
}

Baseline mean_baseline(const std::vector<BiasFeatures>& successes) {
  if (successes.empty()) throw Error(ErrorKind::kMissingBaseline, "no successful traces for a baseline");
  Baseline b;
  for (const auto& f : successes) {
    b.think_count += static_cast<double>(f.think_count);
    b.prompt_len += static_cast<double>(f.prompt_len);
    b.output_len += static_cast<double>(f.output_len);
  }
  const double n = static_cast<double>(successes.size());
  b.think_count /= n;
  b.prompt_len /= n;
  b.output_len /= n;
  b.traces = successes.size();
  return b;
}

std::vector<BiasPattern> BiasVerdict::hits() const {
  std::vector<BiasPattern> out;
  for (const auto& p : patterns) {
    if (p.fired) out.push_back(p.pattern);
  }
  return out;
}

namespace {

double ratio_of(double feature, double baseline) {
  if (baseline > 0.0) return feature / baseline;
  return feature > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
}

double score_of(double ratio, double threshold) {
  if (std::isinf(threshold)) return 0.0;
  if (std::isinf(ratio)) return 1.0;
  return ratio / (ratio + threshold);
}

bool reaches(double feature, double baseline, double threshold) {
  return !std::isinf(threshold) && feature > baseline && feature >= threshold * baseline;
}

PatternScore rule(BiasPattern pattern, double feature, double baseline, double threshold, bool extra) {
  PatternScore s;
  s.pattern = pattern;
  s.ratio = ratio_of(feature, baseline);
  s.score = score_of(s.ratio, threshold);
  s.fired = extra && reaches(feature, baseline, threshold);
  return s;
}

}  // namespace

BiasVerdict classify_bias(const BiasFeatures& f, const Baseline& b, const BiasThresholds& t,
                          const TraceContext& context, const AgentTrace* trace) {
  BiasVerdict v;
  auto o = rule(BiasPattern::kOverthinking, static_cast<double>(f.think_count), b.think_count, t.overthinking, true);
  o.evidence = fmt::format("{} think steps vs baseline {:.1f}", f.think_count, b.think_count);

  auto c = rule(BiasPattern::kCognitiveOverload, static_cast<double>(f.prompt_len), b.prompt_len,
                t.cognitive_overload, f.noop_loop_len >= t.min_noop_loop);
  c.evidence = fmt::format("prompt length {} vs baseline {:.1f}; no-op loop of {}", f.prompt_len, b.prompt_len,
                           f.noop_loop_len);

  const bool refinement_after_success = context.phase == Phase::kRefinement && context.paired_initial_succeeded;
  auto p = rule(BiasPattern::kPerfectionism, static_cast<double>(f.output_len), b.output_len, t.perfectionism,
                refinement_after_success);
  p.evidence = fmt::format("output length {} vs baseline {:.1f}{}", f.output_len, b.output_len,
                           refinement_after_success ? "" : "; no successful initial attempt to improve on");

  if (trace != nullptr) {
    for (std::size_t i = 0; i < trace->steps.size(); ++i) {
      const auto kind = trace->steps[i].kind;
      if (kind == StepKind::kThink) o.evidence_steps.push_back(i);
      if (kind != StepKind::kObservation) p.evidence_steps.push_back(i);
    }
    c.evidence_steps = longest_noop_loop(*trace).steps;
    if (!c.evidence_steps.empty()) c.evidence += fmt::format(" (\"{}\")", trace->steps[c.evidence_steps[0]].text);
  }

  v.patterns = {o, c, p};
  const double thresholds[] = {t.overthinking, t.cognitive_overload, t.perfectionism};
  double best = -1.0;
  for (std::size_t i = 0; i < v.patterns.size(); ++i) {
    if (!v.patterns[i].fired) continue;
    const double margin = v.patterns[i].ratio / thresholds[i];
    if (margin > best) {
      best = margin;
      v.dominant = v.patterns[i].pattern;
    }
  }
  return v;
}

std::vector<BiasRecord> parse_bias_corpus(std::string_view jsonl) {
  std::vector<BiasRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    const auto line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      BiasRecord r;
      r.phase = phase_from_string(j.at("phase").get<std::string>());
      r.log = j.at("log").get<std::string>();
      r.prompt = j.value("prompt", std::string());
      r.status = task_outcome_from_string(j.value("status", std::string()));
      r.task = j.value("task", std::string());
      r.model = j.value("model", std::string());
      r.episode = j.value("episode", fmt::format("line{}", line_no));
      if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<std::string>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kParse, fmt::format("line {}: {}", line_no, e.what()));
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return out;
}

std::vector<BiasRecord> load_bias_corpus(const std::string& path) { return parse_bias_corpus(read_file(path)); }

BiasReport analyze_corpus(const std::vector<BiasRecord>& corpus, const BiasOptions& options) {
  struct Parsed {
    AgentTrace trace;
    BiasFeatures features;
    TaskOutcome outcome;
  };
  std::vector<Parsed> parsed;
  parsed.reserve(corpus.size());
  std::map<std::pair<std::string, std::string>, std::vector<BiasFeatures>> successes;
  std::set<std::tuple<std::string, std::string, std::string>> initial_ok;
  for (const auto& r : corpus) {
    Parsed p;
    p.trace = parse_agent_log(r.log);
    p.trace.phase = r.phase;
    attach_prompt(p.trace, r.prompt);
    p.outcome = r.status != TaskOutcome::kUnknown ? r.status : p.trace.outcome;
    p.trace.outcome = p.outcome;
    p.features = bias_features(p.trace, options.features);
    if (r.phase == Phase::kInitial && p.outcome == TaskOutcome::kSuccess) {
      successes[{r.task, r.model}].push_back(p.features);
      initial_ok.insert({r.task, r.model, r.episode});
    }
    parsed.push_back(std::move(p));
  }

  BiasReport report;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& r = corpus[i];
    const auto& p = parsed[i];
    if (p.outcome != TaskOutcome::kFail) continue;
    auto it = successes.find({r.task, r.model});
    if (it == successes.end()) {
      throw Error(ErrorKind::kMissingBaseline,
                  fmt::format("no successful initial trace for task '{}' model '{}' (episode {})", r.task, r.model,
                              r.episode));
    }
    ClassifiedTrace c;
    c.task = r.task;
    c.model = r.model;
    c.episode = r.episode;
    c.phase = r.phase;
    c.label = r.label;
    c.features = p.features;
    c.baseline = mean_baseline(it->second);
    c.warnings = p.trace.warnings;
    const TraceContext context{r.phase, initial_ok.contains({r.task, r.model, r.episode})};
    c.verdict = classify_bias(c.features, c.baseline, options.thresholds, context, &p.trace);
    if (c.verdict.dominant) {
      ++report.dominant_counts[*c.verdict.dominant];
    } else {
      ++report.unclassified;
    }
    report.failures.push_back(std::move(c));
  }
  std::size_t classified = 0;
  for (const auto& [k, n] : report.dominant_counts) classified += n;
  for (const auto& [k, n] : report.dominant_counts) {
    report.distribution[k] = static_cast<double>(n) / static_cast<double>(classified);
  }
  return report;
}

nlohmann::json to_json(const BiasFeatures& f) {
  return {{"think_count", f.think_count},
          {"prompt_len", f.prompt_len},
          {"output_len", f.output_len},
          {"noop_loop_len", f.noop_loop_len}};
}

nlohmann::json to_json(const BiasVerdict& v) {
  nlohmann::json patterns = nlohmann::json::object();
  for (const auto& p : v.patterns) {
    patterns[std::string(to_string(p.pattern))] = {
        {"ratio", std::isinf(p.ratio) ? nlohmann::json(nullptr) : nlohmann::json(p.ratio)},
        {"score", p.score},
        {"fired", p.fired},
        {"evidence", p.evidence},
        {"evidence_steps", p.evidence_steps}};
  }
  return {{"patterns", patterns},
          {"dominant", v.dominant ? nlohmann::json(std::string(to_string(*v.dominant))) : nlohmann::json(nullptr)}};
}

nlohmann::json to_json(const BiasReport& r) {
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& c : r.failures) {
    failures.push_back({{"task", c.task},
                        {"model", c.model},
                        {"episode", c.episode},
                        {"phase", to_string(c.phase)},
                        {"label", c.label ? nlohmann::json(*c.label) : nlohmann::json(nullptr)},
                        {"features", to_json(c.features)},
                        {"baseline",
                         {{"think_count", c.baseline.think_count},
                          {"prompt_len", c.baseline.prompt_len},
                          {"output_len", c.baseline.output_len},
                          {"traces", c.baseline.traces}}},
                        {"verdict", to_json(c.verdict)},
                        {"warnings", c.warnings}});
  }
  nlohmann::json distribution = nlohmann::json::object();
  nlohmann::json counts = nlohmann::json::object();
  for (auto p : {BiasPattern::kOverthinking, BiasPattern::kCognitiveOverload, BiasPattern::kPerfectionism}) {
    const std::string key(to_string(p));
    const auto n = r.dominant_counts.contains(p) ? r.dominant_counts.at(p) : 0;
    counts[key] = n;
    distribution[key] = r.distribution.contains(p) ? r.distribution.at(p) : 0.0;
  }
  return {{"failures", failures},
          {"dominant_counts", counts},
          {"distribution", distribution},
          {"unclassified", r.unclassified}};
}

std::string evidence_markdown(const BiasReport& r) {
  std::string out = "| Task | Model | Episode | Phase | Dominant | Hits | Evidence |\n|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.failures) {
    std::string hits;
    std::string evidence;
    for (const auto& p : c.verdict.patterns) {
      if (!p.fired) continue;
      hits += (hits.empty() ? "" : ", ") + std::string(to_string(p.pattern));
      evidence += (evidence.empty() ? "" : "; ") + p.evidence;
    }
    std::string cell = evidence.empty() ? "–" : evidence;
    for (std::size_t i = 0; (i = cell.find('|', i)) != std::string::npos; i += 2) cell.replace(i, 1, "\\|");
    out += fmt::format("| {} | {} | {} | {} | {} | {} | {} |\n", c.task, c.model, c.episode, to_string(c.phase),
                       c.verdict.dominant ? to_string(*c.verdict.dominant) : "–", hits.empty() ? "–" : hits, cell);
  }
  out += "\n| Pattern | Count | Share (%) |\n|---|---|---|\n";
  for (auto p : {BiasPattern::kOverthinking, BiasPattern::kCognitiveOverload, BiasPattern::kPerfectionism}) {
    const auto n = r.dominant_counts.contains(p) ? r.dominant_counts.at(p) : 0;
    const double share = r.distribution.contains(p) ? r.distribution.at(p) * 100.0 : 0.0;
    out += fmt::format("| {} | {} | {:.1f} |\n", to_string(p), n, share);
  }
  out += fmt::format("\nUnclassified failures: {}\n", r.unclassified);
  return out;
}

}  // namespace sclab
