#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/probe.hpp"

namespace sclab {

enum class StepKind { kThink, kAction, kObservation };
std::string_view to_string(StepKind k);

enum class TaskOutcome { kSuccess, kFail, kUnknown };
std::string_view to_string(TaskOutcome o);
TaskOutcome task_outcome_from_string(std::string_view text);

struct AgentStep {
  StepKind kind = StepKind::kAction;
  std::string text;  // without speaker tag or "think:" prefix

  friend bool operator==(const AgentStep&, const AgentStep&) = default;
};

struct AgentTrace {
  std::vector<AgentStep> steps;
  Phase phase = Phase::kInitial;
  std::size_t prompt_char_len = 0;
  std::size_t prompt_word_len = 0;
  TaskOutcome outcome = TaskOutcome::kUnknown;
  std::vector<std::string> warnings;
};

// Line grammar, after an optional "LLM:", "Environment:" or ">" tag:
//   "think: ..."                                   think
//   Environment tag, or "OK.", "Nothing happens.",
//   "On the ...", "You ...", "STATUS: ..."          observation
//   anything else                                  action
// "STATUS: OK" / "STATUS: FAIL" set the outcome. Blank lines are skipped.
AgentTrace parse_agent_log(std::string_view text);

// Canonical text form: "think: x", "> x" and "Environment: x" lines.
std::string render_agent_log(const AgentTrace& trace);

// Character count in code points.
std::size_t utf8_length(std::string_view text);
std::size_t word_count(std::string_view text);

// Records the prompt's length on the trace.
void attach_prompt(AgentTrace& trace, std::string_view prompt);

struct BiasFeatures {
  long long think_count = 0;
  long long prompt_len = 0;
  long long output_len = 0;     // assistant steps (think + action)
  long long noop_loop_len = 0;  // longest run of one repeated action, each answered "Nothing happens."

  friend bool operator==(const BiasFeatures&, const BiasFeatures&) = default;
};

enum class PromptUnit { kChars, kWords };
enum class OutputUnit { kSteps, kWords };

struct FeatureOptions {
  PromptUnit prompt_unit = PromptUnit::kChars;
  OutputUnit output_unit = OutputUnit::kSteps;
};

BiasFeatures bias_features(const AgentTrace& trace, const FeatureOptions& options = {});

// Mean features over a task's successful initial traces.
struct Baseline {
  double think_count = 0.0;
  double prompt_len = 0.0;
  double output_len = 0.0;
  std::size_t traces = 0;
};

Baseline mean_baseline(const std::vector<BiasFeatures>& successes);

enum class BiasPattern { kOverthinking, kCognitiveOverload, kPerfectionism };
std::string_view to_string(BiasPattern p);
BiasPattern bias_pattern_from_string(std::string_view text);

struct BiasThresholds {
  double overthinking = 2.0;
  double cognitive_overload = 3.0;
  double perfectionism = 1.5;
  long long min_noop_loop = 2;

  static BiasThresholds disabled() {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, inf, inf, 2};
  }
};

struct TraceContext {
  Phase phase = Phase::kRefinement;
  bool paired_initial_succeeded = false;
};

struct PatternScore {
  BiasPattern pattern = BiasPattern::kOverthinking;
  double ratio = 0.0;  // feature / baseline
  double score = 0.0;  // ratio / (ratio + threshold), in [0, 1]
  bool fired = false;
  std::string evidence;
  std::vector<std::size_t> evidence_steps;
};

struct BiasVerdict {
  std::vector<PatternScore> patterns;  // one per pattern, fixed order
  std::optional<BiasPattern> dominant;

  std::vector<BiasPattern> hits() const;
};

// A rule fires when its feature exceeds the baseline and reaches threshold x baseline
// (plus the pattern's extra conditions). Dominant = largest ratio / threshold among hits.
BiasVerdict classify_bias(const BiasFeatures& features, const Baseline& baseline, const BiasThresholds& thresholds,
                          const TraceContext& context, const AgentTrace* trace = nullptr);

// One corpus line: {"phase", "prompt", "log", "status", "task", "episode", "model", "label"?}
struct BiasRecord {
  std::string task;
  std::string model;
  std::string episode;
  Phase phase = Phase::kInitial;
  std::string prompt;
  std::string log;
  TaskOutcome status = TaskOutcome::kUnknown;  // overrides the STATUS line when set
  std::optional<std::string> label;
};

std::vector<BiasRecord> parse_bias_corpus(std::string_view jsonl);
std::vector<BiasRecord> load_bias_corpus(const std::string& path);

struct ClassifiedTrace {
  std::string task;
  std::string model;
  std::string episode;
  Phase phase = Phase::kRefinement;
  std::optional<std::string> label;
  BiasFeatures features;
  Baseline baseline;
  BiasVerdict verdict;
  std::vector<std::string> warnings;
};

struct BiasReport {
  std::vector<ClassifiedTrace> failures;
  std::map<BiasPattern, std::size_t> dominant_counts;
  std::map<BiasPattern, double> distribution;  // over failures with a dominant pattern
  std::size_t unclassified = 0;
};

struct BiasOptions {
  BiasThresholds thresholds;
  FeatureOptions features;
};

// Classifies every failed trace against its (task, model) baseline.
// Throws Error(kMissingBaseline) when a failure has no successful initial trace to compare with.
BiasReport analyze_corpus(const std::vector<BiasRecord>& corpus, const BiasOptions& options = {});

nlohmann::json to_json(const BiasFeatures& f);
nlohmann::json to_json(const BiasVerdict& v);
nlohmann::json to_json(const BiasReport& r);

std::string evidence_markdown(const BiasReport& r);

}  // namespace sclab
