#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/gateway.hpp"
#include "sclab/harness.hpp"

namespace sclab {

// Prompt attribution by ablation: the contribution of a prompt segment to an
// output y is LP(prompt without segment, y) - LP(prompt, y).
//
// Sign convention: a more negative score means removing the segment lowers the
// probability of the produced answer, i.e. the segment supports it (rendered
// green). Positive scores oppose the answer (rendered yellow).

enum class SegmentKind { kQuestion, kFirstAnswer, kRefinementPrompt, kOther };
std::string_view to_string(SegmentKind kind);
SegmentKind segment_kind_from_string(std::string_view text);

enum class Granularity { kWord, kSequence };
std::string_view to_string(Granularity g);
Granularity granularity_from_string(std::string_view text);

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

// A conversation flattened into one string: message contents joined by '\n'.
struct PromptLayout {
  std::string rendered;
  std::vector<std::size_t> offsets;  // start of each message in `rendered`

  static PromptLayout of(const Conversation& conv);
  std::size_t message_at(std::size_t pos) const;
};

struct Segment {
  Span span;  // byte range in the rendered prompt
  SegmentKind kind = SegmentKind::kOther;
  std::string text;
  std::size_t message = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

// Splits text into word spans. Pluggable so exact tokenizers can replace the
// default whitespace split.
using WordSplitter = std::function<std::vector<Span>(std::string_view)>;
std::vector<Span> split_whitespace(std::string_view text);

struct Region {
  std::size_t message = 0;
  Span local;  // byte range inside the message content
  SegmentKind kind = SegmentKind::kOther;
};

// Sequence regions of a completed episode: the question, the instruction
// residue, the first answer, any feedback turns, the refinement prompt and (with
// question repeating) the repeated question.
std::vector<Region> episode_regions(const RunRecord& episode, const TemplateSet& templates = TemplateSet::builtin());

std::vector<Segment> segments_from_regions(const Conversation& conv, const std::vector<Region>& regions,
                                           Granularity granularity, const WordSplitter& splitter = split_whitespace);

std::vector<Segment> segment_prompt(const RunRecord& episode, Granularity granularity,
                                    const WordSplitter& splitter = split_whitespace);

// The segment's text replaced by whitespace: the whitespace run around the cut
// collapses to a single space. Keeps what is needed to undo the cut exactly.
struct Ablation {
  Conversation conversation;
  std::size_t message = 0;
  std::size_t at = 0;         // position of the inserted space in the message
  std::string original_run;   // surrounding whitespace + removed text + whitespace

  Conversation restore() const;
};

// Throws Error(kPrecondition) unless `target` matches `x` at its span.
Ablation ablate(const Conversation& x, const Segment& target);

struct LpEstimate {
  double value = 0.0;
  bool exact = true;
  std::vector<double> per_token;
};

// |y| = 1: first-token candidate score. |y| > 1: mean over k of LP(x + y[0..k), y[k]),
// where the partial output is an assistant prefill ending in the separator.
LpEstimate lp_of_output(const Conversation& x, const std::vector<std::string>& y, Gateway& gateway);

struct PactScore {
  double pact = 0.0;
  bool exact = true;
};

PactScore pact_score(const Conversation& x, const Segment& target, const std::vector<std::string>& y,
                     Gateway& gateway);

enum class Outcome { kOverturned, kRetained, kOther };
std::string_view to_string(Outcome o);
Outcome outcome_from_string(std::string_view text);
Outcome episode_outcome(const RunRecord& episode);

struct AttributionEntry {
  Segment segment;
  double pact = 0.0;
  bool exact = false;
  std::optional<std::string> error;
};

struct AttributionMap {
  std::string question_id;
  VariantId variant = VariantId::kV1;
  Granularity granularity = Granularity::kSequence;
  Outcome outcome = Outcome::kOther;
  std::string prompt;  // rendered prompt the spans refer to
  std::vector<std::string> target_output;
  double baseline_lp = 0.0;
  bool baseline_exact = true;
  std::vector<AttributionEntry> entries;  // ordered by span start
  bool partial = false;

  bool exact() const;
};

struct AttributionOptions {
  std::size_t output_tokens = 1;  // length of y taken from the refinement answer
  int workers = 1;
  WordSplitter splitter = split_whitespace;
};

AttributionMap attribution_map(const RunRecord& episode, Granularity granularity, Gateway& gateway,
                               const AttributionOptions& options = {});

nlohmann::json to_json(const AttributionMap& m);
AttributionMap attribution_from_json(const nlohmann::json& j);

// Per outcome class, the share of maps whose most supportive sequence
// (lowest score) is the question, the first answer or the refinement prompt.
// A class without maps is absent (undefined).
struct DominantDistribution {
  std::map<Outcome, std::map<SegmentKind, double>> shares;
  std::map<Outcome, std::size_t> counts;
};

DominantDistribution dominant_sequence_distribution(const std::vector<AttributionMap>& maps);
nlohmann::json to_json(const DominantDistribution& d);

}  // namespace sclab
