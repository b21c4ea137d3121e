#include "sclab/pact.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "sclab/errors.hpp"
#include "sclab/scripted_model.hpp"

namespace sclab {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

constexpr bool is_sequence_kind(SegmentKind k) {
  return k == SegmentKind::kQuestion || k == SegmentKind::kFirstAnswer || k == SegmentKind::kRefinementPrompt;
}

}  // namespace

std::string_view to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::kQuestion: return "question";
    case SegmentKind::kFirstAnswer: return "first_answer";
    case SegmentKind::kRefinementPrompt: return "refinement_prompt";
    case SegmentKind::kOther: return "other";
  }
  return "other";
}

SegmentKind segment_kind_from_string(std::string_view text) {
  for (SegmentKind k : {SegmentKind::kQuestion, SegmentKind::kFirstAnswer, SegmentKind::kRefinementPrompt,
                        SegmentKind::kOther}) {
    if (to_string(k) == text) return k;
  }
  throw Error(ErrorKind::kParse, "unknown segment kind '" + std::string(text) + "'");
}

std::string_view to_string(Granularity g) { return g == Granularity::kWord ? "word" : "sequence"; }

Granularity granularity_from_string(std::string_view text) {
  if (text == "word") return Granularity::kWord;
  if (text == "sequence") return Granularity::kSequence;
  throw Error(ErrorKind::kConfig, "granularity must be 'word' or 'sequence', got '" + std::string(text) + "'");
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::kOverturned: return "overturned";
    case Outcome::kRetained: return "retained";
    case Outcome::kOther: return "other";
  }
  return "other";
}

Outcome outcome_from_string(std::string_view text) {
  if (text == "overturned") return Outcome::kOverturned;
  if (text == "retained") return Outcome::kRetained;
  if (text == "other") return Outcome::kOther;
  throw Error(ErrorKind::kParse, "unknown outcome '" + std::string(text) + "'");
}

PromptLayout PromptLayout::of(const Conversation& conv) {
  PromptLayout layout;
  for (std::size_t i = 0; i < conv.messages.size(); ++i) {
    if (i > 0) layout.rendered.push_back('\n');
    layout.offsets.push_back(layout.rendered.size());
    layout.rendered += conv.messages[i].content;
  }
  return layout;
}

std::size_t PromptLayout::message_at(std::size_t pos) const {
  auto it = std::upper_bound(offsets.begin(), offsets.end(), pos);
  return it == offsets.begin() ? 0 : static_cast<std::size_t>(it - offsets.begin()) - 1;
}

std::vector<Span> split_whitespace(std::string_view text) {
  std::vector<Span> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    out.push_back({i, j});
    i = j;
  }
  return out;
}

std::vector<Region> episode_regions(const RunRecord& episode, const TemplateSet& templates) {
  if (!episode.complete() || !episode.initial) {
    throw Error(ErrorKind::kPrecondition, "episode " + episode.question_id + " is incomplete");
  }
  if (trim(episode.initial->text).empty()) {
    throw Error(ErrorKind::kPrecondition, "episode " + episode.question_id + " has an empty first answer");
  }
  const Conversation conv = episode.refinement_context();
  std::vector<Region> regions;
  auto add = [&](std::size_t msg, std::size_t b, std::size_t e, SegmentKind kind) {
    // Regions exclude surrounding whitespace.
    const std::string& content = conv.messages[msg].content;
    while (b < e && is_space(content[b])) ++b;
    while (e > b && is_space(content[e - 1])) --e;
    if (b < e) regions.push_back({msg, {b, e}, kind});
  };

  // Initial prompt: question followed by the answer-format instruction.
  const std::string& first = conv.messages[0].content;
  const std::string suffix = instruction_suffix(templates);
  const std::size_t at = suffix.empty() ? std::string::npos : first.rfind(suffix);
  if (at != std::string::npos && at + suffix.size() == first.size()) {
    add(0, 0, at, SegmentKind::kQuestion);
    add(0, at, first.size(), SegmentKind::kOther);
  } else {
    add(0, 0, first.size(), SegmentKind::kQuestion);
  }
  add(1, 0, conv.messages[1].content.size(), SegmentKind::kFirstAnswer);

  std::size_t last = conv.messages.size() - 1;
  for (std::size_t m = 2; m < last; ++m) add(m, 0, conv.messages[m].content.size(), SegmentKind::kOther);

  const std::string& refine = conv.messages[last].content;
  const std::string question = regions.front().kind == SegmentKind::kQuestion
                                   ? first.substr(regions.front().local.begin, regions.front().local.size())
                                   : std::string();
  const std::string repeated = " " + question;
  if (episode.question_repeating && !question.empty() && refine.size() > repeated.size() &&
      refine.compare(refine.size() - repeated.size(), repeated.size(), repeated) == 0) {
    add(last, 0, refine.size() - repeated.size(), SegmentKind::kRefinementPrompt);
    add(last, refine.size() - question.size(), refine.size(), SegmentKind::kQuestion);
  } else {
    add(last, 0, refine.size(), SegmentKind::kRefinementPrompt);
  }
  return regions;
}

std::vector<Segment> segments_from_regions(const Conversation& conv, const std::vector<Region>& regions,
                                           Granularity granularity, const WordSplitter& splitter) {
  const PromptLayout layout = PromptLayout::of(conv);
  std::vector<Segment> out;
  for (const Region& r : regions) {
    const std::string& content = conv.messages.at(r.message).content;
    const std::size_t base = layout.offsets[r.message];
    if (granularity == Granularity::kSequence) {
      out.push_back({{base + r.local.begin, base + r.local.end},
                     r.kind,
                     content.substr(r.local.begin, r.local.size()),
                     r.message});
      continue;
    }
    const std::string_view region_text = std::string_view(content).substr(r.local.begin, r.local.size());
    for (const Span& w : splitter(region_text)) {
      const std::size_t b = r.local.begin + w.begin;
      out.push_back({{base + b, base + b + w.size()}, r.kind, content.substr(b, w.size()), r.message});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Segment& a, const Segment& b) { return a.span.begin < b.span.begin; });
  return out;
}

std::vector<Segment> segment_prompt(const RunRecord& episode, Granularity granularity, const WordSplitter& splitter) {
  return segments_from_regions(episode.refinement_context(), episode_regions(episode), granularity, splitter);
}

Conversation Ablation::restore() const {
  Conversation out = conversation;
  out.messages.at(message).content.replace(at, 1, original_run);
  return out;
}

Ablation ablate(const Conversation& x, const Segment& target) {
  if (target.message >= x.messages.size()) {
    throw Error(ErrorKind::kPrecondition, "segment refers to a message outside the prompt");
  }
  const PromptLayout layout = PromptLayout::of(x);
  const std::string& content = x.messages[target.message].content;
  const std::size_t base = layout.offsets[target.message];
  if (target.span.begin < base || target.span.end > base + content.size() || target.span.end < target.span.begin ||
      target.span.size() == 0 ||
      content.compare(target.span.begin - base, target.span.size(), target.text) != 0 ||
      target.text.size() != target.span.size()) {
    throw Error(ErrorKind::kPrecondition,
                fmt::format("segment '{}' is not part of this prompt's segmentation", target.text));
  }
  const std::size_t b = target.span.begin - base;
  const std::size_t e = target.span.end - base;
  std::size_t left = b;
  while (left > 0 && is_space(content[left - 1])) --left;
  std::size_t right = e;
  while (right < content.size() && is_space(content[right])) ++right;

  Ablation a;
  a.conversation = x;
  a.message = target.message;
  a.at = left;
  a.original_run = content.substr(left, right - left);
  a.conversation.messages[target.message].content = content.substr(0, left) + " " + content.substr(right);
  return a;
}

LpEstimate lp_of_output(const Conversation& x, const std::vector<std::string>& y, Gateway& gateway) {
  if (y.empty()) throw Error(ErrorKind::kPrecondition, "output must have at least one token");
  if (y.size() > 1 && !gateway.scores_continuations()) {
    throw Error(ErrorKind::kUnsupportedMultiToken,
                fmt::format("backend '{}' cannot score a {}-token output", gateway.model_id(), y.size()));
  }
  LpEstimate est;
  double sum = 0.0;
  std::vector<std::string> prefix;
  for (const std::string& token : y) {
    const auto scores = gateway.score_candidates(continuation_prompt(x, prefix), {token});
    const CandidateScore& s = scores.at(token);
    est.per_token.push_back(s.logprob);
    est.exact = est.exact && s.exact;
    sum += s.logprob;
    prefix.push_back(token);
  }
  est.value = y.size() == 1 ? est.per_token.front() : sum / static_cast<double>(y.size());
  return est;
}

PactScore pact_score(const Conversation& x, const Segment& target, const std::vector<std::string>& y,
                     Gateway& gateway) {
  const Ablation ablated = ablate(x, target);
  const LpEstimate full = lp_of_output(x, y, gateway);
  const LpEstimate without = lp_of_output(ablated.conversation, y, gateway);
  return {without.value - full.value, full.exact && without.exact};
}

Outcome episode_outcome(const RunRecord& episode) {
  if (!episode.complete() || !episode.initial->label || !episode.refinement->label) return Outcome::kOther;
  const AnswerLabel want = label_for(episode.gold);
  if (*episode.initial->label != want) return Outcome::kOther;
  return *episode.refinement->label == want ? Outcome::kRetained : Outcome::kOverturned;
}

bool AttributionMap::exact() const {
  if (partial || !baseline_exact) return false;
  return std::all_of(entries.begin(), entries.end(), [](const AttributionEntry& e) { return e.exact; });
}

AttributionMap attribution_map(const RunRecord& episode, Granularity granularity, Gateway& gateway,
                               const AttributionOptions& options) {
  const Conversation x = episode.refinement_context();
  const std::vector<Segment> segments =
      segments_from_regions(x, episode_regions(episode), granularity, options.splitter);

  AttributionMap map;
  map.question_id = episode.question_id;
  map.variant = episode.variant;
  map.granularity = granularity;
  map.outcome = episode_outcome(episode);
  map.prompt = PromptLayout::of(x).rendered;

  const auto& tokens = episode.refinement->tokens;
  for (std::size_t i = 0; i < tokens.size() && i < std::max<std::size_t>(1, options.output_tokens); ++i) {
    map.target_output.push_back(tokens[i].token);
  }
  if (map.target_output.empty()) {
    const auto t = trim(episode.refinement->text);
    if (t.empty()) throw Error(ErrorKind::kPrecondition, "episode " + episode.question_id + " has no final answer");
    map.target_output.emplace_back(t);
  }

  for (const Segment& s : segments) map.entries.push_back({s, 0.0, false, std::nullopt});

  LpEstimate baseline;
  try {
    baseline = lp_of_output(x, map.target_output, gateway);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kUnsupportedMultiToken || e.kind() == ErrorKind::kPrecondition) throw;
    map.partial = true;
    for (auto& entry : map.entries) entry.error = std::string("baseline: ") + e.what();
    return map;
  }
  map.baseline_lp = baseline.value;
  map.baseline_exact = baseline.exact;

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < map.entries.size(); i = next++) {
      AttributionEntry& entry = map.entries[i];
      try {
        const LpEstimate without = lp_of_output(ablate(x, entry.segment).conversation, map.target_output, gateway);
        entry.pact = without.value - baseline.value;
        entry.exact = baseline.exact && without.exact;
      } catch (const std::exception& e) {
        entry.error = e.what();
      }
    }
  };
  const int workers = std::max(1, options.workers);
  if (workers == 1 || map.entries.size() < 2) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  map.partial = std::any_of(map.entries.begin(), map.entries.end(), [](const auto& e) { return e.error.has_value(); });
  return map;
}

nlohmann::json to_json(const AttributionMap& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j{{"begin", e.segment.span.begin},
                     {"end", e.segment.span.end},
                     {"message", e.segment.message},
                     {"kind", to_string(e.segment.kind)},
                     {"text", e.segment.text},
                     {"pact", e.pact},
                     {"exact", e.exact}};
    if (e.error) j["error"] = *e.error;
    entries.push_back(std::move(j));
  }
  return {
      {"question_id", m.question_id},
      {"variant", to_string(m.variant)},
      {"granularity", to_string(m.granularity)},
      {"outcome", to_string(m.outcome)},
      {"prompt", m.prompt},
      {"target_output", m.target_output},
      {"baseline_lp", m.baseline_lp},
      {"baseline_exact", m.baseline_exact},
      {"partial", m.partial},
      {"exact", m.exact()},
      {"entries", entries},
  };
}

AttributionMap attribution_from_json(const nlohmann::json& j) {
  AttributionMap m;
  m.question_id = j.at("question_id").get<std::string>();
  m.variant = variant_from_string(j.value("variant", std::string("V1")));
  m.granularity = granularity_from_string(j.value("granularity", std::string("sequence")));
  m.outcome = outcome_from_string(j.value("outcome", std::string("other")));
  m.prompt = j.value("prompt", std::string());
  m.target_output = j.value("target_output", std::vector<std::string>{});
  m.baseline_lp = j.value("baseline_lp", 0.0);
  m.baseline_exact = j.value("baseline_exact", true);
  m.partial = j.value("partial", false);
  for (const auto& e : j.at("entries")) {
    AttributionEntry entry;
    entry.segment.span = {e.at("begin").get<std::size_t>(), e.at("end").get<std::size_t>()};
    entry.segment.message = e.value("message", std::size_t{0});
    entry.segment.kind = segment_kind_from_string(e.value("kind", std::string("other")));
    entry.segment.text = e.at("text").get<std::string>();
    entry.pact = e.at("pact").get<double>();
    entry.exact = e.value("exact", false);
    if (e.contains("error")) entry.error = e["error"].get<std::string>();
    m.entries.push_back(std::move(entry));
  }
  return m;
}

DominantDistribution dominant_sequence_distribution(const std::vector<AttributionMap>& maps) {
  DominantDistribution d;
  std::map<Outcome, std::map<SegmentKind, std::size_t>> tally;
  for (const AttributionMap& m : maps) {
    if (m.granularity != Granularity::kSequence) {
      throw Error(ErrorKind::kPrecondition, "dominant-sequence counting needs sequence-level maps");
    }
    if (m.outcome == Outcome::kOther) continue;
    const AttributionEntry* best = nullptr;
    for (const auto& e : m.entries) {
      if (e.error || !is_sequence_kind(e.segment.kind)) continue;
      if (best == nullptr || e.pact < best->pact) best = &e;
    }
    if (best == nullptr) continue;
    ++tally[m.outcome][best->segment.kind];
    ++d.counts[m.outcome];
  }
  for (const auto& [outcome, kinds] : tally) {
    const double n = static_cast<double>(d.counts[outcome]);
    auto& shares = d.shares[outcome];
    for (SegmentKind k : {SegmentKind::kQuestion, SegmentKind::kFirstAnswer, SegmentKind::kRefinementPrompt}) {
      auto it = kinds.find(k);
      shares[k] = it == kinds.end() ? 0.0 : static_cast<double>(it->second) / n;
    }
  }
  return d;
}

nlohmann::json to_json(const DominantDistribution& d) {
  nlohmann::json out = nlohmann::json::object();
  for (Outcome o : {Outcome::kOverturned, Outcome::kRetained}) {
    auto it = d.shares.find(o);
    if (it == d.shares.end()) {
      out[std::string(to_string(o))] = nullptr;
      continue;
    }
    nlohmann::json shares = nlohmann::json::object();
    for (const auto& [k, v] : it->second) shares[std::string(to_string(k))] = v;
    out[std::string(to_string(o))] = {{"samples", d.counts.at(o)}, {"shares", shares}};
  }
  return out;
}

}  // namespace sclab
