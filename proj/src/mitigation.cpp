#include "sclab/mitigation.hpp"

#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>

#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"

namespace sclab {

std::string question_repeating(std::string_view refinement_text, std::string_view question_text) {
  if (refinement_text.empty()) throw Error(ErrorKind::kEmptyInput, "refinement text is empty");
  if (question_text.empty()) throw Error(ErrorKind::kEmptyInput, "question text is empty");
  std::string out;
  out.reserve(refinement_text.size() + 1 + question_text.size());
  out.append(refinement_text);
  out.push_back(' ');
  out.append(question_text);
  return out;
}

InsufficientFlips::InsufficientFlips(std::size_t available)
    : Error(ErrorKind::kInsufficientFlips, fmt::format("only {} correct-to-incorrect episodes available", available)),
      available_(available) {}

GoldLookup gold_lookup(const Dataset& dataset) {
  GoldLookup out;
  for (const auto& q : dataset.questions) out[q.id] = q.gold;
  return out;
}

bool is_correct_to_incorrect(const RunRecord& r, bool gold) {
  if (!r.complete() || !r.initial->label || !r.refinement->label) return false;
  const AnswerLabel want = label_for(gold);
  return *r.initial->label == want && *r.refinement->label != want;
}

void validate_sample(const SftSample& sample, bool gold) {
  const auto& m = sample.messages.messages;
  const Role shape[] = {Role::kUser, Role::kAssistant, Role::kUser, Role::kAssistant};
  if (m.size() != 4) {
    throw Error(ErrorKind::kPrecondition, fmt::format("sample {} has {} turns, expected 4", sample.question_id, m.size()));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (m[i].role != shape[i]) {
      throw Error(ErrorKind::kPrecondition, fmt::format("sample {} turn {} has the wrong role", sample.question_id, i + 1));
    }
  }
  const AnswerLabel want = label_for(gold);
  if (parse_yes_no(m[1].content) != want || parse_yes_no(m[3].content) != want) {
    throw Error(ErrorKind::kPrecondition, "sample " + sample.question_id + " answers disagree with gold");
  }
}

SftDataset build_sft_dataset(const RunSet& runset, std::size_t n, const GoldLookup& gold, const SftOptions& options) {
  if (n < 1) throw Error(ErrorKind::kPrecondition, "SFT dataset size must be at least 1");

  std::vector<const RunRecord*> flips;
  std::set<std::string> ids;
  std::vector<const RunRecord*> ordered;
  for (const auto& r : runset.records) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const RunRecord* a, const RunRecord* b) { return a->dataset_index < b->dataset_index; });
  for (const RunRecord* r : ordered) {
    auto it = gold.find(r->question_id);
    const bool g = it != gold.end() ? it->second : r->gold;
    // One sample per question even when several variants flipped it.
    if (is_correct_to_incorrect(*r, g) && ids.insert(r->question_id).second) flips.push_back(r);
  }
  if (flips.size() < n) throw InsufficientFlips(flips.size());

  if (options.mode == SelectionMode::kSeeded) {
    // Fisher-Yates with a fixed engine so a seed reproduces the same pick everywhere.
    std::mt19937_64 rng(options.seed);
    for (std::size_t i = flips.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(flips[i - 1], flips[j]);
    }
  }

  SftDataset ds;
  ds.source_digest = runset.dataset_digest;
  ds.target_size = n;
  for (std::size_t i = 0; i < n; ++i) {
    const RunRecord& r = *flips[i];
    auto it = gold.find(r.question_id);
    const bool g = it != gold.end() ? it->second : r.gold;
    SftSample s;
    s.question_id = r.question_id;
    s.messages.messages = {
        {Role::kUser, r.initial->prompt},
        {Role::kAssistant, r.initial->text},
        {Role::kUser, r.refinement->prompt},
        {Role::kAssistant, canonical_answer(g)},
    };
    validate_sample(s, g);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::string finetune_jsonl(const SftDataset& dataset) {
  if (dataset.samples.empty()) throw Error(ErrorKind::kPrecondition, "refusing to export an empty SFT dataset");
  if (dataset.samples.size() != dataset.target_size) {
    throw Error(ErrorKind::kPrecondition, "SFT dataset size differs from its target size");
  }
  std::string out;
  for (const auto& s : dataset.samples) {
    if (s.messages.size() != 4) throw Error(ErrorKind::kPrecondition, "sample " + s.question_id + " is not 4-turn");
    out += nlohmann::json{{"messages", s.messages}}.dump();
    out += '\n';
  }
  return out;
}

void export_finetune_file(const SftDataset& dataset, const std::string& path) {
  write_file(path, finetune_jsonl(dataset));
}

std::vector<SftSample> parse_finetune_jsonl(std::string_view text) {
  std::vector<SftSample> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("messages")) {
      throw Error(ErrorKind::kParse, fmt::format("fine-tune line {} is not a messages object", line_no));
    }
    SftSample s;
    s.messages = j["messages"].get<Conversation>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sclab
