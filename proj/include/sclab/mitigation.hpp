#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sclab/conversation.hpp"
#include "sclab/errors.hpp"
#include "sclab/harness.hpp"

namespace sclab {

// Appends the original question to the refinement prompt, separated by one space.
// The transform is literal: a prompt that already ends with the question gets it twice.
std::string question_repeating(std::string_view refinement_text, std::string_view question_text);

// user(initial prompt), assistant(answer), user(refinement prompt), assistant(answer);
// both answers carry the gold label.
struct SftSample {
  std::string question_id;
  Conversation messages;

  friend bool operator==(const SftSample&, const SftSample&) = default;
};

struct SftDataset {
  std::vector<SftSample> samples;
  std::string source_digest;
  std::size_t target_size = 0;
};

enum class SelectionMode { kDatasetOrder, kSeeded };

struct SftOptions {
  SelectionMode mode = SelectionMode::kDatasetOrder;
  std::uint64_t seed = 0;
};

class InsufficientFlips : public Error {
 public:
  explicit InsufficientFlips(std::size_t available);
  std::size_t available() const { return available_; }

 private:
  std::size_t available_;
};

// question id -> gold answer
using GoldLookup = std::map<std::string, bool>;
GoldLookup gold_lookup(const Dataset& dataset);

// True for a complete record whose first answer was right and refined answer wrong.
bool is_correct_to_incorrect(const RunRecord& r, bool gold);

// Builds n answer-keeping conversations from the first n correct-to-incorrect
// episodes (dataset order), rewriting the second answer to the gold label.
SftDataset build_sft_dataset(const RunSet& runset, std::size_t n, const GoldLookup& gold,
                             const SftOptions& options = {});

// Throws Error(kPrecondition) when a sample breaks the 4-turn / gold-answer shape.
void validate_sample(const SftSample& sample, bool gold);

// One {"messages":[...]} object per line, UTF-8, trailing newline.
std::string finetune_jsonl(const SftDataset& dataset);
void export_finetune_file(const SftDataset& dataset, const std::string& path);
std::vector<SftSample> parse_finetune_jsonl(std::string_view text);

}  // namespace sclab
