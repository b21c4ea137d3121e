#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/conversation.hpp"
#include "sclab/dataset.hpp"
#include "sclab/gateway.hpp"

namespace sclab {

struct StageOutput {
  std::string prompt;  // the user turn sent for this stage
  std::string text;    // the assistant reply
  std::optional<AnswerLabel> label;
  std::vector<TokenLogprob> tokens;

  friend bool operator==(const StageOutput&, const StageOutput&) = default;
};

struct RunRecord {
  std::string question_id;
  std::size_t dataset_index = 0;
  VariantId variant = VariantId::kV1;
  bool gold = false;
  bool question_repeating = false;
  std::string model;
  std::optional<StageOutput> initial;
  std::optional<StageOutput> feedback;
  std::optional<StageOutput> refinement;
  std::optional<std::string> failure;  // "<stage>: <error>" for partial episodes
  // Stage name -> ISO-8601 completion time. Persisted in a sidecar only.
  std::map<std::string, std::string> timestamps;

  bool complete() const { return refinement.has_value() && !failure.has_value(); }
  std::string key() const;

  // The conversation that produced the refinement answer, rebuilt verbatim.
  Conversation refinement_context() const;
};

std::string record_key(std::string_view question_id, VariantId variant);

nlohmann::json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

struct WaverTrace {
  std::string question_id;
  std::vector<AnswerLabel> labels;
  std::vector<std::string> responses;
  std::size_t change_count = 0;
  std::optional<std::string> failure;
};

// Number of adjacent label pairs that differ.
std::size_t count_changes(const std::vector<AnswerLabel>& labels);

nlohmann::json to_json(const WaverTrace& t);
WaverTrace waver_from_json(const nlohmann::json& j);

struct RunOptions {
  DecodingParams params;
  bool question_repeating = false;
  // Threads used for distinct samples; 0 = the gateway's concurrency ceiling.
  int workers = 0;
  const TemplateSet* templates = nullptr;  // nullptr = builtin
};

using StageCallback = std::function<void(const RunRecord&)>;

// One self-correction episode: initial answer, optional feedback, refinement.
// Gateway failures are recorded in RunRecord::failure instead of thrown.
RunRecord run_sample(const QuestionRecord& q, VariantId variant, Gateway& gateway, const RunOptions& options,
                     const StageCallback& on_stage = {});

// Repeated refinement with the same follow-up prompt, appended to one growing conversation.
WaverTrace run_multi_round(const QuestionRecord& q, Gateway& gateway, int rounds = 10,
                           VariantId variant = VariantId::kV1, const RunOptions& options = {});

std::vector<WaverTrace> run_multi_round_dataset(const Dataset& dataset, Gateway& gateway, int rounds,
                                                VariantId variant, const RunOptions& options);

struct RunSet {
  nlohmann::json config;
  std::string dataset_digest;
  std::vector<RunRecord> records;  // dataset order, then variant order

  std::size_t failed_count() const;
};

// On-disk layout of a run directory:
//   runset.jsonl             one RunRecord per line (appended per stage, compacted at the end)
//   runset.config.json       config snapshot + dataset digest
//   runset.timestamps.jsonl  {"key", "timestamps"} per completed stage
class RunSetStore {
 public:
  static constexpr const char* kRecordsFile = "runset.jsonl";
  static constexpr const char* kConfigFile = "runset.config.json";
  static constexpr const char* kTimestampsFile = "runset.timestamps.jsonl";

  // Creates the directory. With resume=false an existing run is replaced.
  // With resume=true, a stored dataset digest must match `dataset_digest`.
  RunSetStore(std::string dir, nlohmann::json config, std::string dataset_digest, bool resume);

  // Latest persisted state per record key.
  const std::map<std::string, RunRecord>& existing() const { return existing_; }

  void append(const RunRecord& record);
  // Rewrites the record file with exactly `runset.records`, in order.
  void finalize(const RunSet& runset);

  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  std::mutex mu_;
  std::map<std::string, RunRecord> existing_;
};

RunSet load_runset(const std::string& dir);

// Runs every (question, variant) pair not already complete in `store`.
RunSet run_dataset(const Dataset& dataset, const std::vector<VariantId>& variants, Gateway& gateway,
                   const RunOptions& options, RunSetStore* store = nullptr);

}  // namespace sclab
