#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/bias.hpp"
#include "sclab/conversation.hpp"
#include "sclab/gateway.hpp"
#include "sclab/pact.hpp"
#include "sclab/probe.hpp"

namespace sclab {

// Refinement wording used for V1: the short form or the longer form that
// repeats the answer-format instruction.
enum class V1Wording { kShort, kLong };

struct LabConfig {
  BackendSpec backend;
  std::string dataset;
  std::vector<VariantId> variants{VariantId::kV1};
  int rounds = 10;
  VariantId waver_variant = VariantId::kV1;
  bool question_repeating = false;
  V1Wording v1_wording = V1Wording::kShort;
  std::string templates_dir;  // empty = builtin templates
  std::string out = "out";
  int concurrency = 4;        // worker threads over samples
  DecodingParams decoding;

  Granularity pact_granularity = Granularity::kSequence;
  std::size_t pact_output_tokens = 1;

  int probe_cutoff = kDefaultLayerCutoff;
  std::string probe_normalizer = "softmax";
  bool probe_require_footer = false;

  std::size_t sft_size = 10;
  std::string sft_selection = "dataset_order";
  std::uint64_t sft_seed = 0;

  BiasThresholds bias;
  std::string bias_prompt_unit = "chars";
  std::string bias_output_unit = "steps";

  // Checks ranges, names and that referenced files exist. Throws Error(kConfig).
  // Commands that never call a model skip the backend checks.
  void validate(bool needs_backend = true) const;

  TemplateSet templates() const;
  FeatureOptions bias_feature_options() const;
};

// One settable configuration value. The same table drives the JSON loader and
// the command-line flags, so every key has a flag.
struct ConfigField {
  std::string key;   // dotted JSON path, e.g. "backend.model"
  std::string flag;  // long command-line flag, e.g. "--backend-model"
  std::string help;
  std::function<void(LabConfig&, const nlohmann::json&)> apply;
  std::function<nlohmann::json(const LabConfig&)> read;
};

const std::vector<ConfigField>& config_fields();

// Relative paths are resolved against `base_dir`.
LabConfig config_from_json(const nlohmann::json& j, const std::string& base_dir = {});
LabConfig load_config(const std::string& path);
nlohmann::json to_json(const LabConfig& c);

// Applies one "--flag value" override; the value is parsed as JSON when possible,
// otherwise taken as a string.
void apply_override(LabConfig& config, const ConfigField& field, const std::string& value);

}  // namespace sclab
