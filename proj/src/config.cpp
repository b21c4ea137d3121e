#include "sclab/config.hpp"

#include <algorithm>
#include <filesystem>

#include <fmt/format.h>

#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"

namespace sclab {

namespace {

namespace fs = std::filesystem;

template <typename T>
T as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::kConfig, fmt::format("'{}' has the wrong type: {}", key, j.dump()));
  }
}

std::string flag_for(std::string key) {
  for (auto& c : key) {
    if (c == '.' || c == '_') c = '-';
  }
  return "--" + key;
}

ConfigField field(std::string key, std::string help, std::function<void(LabConfig&, const nlohmann::json&)> apply,
                  std::function<nlohmann::json(const LabConfig&)> read) {
  ConfigField f;
  f.flag = flag_for(key);
  f.key = std::move(key);
  f.help = std::move(help);
  f.apply = std::move(apply);
  f.read = std::move(read);
  return f;
}

#define SCLAB_SIMPLE_FIELD(key, member, type, help)                                                   \
  field(                                                                                              \
      key, help, [](LabConfig& c, const nlohmann::json& j) { c.member = as<type>(j, key); },         \
      [](const LabConfig& c) { return nlohmann::json(c.member); })

std::vector<ConfigField> build_fields() {
  std::vector<ConfigField> f;
  f.push_back(field(
      "backend.kind", "backend type: scripted or http",
      [](LabConfig& c, const nlohmann::json& j) {
        const auto v = as<std::string>(j, "backend.kind");
        if (v == "scripted") {
          c.backend.kind = BackendKind::kScripted;
        } else if (v == "http") {
          c.backend.kind = BackendKind::kHttp;
        } else {
          throw Error(ErrorKind::kConfig, "backend.kind must be 'scripted' or 'http', got '" + v + "'");
        }
      },
      [](const LabConfig& c) { return c.backend.kind == BackendKind::kHttp ? "http" : "scripted"; }));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.endpoint", backend.endpoint, std::string,
                                 "chat-completions base URL (http backend)"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.model", backend.model, std::string, "model identifier"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.auth_env", backend.auth_env, std::string,
                                 "name of the environment variable holding the API token"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.scripted_model", backend.scripted_model, std::string,
                                 "scripted model rule file (scripted backend)"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.max_concurrency", backend.max_concurrency, int,
                                 "ceiling on in-flight requests"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.requests_per_second", backend.requests_per_second, double,
                                 "request rate budget, 0 = unlimited"));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.scores_continuations", backend.scores_continuations, bool,
                                 "endpoint honours assistant prefills for multi-token scoring"));
  f.push_back(field(
      "backend.timeout_ms", "per-request timeout in milliseconds",
      [](LabConfig& c, const nlohmann::json& j) {
        c.backend.timeout = std::chrono::milliseconds(as<long long>(j, "backend.timeout_ms"));
      },
      [](const LabConfig& c) { return nlohmann::json(c.backend.timeout.count()); }));
  f.push_back(SCLAB_SIMPLE_FIELD("backend.retry.max_attempts", backend.retry.max_attempts, int,
                                 "attempts per request including the first"));
  f.push_back(field(
      "backend.retry.backoff_ms", "retry delays in milliseconds, e.g. [500,2000]",
      [](LabConfig& c, const nlohmann::json& j) {
        c.backend.retry.backoff.clear();
        for (auto ms : as<std::vector<long long>>(j, "backend.retry.backoff_ms")) {
          c.backend.retry.backoff.emplace_back(ms);
        }
      },
      [](const LabConfig& c) {
        nlohmann::json out = nlohmann::json::array();
        for (auto d : c.backend.retry.backoff) out.push_back(d.count());
        return out;
      }));
  f.push_back(SCLAB_SIMPLE_FIELD("dataset", dataset, std::string, "question dataset (JSON lines)"));
  f.push_back(field(
      "variants", "refinement prompt variants, e.g. [\"V1\",\"V3\"]",
      [](LabConfig& c, const nlohmann::json& j) {
        c.variants.clear();
        if (j.is_string()) {
          c.variants.push_back(variant_from_string(j.get<std::string>()));
          return;
        }
        for (const auto& v : as<std::vector<std::string>>(j, "variants")) c.variants.push_back(variant_from_string(v));
      },
      [](const LabConfig& c) {
        nlohmann::json out = nlohmann::json::array();
        for (auto v : c.variants) out.push_back(std::string(to_string(v)));
        return out;
      }));
  f.push_back(SCLAB_SIMPLE_FIELD("rounds", rounds, int, "refinement rounds for wavering runs"));
  f.push_back(field(
      "waver_variant", "variant repeated in wavering runs",
      [](LabConfig& c, const nlohmann::json& j) {
        c.waver_variant = variant_from_string(as<std::string>(j, "waver_variant"));
      },
      [](const LabConfig& c) { return std::string(to_string(c.waver_variant)); }));
  f.push_back(SCLAB_SIMPLE_FIELD("question_repeating", question_repeating, bool,
                                 "append the question to every refinement prompt"));
  f.push_back(field(
      "v1_wording", "V1 refinement wording: short or long",
      [](LabConfig& c, const nlohmann::json& j) {
        const auto v = as<std::string>(j, "v1_wording");
        if (v == "short") {
          c.v1_wording = V1Wording::kShort;
        } else if (v == "long") {
          c.v1_wording = V1Wording::kLong;
        } else {
          throw Error(ErrorKind::kConfig, "v1_wording must be 'short' or 'long', got '" + v + "'");
        }
      },
      [](const LabConfig& c) { return c.v1_wording == V1Wording::kLong ? "long" : "short"; }));
  f.push_back(SCLAB_SIMPLE_FIELD("templates_dir", templates_dir, std::string,
                                 "directory of prompt templates replacing the builtin set"));
  f.push_back(SCLAB_SIMPLE_FIELD("out", out, std::string, "output directory"));
  f.push_back(SCLAB_SIMPLE_FIELD("concurrency", concurrency, int, "worker threads over samples"));
  f.push_back(SCLAB_SIMPLE_FIELD("decoding.temperature", decoding.temperature, double, "sampling temperature"));
  f.push_back(SCLAB_SIMPLE_FIELD("decoding.max_tokens", decoding.max_tokens, int, "maximum generated tokens"));
  f.push_back(SCLAB_SIMPLE_FIELD("decoding.top_logprobs", decoding.top_logprobs, int,
                                 "alternatives requested per token (at most 20)"));
  f.push_back(field(
      "pact.granularity", "attribution segments: word or sequence",
      [](LabConfig& c, const nlohmann::json& j) {
        try {
          c.pact_granularity = granularity_from_string(as<std::string>(j, "pact.granularity"));
        } catch (const Error& e) {
          throw Error(ErrorKind::kConfig, e.what());
        }
      },
      [](const LabConfig& c) { return std::string(to_string(c.pact_granularity)); }));
  f.push_back(SCLAB_SIMPLE_FIELD("pact.output_tokens", pact_output_tokens, std::size_t,
                                 "answer tokens scored by attribution"));
  f.push_back(SCLAB_SIMPLE_FIELD("probe.cutoff", probe_cutoff, int, "lowest layer used by probe analytics"));
  f.push_back(SCLAB_SIMPLE_FIELD("probe.normalizer", probe_normalizer, std::string,
                                 "two-class normalization: softmax or proportional"));
  f.push_back(SCLAB_SIMPLE_FIELD("probe.require_footer", probe_require_footer, bool,
                                 "reject trace files without the end-of-traces footer"));
  f.push_back(SCLAB_SIMPLE_FIELD("sft.size", sft_size, std::size_t, "fine-tuning samples to build"));
  f.push_back(SCLAB_SIMPLE_FIELD("sft.selection", sft_selection, std::string,
                                 "sample selection: dataset_order or seeded"));
  f.push_back(SCLAB_SIMPLE_FIELD("sft.seed", sft_seed, std::uint64_t, "seed for seeded selection"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.overthinking", bias.overthinking, double,
                                 "overthinking threshold (x baseline think count)"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.cognitive_overload", bias.cognitive_overload, double,
                                 "cognitive overload threshold (x baseline prompt length)"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.perfectionism", bias.perfectionism, double,
                                 "perfectionism threshold (x baseline output length)"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.min_noop_loop", bias.min_noop_loop, long long,
                                 "shortest no-op loop counted as cognitive overload"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.prompt_unit", bias_prompt_unit, std::string,
                                 "prompt length unit: chars or words"));
  f.push_back(SCLAB_SIMPLE_FIELD("bias.output_unit", bias_output_unit, std::string,
                                 "output length unit: steps or words"));
  return f;
}

#undef SCLAB_SIMPLE_FIELD

void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else {
      out.emplace_back(key, v);
    }
  }
}

std::string resolve(const std::string& path, const std::string& base) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

void require_file(const std::string& path, const std::string& what) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorKind::kConfig, fmt::format("{} '{}' does not exist", what, path));
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> kFields = build_fields();
  return kFields;
}

LabConfig config_from_json(const nlohmann::json& j, const std::string& base_dir) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "config must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> values;
  flatten(j, "", values);
  LabConfig c;
  for (const auto& [key, value] : values) {
    const auto& fields = config_fields();
    auto it = std::find_if(fields.begin(), fields.end(), [&](const ConfigField& f) { return f.key == key; });
    if (it == fields.end()) throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
    it->apply(c, value);
  }
  c.dataset = resolve(c.dataset, base_dir);
  c.backend.scripted_model = resolve(c.backend.scripted_model, base_dir);
  c.templates_dir = resolve(c.templates_dir, base_dir);
  return c;
}

LabConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorKind::kConfig, "config '" + path + "' is not valid JSON");
  return config_from_json(j, fs::path(path).parent_path().string());
}

nlohmann::json to_json(const LabConfig& c) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& f : config_fields()) {
    std::string pointer = "/" + f.key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    out[nlohmann::json::json_pointer(pointer)] = f.read(c);
  }
  return out;
}

void apply_override(LabConfig& config, const ConfigField& field, const std::string& value) {
  auto j = nlohmann::json::parse(value, nullptr, false);
  if (j.is_discarded()) j = value;
  field.apply(config, j);
}

void LabConfig::validate(bool needs_backend) const {
  try {
    if (needs_backend) backend.validate();
    decoding.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  if (needs_backend && backend.kind == BackendKind::kScripted) require_file(backend.scripted_model, "scripted model");
  if (!dataset.empty()) require_file(dataset, "dataset");
  if (!templates_dir.empty()) {
    std::error_code ec;
    if (!fs::is_directory(templates_dir, ec)) {
      throw Error(ErrorKind::kConfig, "templates directory '" + templates_dir + "' does not exist");
    }
  }
  if (variants.empty()) throw Error(ErrorKind::kConfig, "variants is empty");
  for (std::size_t i = 0; i < variants.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (variants[i] == variants[k]) {
        throw Error(ErrorKind::kConfig, fmt::format("variant {} listed twice", to_string(variants[i])));
      }
    }
  }
  if (rounds < 2) throw Error(ErrorKind::kConfig, "rounds must be at least 2");
  if (waver_variant == VariantId::kV4 || waver_variant == VariantId::kV5) {
    throw Error(ErrorKind::kConfig, "waver_variant must be a variant without a feedback stage");
  }
  if (concurrency < 1) throw Error(ErrorKind::kConfig, "concurrency must be at least 1");
  if (out.empty()) throw Error(ErrorKind::kConfig, "out is empty");
  if (pact_output_tokens < 1) throw Error(ErrorKind::kConfig, "pact.output_tokens must be at least 1");
  if (probe_cutoff < 0) throw Error(ErrorKind::kConfig, "probe.cutoff must be non-negative");
  if (probe_normalizer != "softmax" && probe_normalizer != "proportional") {
    throw Error(ErrorKind::kConfig, "probe.normalizer must be 'softmax' or 'proportional'");
  }
  if (sft_selection != "dataset_order" && sft_selection != "seeded") {
    throw Error(ErrorKind::kConfig, "sft.selection must be 'dataset_order' or 'seeded'");
  }
  if (sft_size < 1) throw Error(ErrorKind::kConfig, "sft.size must be at least 1");
  for (double t : {bias.overthinking, bias.cognitive_overload, bias.perfectionism}) {
    if (!(t > 0.0)) throw Error(ErrorKind::kConfig, "bias thresholds must be positive");
  }
  if (bias_prompt_unit != "chars" && bias_prompt_unit != "words") {
    throw Error(ErrorKind::kConfig, "bias.prompt_unit must be 'chars' or 'words'");
  }
  if (bias_output_unit != "steps" && bias_output_unit != "words") {
    throw Error(ErrorKind::kConfig, "bias.output_unit must be 'steps' or 'words'");
  }
  (void)templates();
}

TemplateSet LabConfig::templates() const {
  TemplateSet set = templates_dir.empty() ? TemplateSet::builtin() : TemplateSet::load_dir(templates_dir);
  if (v1_wording == V1Wording::kLong) set = set.with("v1_refinement", set.get("refine_confirm_long"));
  return set;
}

FeatureOptions LabConfig::bias_feature_options() const {
  FeatureOptions o;
  o.prompt_unit = bias_prompt_unit == "words" ? PromptUnit::kWords : PromptUnit::kChars;
  o.output_unit = bias_output_unit == "words" ? OutputUnit::kWords : OutputUnit::kSteps;
  return o;
}

}  // namespace sclab
