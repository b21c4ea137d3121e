#pragma once

#include <map>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "sclab/gateway.hpp"

namespace sclab {

// Separator appended inside an assistant prefill when scoring a specified
// continuation token by token.
inline constexpr std::string_view kSeparator = "[SEP]";

// Token that ends scripted generation without being emitted.
inline constexpr std::string_view kEndToken = "<eos>";

// Stable, whitespace-significant hash of the rendered message list (roles included).
std::string fingerprint(const Conversation& conv);

// Conversation used to score token k of a continuation: `prompt` followed by an
// assistant turn holding the first k tokens and the separator.
Conversation continuation_prompt(const Conversation& prompt, const std::vector<std::string>& prefix);

using Distribution = std::map<std::string, double>;

// Deterministic backend driven by a table of next-token distributions keyed by
// conversation fingerprint. Generation continues through continuation_prompt()
// lookups until <eos>, a missing rule, or max_tokens.
class ScriptedModel : public ChatBackend {
 public:
  explicit ScriptedModel(std::string model_id = "scripted");

  // JSON: {"model": "...", "rules": [{"fingerprint": "...", "distribution": {...}}, ...]}.
  // A rule may give "messages" instead of "fingerprint"; it is fingerprinted at load.
  static ScriptedModel from_json(const nlohmann::json& j);
  static ScriptedModel load(const std::string& path);
  nlohmann::json to_json() const;

  void add_rule(const std::string& fingerprint, Distribution dist);
  void add_rule(const Conversation& conv, Distribution dist) { add_rule(fingerprint(conv), std::move(dist)); }

  const Distribution* find(const Conversation& conv) const;
  std::size_t rule_count() const { return rules_.size(); }

  Completion complete(const Conversation& conv, const DecodingParams& params) override;
  bool scores_continuations() const override { return true; }
  std::string model_id() const override { return model_id_; }

 private:
  std::string model_id_;
  std::map<std::string, Distribution> rules_;
};

}  // namespace sclab
