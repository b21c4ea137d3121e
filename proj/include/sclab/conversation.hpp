#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace sclab {

struct QuestionRecord {
  std::string id;
  std::string question;
  std::optional<std::string> passage;
  bool gold = false;  // true <=> "Yes"
};

enum class Role { kSystem, kUser, kAssistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);

struct ChatMessage {
  Role role = Role::kUser;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct Conversation {
  std::vector<ChatMessage> messages;

  bool empty() const { return messages.empty(); }
  std::size_t size() const { return messages.size(); }
  Conversation with(ChatMessage message) const;

  // True when roles alternate user/assistant after an optional leading system turn.
  bool well_formed() const;

  friend bool operator==(const Conversation&, const Conversation&) = default;
};

void to_json(nlohmann::json& j, const ChatMessage& m);
void from_json(const nlohmann::json& j, ChatMessage& m);
void to_json(nlohmann::json& j, const Conversation& c);
void from_json(const nlohmann::json& j, Conversation& c);

enum class VariantId { kV1 = 1, kV2, kV3, kV4, kV5 };

std::string_view to_string(VariantId id);
// Accepts "V1".."V5" (case-insensitive); throws Error(kConfig) otherwise.
VariantId variant_from_string(std::string_view text);
const std::vector<VariantId>& all_variants();

struct PromptVariant {
  VariantId id = VariantId::kV1;
  std::optional<std::string> feedback_template;
  std::string refinement_template;

  bool has_feedback() const { return feedback_template.has_value(); }
};

enum class AnswerLabel { kYes, kNo, kAmbiguous };

std::string_view to_string(AnswerLabel label);
AnswerLabel label_from_string(std::string_view text);
inline AnswerLabel label_for(bool gold) { return gold ? AnswerLabel::kYes : AnswerLabel::kNo; }
// The bare "Yes"/"No" text used when writing a corrected answer.
std::string canonical_answer(bool gold);

struct Bindings {
  std::optional<std::string> other_answer;
  std::optional<std::string> question;
};

// Stored prompt templates, keyed by file stem (e.g. "v1_refinement").
class TemplateSet {
 public:
  // The templates compiled into the library from templates/*.txt.
  static const TemplateSet& builtin();
  // Loads every *.txt file in `dir`; missing required templates throw Error(kConfig).
  static TemplateSet load_dir(const std::string& dir);

  const std::string& get(const std::string& name) const;
  // Copy with one template replaced (or added).
  TemplateSet with(const std::string& name, std::string text) const;
  PromptVariant variant(VariantId id) const;
  const std::string& initial_template() const { return get("initial"); }

 private:
  explicit TemplateSet(std::map<std::string, std::string> templates);
  std::map<std::string, std::string> templates_;
};

// Single-pass placeholder substitution. Text introduced by a binding is never
// rescanned, so braces inside a question survive verbatim. An unknown or unbound
// placeholder throws Error(kMissingBinding).
std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& values);

std::string render_initial(const QuestionRecord& q, const TemplateSet& templates = TemplateSet::builtin());
std::string render_refinement(const PromptVariant& variant, const Bindings& bindings);
std::string render_feedback(const PromptVariant& variant, const Bindings& bindings);

// The instruction suffix appended by the initial template (the text after {Question}).
std::string instruction_suffix(const TemplateSet& templates = TemplateSet::builtin());

AnswerLabel parse_yes_no(std::string_view text, const TemplateSet& templates = TemplateSet::builtin());

enum class Stage { kInitial, kFeedback, kRefinement };
std::string_view to_string(Stage stage);

// Extends `history` with the rendered user turn for `stage`.
//   initial    requires an empty history (or one holding only a system turn)
//   feedback   requires V4/V5 and an answered initial turn
//   refinement requires an answered initial turn (and answered feedback when present)
Conversation build_turns(const QuestionRecord& q, const PromptVariant& variant, Stage stage,
                         const Conversation& history, const Bindings& bindings = {},
                         const TemplateSet& templates = TemplateSet::builtin());

// Binding for V3/V5: the opposite of the model's first answer ("Yes" <-> "No").
std::string opposite_answer(AnswerLabel first);

namespace detail {
const std::map<std::string, std::string>& embedded_templates();
}

}  // namespace sclab
