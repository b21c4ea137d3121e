#include "sclab/conversation.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sclab/errors.hpp"

namespace sclab {

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

const char* const kRequiredTemplates[] = {
    "initial",       "v1_refinement", "v2_refinement", "v3_refinement", "v4_feedback",
    "v4_refinement", "v5_feedback",   "v5_refinement",
};

const std::map<std::string, std::string> kPlaceholderToBinding{
    {"AnotherAnswer", "other_answer"},
    {"Question", "question"},
};

std::map<std::string, std::string> binding_values(const Bindings& b) {
  std::map<std::string, std::string> values;
  if (b.other_answer) values["AnotherAnswer"] = *b.other_answer;
  if (b.question) values["Question"] = *b.question;
  return values;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::kSystem: return "system";
    case Role::kUser: return "user";
    case Role::kAssistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view text) {
  if (text == "system") return Role::kSystem;
  if (text == "user") return Role::kUser;
  if (text == "assistant") return Role::kAssistant;
  throw Error(ErrorKind::kParse, "unknown role '" + std::string(text) + "'");
}

Conversation Conversation::with(ChatMessage message) const {
  Conversation out = *this;
  out.messages.push_back(std::move(message));
  return out;
}

bool Conversation::well_formed() const {
  std::size_t i = 0;
  if (!messages.empty() && messages.front().role == Role::kSystem) i = 1;
  Role expected = Role::kUser;
  for (; i < messages.size(); ++i) {
    if (messages[i].role != expected) return false;
    expected = expected == Role::kUser ? Role::kAssistant : Role::kUser;
  }
  return true;
}

void to_json(nlohmann::json& j, const ChatMessage& m) {
  j = nlohmann::json{{"role", to_string(m.role)}, {"content", m.content}};
}

void from_json(const nlohmann::json& j, ChatMessage& m) {
  m.role = role_from_string(j.at("role").get<std::string>());
  m.content = j.at("content").get<std::string>();
}

void to_json(nlohmann::json& j, const Conversation& c) { j = c.messages; }

void from_json(const nlohmann::json& j, Conversation& c) {
  c.messages = j.get<std::vector<ChatMessage>>();
}

std::string_view to_string(VariantId id) {
  switch (id) {
    case VariantId::kV1: return "V1";
    case VariantId::kV2: return "V2";
    case VariantId::kV3: return "V3";
    case VariantId::kV4: return "V4";
    case VariantId::kV5: return "V5";
  }
  return "V1";
}

VariantId variant_from_string(std::string_view text) {
  const std::string key = lower(text);
  for (VariantId id : all_variants()) {
    if (lower(to_string(id)) == key) return id;
  }
  throw Error(ErrorKind::kConfig, "unknown prompt variant '" + std::string(text) + "'");
}

const std::vector<VariantId>& all_variants() {
  static const std::vector<VariantId> kAll{VariantId::kV1, VariantId::kV2, VariantId::kV3,
                                           VariantId::kV4, VariantId::kV5};
  return kAll;
}

std::string_view to_string(AnswerLabel label) {
  switch (label) {
    case AnswerLabel::kYes: return "Yes";
    case AnswerLabel::kNo: return "No";
    case AnswerLabel::kAmbiguous: return "Ambiguous";
  }
  return "Ambiguous";
}

AnswerLabel label_from_string(std::string_view text) {
  if (text == "Yes") return AnswerLabel::kYes;
  if (text == "No") return AnswerLabel::kNo;
  if (text == "Ambiguous") return AnswerLabel::kAmbiguous;
  throw Error(ErrorKind::kParse, "unknown answer label '" + std::string(text) + "'");
}

std::string canonical_answer(bool gold) { return gold ? "Yes" : "No"; }

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kInitial: return "initial";
    case Stage::kFeedback: return "feedback";
    case Stage::kRefinement: return "refinement";
  }
  return "initial";
}

TemplateSet::TemplateSet(std::map<std::string, std::string> templates)
    : templates_(std::move(templates)) {
  for (const char* name : kRequiredTemplates) {
    if (!templates_.contains(name)) {
      throw Error(ErrorKind::kConfig, std::string("missing prompt template '") + name + "'");
    }
  }
}

const TemplateSet& TemplateSet::builtin() {
  static const TemplateSet kBuiltin(detail::embedded_templates());
  return kBuiltin;
}

TemplateSet TemplateSet::load_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> templates;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    templates[entry.path().stem().string()] = buf.str();
  }
  if (ec) throw Error(ErrorKind::kConfig, "cannot read template directory '" + dir + "'");
  return TemplateSet(std::move(templates));
}

const std::string& TemplateSet::get(const std::string& name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw Error(ErrorKind::kConfig, "no template named '" + name + "'");
  return it->second;
}

TemplateSet TemplateSet::with(const std::string& name, std::string text) const {
  auto copy = templates_;
  copy[name] = std::move(text);
  return TemplateSet(std::move(copy));
}

PromptVariant TemplateSet::variant(VariantId id) const {
  const std::string stem = lower(to_string(id));
  PromptVariant v;
  v.id = id;
  v.refinement_template = get(stem + "_refinement");
  if (auto it = templates_.find(stem + "_feedback"); it != templates_.end()) {
    v.feedback_template = it->second;
  }
  return v;
}

namespace {

bool is_placeholder_name(std::string_view name) {
  if (name.empty() || !(std::isalpha(static_cast<unsigned char>(name[0])) || name[0] == '_')) return false;
  return std::all_of(name.begin(), name.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

}  // namespace

std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const std::size_t open = tmpl.find('{', pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const std::size_t close = tmpl.find('}', open + 1);
    if (close == std::string_view::npos) {
      out.append(tmpl.substr(open));
      break;
    }
    const std::string name(tmpl.substr(open + 1, close - open - 1));
    if (!is_placeholder_name(name)) {
      // Not placeholder syntax; keep the braces literally.
      out.push_back('{');
      pos = open + 1;
      continue;
    }
    if (!kPlaceholderToBinding.contains(name)) {
      throw Error(ErrorKind::kMissingBinding, "unknown placeholder {" + name + "}");
    }
    auto it = values.find(name);
    if (it == values.end()) {
      throw Error(ErrorKind::kMissingBinding,
                  "placeholder {" + name + "} needs binding '" + kPlaceholderToBinding.at(name) + "'");
    }
    out.append(it->second);
    pos = close + 1;
  }
  return out;
}

std::string render_initial(const QuestionRecord& q, const TemplateSet& templates) {
  return substitute(templates.initial_template(), {{"Question", q.question}});
}

std::string render_refinement(const PromptVariant& variant, const Bindings& bindings) {
  return substitute(variant.refinement_template, binding_values(bindings));
}

std::string render_feedback(const PromptVariant& variant, const Bindings& bindings) {
  if (!variant.feedback_template) {
    throw Error(ErrorKind::kStageOrderViolation,
                std::string(to_string(variant.id)) + " has no feedback stage");
  }
  return substitute(*variant.feedback_template, binding_values(bindings));
}

std::string instruction_suffix(const TemplateSet& templates) {
  const std::string& tmpl = templates.initial_template();
  const std::string marker = "{Question}";
  const std::size_t at = tmpl.find(marker);
  std::string suffix = at == std::string::npos ? tmpl : tmpl.substr(at + marker.size());
  const auto first = suffix.find_first_not_of(" \t\r\n");
  return first == std::string::npos ? std::string{} : suffix.substr(first);
}

AnswerLabel parse_yes_no(std::string_view text, const TemplateSet& templates) {
  std::string scan(text);
  const std::string suffix = instruction_suffix(templates);
  if (!suffix.empty()) {
    for (std::size_t at = scan.find(suffix); at != std::string::npos; at = scan.find(suffix, at)) {
      scan.replace(at, suffix.size(), " ");
    }
  }

  // Standalone tokens are maximal runs of ASCII letters.
  struct Hit {
    AnswerLabel label;
    std::size_t at;
  };
  std::vector<Hit> hits;
  std::size_t first_sentence_end = std::string::npos;
  bool seen_text = false;
  for (std::size_t i = 0; i < scan.size();) {
    const unsigned char c = static_cast<unsigned char>(scan[i]);
    if (std::isalpha(c)) {
      seen_text = true;
      std::size_t j = i;
      while (j < scan.size() && std::isalpha(static_cast<unsigned char>(scan[j]))) ++j;
      const std::string word = lower(std::string_view(scan).substr(i, j - i));
      if (word == "yes") hits.push_back({AnswerLabel::kYes, i});
      if (word == "no") hits.push_back({AnswerLabel::kNo, i});
      i = j;
      continue;
    }
    if (seen_text && first_sentence_end == std::string::npos &&
        (c == '.' || c == '!' || c == '?' || c == '\n')) {
      first_sentence_end = i;
    }
    ++i;
  }
  if (hits.empty()) return AnswerLabel::kAmbiguous;

  // Hedged openings ("Yes and no.") name both answers before the first sentence ends.
  bool opening_yes = false;
  bool opening_no = false;
  for (const Hit& h : hits) {
    if (h.at > first_sentence_end) break;
    (h.label == AnswerLabel::kYes ? opening_yes : opening_no) = true;
  }
  if (opening_yes && opening_no) return AnswerLabel::kAmbiguous;
  return hits.front().label;
}

std::string opposite_answer(AnswerLabel first) {
  switch (first) {
    case AnswerLabel::kYes: return "No";
    case AnswerLabel::kNo: return "Yes";
    case AnswerLabel::kAmbiguous: break;
  }
  throw Error(ErrorKind::kPrecondition, "no opposite for an ambiguous answer");
}

Conversation build_turns(const QuestionRecord& q, const PromptVariant& variant, Stage stage,
                         const Conversation& history, const Bindings& bindings,
                         const TemplateSet& templates) {
  const auto& msgs = history.messages;
  const std::size_t base = !msgs.empty() && msgs.front().role == Role::kSystem ? 1 : 0;
  const std::size_t turns = msgs.size() - base;

  auto last_is_assistant = [&] { return turns > 0 && msgs.back().role == Role::kAssistant; };

  switch (stage) {
    case Stage::kInitial:
      if (turns != 0) {
        throw Error(ErrorKind::kStageOrderViolation, "initial stage needs an empty history");
      }
      return history.with({Role::kUser, render_initial(q, templates)});
    case Stage::kFeedback:
      if (!variant.has_feedback()) {
        throw Error(ErrorKind::kStageOrderViolation,
                    std::string(to_string(variant.id)) + " has no feedback stage");
      }
      if (turns != 2 || !last_is_assistant()) {
        throw Error(ErrorKind::kStageOrderViolation, "feedback must follow the answered initial turn");
      }
      return history.with({Role::kUser, render_feedback(variant, bindings)});
    case Stage::kRefinement: {
      const std::size_t expected = variant.has_feedback() ? 4 : 2;
      // Multi-round runs keep appending refinement turns to the same conversation.
      if (turns < expected || !last_is_assistant()) {
        throw Error(ErrorKind::kStageOrderViolation,
                    "refinement requested before the initial (and feedback) turns were answered");
      }
      return history.with({Role::kUser, render_refinement(variant, bindings)});
    }
  }
  throw Error(ErrorKind::kPrecondition, "unknown stage");
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingBinding: return "MissingBinding";
    case ErrorKind::kStageOrderViolation: return "StageOrderViolation";
    case ErrorKind::kTransport: return "Transport";
    case ErrorKind::kRuleMiss: return "RuleMiss";
    case ErrorKind::kProviderRefusal: return "ProviderRefusal";
    case ErrorKind::kUnsupportedMultiToken: return "UnsupportedMultiToken";
    case ErrorKind::kPrecondition: return "PreconditionViolation";
    case ErrorKind::kConfig: return "ConfigError";
    case ErrorKind::kIncompleteRunSet: return "IncompleteRunSet";
    case ErrorKind::kMixedRounds: return "MixedRounds";
    case ErrorKind::kSchemaMismatch: return "SchemaMismatch";
    case ErrorKind::kInsufficientLayers: return "InsufficientLayers";
    case ErrorKind::kUnpairedSample: return "UnpairedSample";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kInsufficientFlips: return "InsufficientFlips";
    case ErrorKind::kIo: return "IoFailure";
    case ErrorKind::kMissingBaseline: return "MissingBaseline";
    case ErrorKind::kParse: return "ParseError";
  }
  return "Error";
}

}  // namespace sclab
