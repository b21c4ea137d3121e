#pragma once

// Test-only helpers. The oracles here deliberately avoid the library's own
// algorithms (fingerprints, ablation, continuation prompts) so that agreement
// means something.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sclab/conversation.hpp"
#include "sclab/harness.hpp"
#include "sclab/scripted_model.hpp"

namespace testsupport {

inline std::string fixture(const std::string& rel) { return std::string(SCLAB_FIXTURE_DIR) + "/" + rel; }

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sclab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

// FNV-1a over role 0x1f content 0x1e, written out again here.
inline std::string oracle_fingerprint(const sclab::Conversation& c) {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& m : c.messages) {
    mix(m.role == sclab::Role::kUser ? "user" : m.role == sclab::Role::kAssistant ? "assistant" : "system");
    mix("\x1f");
    mix(m.content);
    mix("\x1e");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

using RuleTable = std::map<std::string, std::map<std::string, double>>;

// Remove text [b, e) of one message and the whitespace around it, leaving one space.
inline sclab::Conversation oracle_ablate(sclab::Conversation c, std::size_t msg, std::size_t b, std::size_t e) {
  std::string& s = c.messages[msg].content;
  auto ws = [](char ch) { return ch == ' ' || ch == '\n' || ch == '\t' || ch == '\r'; };
  while (b > 0 && ws(s[b - 1])) --b;
  while (e < s.size() && ws(s[e])) ++e;
  s = s.substr(0, b) + " " + s.substr(e);
  return c;
}

// Stepwise LP by the product rule: token k is scored in the context of the
// prompt plus an assistant turn "y1..y(k-1)[SEP]".
inline double oracle_lp(const RuleTable& table, const sclab::Conversation& x, const std::vector<std::string>& y) {
  double sum = 0.0;
  std::string partial;
  for (std::size_t k = 0; k < y.size(); ++k) {
    sclab::Conversation ctx = x;
    if (k > 0) ctx.messages.push_back({sclab::Role::kAssistant, partial + "[SEP]"});
    sum += std::log(table.at(oracle_fingerprint(ctx)).at(y[k]));
    partial += y[k];
  }
  return sum / static_cast<double>(y.size());
}

inline sclab::ScriptedModel model_from(const RuleTable& table, const std::string& id = "scripted") {
  sclab::ScriptedModel m(id);
  for (const auto& [fp, dist] : table) m.add_rule(fp, dist);
  return m;
}

inline sclab::StageOutput stage(const std::string& prompt, const std::string& text) {
  sclab::StageOutput s;
  s.prompt = prompt;
  s.text = text;
  s.label = sclab::parse_yes_no(text);
  s.tokens.push_back({text, 0.0, {}});
  return s;
}

// A finished V1 episode built by hand.
inline sclab::RunRecord episode(const std::string& id, const std::string& question, bool gold,
                                const std::string& first, const std::string& second, std::size_t index = 0) {
  sclab::QuestionRecord q{id, question, std::nullopt, gold};
  sclab::RunRecord r;
  r.question_id = id;
  r.dataset_index = index;
  r.variant = sclab::VariantId::kV1;
  r.gold = gold;
  r.model = "fixture";
  r.initial = stage(sclab::render_initial(q), first);
  r.refinement = stage(sclab::TemplateSet::builtin().get("v1_refinement"), second);
  return r;
}

}  // namespace testsupport
