// Builds a scripted-model rule file for a dataset by running the real harness
// against a small rule-of-thumb answering policy and recording every context
// the harness asks about. Replaying the file reproduces those runs exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <mutex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sclab/dataset.hpp"
#include "sclab/harness.hpp"
#include "sclab/pact.hpp"
#include "sclab/scripted_model.hpp"

using namespace sclab;

namespace {

double unit_hash(std::string_view text) {
  // FNV-1a barely moves its high bits for short inputs; finish with splitmix64.
  Conversation c;
  c.messages.push_back({Role::kUser, std::string(text)});
  std::uint64_t x = std::stoull(fingerprint(c), nullptr, 16) + 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

int answer_sign(const std::string& content) {
  if (content == "Yes") return 1;
  if (content == "No") return -1;
  return 0;
}

class PolicyBackend : public ChatBackend {
 public:
  explicit PolicyBackend(const Dataset& dataset, std::string model) : dataset_(dataset), model_(std::move(model)) {}

  Completion complete(const Conversation& conv, const DecodingParams& params) override {
    std::lock_guard lock(mu_);
    if (!recorded_.find(conv)) record(conv);
    return recorded_.complete(conv, params);
  }
  bool scores_continuations() const override { return true; }
  std::string model_id() const override { return model_; }

  nlohmann::json rules() const { return recorded_.to_json(); }

 private:
  void record(const Conversation& conv) {
    const std::string& last_user = conv.messages.back().content;
    if (last_user.find("report any serious problems") != std::string::npos) {
      // Feedback turn: a short multi-token critique.
      const bool pushed = last_user.find("should be") != std::string::npos;
      const bool doubt = pushed || unit_hash(fingerprint(conv)) < 0.5;
      std::vector<std::string> tokens = doubt ? std::vector<std::string>{"The", " answer", " may", " be", " wrong", "."}
                                              : std::vector<std::string>{"The", " answer", " looks", " correct", "."};
      std::vector<std::string> prefix;
      for (const auto& t : tokens) {
        recorded_.add_rule(continuation_prompt(conv, prefix), Distribution{{t, 1.0}});
        prefix.push_back(t);
      }
      recorded_.add_rule(continuation_prompt(conv, prefix), Distribution{{std::string(kEndToken), 1.0}});
      return;
    }
    double p = std::clamp(1.0 / (1.0 + std::exp(-logit(conv))), 0.001, 0.999);
    recorded_.add_rule(conv, Distribution{{"Yes", p}, {"No", 1.0 - p}});
  }

  int last_answer(const Conversation& conv) const {
    for (auto it = conv.messages.rbegin(); it != conv.messages.rend(); ++it) {
      if (it->role == Role::kAssistant && answer_sign(it->content) != 0) return answer_sign(it->content);
    }
    return 0;
  }

  double logit(const Conversation& conv) const {
    double z = 0.0;
    const std::string& last_user = conv.messages.back().content;
    std::size_t user_turns = 0;
    for (const auto& m : conv.messages) user_turns += m.role == Role::kUser;
    for (const auto& q : dataset_.questions) {
      bool present = false;
      for (const auto& m : conv.messages) {
        if (m.role == Role::kUser && m.content.find(q.question) != std::string::npos) present = true;
      }
      if (!present) continue;
      const double knowledge = 0.2 + 1.6 * unit_hash(q.id);
      const double g = q.gold ? 1.0 : -1.0;
      z += knowledge * g;
      // Recency: a question repeated at the end of the latest turn weighs more.
      if (user_turns > 1 && last_user.find(q.question) != std::string::npos) z += 1.5 * knowledge * g;
      break;
    }
    const int prev = last_answer(conv);
    z += 0.8 * prev;
    if (user_turns > 1) {
      if (last_user.find("You are wrong") != std::string::npos) z -= 3.0 * prev;
      if (last_user.find("Are you sure") != std::string::npos) z -= 2.0 * prev;
      if (last_user.find("should be Yes") != std::string::npos) z += 1.8;
      if (last_user.find("should be No") != std::string::npos) z -= 1.8;
      if (last_user.find("Based on the problems") != std::string::npos && conv.messages.size() >= 2) {
        const std::string& feedback = conv.messages[conv.messages.size() - 2].content;
        z += feedback.find("wrong") != std::string::npos ? -2.0 * prev : 0.5 * prev;
      }
    }
    z += 3.0 * (unit_hash(fingerprint(conv)) - 0.5);
    return z;
  }

  const Dataset& dataset_;
  std::string model_;
  std::mutex mu_;
  ScriptedModel recorded_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Record a scripted-model fixture for a dataset"};
  std::string dataset_path, out_path, model = "scripted-policy";
  int rounds = 10;
  app.add_option("--dataset", dataset_path, "dataset JSON lines")->required();
  app.add_option("--out", out_path, "rule file to write")->required();
  app.add_option("--model", model, "model id stored in the file")->capture_default_str();
  app.add_option("--rounds", rounds, "wavering rounds to cover")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const Dataset dataset = load_dataset(dataset_path);
    auto backend = std::make_shared<PolicyBackend>(dataset, model);
    Gateway gateway(backend, 1, RetryPolicy{});
    RunOptions options;
    options.workers = 1;
    for (bool repeating : {false, true}) {
      options.question_repeating = repeating;
      const RunSet rs = run_dataset(dataset, all_variants(), gateway, options);
      for (const auto& r : rs.records) {
        if (r.complete()) attribution_map(r, Granularity::kSequence, gateway);
      }
      run_multi_round_dataset(dataset, gateway, rounds, VariantId::kV1, options);
    }
    nlohmann::json out = backend->rules();
    out["model"] = model;
    write_file(out_path, out.dump(1) + "\n");
    std::cout << fmt::format("{} rules -> {}\n", out["rules"].size(), out_path);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
