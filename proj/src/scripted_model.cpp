#include "sclab/scripted_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include <fmt/format.h>

#include "sclab/errors.hpp"

namespace sclab {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_mix(std::uint64_t& h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Tokens ordered by descending probability; ties broken by token text.
std::vector<std::pair<std::string, double>> ranked(const Distribution& dist) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [token, p] : dist) {
    if (p > 0.0) out.emplace_back(token, p);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

void validate_distribution(const Distribution& dist, const std::string& fp) {
  if (dist.empty()) throw Error(ErrorKind::kConfig, "empty distribution for rule " + fp);
  double total = 0.0;
  for (const auto& [token, p] : dist) {
    if (!(p >= 0.0) || p > 1.0) {
      throw Error(ErrorKind::kConfig, fmt::format("probability {} for '{}' out of range in rule {}", p, token, fp));
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw Error(ErrorKind::kConfig, fmt::format("distribution for rule {} sums to {}", fp, total));
  }
}

}  // namespace

std::string fingerprint(const Conversation& conv) {
  std::uint64_t h = kFnvOffset;
  for (const ChatMessage& m : conv.messages) {
    fnv_mix(h, to_string(m.role));
    fnv_mix(h, std::string_view("\x1f", 1));
    fnv_mix(h, m.content);
    fnv_mix(h, std::string_view("\x1e", 1));
  }
  return fmt::format("{:016x}", h);
}

Conversation continuation_prompt(const Conversation& prompt, const std::vector<std::string>& prefix) {
  if (prefix.empty()) return prompt;
  std::string partial;
  for (const std::string& tok : prefix) partial += tok;
  partial += kSeparator;
  return prompt.with({Role::kAssistant, std::move(partial)});
}

ScriptedModel::ScriptedModel(std::string model_id) : model_id_(std::move(model_id)) {}

void ScriptedModel::add_rule(const std::string& fp, Distribution dist) {
  validate_distribution(dist, fp);
  rules_[fp] = std::move(dist);
}

ScriptedModel ScriptedModel::from_json(const nlohmann::json& j) {
  ScriptedModel model(j.value("model", std::string("scripted")));
  for (const auto& rule : j.at("rules")) {
    Distribution dist = rule.at("distribution").get<Distribution>();
    if (rule.contains("fingerprint")) {
      model.add_rule(rule.at("fingerprint").get<std::string>(), std::move(dist));
    } else {
      model.add_rule(rule.at("messages").get<Conversation>(), std::move(dist));
    }
  }
  return model;
}

ScriptedModel ScriptedModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open scripted model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, "scripted model '" + path + "': " + e.what());
  }
  return from_json(j);
}

nlohmann::json ScriptedModel::to_json() const {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& [fp, dist] : rules_) {
    rules.push_back({{"fingerprint", fp}, {"distribution", dist}});
  }
  return {{"model", model_id_}, {"rules", rules}};
}

const Distribution* ScriptedModel::find(const Conversation& conv) const {
  auto it = rules_.find(fingerprint(conv));
  return it == rules_.end() ? nullptr : &it->second;
}

Completion ScriptedModel::complete(const Conversation& conv, const DecodingParams& params) {
  Completion out;
  std::vector<std::string> emitted;
  while (static_cast<int>(emitted.size()) < params.max_tokens) {
    const Conversation ctx = continuation_prompt(conv, emitted);
    const std::string fp = fingerprint(ctx);
    auto it = rules_.find(fp);
    if (it == rules_.end()) {
      if (emitted.empty()) throw Error(ErrorKind::kRuleMiss, "no scripted rule for fingerprint " + fp);
      break;
    }
    const auto order = ranked(it->second);
    std::size_t pick = 0;
    if (params.temperature > 0.0) {
      // Sampling is seeded by the context, so repeated calls agree.
      std::vector<double> weights;
      double total = 0.0;
      for (const auto& [tok, p] : order) {
        weights.push_back(std::pow(p, 1.0 / params.temperature));
        total += weights.back();
      }
      std::uint64_t seed = splitmix(std::stoull(fp, nullptr, 16) ^ emitted.size());
      const double u = static_cast<double>(seed >> 11) * 0x1.0p-53 * total;
      double acc = 0.0;
      for (pick = 0; pick + 1 < weights.size(); ++pick) {
        acc += weights[pick];
        if (u < acc) break;
      }
    }
    const auto& [token, p] = order[pick];
    if (token == kEndToken) break;

    TokenLogprob tl;
    tl.token = token;
    tl.logprob = std::log(p);
    const std::size_t k = std::min<std::size_t>(order.size(), static_cast<std::size_t>(params.top_logprobs));
    for (std::size_t i = 0; i < k; ++i) tl.top_alternatives.push_back({order[i].first, std::log(order[i].second)});
    out.text += token;
    out.tokens.push_back(std::move(tl));
    emitted.push_back(token);
  }
  return out;
}

}  // namespace sclab
