#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "sclab/http_backend.hpp"

#include <cstdlib>
#include <regex>

#include <httplib.h>

#include "sclab/errors.hpp"

namespace sclab {

namespace {

bool retryable_status(int status) { return status == 408 || status == 409 || status == 429 || status >= 500; }

}  // namespace

HttpBackend::HttpBackend(BackendSpec spec) : spec_(std::move(spec)) {
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(spec_.endpoint, m, kUrl)) {
    throw Error(ErrorKind::kConfig, "endpoint must look like http(s)://host[:port][/path]: '" + spec_.endpoint + "'");
  }
  scheme_host_port_ = m[1].str();
  base_path_ = m[2].matched ? m[2].str() : std::string();
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  if (!spec_.auth_env.empty()) {
    const char* token = std::getenv(spec_.auth_env.c_str());
    if (token == nullptr) {
      throw Error(ErrorKind::kConfig, "environment variable '" + spec_.auth_env + "' is not set");
    }
    bearer_ = token;
  }
}

nlohmann::json HttpBackend::request_body(const Conversation& conv, const DecodingParams& params) const {
  nlohmann::json body{
      {"model", spec_.model},
      {"messages", conv},
      {"temperature", params.temperature},
      {"max_tokens", params.max_tokens},
      {"logprobs", true},
  };
  if (params.top_logprobs > 0) body["top_logprobs"] = params.top_logprobs;
  return body;
}

Completion HttpBackend::parse_response(const nlohmann::json& body) {
  Completion out;
  try {
    const auto& choice = body.at("choices").at(0);
    const auto& content = choice.at("message").at("content");
    out.text = content.is_null() ? std::string() : content.get<std::string>();
    if (choice.contains("logprobs") && choice["logprobs"].is_object() &&
        choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array()) {
      for (const auto& tok : choice["logprobs"]["content"]) {
        TokenLogprob tl;
        tl.token = tok.at("token").get<std::string>();
        tl.logprob = std::min(0.0, tok.at("logprob").get<double>());
        if (tok.contains("top_logprobs")) {
          for (const auto& alt : tok["top_logprobs"]) {
            tl.top_alternatives.push_back(
                {alt.at("token").get<std::string>(), std::min(0.0, alt.at("logprob").get<double>())});
          }
        }
        std::stable_sort(tl.top_alternatives.begin(), tl.top_alternatives.end(),
                         [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
        out.tokens.push_back(std::move(tl));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kProviderRefusal, std::string("malformed completion body: ") + e.what());
  }
  return out;
}

Completion HttpBackend::complete(const Conversation& conv, const DecodingParams& params) {
  httplib::Client client(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(spec_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(spec_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers headers;
  if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);

  const std::string body = request_body(conv, params).dump();
  auto res = client.Post(base_path_ + "/chat/completions", headers, body, "application/json");
  if (!res) {
    throw RetryableError("request to " + scheme_host_port_ + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    const std::string detail = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512);
    if (retryable_status(res->status)) throw RetryableError(detail);
    throw Error(ErrorKind::kProviderRefusal, detail);
  }
  nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) throw Error(ErrorKind::kProviderRefusal, "completion body is not JSON");
  return parse_response(parsed);
}

}  // namespace sclab
