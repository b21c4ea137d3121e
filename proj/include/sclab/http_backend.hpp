#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "sclab/gateway.hpp"

namespace sclab {

// OpenAI-compatible POST {endpoint}/chat/completions with logprobs enabled.
class HttpBackend : public ChatBackend {
 public:
  explicit HttpBackend(BackendSpec spec);

  Completion complete(const Conversation& conv, const DecodingParams& params) override;
  bool scores_continuations() const override { return spec_.scores_continuations; }
  std::string model_id() const override { return spec_.model; }

  nlohmann::json request_body(const Conversation& conv, const DecodingParams& params) const;
  static Completion parse_response(const nlohmann::json& body);

 private:
  BackendSpec spec_;
  std::string scheme_host_port_;
  std::string base_path_;
  std::string bearer_;
};

}  // namespace sclab
