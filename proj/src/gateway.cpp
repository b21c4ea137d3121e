#include "sclab/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "sclab/errors.hpp"
#include "sclab/http_backend.hpp"
#include "sclab/scripted_model.hpp"

namespace sclab {

void DecodingParams::validate() const {
  if (!(temperature >= 0.0)) throw Error(ErrorKind::kConfig, "temperature must be >= 0");
  if (max_tokens < 1) throw Error(ErrorKind::kConfig, "max_tokens must be positive");
  if (top_logprobs < 0 || top_logprobs > kMaxTopLogprobs) {
    throw Error(ErrorKind::kConfig, "top_logprobs must be in [0, 20]");
  }
}

void to_json(nlohmann::json& j, const TokenAlternative& t) {
  j = nlohmann::json{{"token", t.token}, {"logprob", t.logprob}};
}

void from_json(const nlohmann::json& j, TokenAlternative& t) {
  t.token = j.at("token").get<std::string>();
  t.logprob = j.at("logprob").get<double>();
}

void to_json(nlohmann::json& j, const TokenLogprob& t) {
  j = nlohmann::json{{"token", t.token}, {"logprob", t.logprob}, {"top_logprobs", t.top_alternatives}};
}

void from_json(const nlohmann::json& j, TokenLogprob& t) {
  t.token = j.at("token").get<std::string>();
  t.logprob = j.at("logprob").get<double>();
  t.top_alternatives = j.value("top_logprobs", std::vector<TokenAlternative>{});
}

void to_json(nlohmann::json& j, const Completion& c) {
  j = nlohmann::json{{"text", c.text}, {"tokens", c.tokens}};
}

void from_json(const nlohmann::json& j, Completion& c) {
  c.text = j.at("text").get<std::string>();
  c.tokens = j.value("tokens", std::vector<TokenLogprob>{});
}

std::chrono::milliseconds RetryPolicy::delay_before(int attempt) const {
  if (attempt <= 1 || backoff.empty()) return std::chrono::milliseconds(0);
  const std::size_t idx = std::min<std::size_t>(static_cast<std::size_t>(attempt - 2), backoff.size() - 1);
  return backoff[idx];
}

void BackendSpec::validate() const {
  if (max_concurrency < 1) throw Error(ErrorKind::kConfig, "max_concurrency must be positive");
  if (retry.max_attempts < 1) throw Error(ErrorKind::kConfig, "retry.max_attempts must be positive");
  if (requests_per_second < 0.0) throw Error(ErrorKind::kConfig, "requests_per_second must be >= 0");
  if (kind == BackendKind::kHttp) {
    if (endpoint.empty()) throw Error(ErrorKind::kConfig, "http backend needs an endpoint");
    if (model.empty()) throw Error(ErrorKind::kConfig, "http backend needs a model");
  } else if (scripted_model.empty()) {
    throw Error(ErrorKind::kConfig, "scripted backend needs a scripted_model file");
  }
}

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, int max_concurrency, RetryPolicy retry,
                 double requests_per_second)
    : backend_(std::move(backend)),
      max_concurrency_(max_concurrency),
      retry_(std::move(retry)),
      requests_per_second_(requests_per_second),
      sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
  if (!backend_) throw Error(ErrorKind::kConfig, "gateway needs a backend");
  if (max_concurrency_ < 1) throw Error(ErrorKind::kConfig, "max_concurrency must be positive");
  if (retry_.max_attempts < 1) throw Error(ErrorKind::kConfig, "retry.max_attempts must be positive");
}

void Gateway::set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
  sleeper_ = std::move(sleeper);
}

void Gateway::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return in_flight_ < max_concurrency_; });
  ++in_flight_;
  int peak = peak_in_flight_.load();
  while (in_flight_ > peak && !peak_in_flight_.compare_exchange_weak(peak, in_flight_)) {
  }
}

void Gateway::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

void Gateway::pace() {
  if (requests_per_second_ <= 0.0) return;
  const auto interval = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(1.0 / requests_per_second_));
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_slot_);
    next_slot_ = slot + interval;
  }
  std::this_thread::sleep_until(slot);
}

Completion Gateway::complete(const Conversation& conv, const DecodingParams& params) {
  params.validate();
  ++calls_;
  std::string last_error;
  for (int attempt = 1; attempt <= retry_.max_attempts; ++attempt) {
    if (attempt > 1) sleeper_(retry_.delay_before(attempt));
    pace();
    acquire();
    ++attempts_;
    try {
      Completion c = backend_->complete(conv, params);
      release();
      return c;
    } catch (const RetryableError& e) {
      release();
      last_error = e.what();
    } catch (...) {
      release();
      throw;
    }
  }
  throw Error(ErrorKind::kTransport, "gave up after " + std::to_string(retry_.max_attempts) +
                                         " attempts: " + last_error);
}

std::map<std::string, CandidateScore> score_from_alternatives(
    const std::vector<TokenAlternative>& alternatives, const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw Error(ErrorKind::kPrecondition, "score_candidates needs candidates");

  double reported_mass = 0.0;
  for (const auto& alt : alternatives) reported_mass += std::exp(alt.logprob);
  const double residual = 1.0 - reported_mass;
  const double bound = residual > 0.0 ? std::max(kLogprobFloor, std::log(residual)) : kLogprobFloor;

  auto trimmed = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };

  std::map<std::string, CandidateScore> out;
  for (const std::string& cand : candidates) {
    const TokenAlternative* hit = nullptr;
    for (const auto& alt : alternatives) {
      if (alt.token == cand) {
        hit = &alt;
        break;
      }
    }
    if (hit == nullptr) {
      // Providers often report " Yes" for "Yes"; the highest-ranked trimmed match wins.
      for (const auto& alt : alternatives) {
        if (trimmed(alt.token) == trimmed(cand)) {
          hit = &alt;
          break;
        }
      }
    }
    out[cand] = hit ? CandidateScore{hit->logprob, true} : CandidateScore{bound, false};
  }
  return out;
}

std::map<std::string, CandidateScore> Gateway::score_candidates(const Conversation& conv,
                                                                const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw Error(ErrorKind::kPrecondition, "score_candidates needs candidates");
  DecodingParams params;
  params.temperature = 0.0;
  params.max_tokens = 1;
  params.top_logprobs = kMaxTopLogprobs;
  const Completion c = complete(conv, params);
  if (c.tokens.empty()) {
    // No first token reported: nothing is known about any candidate.
    return score_from_alternatives({}, candidates);
  }
  return score_from_alternatives(c.tokens.front().top_alternatives, candidates);
}

std::shared_ptr<ChatBackend> make_backend(const BackendSpec& spec) {
  spec.validate();
  if (spec.kind == BackendKind::kHttp) return std::make_shared<HttpBackend>(spec);
  auto model = std::make_shared<ScriptedModel>(ScriptedModel::load(spec.scripted_model));
  return model;
}

std::unique_ptr<Gateway> make_gateway(const BackendSpec& spec) {
  return std::make_unique<Gateway>(make_backend(spec), spec.max_concurrency, spec.retry,
                                   spec.requests_per_second);
}

}  // namespace sclab
