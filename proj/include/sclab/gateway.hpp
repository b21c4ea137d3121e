#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sclab/conversation.hpp"

namespace sclab {

// Providers cap top_logprobs at 20.
inline constexpr int kMaxTopLogprobs = 20;

// Logprob reported for a candidate that received no residual probability mass.
inline constexpr double kLogprobFloor = -50.0;

struct DecodingParams {
  double temperature = 0.0;
  int max_tokens = 16;
  int top_logprobs = kMaxTopLogprobs;

  void validate() const;
};

struct TokenAlternative {
  std::string token;
  double logprob = 0.0;

  friend bool operator==(const TokenAlternative&, const TokenAlternative&) = default;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  std::vector<TokenAlternative> top_alternatives;  // descending by logprob

  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

struct Completion {
  std::string text;
  std::vector<TokenLogprob> tokens;

  friend bool operator==(const Completion&, const Completion&) = default;
};

void to_json(nlohmann::json& j, const TokenAlternative& t);
void from_json(const nlohmann::json& j, TokenAlternative& t);
void to_json(nlohmann::json& j, const TokenLogprob& t);
void from_json(const nlohmann::json& j, TokenLogprob& t);
void to_json(nlohmann::json& j, const Completion& c);
void from_json(const nlohmann::json& j, Completion& c);

struct RetryPolicy {
  int max_attempts = 3;
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(500),
                                                 std::chrono::milliseconds(2000)};

  // Delay before attempt `attempt` (1-based, so attempt 2 is the first retry).
  // The last schedule entry repeats once the schedule runs out.
  std::chrono::milliseconds delay_before(int attempt) const;
};

enum class BackendKind { kHttp, kScripted };

struct BackendSpec {
  BackendKind kind = BackendKind::kScripted;
  std::string endpoint;           // http only, e.g. https://api.openai.com/v1
  std::string model;
  std::string auth_env;           // name of the environment variable holding the bearer token
  std::string scripted_model;     // path to a scripted model JSON file
  int max_concurrency = 4;
  double requests_per_second = 0.0;  // 0 = unlimited
  RetryPolicy retry;
  // Open endpoints that honour assistant prefills can score a specified continuation.
  bool scores_continuations = false;
  std::chrono::milliseconds timeout{60000};

  void validate() const;
};

// A chat-completion backend. Implementations must be safe to call concurrently.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual Completion complete(const Conversation& conv, const DecodingParams& params) = 0;
  virtual bool scores_continuations() const = 0;
  virtual std::string model_id() const = 0;
};

// Thrown by backends for failures worth retrying (connection errors, 429, 5xx).
class RetryableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CandidateScore {
  double logprob = kLogprobFloor;
  bool exact = false;
};

// Shared front door to a backend: bounded in-flight requests, an optional
// request-rate budget and retries with a backoff schedule.
class Gateway {
 public:
  Gateway(std::shared_ptr<ChatBackend> backend, int max_concurrency, RetryPolicy retry,
          double requests_per_second = 0.0);

  Completion complete(const Conversation& conv, const DecodingParams& params);

  // Log probability of each candidate as the first generated token. Candidates
  // outside the reported top-k get log(1 - sum of reported probabilities), an
  // upper bound, with exact=false.
  std::map<std::string, CandidateScore> score_candidates(const Conversation& conv,
                                                         const std::vector<std::string>& candidates);

  bool scores_continuations() const { return backend_->scores_continuations(); }
  std::string model_id() const { return backend_->model_id(); }
  int max_concurrency() const { return max_concurrency_; }

  // Instrumentation.
  int peak_in_flight() const { return peak_in_flight_.load(); }
  long long calls() const { return calls_.load(); }
  long long attempts() const { return attempts_.load(); }

  // Sleep hook, replaceable in tests so backoff does not slow them down.
  void set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper);

 private:
  void acquire();
  void release();
  void pace();

  std::shared_ptr<ChatBackend> backend_;
  int max_concurrency_;
  RetryPolicy retry_;
  double requests_per_second_;
  std::function<void(std::chrono::milliseconds)> sleeper_;

  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
  std::chrono::steady_clock::time_point next_slot_{};

  std::atomic<int> peak_in_flight_{0};
  std::atomic<long long> calls_{0};
  std::atomic<long long> attempts_{0};
};

// Candidate scoring against an already obtained first-token record.
std::map<std::string, CandidateScore> score_from_alternatives(
    const std::vector<TokenAlternative>& alternatives, const std::vector<std::string>& candidates);

std::shared_ptr<ChatBackend> make_backend(const BackendSpec& spec);
std::unique_ptr<Gateway> make_gateway(const BackendSpec& spec);

}  // namespace sclab
