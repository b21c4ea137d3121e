#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sclab {

enum class ErrorKind {
  kMissingBinding,
  kStageOrderViolation,
  kTransport,
  kRuleMiss,
  kProviderRefusal,
  kUnsupportedMultiToken,
  kPrecondition,
  kConfig,
  kIncompleteRunSet,
  kMixedRounds,
  kSchemaMismatch,
  kInsufficientLayers,
  kUnpairedSample,
  kEmptyInput,
  kInsufficientFlips,
  kIo,
  kMissingBaseline,
  kParse,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace sclab
