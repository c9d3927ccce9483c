#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sibyl {

enum class ErrorCode {
  // corpus
  MalformedRecord,
  RoleViolation,
  EmptyFile,
  // knowledge
  DemoSplitViolation,
  LeakageViolation,
  MissingKnowledge,
  // backend
  BackendUnreachable,
  RateLimited,
  ContextOverflow,
  EmptyTrainset,
  BackendNoTrain,
  BackendRejected,
  UnknownBackend,
  // teacher
  ParseFailure,
  EmptyCompletion,
  InsufficientEntries,
  // visionary / responder
  MissingOracle,
  // metrics
  EmptyCorpus,
  CorpusTooSmall,
  DimensionMismatch,
  // judge
  AllSamplesUnparseable,
  ViewMismatch,
  RaggedMatrix,
  Degenerate,
  // pipeline
  MissingUpstream,
  ConfigInvalid,
  WorkspaceLocked,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Whether a backend error may succeed when the same request is re-issued.
constexpr bool is_retriable(ErrorCode code) noexcept {
  return code == ErrorCode::BackendUnreachable || code == ErrorCode::RateLimited;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace sibyl
