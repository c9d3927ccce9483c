#include "sibyl/error.hpp"

namespace sibyl {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MALFORMED_RECORD";
    case ErrorCode::RoleViolation: return "ROLE_VIOLATION";
    case ErrorCode::EmptyFile: return "EMPTY_FILE";
    case ErrorCode::DemoSplitViolation: return "DEMO_SPLIT_VIOLATION";
    case ErrorCode::LeakageViolation: return "LEAKAGE_VIOLATION";
    case ErrorCode::MissingKnowledge: return "MISSING_KNOWLEDGE";
    case ErrorCode::BackendUnreachable: return "BACKEND_UNREACHABLE";
    case ErrorCode::RateLimited: return "RATE_LIMITED";
    case ErrorCode::ContextOverflow: return "CONTEXT_OVERFLOW";
    case ErrorCode::EmptyTrainset: return "EMPTY_TRAINSET";
    case ErrorCode::BackendNoTrain: return "BACKEND_NO_TRAIN";
    case ErrorCode::BackendRejected: return "BACKEND_REJECTED";
    case ErrorCode::UnknownBackend: return "UNKNOWN_BACKEND";
    case ErrorCode::ParseFailure: return "PARSE_FAILURE";
    case ErrorCode::EmptyCompletion: return "EMPTY_COMPLETION";
    case ErrorCode::InsufficientEntries: return "INSUFFICIENT_ENTRIES";
    case ErrorCode::MissingOracle: return "MISSING_ORACLE";
    case ErrorCode::EmptyCorpus: return "EMPTY_CORPUS";
    case ErrorCode::CorpusTooSmall: return "CORPUS_TOO_SMALL";
    case ErrorCode::DimensionMismatch: return "DIMENSION_MISMATCH";
    case ErrorCode::AllSamplesUnparseable: return "ALL_SAMPLES_UNPARSEABLE";
    case ErrorCode::ViewMismatch: return "VIEW_MISMATCH";
    case ErrorCode::RaggedMatrix: return "RAGGED_MATRIX";
    case ErrorCode::Degenerate: return "DEGENERATE";
    case ErrorCode::MissingUpstream: return "MISSING_UPSTREAM";
    case ErrorCode::ConfigInvalid: return "CONFIG_INVALID";
    case ErrorCode::WorkspaceLocked: return "WORKSPACE_LOCKED";
    case ErrorCode::Io: return "IO";
  }
  return "UNKNOWN";
}

}  // namespace sibyl
