#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sibyl/backend.hpp"
#include "sibyl/csv.hpp"

namespace sibyl {

struct ParsedAnswer {
  std::string text;
  /// No "Answer:" marker was present; `text` is the whole trimmed completion.
  bool low_confidence = false;
};

/// Text after the last "Answer:" marker, trimmed. Throws EmptyCompletion when
/// nothing remains.
ParsedAnswer parse_answer(std::string_view raw);

enum class TaskStatus { Pending, Done, Failed };
std::string_view to_string(TaskStatus s) noexcept;

struct AcquisitionTask {
  ContextRef context_ref;
  KnowledgeCategory category = KnowledgeCategory::Cause;
  TaskStatus status = TaskStatus::Pending;
  int attempts = 0;
  std::string text;
  std::vector<std::string> flags;
};

struct AcquireConfig {
  std::size_t max_in_flight = 8;
  /// Re-queries after the first attempt for parse failures and over-long answers.
  int retry_cap = 2;
  double retry_temperature = 0.3;
  std::size_t word_limit = 40;
  DecodeParams decode{};  // temperature 0: argmax reading
  /// Stop after this many finished tasks (simulates an interrupted run).
  std::optional<std::size_t> stop_after_tasks;
};

json acquire_config_to_json(const AcquireConfig& c);

/// One fixed demonstration per category.
using DemonstrationSet = std::map<KnowledgeCategory, Demonstration>;

/// Throws DemoSplitViolation if any demonstration is not a TRAIN view.
void check_demonstrations(const DemonstrationSet& demos);

json demonstrations_to_json(const DemonstrationSet& demos);
DemonstrationSet demonstrations_from_json(const json& j);

/// Draws one TRAIN view per category by seeded random choice and obtains its
/// answer from the teacher, using the built-in demonstration as the worked example.
DemonstrationSet select_demonstrations(std::span<const ContextView> train_views, Gateway& gateway,
                                       const ModelHandle& teacher, std::uint64_t seed,
                                       const AcquireConfig& cfg = {});

struct AcquireResult {
  std::vector<AcquisitionTask> tasks;
  std::size_t bundles_written = 0;
  std::size_t skipped_views = 0;
  json manifest;
};

/// Queries the teacher for every (view, category) and appends a bundle
/// (provenance TEACHER_ORACLE) to `store_path` once all four tasks of a view are
/// final. Categories that failed to parse are left out and flagged. Views already in the store are
/// skipped. TEST views are refused with LeakageViolation before any call.
AcquireResult acquire_corpus(std::span<const ContextView> views, Gateway& gateway,
                             const ModelHandle& teacher, const DemonstrationSet& demos,
                             const std::filesystem::path& store_path, const AcquireConfig& cfg = {});

struct SheetConfig {
  std::size_t n = 400;
  std::uint64_t seed = 0;
  bool show_category = true;
  std::string annotator_id;
};

/// Rows: context, category, knowledge, accept, annotator_id (header first).
/// `contexts` maps a context ref to the clip shown to annotators.
std::vector<csv::Row> sample_validation_sheet(const KnowledgeStore& store,
                                              const std::map<ContextRef, std::string>& contexts,
                                              const SheetConfig& cfg);

}  // namespace sibyl
