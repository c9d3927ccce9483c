#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sibyl/backend.hpp"

namespace sibyl {

enum class Strategy { Finetuned, PromptBased };
std::string_view to_string(Strategy s) noexcept;
Strategy parse_strategy(std::string_view s);

/// Default decode for responses; the seed is fixed per run.
DecodeParams default_response_decode(std::int64_t seed = 0);

/// Generation prompt -> gold response, one example per view.
std::vector<SftExample> build_responder_corpus(std::span<const ContextView> views, const KnowledgeStore& bundles,
                                               CategoryMask mask);

struct RunSpec {
  std::string run_id;
  Strategy strategy = Strategy::Finetuned;
  CategoryMask mask = CategoryMask::all();
  /// Fine-tuned handle for FINETUNED, the untrained base for PROMPT_BASED.
  ModelHandle responder;
  Provenance knowledge_provenance = Provenance::VisionaryModel;
  Split split = Split::Test;
  DecodeParams decode = default_response_decode();
  std::size_t max_in_flight = 8;
};

json run_spec_to_json(const RunSpec& spec);

struct GeneratedResponse {
  ContextRef context_ref;
  std::string response;
  std::string prompt_hash;
};

struct GenerationRun {
  RunSpec spec;
  std::vector<GeneratedResponse> outputs;  // view order
  std::vector<std::pair<ContextRef, std::string>> failures;
};

/// One response per view. Views outside spec.split are rejected; per-view
/// backend failures are collected instead of aborting.
GenerationRun generate_responses(const RunSpec& spec, std::span<const ContextView> views,
                                 const KnowledgeStore& bundles, Gateway& gateway);

/// Rendered prompts of a run, in view order (a pure function of the run spec).
std::vector<RenderedPrompt> render_run_prompts(const RunSpec& spec, std::span<const ContextView> views,
                                               const KnowledgeStore& bundles);

/// Line-delimited {"dialogue_id","cut","response","mask","strategy"}.
void save_run(const std::filesystem::path& path, const GenerationRun& run);

struct RunRecord {
  ContextRef context_ref;
  std::string response;
  std::string mask;
  std::string strategy;
};
std::vector<RunRecord> load_run(const std::filesystem::path& path);

}  // namespace sibyl
