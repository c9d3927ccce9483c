#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sibyl/judge.hpp"
#include "sibyl/metrics.hpp"
#include "sibyl/responder.hpp"
#include "sibyl/teacher.hpp"
#include "sibyl/visionary.hpp"

namespace sibyl {

enum class Stage { Ingest, Acquire, TrainVisionary, Infer, TrainResponder, Generate, Eval, Judge, AbPack };
std::string_view to_string(Stage s) noexcept;
Stage parse_stage(std::string_view s);
/// Ingest through Eval, in execution order.
std::vector<Stage> core_stages();

/// Merged experiment configuration. `snapshot` is what manifests record.
struct PipelineConfig {
  Dataset dataset = Dataset::ED;
  std::map<Split, std::filesystem::path> inputs;
  std::uint64_t seed = 13;
  std::string teacher = "mock:teacher";
  std::string student_base = "mock:student";
  std::string responder_base = "mock:responder";
  AcquireConfig acquire;
  /// Splits whose views the teacher annotates; TEST is refused.
  std::vector<Split> acquire_splits = {Split::Train, Split::Valid};
  TrainConfig train;
  /// Students (re)trained by train-visionary; others keep their current handle.
  CategoryMask train_categories = CategoryMask::all();
  DecodeParams student_decode;
  Strategy strategy = Strategy::Finetuned;
  CategoryMask mask = CategoryMask::all();
  Provenance responder_knowledge = Provenance::VisionaryModel;
  DecodeParams response_decode = default_response_decode();
  std::size_t max_in_flight = 8;
  std::string embeddings = "hash:64";
  bool bleu_smooth = false;
  // judge stage
  std::string judge_model = "mock:judge";
  std::vector<Aspect> judge_aspects = {Aspect::Naturalness, Aspect::Empathy, Aspect::Coherence};
  GEvalConfig geval;
  std::size_t judge_items = 200;
  // abpack stage
  std::string ab_run_a;
  std::string ab_run_b;
  std::size_t ab_items = 200;
  std::vector<std::string> ab_aspects = {"coherence", "empathy", "informativeness", "engagement"};

  json snapshot;

  /// Generation run id: "<strategy>_<mask label>".
  std::string run_id() const;
};

/// Parses a config document; relative input paths resolve against `base_dir`.
/// `overrides` (same schema) is merged over the file before parsing.
/// Throws ConfigInvalid naming the offending field.
PipelineConfig parse_config(const json& doc, const std::filesystem::path& base_dir, const json& overrides = {});
PipelineConfig load_config(const std::filesystem::path& path, const json& overrides = {});

/// Fixed artifact layout under a workspace root.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path corpus(Split s) const;
  std::filesystem::path demonstrations() const { return root / "knowledge" / "demonstrations.json"; }
  std::filesystem::path oracle_store() const { return root / "knowledge" / "oracle.jsonl"; }
  std::filesystem::path visionary_store() const { return root / "knowledge" / "visionary.jsonl"; }
  std::filesystem::path sft_corpus(KnowledgeCategory c) const;
  std::filesystem::path ensemble() const { return root / "models" / "visionary.json"; }
  std::filesystem::path responder_corpus(CategoryMask m) const;
  std::filesystem::path responder_model(CategoryMask m) const;
  std::filesystem::path run(const std::string& run_id) const { return root / "runs" / (run_id + ".jsonl"); }
  std::filesystem::path run_prompts(const std::string& run_id) const {
    return root / "runs" / (run_id + ".prompts.jsonl");
  }
  std::filesystem::path report(const std::string& run_id) const { return root / "reports" / (run_id + ".report"); }
  std::filesystem::path judge_scores(const std::string& run_id) const {
    return root / "reports" / (run_id + ".geval.jsonl");
  }
  std::filesystem::path ab_sheet() const { return root / "abtest" / "sheet.csv"; }
  std::filesystem::path ab_key() const { return root / "abtest" / "key.csv"; }
  std::filesystem::path journal() const { return root / "journal" / "requests.jsonl"; }
  std::filesystem::path mock_models() const { return root / "models" / "mock"; }
  std::filesystem::path manifests() const { return root / "manifests"; }
  std::filesystem::path lockfile() const { return root / ".lock"; }
};

/// Exclusive advisory lock on a workspace; released on destruction.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const Workspace& ws);
  ~WorkspaceLock();
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;

 private:
  int fd_ = -1;
};

struct ArtifactRef {
  std::filesystem::path path;  // relative to the workspace root
  std::string sha256;
};

struct RunManifest {
  std::string run_id;
  Stage stage = Stage::Ingest;
  json config;
  json details;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
  std::string started_at;
  std::string finished_at;
  std::filesystem::path file;
};

json manifest_to_json(const RunManifest& m);
std::vector<RunManifest> load_manifests(const Workspace& ws);

/// Gateway with the mock backend (persisting into the workspace) and, when
/// SIBYL_API_BASE is set, the remote chat-completions backend.
std::unique_ptr<Gateway> make_gateway(const Workspace& ws, std::size_t max_in_flight = 8);

/// Runs one stage. Upstream artifacts must exist (MissingUpstream otherwise);
/// the manifest is written as manifests/<seq>_<stage>.json and never rewritten.
RunManifest run_stage(Stage stage, const PipelineConfig& cfg, const Workspace& ws, Gateway& gateway);

/// core_stages() in order under one workspace lock.
std::vector<RunManifest> run_pipeline(const PipelineConfig& cfg, const Workspace& ws, Gateway& gateway);

}  // namespace sibyl
