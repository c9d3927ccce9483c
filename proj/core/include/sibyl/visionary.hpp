#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "sibyl/backend.hpp"
#include "sibyl/teacher.hpp"

namespace sibyl {

/// One category-specialist student per knowledge category.
struct VisionaryEnsemble {
  std::map<KnowledgeCategory, ModelHandle> handles;

  /// Exactly four VISIONARY handles with matching categories.
  void validate() const;
};

json ensemble_to_json(const VisionaryEnsemble& e);
VisionaryEnsemble ensemble_from_json(const json& j);

/// SFT examples for one category: visionary prompt (history only) -> oracle text.
/// Views whose oracle entry for `category` is flagged parse_failure are skipped;
/// a view with no entry at all throws MissingOracle.
std::vector<SftExample> build_sft_corpus(const KnowledgeStore& oracle, std::span<const ContextView> views,
                                         KnowledgeCategory category, const Demonstration& demo);

void save_sft_corpus(const std::filesystem::path& path, std::span<const SftExample> corpus);
std::vector<SftExample> load_sft_corpus(const std::filesystem::path& path);

struct CategoryCorpus {
  std::vector<SftExample> train;
  std::vector<SftExample> valid;
};

struct EnsembleTraining {
  VisionaryEnsemble ensemble;
  std::map<KnowledgeCategory, FineTuneResult> results;
};

/// Fine-tunes one student per category from `base`; categories are independent.
/// Fine-tunes one category student from `base`.
FineTuneResult train_student(const CategoryCorpus& corpus, KnowledgeCategory category, Gateway& gateway,
                             const ModelHandle& base, const TrainConfig& cfg = {});

EnsembleTraining train_ensemble(const std::map<KnowledgeCategory, CategoryCorpus>& corpora, Gateway& gateway,
                                const ModelHandle& base, const TrainConfig& cfg = {});

/// Runs the four students on one view (greedy by default) and assembles a
/// VISIONARY_MODEL bundle. Categories whose reply is empty are flagged and left
/// out; a bundle with no entries throws ParseFailure.
KnowledgeBundle infer_bundle(const VisionaryEnsemble& ensemble, Gateway& gateway,
                             std::span<const Utterance> history, Dataset dataset, const ContextRef& ref,
                             const DemonstrationSet& demos, const DecodeParams& decode = {});
KnowledgeBundle infer_bundle(const VisionaryEnsemble& ensemble, Gateway& gateway, const ContextView& view,
                             const DemonstrationSet& demos, const DecodeParams& decode = {});

}  // namespace sibyl
