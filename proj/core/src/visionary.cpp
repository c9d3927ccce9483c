#include "sibyl/visionary.hpp"

namespace sibyl {

void VisionaryEnsemble::validate() const {
  if (handles.size() != kAllCategories.size()) {
    throw Error(ErrorCode::ConfigInvalid, "ensemble needs exactly four handles, has " + std::to_string(handles.size()));
  }
  for (const auto& [c, h] : handles) {
    h.validate();
    if (h.kind != ModelKind::Visionary || h.category != c) {
      throw Error(ErrorCode::ConfigInvalid, "ensemble slot " + std::string(to_string(c)) + " holds " + h.backend_id +
                                                " which is not a matching VISIONARY handle");
    }
  }
}

json ensemble_to_json(const VisionaryEnsemble& e) {
  json j = json::object();
  for (const auto& [c, h] : e.handles) j[std::string(to_string(c))] = handle_to_json(h);
  return j;
}

VisionaryEnsemble ensemble_from_json(const json& j) {
  VisionaryEnsemble e;
  for (const auto& [k, v] : j.items()) e.handles[parse_category(k)] = handle_from_json(v);
  e.validate();
  return e;
}

std::vector<SftExample> build_sft_corpus(const KnowledgeStore& oracle, std::span<const ContextView> views,
                                         KnowledgeCategory category, const Demonstration& demo) {
  std::vector<SftExample> out;
  out.reserve(views.size());
  for (const auto& v : views) {
    const auto* bundle = oracle.find(v.ref());
    if (!bundle || !bundle->has(category)) {
      const bool failed = bundle && bundle->flags.contains(category) &&
                          std::ranges::find(bundle->flags.at(category), "parse_failure") !=
                              bundle->flags.at(category).end();
      if (failed) continue;
      throw Error(ErrorCode::MissingOracle, v.ref().str() + " has no " + std::string(to_string(category)) +
                                                " oracle entry");
    }
    SftExample e;
    e.prompt = render_visionary_prompt(v, category, demo);
    e.target = bundle->at(category);
    e.context_ref = v.ref();
    e.category = category;
    e.split = v.split;
    out.push_back(std::move(e));
  }
  return out;
}

void save_sft_corpus(const std::filesystem::path& path, std::span<const SftExample> corpus) {
  std::vector<json> records;
  records.reserve(corpus.size());
  for (const auto& e : corpus) records.push_back(sft_to_json(e));
  write_jsonl(path, records);
}

std::vector<SftExample> load_sft_corpus(const std::filesystem::path& path) {
  std::vector<SftExample> out;
  for (const auto& j : read_jsonl(path)) out.push_back(sft_from_json(j));
  return out;
}

FineTuneResult train_student(const CategoryCorpus& corpus, KnowledgeCategory category, Gateway& gateway,
                             const ModelHandle& base, const TrainConfig& cfg) {
  const std::string name(to_string(category));
  if (corpus.train.empty()) throw Error(ErrorCode::EmptyTrainset, name + ": no training examples");
  const ModelHandle student{base.backend_id, ModelKind::Visionary, category};
  try {
    return gateway.fine_tune(student, corpus.train, cfg, corpus.valid);
  } catch (const Error& e) {
    throw Error(e.code(), name + ": " + e.detail());
  }
}

EnsembleTraining train_ensemble(const std::map<KnowledgeCategory, CategoryCorpus>& corpora, Gateway& gateway,
                                const ModelHandle& base, const TrainConfig& cfg) {
  EnsembleTraining out;
  for (auto c : kAllCategories) {
    auto it = corpora.find(c);
    if (it == corpora.end()) {
      throw Error(ErrorCode::EmptyTrainset, std::string(to_string(c)) + ": no training examples");
    }
    auto result = train_student(it->second, c, gateway, base, cfg);
    out.ensemble.handles[c] = result.handle;
    out.results[c] = std::move(result);
  }
  out.ensemble.validate();
  return out;
}

KnowledgeBundle infer_bundle(const VisionaryEnsemble& ensemble, Gateway& gateway, std::span<const Utterance> history,
                             Dataset dataset, const ContextRef& ref, const DemonstrationSet& demos,
                             const DecodeParams& decode) {
  KnowledgeBundle bundle;
  bundle.context_ref = ref;
  bundle.provenance = Provenance::VisionaryModel;
  for (auto c : kAllCategories) {
    const auto prompt = render_visionary_prompt(history, dataset, c, demos.at(c));
    const auto raw = gateway.generate(ensemble.handles.at(c), prompt, decode).front();
    // Students continue after the "Answer:" cue; a repeated marker is tolerated.
    std::string text;
    try {
      text = parse_answer(raw).text;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyCompletion) throw;
    }
    if (text.empty()) {
      bundle.flags[c].push_back("parse_failure");
      continue;
    }
    bundle.entries[c] = std::move(text);
  }
  if (bundle.entries.empty()) {
    throw Error(ErrorCode::ParseFailure, ref.str() + ": no visionary category produced text");
  }
  return bundle;
}

KnowledgeBundle infer_bundle(const VisionaryEnsemble& ensemble, Gateway& gateway, const ContextView& view,
                             const DemonstrationSet& demos, const DecodeParams& decode) {
  return infer_bundle(ensemble, gateway, view.history, view.dataset, view.ref(), demos, decode);
}

}  // namespace sibyl
