#include <gtest/gtest.h>

#include "sibyl/mock_backend.hpp"
#include "sibyl/visionary.hpp"
#include "support.hpp"

using namespace sibyl;
using sibyl::testing::TempDir;

namespace {

const ModelHandle kTeacher{"mock:teacher", ModelKind::Teacher, std::nullopt};
const ModelHandle kStudent{"mock:student", ModelKind::Responder, std::nullopt};

DemonstrationSet builtin_demos() {
  DemonstrationSet d;
  for (auto c : kAllCategories) d[c] = builtin_demonstration(c);
  return d;
}

struct Fixture {
  TempDir tmp;
  std::shared_ptr<MockBackend> mock = std::make_shared<MockBackend>();
  Gateway gw{tmp / "journal.jsonl"};
  std::vector<ContextView> train, valid, test;
  KnowledgeStore oracle;

  Fixture() {
    gw.register_backend("mock", mock);
    std::mt19937_64 rng(77);
    std::vector<Dialogue> tr, va, te;
    for (int i = 0; i < 6; ++i) tr.push_back(sibyl::testing::random_dialogue(rng, "tr" + std::to_string(i)));
    for (int i = 0; i < 2; ++i) va.push_back(sibyl::testing::random_dialogue(rng, "va" + std::to_string(i), Split::Valid));
    for (int i = 0; i < 2; ++i) te.push_back(sibyl::testing::random_dialogue(rng, "te" + std::to_string(i), Split::Test));
    train = context_views(tr);
    valid = context_views(va);
    test = context_views(te);
    std::vector<ContextView> annotate = train;
    annotate.insert(annotate.end(), valid.begin(), valid.end());
    acquire_corpus(annotate, gw, kTeacher, builtin_demos(), tmp / "oracle.jsonl");
    oracle = KnowledgeStore::load(tmp / "oracle.jsonl");
  }

  std::map<KnowledgeCategory, CategoryCorpus> corpora() const {
    std::map<KnowledgeCategory, CategoryCorpus> out;
    for (auto c : kAllCategories) {
      out[c].train = build_sft_corpus(oracle, train, c, builtin_demonstration(c));
      out[c].valid = build_sft_corpus(oracle, valid, c, builtin_demonstration(c));
    }
    return out;
  }
};

}  // namespace

TEST(BuildSftCorpus, TargetsEqualStoredKnowledge) {
  Fixture f;
  std::vector<ContextView> ten(f.train.begin(), f.train.begin() + std::min<std::size_t>(10, f.train.size()));
  for (auto c : kAllCategories) {
    const auto corpus = build_sft_corpus(f.oracle, ten, c, builtin_demonstration(c));
    ASSERT_EQ(corpus.size(), ten.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      EXPECT_EQ(corpus[i].target, f.oracle.find(ten[i].ref())->at(c));
      EXPECT_EQ(corpus[i].category, c);
      EXPECT_EQ(corpus[i].prompt.template_id, TemplateId::Visionary);
    }
  }
}

TEST(BuildSftCorpus, NoPromptContainsItsTargetResponse) {
  Fixture f;
  for (const auto& [c, corpus] : f.corpora()) {
    for (const auto& e : corpus.train) {
      const auto it = std::find_if(f.train.begin(), f.train.end(), [&](const auto& v) { return v.ref() == e.context_ref; });
      ASSERT_NE(it, f.train.end());
      EXPECT_EQ(e.prompt.text().find(it->target.text), std::string::npos);
    }
  }
}

TEST(BuildSftCorpus, MissingEntryVersusFlaggedFailure) {
  Fixture f;
  auto store = f.oracle;
  auto b = *store.find(f.train[0].ref());
  b.entries.erase(KnowledgeCategory::EmotionState);
  store.put(b);
  try {
    build_sft_corpus(store, f.train, KnowledgeCategory::EmotionState, builtin_demonstration(KnowledgeCategory::EmotionState));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingOracle);
  }
  b.flags[KnowledgeCategory::EmotionState] = {"parse_failure"};
  store.put(b);
  const auto corpus = build_sft_corpus(store, f.train, KnowledgeCategory::EmotionState,
                                       builtin_demonstration(KnowledgeCategory::EmotionState));
  EXPECT_EQ(corpus.size(), f.train.size() - 1);
}

TEST(BuildSftCorpus, SaveLoadRoundTrip) {
  Fixture f;
  const auto corpus = f.corpora().at(KnowledgeCategory::Intention).train;
  save_sft_corpus(f.tmp / "sft.jsonl", corpus);
  const auto back = load_sft_corpus(f.tmp / "sft.jsonl");
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].prompt, corpus[i].prompt);
    EXPECT_EQ(back[i].target, corpus[i].target);
  }
}

TEST(TrainEnsemble, FourIsolatedStudents) {
  Fixture f;
  const auto corpora = f.corpora();
  const auto trained = train_ensemble(corpora, f.gw, kStudent);
  ASSERT_EQ(trained.ensemble.handles.size(), 4u);
  EXPECT_NO_THROW(trained.ensemble.validate());
  for (auto c : kAllCategories) {
    const auto& h = trained.ensemble.handles.at(c);
    EXPECT_EQ(h.category, c);
    for (auto other : kAllCategories) {
      const auto& ex = corpora.at(other).train.front();
      const auto out = f.gw.generate(h, ex.prompt, {}).front();
      if (other == c) {
        EXPECT_EQ(out, ex.target);
      } else {
        EXPECT_NE(out, ex.target);
      }
    }
    const auto& cfg = trained.results.at(c).manifest.at("train_config");
    EXPECT_DOUBLE_EQ(cfg.at("learning_rate").get<double>(), 3e-5);
    EXPECT_EQ(cfg.at("batch_size"), 16);
    EXPECT_EQ(cfg.at("max_epochs"), 5);
    EXPECT_EQ(cfg.at("adapter").at("rank"), 8);
    EXPECT_EQ(cfg.at("adapter").at("alpha"), 16);
    EXPECT_EQ(trained.results.at(c).manifest.at("tag"), to_string(c));
  }
}

TEST(TrainEnsemble, SelectedEpochIsPerCategoryArgmin) {
  Fixture f;
  const std::map<KnowledgeCategory, std::vector<double>> logs = {
      {KnowledgeCategory::Cause, {3.0, 2.0, 1.0, 1.5, 1.7}},
      {KnowledgeCategory::SubsequentEvent, {1.0, 2.0, 3.0, 4.0, 5.0}},
      {KnowledgeCategory::EmotionState, {2.0, 1.1, 1.4, 1.1, 1.2}},
      {KnowledgeCategory::Intention, {5.0, 4.0, 3.0, 2.0, 0.5}}};
  for (const auto& [c, log] : logs) f.mock->script_nll(std::string(to_string(c)), log);
  const auto trained = train_ensemble(f.corpora(), f.gw, kStudent);
  for (const auto& [c, log] : logs) {
    const auto argmin = std::min_element(log.begin(), log.end()) - log.begin() + 1;
    EXPECT_EQ(trained.results.at(c).selected_epoch, argmin) << to_string(c);
  }
}

TEST(TrainEnsemble, EmptyCategoryCorpusFails) {
  Fixture f;
  auto corpora = f.corpora();
  corpora[KnowledgeCategory::Cause].train.clear();
  try {
    train_ensemble(corpora, f.gw, kStudent);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTrainset);
    EXPECT_NE(e.detail().find("cause"), std::string::npos);
  }
}

TEST(InferBundle, MemorizationRoundTripOnTrain) {
  Fixture f;
  const auto ensemble = train_ensemble(f.corpora(), f.gw, kStudent).ensemble;
  for (const auto& v : f.train) {
    auto b = infer_bundle(ensemble, f.gw, v, builtin_demos());
    const auto& o = *f.oracle.find(v.ref());
    EXPECT_EQ(b.entries, o.entries) << v.ref().str();
    EXPECT_EQ(b.provenance, Provenance::VisionaryModel);
  }
}

TEST(InferBundle, TestViewFourCallsAndStable) {
  Fixture f;
  const auto ensemble = train_ensemble(f.corpora(), f.gw, kStudent).ensemble;
  const auto before = f.gw.journal().size();
  const auto b1 = infer_bundle(ensemble, f.gw, f.test[0], builtin_demos());
  EXPECT_EQ(f.gw.journal().size() - before, 4u);
  EXPECT_TRUE(b1.complete());

  TempDir other;
  Gateway fresh;
  fresh.register_backend("mock", f.mock);
  const auto b2 = infer_bundle(ensemble, fresh, f.test[0], builtin_demos());
  EXPECT_EQ(bundle_to_json(b1).dump(), bundle_to_json(b2).dump());
  for (const auto& [c, text] : b1.entries) EXPECT_EQ(text.find(f.test[0].target.text), std::string::npos);
}

TEST(Ensemble, JsonRoundTripAndValidation) {
  VisionaryEnsemble e;
  for (auto c : kAllCategories) e.handles[c] = {"mock:ft-" + std::string(to_string(c)), ModelKind::Visionary, c};
  EXPECT_EQ(ensemble_from_json(json::parse(ensemble_to_json(e).dump())).handles, e.handles);
  auto bad = e;
  bad.handles[KnowledgeCategory::Cause].category = KnowledgeCategory::Intention;
  EXPECT_THROW(bad.validate(), Error);
  bad = e;
  bad.handles.erase(KnowledgeCategory::Cause);
  EXPECT_THROW(bad.validate(), Error);
}
