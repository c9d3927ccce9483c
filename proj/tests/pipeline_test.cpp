#include <gtest/gtest.h>

#include "sibyl/pipeline.hpp"
#include "support.hpp"

using namespace sibyl;
using sibyl::testing::TempDir;

namespace {

std::filesystem::path config_path() { return sibyl::testing::fixture("pipeline/config.json"); }

std::map<std::string, std::string> output_hashes(const Workspace& ws) {
  std::map<std::string, std::string> h;
  for (const auto& m : load_manifests(ws)) {
    for (const auto& o : m.outputs) h[o.path.generic_string()] = sha256_hex(read_file(ws.root / o.path));
  }
  return h;
}

ErrorCode config_error(const json& overrides) {
  try {
    load_config(config_path(), overrides);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

std::vector<RunManifest> run_all(const PipelineConfig& cfg, const Workspace& ws) {
  auto gw = make_gateway(ws, cfg.max_in_flight);
  return run_pipeline(cfg, ws, *gw);
}

}  // namespace

TEST(Pipeline, EndToEndWritesManifestsAndReport) {
  TempDir tmp;
  const Workspace ws{tmp / "ws"};
  const auto cfg = load_config(config_path());
  const auto manifests = run_all(cfg, ws);
  ASSERT_EQ(manifests.size(), 7u);
  const auto loaded = load_manifests(ws);
  ASSERT_EQ(loaded.size(), 7u);
  const auto stages = core_stages();
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].stage, stages[i]);
    char name[64];
    std::snprintf(name, sizeof name, "%03zu_%s.json", i + 1, std::string(to_string(stages[i])).c_str());
    EXPECT_EQ(loaded[i].file.filename(), name);
    EXPECT_FALSE(loaded[i].outputs.empty()) << name;
    EXPECT_EQ(loaded[i].config, cfg.snapshot);
    for (const auto& o : loaded[i].outputs) EXPECT_EQ(sha256_hex(read_file(ws.root / o.path)), o.sha256);
  }
  const auto report = metrics::MetricReport::from_flat(read_file(ws.report(cfg.run_id())));
  EXPECT_EQ(report.pairs, load_run(ws.run(cfg.run_id())).size());
  EXPECT_GT(report.pairs, 0u);
  EXPECT_GT(report.dist1, 0.0);

  const auto ensemble = ensemble_from_json(json::parse(read_file(ws.ensemble())));
  EXPECT_NO_THROW(ensemble.validate());
  const auto visionary = KnowledgeStore::load(ws.visionary_store());
  for (const auto& r : load_run(ws.run(cfg.run_id()))) {
    ASSERT_NE(visionary.find(r.context_ref), nullptr);
    EXPECT_EQ(visionary.find(r.context_ref)->provenance, Provenance::VisionaryModel);
  }
}

TEST(Pipeline, RerunsInFreshWorkspacesAreIdentical) {
  TempDir tmp;
  const auto cfg = load_config(config_path());
  const Workspace a{tmp / "a"}, b{tmp / "b"};
  run_all(cfg, a);
  run_all(cfg, b);
  const auto ha = output_hashes(a);
  EXPECT_FALSE(ha.empty());
  EXPECT_EQ(ha, output_hashes(b));
}

TEST(Pipeline, StagesRequireUpstreamArtifacts) {
  TempDir tmp;
  const Workspace ws{tmp / "ws"};
  const auto cfg = load_config(config_path());
  auto gw = make_gateway(ws, 2);
  run_stage(Stage::Ingest, cfg, ws, *gw);
  for (auto s : {Stage::TrainVisionary, Stage::Infer, Stage::Generate, Stage::Eval}) {
    try {
      run_stage(s, cfg, ws, *gw);
      ADD_FAILURE() << to_string(s);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::MissingUpstream) << to_string(s);
    }
  }
  EXPECT_EQ(load_manifests(ws).size(), 1u);
}

TEST(Pipeline, ConfigErrorsNameTheField) {
  EXPECT_EQ(config_error({{"bogus", 1}}), ErrorCode::ConfigInvalid);
  EXPECT_EQ(config_error({{"models", {{"teacher", "no-colon"}}}}), ErrorCode::ConfigInvalid);
  EXPECT_EQ(config_error({{"max_in_flight", 0}}), ErrorCode::ConfigInvalid);
  EXPECT_EQ(config_error({{"generate", {{"mask", "none"}}}}), ErrorCode::ConfigInvalid);
  EXPECT_EQ(config_error({{"judge", {{"aspects", json::array({"wit"})}}}}), ErrorCode::ConfigInvalid);
  try {
    load_config(config_path(), {{"seed", "thirteen"}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(e.detail().find("seed"), std::string::npos) << e.what();
  }
  const auto cfg = load_config(config_path(), {{"seed", 7}, {"generate", {{"mask", "-intent"}}}});
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.run_id(), "finetuned_-intent");
  EXPECT_EQ(cfg.inputs.at(Split::Train), config_path().parent_path() / "train.jsonl");
}

TEST(Pipeline, WorkspaceLockIsExclusive) {
  TempDir tmp;
  const Workspace ws{tmp / "ws"};
  {
    WorkspaceLock held(ws);
    try {
      WorkspaceLock second(ws);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::WorkspaceLocked);
    }
  }
  EXPECT_NO_THROW(WorkspaceLock again(ws));
}

TEST(Pipeline, JudgeAndAbPackStages) {
  TempDir tmp;
  const Workspace ws{tmp / "ws"};
  const auto cfg = load_config(config_path());
  auto gw = make_gateway(ws, cfg.max_in_flight);
  run_pipeline(cfg, ws, *gw);

  const auto judged = run_stage(Stage::Judge, cfg, ws, *gw);
  const auto scores = read_jsonl(ws.judge_scores(cfg.run_id()));
  const auto items = std::min<std::size_t>(cfg.judge_items, load_run(ws.run(cfg.run_id())).size());
  EXPECT_EQ(scores.size(), items * cfg.judge_aspects.size());
  for (const auto& s : scores) EXPECT_DOUBLE_EQ(s.at("weighted").get<double>(), 2.0);
  for (const auto& [aspect, mean] : judged.details.at("mean_weighted").items()) EXPECT_DOUBLE_EQ(mean.get<double>(), 2.0);

  const auto ablated = load_config(config_path(), {{"generate", {{"mask", "-cause"}}}});
  run_stage(Stage::TrainResponder, ablated, ws, *gw);
  run_stage(Stage::Generate, ablated, ws, *gw);
  const auto ab = load_config(
      config_path(), {{"abtest", {{"run_a", cfg.run_id()}, {"run_b", ablated.run_id()}, {"items", 100}}}});
  const auto packed = run_stage(Stage::AbPack, ab, ws, *gw);
  const auto sheet = csv::read(ws.ab_sheet());
  const auto key = csv::read(ws.ab_key());
  EXPECT_EQ(sheet.size(), key.size());
  EXPECT_EQ(packed.details.at("items"), sheet.size() - 1);
  EXPECT_EQ(packed.details.at("requested_items"), 100);
  EXPECT_EQ(sheet[0].size(), 4 + cfg.ab_aspects.size());
  EXPECT_EQ(load_manifests(ws).size(), 11u);
}
