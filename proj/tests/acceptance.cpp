// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "metric_oracle.hpp"
#include "sibyl/mock_backend.hpp"
#include "sibyl/pipeline.hpp"
#include "support.hpp"

using namespace sibyl;
using sibyl::testing::fixture;
using sibyl::testing::golden;
using sibyl::testing::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool ok = true;
  std::ostringstream why;

  void check(bool cond, const std::string& what) {
    if (!cond && ok) why << what;
    ok = ok && cond;
  }
  void near(double got, double want, double tol, const std::string& what) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s: got %.12g want %.12g", what.c_str(), got, want);
    check(std::abs(got - want) <= tol, buf);
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Shared end-to-end workspace built once by the pipeline criterion.
struct Shared {
  TempDir tmp;
  Workspace ws{tmp / "run-a"};
  PipelineConfig cfg = load_config(fixture("pipeline/config.json"));
  bool built = false;
};

Shared& shared() {
  static Shared s;
  return s;
}

std::map<std::string, std::string> output_hashes(const Workspace& ws) {
  std::map<std::string, std::string> h;
  for (const auto& m : load_manifests(ws)) {
    for (const auto& o : m.outputs) h[o.path.generic_string()] = sha256_hex(read_file(ws.root / o.path));
  }
  return h;
}

std::string message_text(const json& messages) {
  std::string out;
  for (const auto& m : messages) out += m.at("content").get<std::string>() + "\n";
  return out;
}

std::vector<ContextView> views_of(const Workspace& ws, Split s, Dataset d) {
  return context_views(load_dialogues(ws.corpus(s), d, s));
}

// ---------------------------------------------------------------------------

void metric_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  std::vector<metrics::EvalPair> pairs;
  std::vector<oracle::Item> items;
  for (const auto& j : read_jsonl(fixture("metric_pairs.jsonl"))) {
    const auto cand = j.at("candidate").get<std::string>();
    const auto refs = j.at("references").get<std::vector<std::string>>();
    pairs.push_back(metrics::make_pair(cand, refs));
    oracle::Item it{oracle::words(cand), {}};
    for (const auto& r : refs) it.refs.push_back(oracle::words(r));
    items.push_back(std::move(it));
  }
  o.check(pairs.size() == 20, "fixture is not 20 pairs");
  constexpr double tol = 1e-6;
  for (int n = 1; n <= 4; ++n) o.near(metrics::bleu(pairs, n), oracle::bleu(items, n), tol, "bleu" + std::to_string(n));
  std::vector<metrics::Tokens> cands;
  std::vector<oracle::Words> ocands;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    cands.push_back(pairs[i].candidate);
    ocands.push_back(items[i].cand);
  }
  for (int n = 1; n <= 3; ++n) {
    o.near(metrics::distinct(cands, n), oracle::distinct(ocands, n), tol, "dist" + std::to_string(n));
  }
  o.near(metrics::rouge_l(pairs), oracle::rouge_l(items), tol, "rouge_l");
  o.near(metrics::meteor(pairs), oracle::meteor(items), tol, "meteor");
  o.near(metrics::cider(pairs), oracle::cider(items), tol, "cider");
  const auto table = metrics::TableEmbeddingProvider::load(fixture("toy_embeddings.txt"));
  const auto emb = metrics::embedding_scores(pairs, table);
  const auto [avg, ext] =
      oracle::embedding(items, [&](const std::string& t) { return table.vector(t); }, table.dimension());
  o.near(emb.average, avg, tol, "average");
  o.near(emb.extrema, ext, tol, "extrema");
  const auto secs = seconds_since(t0);
  o.check(secs < 5.0, "took " + std::to_string(secs) + " s");
}

void metric_identity_range(Outcome& o) {
  std::mt19937_64 rng(2024);
  metrics::HashEmbeddingProvider hash(16, 7);
  for (int i = 0; i < 100; ++i) {
    const auto s = sibyl::testing::random_sentence(rng, 4, 12);
    const std::vector<metrics::EvalPair> p = {metrics::make_pair(s, {s})};
    const auto len = static_cast<double>(p[0].candidate.size());
    for (int n = 1; n <= 4; ++n) o.near(metrics::bleu(p, n), 1.0, 1e-12, "identity bleu");
    o.near(metrics::rouge_l(p), 1.0, 1e-12, "identity rouge");
    o.near(metrics::meteor(p), 1.0 - 0.5 / (len * len * len), 1e-12, "identity meteor");
    const auto e = metrics::embedding_scores(p, hash);
    o.near(e.average, 1.0, 1e-12, "identity average");
    o.near(e.extrema, 1.0, 1e-12, "identity extrema");
  }
  std::vector<metrics::EvalPair> fuzz;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> refs;
    for (std::size_t r = 0; r < 1 + uniform_below(rng, 3); ++r) refs.push_back(sibyl::testing::random_sentence(rng, 1, 12));
    fuzz.push_back(metrics::make_pair(sibyl::testing::random_sentence(rng, 1, 12), refs));
    const auto m = metrics::meteor({fuzz.back()});
    o.check(m >= 0.0 && m < 1.0, "meteor out of range");
    const auto r = metrics::rouge_l({fuzz.back()});
    o.check(r >= 0.0 && r <= 1.0, "rouge out of range");
  }
  const auto rep = metrics::evaluate(fuzz, hash);
  for (double b : {rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4}) o.check(b >= 0.0 && b <= 1.0, "bleu out of range");
  for (double d : {rep.dist1, rep.dist2, rep.dist3}) o.check(d > 0.0 && d <= 1.0, "dist out of range");
  o.check(rep.cider >= 0.0, "cider negative");
  o.check(std::abs(rep.avg_cos) <= 1.0 + 1e-12 && std::abs(rep.ext_cos) <= 1.0 + 1e-12, "cosine out of range");
  o.near(metrics::distinct({metrics::tokenize("a a b")}, 1), 2.0 / 3.0, 1e-9, "dist1(a a b)");
}

void end_to_end(Outcome& o) {
  auto& s = shared();
  const auto t0 = Clock::now();
  const Workspace second{s.tmp / "run-b"};
  for (const Workspace* ws : {static_cast<const Workspace*>(&s.ws), &second}) {
    auto gw = make_gateway(*ws, s.cfg.max_in_flight);
    const auto manifests = run_pipeline(s.cfg, *ws, *gw);
    o.check(manifests.size() == 7, "expected 7 manifests");
  }
  s.built = true;
  const auto secs = seconds_since(t0);
  o.check(load_manifests(s.ws).size() == 7, "manifest files != 7");
  const auto report = metrics::MetricReport::from_flat(read_file(s.ws.report(s.cfg.run_id())));
  o.check(report.pairs > 0, "empty MetricReport");
  const auto a = output_hashes(s.ws), b = output_hashes(second);
  o.check(!a.empty() && a == b, "artifact hashes differ between runs");
  o.check(secs < 60.0, "two runs took " + std::to_string(secs) + " s");
}

void leakage(Outcome& o) {
  auto& s = shared();
  o.check(s.built, "pipeline workspace missing");
  if (!s.built) return;
  std::size_t violations = 0;
  const auto test_views = views_of(s.ws, Split::Test, s.cfg.dataset);
  std::set<std::string> other_texts;
  for (auto sp : {Split::Train, Split::Valid}) {
    for (const auto& d : load_dialogues(s.ws.corpus(sp), s.cfg.dataset, sp)) {
      for (const auto& u : d.utterances) other_texts.insert(u.text);
    }
  }
  std::set<std::string> test_only;
  for (const auto& d : load_dialogues(s.ws.corpus(Split::Test), s.cfg.dataset, Split::Test)) {
    for (const auto& u : d.utterances) {
      if (!other_texts.contains(u.text)) test_only.insert(u.text);
    }
  }
  o.check(!test_only.empty(), "no test-only utterances to scan for");

  // Teacher requests never see TEST dialogue text.
  std::size_t teacher_requests = 0;
  for (const auto& e : read_jsonl(s.ws.journal())) {
    if (e.at("request").at("model") != s.cfg.teacher) continue;
    ++teacher_requests;
    const auto body = message_text(e.at("request").at("messages"));
    for (const auto& t : test_only) violations += contains(body, t);
  }
  o.check(teacher_requests > 0, "no teacher requests journaled");

  // Student and responder prompts for TEST views never contain the gold response.
  const auto demos = demonstrations_from_json(json::parse(read_file(s.ws.demonstrations())));
  for (const auto& v : test_views) {
    for (auto c : kAllCategories) violations += contains(render_visionary_prompt(v, c, demos.at(c)).text(), v.target.text);
  }
  std::size_t generation_prompts = 0;
  std::map<std::string, std::string> gold;
  for (const auto& v : test_views) gold[v.ref().str()] = v.target.text;
  for (const auto& j : read_jsonl(s.ws.run_prompts(s.cfg.run_id()))) {
    ++generation_prompts;
    auto g = gold.find(j.at("context_ref").get<std::string>());
    if (g == gold.end()) {
      ++violations;
      continue;
    }
    violations += contains(message_text(j.at("prompt").at("messages")), g->second);
  }
  o.check(generation_prompts == test_views.size(), "generation prompt log does not cover the TEST views");

  // Demonstrations come from TRAIN dialogues only.
  std::set<std::string> train_ids;
  for (const auto& d : load_dialogues(s.ws.corpus(Split::Train), s.cfg.dataset, Split::Train)) train_ids.insert(d.id);
  for (const auto& [c, d] : demos) violations += d.view.split != Split::Train || !train_ids.contains(d.view.dialogue_id);

  o.check(violations == 0, std::to_string(violations) + " leakage violations");
}

void ablation(Outcome& o) {
  auto& s = shared();
  o.check(s.built, "pipeline workspace missing");
  if (!s.built) return;
  const auto views = views_of(s.ws, Split::Test, s.cfg.dataset);
  const auto store = KnowledgeStore::load(s.ws.visionary_store());
  auto spec = [](CategoryMask m) {
    RunSpec r;
    r.run_id = "finetuned_" + m.label();
    r.mask = m;
    r.responder = {"mock:responder", ModelKind::Responder, std::nullopt};
    return r;
  };
  const auto full = render_run_prompts(spec(CategoryMask::all()), views, store);
  std::size_t checked = 0, held = 0;
  for (auto c : kAllCategories) {
    const auto ablated = render_run_prompts(spec(CategoryMask::all_except(c)), views, store);
    for (std::size_t i = 0; i < views.size(); ++i) {
      ++checked;
      auto value = store.find(views[i].ref())->at(c);
      while (!value.empty() && value.back() == '.') value.pop_back();
      const auto slot = "\n\n" + slot_lead_in(c, s.cfg.dataset) + " " + value + ".";
      auto expected = full[i].text();
      const auto at = expected.find(slot);
      if (at == std::string::npos) continue;
      expected.erase(at, slot.size());
      held += ablated[i].text() == expected && count_slot_lead_ins(ablated[i].text()) == 3;
    }
  }
  o.check(checked > 0, "no prompts");
  o.check(held == checked, std::to_string(held) + "/" + std::to_string(checked) + " prompts satisfy the diff property");
}

void hyperparameters(Outcome& o) {
  const json train = {{"learning_rate", 3e-5},
                      {"batch_size", 16},
                      {"max_epochs", 5},
                      {"optimizer", "adam"},
                      {"adapter", {{"rank", 8}, {"alpha", 16}, {"dropout", 0.05}, {"target_projections", {"Q", "V"}}}},
                      {"selection_metric", "valid_nll"}};
  o.check(train_config_to_json(TrainConfig{}) == train, "train config: " + train_config_to_json(TrainConfig{}).dump());
  const json geval = {{"n", 20}, {"temperature", 1.0}, {"top_p", 1.0}, {"ratings", {1, 2, 3}}};
  auto got = geval_config_to_json(GEvalConfig{});
  for (const auto& [k, v] : geval.items()) o.check(got.at(k) == v, "geval " + k + ": " + got.at(k).dump());
  auto& s = shared();
  if (s.built) {
    for (const auto& m : load_manifests(s.ws)) {
      if (m.stage != Stage::TrainVisionary) continue;
      for (const auto& [cat, d] : m.details.at("fine_tune").items()) {
        o.check(d.at("train_config") == train, "student " + cat + " manifest train_config differs");
      }
    }
  }
}

void geval_arithmetic(Outcome& o) {
  Gateway gw;
  gw.register_backend("mock", std::make_shared<MockBackend>());
  const auto d = sibyl::testing::golden_dialogue();
  const std::vector<Utterance> history(d.utterances.begin(), d.utterances.begin() + 3);
  auto score = [&](const std::string& model) {
    return geval_score(history, Dataset::ED, d.utterances[3].text, Aspect::Empathy, {model, ModelKind::Judge, std::nullopt}, gw)
        .weighted;
  };
  o.near(score("mock:ratings=1x5,2x10,3x5"), 2.0, 1e-9, "mixed multiset");
  o.near(score("mock:ratings=3x20"), 3.0, 1e-12, "all-3 multiset");
}

void kappa(Outcome& o) {
  o.near(fleiss_kappa({{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {0, 0, 0}}), 1.0, 1e-12, "perfect agreement");
  // P_bar = 7/12, P_e = 31/72, kappa = 11/41
  o.near(fleiss_kappa({{0, 0, 0}, {0, 0, 1}, {1, 1, 1}, {0, 1, 2}}), 11.0 / 41.0, 1e-9, "4x3 matrix");
  std::mt19937_64 rng(8);
  std::vector<std::vector<int>> m(50, std::vector<int>(5));
  for (auto& row : m) {
    for (auto& v : row) v = static_cast<int>(uniform_below(rng, 3));
  }
  const auto k = fleiss_kappa(m);
  o.check(std::abs(k) < 0.15, "random 50x5 kappa " + std::to_string(k));
}

void goldens(Outcome& o) {
  const auto d = sibyl::testing::golden_dialogue();
  auto view_at = [](const Dialogue& dl, std::size_t cut) {
    for (auto& v : context_views(dl)) {
      if (v.cut == cut) return v;
    }
    throw Error(ErrorCode::MalformedRecord, "no view at cut " + std::to_string(cut));
  };
  auto same = [&](const std::string& text, const std::string& file) {
    o.check(text == read_file(golden(file)), file + " differs");
  };
  auto two = d;
  two.utterances.resize(2);
  same(render_acquisition_prompt(view_at(two, 1), KnowledgeCategory::Cause,
                                 builtin_demonstration(KnowledgeCategory::Cause))
           .text(),
       "acquire_cause_ed_2turn.txt");
  const auto v = view_at(d, 3);
  for (auto c : kAllCategories) {
    same(render_visionary_prompt(v, c, builtin_demonstration(c)).text(),
         "visionary_" + std::string(to_string(c)) + "_ed.txt");
  }
  KnowledgeBundle b;
  b.context_ref = v.ref();
  b.entries[KnowledgeCategory::Cause] = "The listener wants to keep the mood light while offering a practical fix.";
  b.entries[KnowledgeCategory::SubsequentEvent] = "The speaker buys chew toys and the puppy stops ruining shoes";
  b.entries[KnowledgeCategory::EmotionState] = "The speaker feels amused but a little exasperated..";
  b.entries[KnowledgeCategory::Intention] =
      "The listener intends to reassure the speaker that this is normal puppy behaviour.";
  same(render_generation_prompt(v, b, CategoryMask::all()).text(), "generate_all_ed.txt");
  for (auto c : kAllCategories) {
    same(render_generation_prompt(v, b, CategoryMask::all_except(c)).text(),
         "generate_minus_" + std::string(to_string(c)) + "_ed.txt");
  }
  same(render_judge_prompt(v.history, Dataset::ED, v.target.text, Aspect::Empathy).text(), "judge_empathy_ed.txt");
}

void memorization(Outcome& o) {
  auto& s = shared();
  o.check(s.built, "pipeline workspace missing");
  if (!s.built) return;
  auto gw = make_gateway(s.ws, 1);
  const auto ensemble = ensemble_from_json(json::parse(read_file(s.ws.ensemble())));
  const auto demos = demonstrations_from_json(json::parse(read_file(s.ws.demonstrations())));
  const auto oracle_store = KnowledgeStore::load(s.ws.oracle_store());
  std::size_t total = 0, exact = 0;
  for (const auto& v : views_of(s.ws, Split::Train, s.cfg.dataset)) {
    const auto* want = oracle_store.find(v.ref());
    if (!want) continue;
    ++total;
    exact += infer_bundle(ensemble, *gw, v, demos, s.cfg.student_decode).entries == want->entries;
  }
  o.check(total > 0, "no TRAIN views with oracle bundles");
  o.check(exact == total, std::to_string(exact) + "/" + std::to_string(total) + " bundles match");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"metric oracle suite", metric_oracle},
      {"metric identity and range suite", metric_identity_range},
      {"end-to-end mock pipeline", end_to_end},
      {"leakage scan", leakage},
      {"ablation slot-diff", ablation},
      {"hyperparameter defaults", hyperparameters},
      {"G-Eval weighted arithmetic", geval_arithmetic},
      {"Fleiss kappa", kappa},
      {"prompt golden files", goldens},
      {"memorization round-trip", memorization},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    if (o.ok) {
      std::printf("PASS %s\n", name.c_str());
    } else {
      ++failed;
      std::printf("FAIL %s: %s\n", name.c_str(), o.why.str().c_str());
    }
  }
  return failed == 0 ? 0 : 1;
}
