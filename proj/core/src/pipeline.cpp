#include "sibyl/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <set>

#include <spdlog/spdlog.h>

#include "sibyl/mock_backend.hpp"
#include "sibyl/remote_backend.hpp"

namespace sibyl {

namespace fs = std::filesystem;

std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::Ingest: return "ingest";
    case Stage::Acquire: return "acquire";
    case Stage::TrainVisionary: return "train-visionary";
    case Stage::Infer: return "infer";
    case Stage::TrainResponder: return "train-responder";
    case Stage::Generate: return "generate";
    case Stage::Eval: return "eval";
    case Stage::Judge: return "judge";
    case Stage::AbPack: return "abpack";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  auto v = to_lower_ascii(trim(s));
  std::replace(v.begin(), v.end(), '_', '-');
  for (auto st : {Stage::Ingest, Stage::Acquire, Stage::TrainVisionary, Stage::Infer, Stage::TrainResponder,
                  Stage::Generate, Stage::Eval, Stage::Judge, Stage::AbPack}) {
    if (v == to_string(st)) return st;
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown stage '" + std::string(s) + "'");
}

std::vector<Stage> core_stages() {
  return {Stage::Ingest,         Stage::Acquire,  Stage::TrainVisionary, Stage::Infer,
          Stage::TrainResponder, Stage::Generate, Stage::Eval};
}

std::string PipelineConfig::run_id() const {
  return std::string(to_string(strategy)) + "_" + mask.label();
}

// ---------------------------------------------------------------------------
// Config

namespace {

const std::set<std::string> kTopLevelKeys{"dataset", "inputs",  "seed", "models", "acquire", "train",
                                          "student_decode", "generate", "max_in_flight", "eval", "judge",
                                          "abtest"};

const json& section(const json& doc, const char* key) {
  static const json empty = json::object();
  if (!doc.contains(key)) return empty;
  const auto& s = doc.at(key);
  if (!s.is_object()) throw Error(ErrorCode::ConfigInvalid, std::string(key) + ": expected an object");
  return s;
}

template <typename T>
T field(const json& obj, const std::string& path, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::ConfigInvalid, path + "." + key + ": wrong type");
  }
}

void check_model_id(const std::string& field_name, const std::string& id) {
  if (id.find(':') == std::string::npos || id.front() == ':' || id.back() == ':') {
    throw Error(ErrorCode::ConfigInvalid, field_name + ": '" + id + "' is not <backend>:<model>");
  }
}

}  // namespace

PipelineConfig parse_config(const json& doc_in, const fs::path& base_dir, const json& overrides) {
  if (!doc_in.is_object()) throw Error(ErrorCode::ConfigInvalid, "config: expected an object");
  json doc = doc_in;
  if (!overrides.is_null()) doc.merge_patch(overrides);
  for (const auto& [k, v] : doc.items()) {
    if (!kTopLevelKeys.contains(k)) throw Error(ErrorCode::ConfigInvalid, k + ": unknown field");
  }

  PipelineConfig c;
  auto wrap = [](const std::string& name, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ConfigInvalid && e.detail().rfind(name, 0) == 0) throw;
      throw Error(ErrorCode::ConfigInvalid, name + ": " + e.detail());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigInvalid, name + ": " + e.what());
    }
  };

  wrap("dataset", [&] { c.dataset = parse_dataset(field<std::string>(doc, "", "dataset", "ed")); });
  wrap("seed", [&] { c.seed = field<std::uint64_t>(doc, "", "seed", c.seed); });
  wrap("max_in_flight", [&] { c.max_in_flight = field<std::size_t>(doc, "", "max_in_flight", c.max_in_flight); });
  if (c.max_in_flight == 0) throw Error(ErrorCode::ConfigInvalid, "max_in_flight: must be >= 1");

  for (const auto& [k, v] : section(doc, "inputs").items()) {
    Split s{};
    wrap("inputs." + k, [&] { s = parse_split(k); });
    if (!v.is_string()) throw Error(ErrorCode::ConfigInvalid, "inputs." + k + ": expected a path");
    fs::path p = v.get<std::string>();
    c.inputs[s] = p.is_absolute() ? p : base_dir / p;
  }

  const auto& models = section(doc, "models");
  c.teacher = field(models, "models", "teacher", c.teacher);
  c.student_base = field(models, "models", "student_base", c.student_base);
  c.responder_base = field(models, "models", "responder_base", c.responder_base);
  c.judge_model = field(models, "models", "judge", c.judge_model);
  check_model_id("models.teacher", c.teacher);
  check_model_id("models.student_base", c.student_base);
  check_model_id("models.responder_base", c.responder_base);
  check_model_id("models.judge", c.judge_model);

  const auto& acq = section(doc, "acquire");
  c.acquire.max_in_flight = field(acq, "acquire", "max_in_flight", c.max_in_flight);
  c.acquire.retry_cap = field(acq, "acquire", "retry_cap", c.acquire.retry_cap);
  c.acquire.retry_temperature = field(acq, "acquire", "retry_temperature", c.acquire.retry_temperature);
  c.acquire.word_limit = field(acq, "acquire", "word_limit", c.acquire.word_limit);
  c.acquire.decode.seed = static_cast<std::int64_t>(c.seed);
  if (acq.contains("decode")) {
    wrap("acquire.decode", [&] { c.acquire.decode = decode_from_json(acq.at("decode"), c.acquire.decode); });
  }
  if (acq.contains("splits")) {
    c.acquire_splits.clear();
    wrap("acquire.splits", [&] {
      for (const auto& v : acq.at("splits")) c.acquire_splits.push_back(parse_split(v.get<std::string>()));
    });
    if (c.acquire_splits.empty()) throw Error(ErrorCode::ConfigInvalid, "acquire.splits: empty");
  }
  for (auto sp : c.acquire_splits) {
    if (sp == Split::Test) throw Error(ErrorCode::LeakageViolation, "acquire.splits: the teacher never sees TEST views");
  }
  if (acq.contains("stop_after_tasks")) {
    c.acquire.stop_after_tasks = field<std::size_t>(acq, "acquire", "stop_after_tasks", 0);
  }
  wrap("acquire.decode", [&] { c.acquire.decode.validate(); });

  wrap("train", [&] {
    auto t = section(doc, "train");
    if (t.contains("categories")) {
      c.train_categories = CategoryMask::parse(t.at("categories").get<std::string>());
      t.erase("categories");
    }
    c.train = train_config_from_json(t, c.train);
    c.train.validate();
  });

  c.student_decode.seed = static_cast<std::int64_t>(c.seed);
  wrap("student_decode", [&] {
    c.student_decode = decode_from_json(section(doc, "student_decode"), c.student_decode);
    c.student_decode.validate();
  });

  const auto& gen = section(doc, "generate");
  wrap("generate.strategy", [&] { c.strategy = parse_strategy(field<std::string>(gen, "generate", "strategy", "finetuned")); });
  wrap("generate.mask", [&] { c.mask = CategoryMask::parse(field<std::string>(gen, "generate", "mask", "all")); });
  if (c.mask.empty()) throw Error(ErrorCode::ConfigInvalid, "generate.mask: needs at least one category");
  wrap("generate.knowledge", [&] {
    c.responder_knowledge = parse_provenance(field<std::string>(gen, "generate", "knowledge", "visionary_model"));
  });
  c.response_decode = default_response_decode(static_cast<std::int64_t>(c.seed));
  wrap("generate.decode", [&] {
    if (gen.contains("decode")) c.response_decode = decode_from_json(gen.at("decode"), c.response_decode);
    c.response_decode.validate();
  });

  const auto& ev = section(doc, "eval");
  c.embeddings = field(ev, "eval", "embeddings", c.embeddings);
  c.bleu_smooth = field(ev, "eval", "bleu_smooth", c.bleu_smooth);
  if (c.embeddings.rfind("hash:", 0) != 0) {
    fs::path p = c.embeddings;
    if (p.is_relative()) c.embeddings = (base_dir / p).string();
  }

  const auto& jd = section(doc, "judge");
  if (c.dataset == Dataset::ESConv) {
    c.judge_aspects = {Aspect::Naturalness, Aspect::Supportiveness, Aspect::Coherence};
  }
  if (jd.contains("aspects")) {
    c.judge_aspects.clear();
    wrap("judge.aspects", [&] {
      for (const auto& a : jd.at("aspects")) c.judge_aspects.push_back(parse_aspect(a.get<std::string>()));
    });
    if (c.judge_aspects.empty()) throw Error(ErrorCode::ConfigInvalid, "judge.aspects: empty");
  }
  c.geval.n_samples = field(jd, "judge", "n", c.geval.n_samples);
  c.geval.temperature = field(jd, "judge", "temperature", c.geval.temperature);
  c.geval.top_p = field(jd, "judge", "top_p", c.geval.top_p);
  c.geval.seed = static_cast<std::int64_t>(c.seed);
  c.judge_items = field(jd, "judge", "items", c.judge_items);
  if (c.geval.n_samples < 1) throw Error(ErrorCode::ConfigInvalid, "judge.n: must be >= 1");

  const auto& ab = section(doc, "abtest");
  c.ab_run_a = field(ab, "abtest", "run_a", c.ab_run_a);
  c.ab_run_b = field(ab, "abtest", "run_b", c.ab_run_b);
  c.ab_items = field(ab, "abtest", "items", c.ab_items);
  c.ab_aspects = field(ab, "abtest", "aspects", c.ab_aspects);

  json inputs = json::object();
  for (const auto& [s, p] : c.inputs) inputs[std::string(to_string(s))] = p.lexically_relative(base_dir).generic_string();
  json splits = json::array();
  for (auto sp : c.acquire_splits) splits.push_back(to_string(sp));
  json aspects = json::array();
  for (auto a : c.judge_aspects) aspects.push_back(to_string(a));
  c.snapshot = {
      {"dataset", to_string(c.dataset)},
      {"inputs", inputs},
      {"seed", c.seed},
      {"models",
       {{"teacher", c.teacher}, {"student_base", c.student_base}, {"responder_base", c.responder_base},
        {"judge", c.judge_model}}},
      {"acquire", acquire_config_to_json(c.acquire)},
      {"acquire_splits", splits},
      {"train", train_config_to_json(c.train)},
      {"train_categories", c.train_categories.label()},
      {"student_decode", decode_to_json(c.student_decode)},
      {"generate",
       {{"strategy", to_string(c.strategy)},
        {"mask", c.mask.label()},
        {"knowledge", to_string(c.responder_knowledge)},
        {"decode", decode_to_json(c.response_decode)}}},
      {"max_in_flight", c.max_in_flight},
      {"eval", {{"embeddings", c.embeddings}, {"bleu_smooth", c.bleu_smooth}}},
      {"judge", {{"aspects", aspects}, {"items", c.judge_items}, {"geval", geval_config_to_json(c.geval)}}},
      {"abtest", {{"run_a", c.ab_run_a}, {"run_b", c.ab_run_b}, {"items", c.ab_items}, {"aspects", c.ab_aspects}}},
  };
  return c;
}

PipelineConfig load_config(const fs::path& path, const json& overrides) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
  return parse_config(doc, path.parent_path(), overrides);
}

// ---------------------------------------------------------------------------
// Workspace

fs::path Workspace::corpus(Split s) const { return root / "corpus" / (std::string(to_string(s)) + ".jsonl"); }

fs::path Workspace::sft_corpus(KnowledgeCategory c) const {
  return root / "sft" / ("visionary_" + std::string(to_string(c)) + ".jsonl");
}

fs::path Workspace::responder_corpus(CategoryMask m) const {
  return root / "sft" / ("responder_" + m.label() + ".jsonl");
}

fs::path Workspace::responder_model(CategoryMask m) const {
  return root / "models" / ("responder_" + m.label() + ".json");
}

WorkspaceLock::WorkspaceLock(const Workspace& ws) {
  fs::create_directories(ws.root);
  fd_ = ::open(ws.lockfile().c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(ErrorCode::Io, ws.lockfile().string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorCode::WorkspaceLocked, ws.root.string() + " is in use by another process");
  }
}

WorkspaceLock::~WorkspaceLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

// ---------------------------------------------------------------------------
// Manifests

json manifest_to_json(const RunManifest& m) {
  auto refs = [](const std::vector<ArtifactRef>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back({{"path", r.path.generic_string()}, {"sha256", r.sha256}});
    return a;
  };
  return {{"run_id", m.run_id},
          {"stage", to_string(m.stage)},
          {"config", m.config},
          {"details", m.details},
          {"inputs", refs(m.inputs)},
          {"outputs", refs(m.outputs)},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at}};
}

std::vector<RunManifest> load_manifests(const Workspace& ws) {
  std::vector<RunManifest> out;
  if (!fs::exists(ws.manifests())) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(ws.manifests())) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      const auto j = json::parse(read_file(f));
      RunManifest m;
      m.run_id = j.at("run_id").get<std::string>();
      m.stage = parse_stage(j.at("stage").get<std::string>());
      m.config = j.at("config");
      m.details = j.value("details", json::object());
      for (const auto& r : j.at("inputs")) m.inputs.push_back({r.at("path").get<std::string>(), r.at("sha256")});
      for (const auto& r : j.at("outputs")) m.outputs.push_back({r.at("path").get<std::string>(), r.at("sha256")});
      m.started_at = j.value("started_at", "");
      m.finished_at = j.value("finished_at", "");
      m.file = f;
      out.push_back(std::move(m));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, f.string() + ": " + e.what());
    }
  }
  return out;
}

std::unique_ptr<Gateway> make_gateway(const Workspace& ws, std::size_t max_in_flight) {
  auto gw = std::make_unique<Gateway>(ws.journal(), RetryPolicy{}, static_cast<std::ptrdiff_t>(max_in_flight));
  gw->register_backend("mock", std::make_shared<MockBackend>(ws.mock_models()));
  if (const char* base = std::getenv("SIBYL_API_BASE"); base && *base) {
    gw->register_backend("remote", std::make_shared<RemoteBackend>(RemoteBackend::from_env()));
  }
  return gw;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

class StageContext {
 public:
  StageContext(Stage stage, const PipelineConfig& cfg, const Workspace& ws, Gateway& gw)
      : stage_(stage), cfg_(cfg), ws_(ws), gw_(gw) {
    m_.stage = stage;
    m_.config = cfg.snapshot;
    m_.details = json::object();
    m_.started_at = utc_timestamp();
  }

  const PipelineConfig& cfg() const { return cfg_; }
  const Workspace& ws() const { return ws_; }
  Gateway& gw() { return gw_; }
  json& details() { return m_.details; }
  RunManifest& manifest() { return m_; }

  void require(const fs::path& p) const {
    if (!fs::exists(p)) {
      throw Error(ErrorCode::MissingUpstream, std::string(to_string(stage_)) + " needs " + p.string() +
                                                  "; run the producing stage first");
    }
  }

  void input(const fs::path& p) {
    require(p);
    m_.inputs.push_back(ref(p));
  }
  void output(const fs::path& p) { m_.outputs.push_back(ref(p)); }

  std::vector<Dialogue> corpus(Split s) {
    const auto p = ws_.corpus(s);
    input(p);
    return load_dialogues(p, cfg_.dataset, s);
  }

  RunManifest finish() {
    m_.finished_at = utc_timestamp();
    fs::create_directories(ws_.manifests());
    for (int seq = static_cast<int>(load_manifests(ws_).size()) + 1;; ++seq) {
      char name[64];
      std::snprintf(name, sizeof name, "%03d_%s.json", seq, std::string(to_string(stage_)).c_str());
      const auto path = ws_.manifests() / name;
      const int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY | O_CLOEXEC, 0644);
      if (fd < 0) {
        if (errno == EEXIST) continue;
        throw Error(ErrorCode::Io, path.string() + ": " + std::strerror(errno));
      }
      ::close(fd);
      m_.file = path;
      write_file(path, manifest_to_json(m_).dump(2) + "\n");
      return m_;
    }
  }

 private:
  ArtifactRef ref(const fs::path& p) const {
    return {p.lexically_relative(ws_.root), sha256_hex(read_file(p))};
  }

  Stage stage_;
  const PipelineConfig& cfg_;
  const Workspace& ws_;
  Gateway& gw_;
  RunManifest m_;
};

std::set<ContextRef> demo_refs(const DemonstrationSet& demos) {
  std::set<ContextRef> out;
  for (const auto& [c, d] : demos) out.insert(d.view.ref());
  return out;
}

std::vector<ContextView> without(std::vector<ContextView> views, const std::set<ContextRef>& excluded) {
  std::erase_if(views, [&](const ContextView& v) { return excluded.contains(v.ref()); });
  return views;
}

template <typename V>
std::vector<V> concat(std::vector<V> a, const std::vector<V>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

DemonstrationSet load_demos(StageContext& ctx) {
  ctx.input(ctx.ws().demonstrations());
  auto demos = demonstrations_from_json(json::parse(read_file(ctx.ws().demonstrations())));
  check_demonstrations(demos);
  return demos;
}

json template_fingerprints(Dataset dataset) {
  json j = json::object();
  for (auto c : kAllCategories) {
    const auto demo = builtin_demonstration(c);
    auto view = demo.view;
    view.dataset = dataset;
    j[std::string("acquire/") + std::string(to_string(c))] = render_acquisition_prompt(view, c, demo).hash();
    j[std::string("visionary/") + std::string(to_string(c))] = render_visionary_prompt(view, c, demo).hash();
  }
  KnowledgeBundle b;
  for (auto c : kAllCategories) b.entries[c] = "x";
  auto view = builtin_demonstration(KnowledgeCategory::Cause).view;
  view.dataset = dataset;
  j["generate"] = render_generation_prompt(view, b, CategoryMask::all()).hash();
  j["judge"] = render_judge_prompt(view.history, dataset, "x", Aspect::Empathy).hash();
  return j;
}

void stage_ingest(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  std::map<Split, std::vector<Dialogue>> corpora;
  for (auto s : {Split::Train, Split::Valid, Split::Test}) {
    auto it = cfg.inputs.find(s);
    if (it == cfg.inputs.end()) {
      throw Error(ErrorCode::ConfigInvalid, "inputs." + std::string(to_string(s)) + ": missing");
    }
    const auto& p = it->second;
    if (!fs::exists(p)) throw Error(ErrorCode::MissingUpstream, "input " + p.string() + " does not exist");
    ctx.manifest().inputs.push_back({p, sha256_hex(read_file(p))});
    const auto ext = to_lower_ascii(p.extension().string());
    std::vector<std::string> rejected;
    if (ext == ".csv") {
      if (cfg.dataset != Dataset::ED) throw Error(ErrorCode::ConfigInvalid, "CSV input is only read for ED");
      auto r = convert_ed_csv(p, s);
      corpora[s] = std::move(r.dialogues);
      rejected = std::move(r.rejected);
    } else if (ext == ".json") {
      if (cfg.dataset != Dataset::ESConv) throw Error(ErrorCode::ConfigInvalid, "JSON input is only read for ESConv");
      auto r = convert_esconv_json(p, s, "esconv-" + std::string(to_string(s)));
      corpora[s] = std::move(r.dialogues);
      rejected = std::move(r.rejected);
    } else {
      corpora[s] = load_dialogues(p, cfg.dataset, s);
    }
    for (const auto& r : rejected) spdlog::warn("ingest {}: rejected {}", to_string(s), r);
    const auto name = std::string(to_string(s));
    ctx.details()[name] = {{"dialogues", corpora[s].size()},
                           {"views", context_views(corpora[s]).size()},
                           {"rejected", rejected}};
  }
  check_split_partition(corpora[Split::Train], corpora[Split::Valid], corpora[Split::Test]);
  for (auto& [s, d] : corpora) {
    save_dialogues(ctx.ws().corpus(s), d);
    ctx.output(ctx.ws().corpus(s));
  }
}

void stage_acquire(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto train = context_views(ctx.corpus(Split::Train));
  const ModelHandle teacher{cfg.teacher, ModelKind::Teacher, std::nullopt};

  DemonstrationSet demos;
  if (fs::exists(ctx.ws().demonstrations())) {
    demos = demonstrations_from_json(json::parse(read_file(ctx.ws().demonstrations())));
    check_demonstrations(demos);
  } else {
    demos = select_demonstrations(train, ctx.gw(), teacher, cfg.seed, cfg.acquire);
    write_file(ctx.ws().demonstrations(), demonstrations_to_json(demos).dump(2) + "\n");
  }
  json ids = json::object();
  for (const auto& [c, d] : demos) ids[std::string(to_string(c))] = d.view.ref().str();
  ctx.details()["demonstrations"] = ids;
  ctx.details()["templates"] = template_fingerprints(cfg.dataset);

  std::vector<ContextView> views;
  for (auto sp : cfg.acquire_splits) {
    if (sp == Split::Train) {
      views = concat(views, without(train, demo_refs(demos)));
    } else if (sp == Split::Valid) {
      views = concat(views, context_views(ctx.corpus(Split::Valid)));
    } else {
      throw Error(ErrorCode::LeakageViolation, "acquisition requested for TEST views");
    }
  }
  const auto result = acquire_corpus(views, ctx.gw(), teacher, demos, ctx.ws().oracle_store(), cfg.acquire);
  std::size_t failed = 0, backend_failures = 0, flagged = 0;
  for (const auto& t : result.tasks) {
    if (t.status == TaskStatus::Failed) {
      ++failed;
      if (std::ranges::find(t.flags, "backend_error") != t.flags.end()) ++backend_failures;
    } else if (!t.flags.empty()) {
      ++flagged;
    }
  }
  ctx.details()["views"] = views.size();
  ctx.details()["tasks"] = result.tasks.size();
  ctx.details()["failed"] = failed;
  ctx.details()["flagged"] = flagged;
  ctx.details()["bundles_written"] = result.bundles_written;
  ctx.details()["skipped_views"] = result.skipped_views;
  ctx.details()["acquisition"] = result.manifest;
  if (backend_failures > 0) {
    throw Error(ErrorCode::BackendUnreachable, std::to_string(backend_failures) +
                                                   " teacher calls failed; rerun acquire to resume");
  }
  ctx.output(ctx.ws().demonstrations());
  ctx.output(ctx.ws().oracle_store());
}

void stage_train_visionary(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto demos = load_demos(ctx);
  ctx.input(ctx.ws().oracle_store());
  const auto oracle = KnowledgeStore::load(ctx.ws().oracle_store());
  const auto train = without(context_views(ctx.corpus(Split::Train)), demo_refs(demos));
  const auto valid = context_views(ctx.corpus(Split::Valid));

  std::map<KnowledgeCategory, CategoryCorpus> corpora;
  for (auto c : kAllCategories) {
    if (!cfg.train_categories.has(c)) continue;
    auto& cc = corpora[c];
    cc.train = build_sft_corpus(oracle, train, c, demos.at(c));
    cc.valid = build_sft_corpus(oracle, valid, c, demos.at(c));
    save_sft_corpus(ctx.ws().sft_corpus(c), concat(cc.train, cc.valid));
    ctx.output(ctx.ws().sft_corpus(c));
  }
  json handles = fs::exists(ctx.ws().ensemble()) ? json::parse(read_file(ctx.ws().ensemble())) : json::object();
  if (fs::exists(ctx.ws().ensemble())) ctx.input(ctx.ws().ensemble());
  const ModelHandle base{cfg.student_base, ModelKind::Visionary, std::nullopt};
  json results = json::object();
  for (auto c : kAllCategories) {
    if (!cfg.train_categories.has(c)) continue;
    const auto r = train_student(corpora.at(c), c, ctx.gw(), base, cfg.train);
    results[std::string(to_string(c))] = r.manifest;
    handles[std::string(to_string(c))] = handle_to_json(r.handle);
  }
  ctx.details()["fine_tune"] = results;
  write_file(ctx.ws().ensemble(), handles.dump(2) + "\n");
  ctx.output(ctx.ws().ensemble());
}

VisionaryEnsemble load_ensemble(StageContext& ctx) {
  ctx.input(ctx.ws().ensemble());
  const auto j = json::parse(read_file(ctx.ws().ensemble()));
  for (auto c : kAllCategories) {
    if (!j.contains(std::string(to_string(c)))) {
      throw Error(ErrorCode::MissingUpstream, "ensemble has no " + std::string(to_string(c)) +
                                                  " student; run train-visionary --category " +
                                                  std::string(to_string(c)));
    }
  }
  return ensemble_from_json(j);
}

void stage_infer(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto ensemble = load_ensemble(ctx);
  const auto demos = load_demos(ctx);
  auto views = concat(without(context_views(ctx.corpus(Split::Train)), demo_refs(demos)),
                      context_views(ctx.corpus(Split::Valid)));
  views = concat(views, context_views(ctx.corpus(Split::Test)));

  std::vector<std::optional<KnowledgeBundle>> bundles(views.size());
  std::vector<std::string> errors(views.size());
  parallel_for(views.size(), std::max<std::size_t>(1, cfg.max_in_flight / kAllCategories.size()), [&](std::size_t i) {
    try {
      bundles[i] = infer_bundle(ensemble, ctx.gw(), views[i], demos, cfg.student_decode);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  KnowledgeStore store;
  json failures = json::array();
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (bundles[i]) {
      flagged += !bundles[i]->flags.empty();
      store.put(std::move(*bundles[i]));
    } else {
      failures.push_back({{"context_ref", views[i].ref().str()}, {"error", errors[i]}});
    }
  }
  for (const auto& f : failures) spdlog::warn("infer: {} failed: {}", f["context_ref"].get<std::string>(), f["error"].get<std::string>());
  store.save(ctx.ws().visionary_store());
  ctx.details()["views"] = views.size();
  ctx.details()["bundles"] = store.size();
  ctx.details()["flagged"] = flagged;
  ctx.details()["failures"] = failures;
  ctx.output(ctx.ws().visionary_store());
}

std::vector<ContextView> with_bundles(std::vector<ContextView> views, const KnowledgeStore& store,
                                      std::size_t& dropped) {
  const auto before = views.size();
  std::erase_if(views, [&](const ContextView& v) { return !store.contains(v.ref()); });
  dropped += before - views.size();
  return views;
}

void stage_train_responder(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  if (cfg.strategy == Strategy::PromptBased) {
    ctx.details()["skipped"] = "prompt strategy generates with the base responder";
    return;
  }
  const auto demos = load_demos(ctx);
  const auto store_path =
      cfg.responder_knowledge == Provenance::VisionaryModel ? ctx.ws().visionary_store() : ctx.ws().oracle_store();
  ctx.input(store_path);
  const auto store = KnowledgeStore::load(store_path);
  std::size_t dropped = 0;
  const auto train = with_bundles(without(context_views(ctx.corpus(Split::Train)), demo_refs(demos)), store, dropped);
  const auto valid = with_bundles(context_views(ctx.corpus(Split::Valid)), store, dropped);
  const auto train_set = build_responder_corpus(train, store, cfg.mask);
  const auto valid_set = build_responder_corpus(valid, store, cfg.mask);
  save_sft_corpus(ctx.ws().responder_corpus(cfg.mask), concat(train_set, valid_set));
  ctx.output(ctx.ws().responder_corpus(cfg.mask));

  const ModelHandle base{cfg.responder_base, ModelKind::Responder, std::nullopt};
  const auto result = ctx.gw().fine_tune(base, train_set, cfg.train, valid_set);
  ctx.details()["views_without_knowledge"] = dropped;
  ctx.details()["fine_tune"] = result.manifest;
  write_file(ctx.ws().responder_model(cfg.mask),
             json{{"handle", handle_to_json(result.handle)}, {"mask", cfg.mask.label()},
                  {"selected_epoch", result.selected_epoch}}
                     .dump(2) +
                 "\n");
  ctx.output(ctx.ws().responder_model(cfg.mask));
}

void stage_generate(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  ctx.input(ctx.ws().visionary_store());
  const auto store = KnowledgeStore::load(ctx.ws().visionary_store());
  RunSpec spec;
  spec.run_id = cfg.run_id();
  spec.strategy = cfg.strategy;
  spec.mask = cfg.mask;
  spec.knowledge_provenance = Provenance::VisionaryModel;
  spec.split = Split::Test;
  spec.decode = cfg.response_decode;
  spec.max_in_flight = cfg.max_in_flight;
  if (cfg.strategy == Strategy::Finetuned) {
    ctx.input(ctx.ws().responder_model(cfg.mask));
    spec.responder = handle_from_json(json::parse(read_file(ctx.ws().responder_model(cfg.mask))).at("handle"));
  } else {
    spec.responder = ModelHandle{cfg.responder_base, ModelKind::Responder, std::nullopt};
  }
  std::size_t dropped = 0;
  const auto views = with_bundles(context_views(ctx.corpus(Split::Test)), store, dropped);

  const auto prompts = render_run_prompts(spec, views, store);
  std::vector<json> prompt_records;
  for (std::size_t i = 0; i < views.size(); ++i) {
    prompt_records.push_back({{"context_ref", views[i].ref().str()},
                              {"prompt_sha256", prompts[i].hash()},
                              {"prompt", prompt_to_json(prompts[i])}});
  }
  write_jsonl(ctx.ws().run_prompts(spec.run_id), prompt_records);

  const auto run = generate_responses(spec, views, store, ctx.gw());
  save_run(ctx.ws().run(spec.run_id), run);
  json failures = json::array();
  for (const auto& [r, e] : run.failures) failures.push_back({{"context_ref", r.str()}, {"error", e}});
  ctx.manifest().run_id = spec.run_id;
  ctx.details()["run"] = run_spec_to_json(spec);
  ctx.details()["views_without_knowledge"] = dropped;
  ctx.details()["responses"] = run.outputs.size();
  ctx.details()["failures"] = failures;
  ctx.output(ctx.ws().run_prompts(spec.run_id));
  ctx.output(ctx.ws().run(spec.run_id));
}

std::map<ContextRef, ContextView> views_by_ref(const std::vector<Dialogue>& dialogues) {
  std::map<ContextRef, ContextView> out;
  for (auto& v : context_views(dialogues)) out.emplace(v.ref(), std::move(v));
  return out;
}

std::unique_ptr<metrics::EmbeddingProvider> make_provider(const std::string& spec, std::uint64_t seed) {
  if (spec.rfind("hash:", 0) == 0) {
    std::size_t dim = 0;
    try {
      dim = std::stoul(spec.substr(5));
    } catch (const std::exception&) {
      throw Error(ErrorCode::ConfigInvalid, "eval.embeddings: bad dimension in '" + spec + "'");
    }
    return std::make_unique<metrics::HashEmbeddingProvider>(dim, seed);
  }
  return std::make_unique<metrics::TableEmbeddingProvider>(metrics::TableEmbeddingProvider::load(spec));
}

void stage_eval(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto run_id = cfg.run_id();
  ctx.input(ctx.ws().run(run_id));
  const auto records = load_run(ctx.ws().run(run_id));
  const auto refs = views_by_ref(ctx.corpus(Split::Test));
  std::vector<metrics::EvalPair> pairs;
  for (const auto& r : records) {
    auto it = refs.find(r.context_ref);
    if (it == refs.end()) {
      throw Error(ErrorCode::ViewMismatch, r.context_ref.str() + " is not a TEST view of the corpus");
    }
    pairs.push_back(metrics::make_pair(r.response, {it->second.target.text}));
  }
  const auto provider = make_provider(cfg.embeddings, cfg.seed);
  const auto report = metrics::evaluate(pairs, *provider, {cfg.bleu_smooth});
  write_file(ctx.ws().report(run_id), report.to_flat());
  ctx.manifest().run_id = run_id;
  json values = json::object();
  for (const auto& [k, v] : report.items()) values[k] = v;
  ctx.details()["report"] = values;
  ctx.output(ctx.ws().report(run_id));
}

void stage_judge(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  const auto run_id = cfg.run_id();
  ctx.input(ctx.ws().run(run_id));
  const auto records = load_run(ctx.ws().run(run_id));
  const auto refs = views_by_ref(ctx.corpus(Split::Test));
  if (records.empty()) throw Error(ErrorCode::EmptyCorpus, run_id + " has no responses");
  const auto n = std::min(cfg.judge_items, records.size());
  auto picked = sample_without_replacement(records.size(), n, cfg.seed);
  std::sort(picked.begin(), picked.end());

  const ModelHandle judge{cfg.judge_model, ModelKind::Judge, std::nullopt};
  struct Job {
    std::size_t record;
    Aspect aspect;
  };
  std::vector<Job> jobs;
  for (auto i : picked) {
    for (auto a : cfg.judge_aspects) jobs.push_back({i, a});
  }
  std::vector<std::optional<JudgeScore>> scores(jobs.size());
  std::vector<std::string> errors(jobs.size());
  parallel_for(jobs.size(), cfg.max_in_flight, [&](std::size_t k) {
    const auto& r = records[jobs[k].record];
    const auto& view = refs.at(r.context_ref);
    try {
      scores[k] = geval_score(view.history, cfg.dataset, r.response, jobs[k].aspect, judge, ctx.gw(), cfg.geval);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AllSamplesUnparseable) throw;
      errors[k] = e.what();
    }
  });
  std::vector<json> out;
  std::map<Aspect, std::pair<double, std::size_t>> means;
  std::size_t unparseable = 0;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    const auto& r = records[jobs[k].record];
    json j{{"dialogue_id", r.context_ref.dialogue_id}, {"cut", r.context_ref.cut}, {"aspect", to_string(jobs[k].aspect)}};
    if (scores[k]) {
      json probs = json::object();
      for (const auto& [rating, p] : scores[k]->probs) probs[std::to_string(rating)] = p;
      j["samples"] = scores[k]->samples;
      j["probs"] = probs;
      j["weighted"] = scores[k]->weighted;
      j["dropped"] = scores[k]->dropped;
      auto& m = means[jobs[k].aspect];
      m.first += scores[k]->weighted;
      ++m.second;
    } else {
      j["error"] = errors[k];
      ++unparseable;
    }
    out.push_back(std::move(j));
  }
  write_jsonl(ctx.ws().judge_scores(run_id), out);
  json summary = json::object();
  for (const auto& [a, m] : means) summary[std::string(to_string(a))] = m.first / static_cast<double>(m.second);
  ctx.manifest().run_id = run_id;
  ctx.details()["items"] = n;
  ctx.details()["mean_weighted"] = summary;
  ctx.details()["unparseable"] = unparseable;
  ctx.details()["geval"] = geval_config_to_json(cfg.geval);
  ctx.output(ctx.ws().judge_scores(run_id));
}

void stage_abpack(StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  if (cfg.ab_run_a.empty() || cfg.ab_run_b.empty()) {
    throw Error(ErrorCode::ConfigInvalid, "abtest.run_a and abtest.run_b: both runs must be named");
  }
  auto load = [&](const std::string& id) {
    ctx.input(ctx.ws().run(id));
    AbRunInput in;
    in.system = id;
    for (auto& r : load_run(ctx.ws().run(id))) in.responses[r.context_ref] = std::move(r.response);
    return in;
  };
  const auto a = load(cfg.ab_run_a);
  const auto b = load(cfg.ab_run_b);
  std::map<ContextRef, std::string> contexts;
  for (const auto& [ref, v] : views_by_ref(ctx.corpus(Split::Test))) contexts[ref] = format_clip(v.history, cfg.dataset);
  auto n = cfg.ab_items;
  if (n > a.responses.size() && a.responses.size() == b.responses.size()) {
    spdlog::warn("abpack: {} items requested, {} shared views available", n, a.responses.size());
    ctx.details()["requested_items"] = n;
    n = a.responses.size();
  }
  const auto items = build_ab_pack(a, b, contexts, n, cfg.seed);
  csv::write(ctx.ws().ab_sheet(), ab_sheet(items, cfg.ab_aspects));
  csv::write(ctx.ws().ab_key(), ab_key(items));
  std::size_t flipped = 0;
  for (const auto& it : items) flipped += it.flipped;
  ctx.details()["items"] = items.size();
  ctx.details()["flipped"] = flipped;
  ctx.output(ctx.ws().ab_sheet());
  ctx.output(ctx.ws().ab_key());
}

}  // namespace

RunManifest run_stage(Stage stage, const PipelineConfig& cfg, const Workspace& ws, Gateway& gateway) {
  StageContext ctx(stage, cfg, ws, gateway);
  ctx.manifest().run_id = std::string(to_string(stage));
  spdlog::info("stage {} in {}", to_string(stage), ws.root.string());
  switch (stage) {
    case Stage::Ingest: stage_ingest(ctx); break;
    case Stage::Acquire: stage_acquire(ctx); break;
    case Stage::TrainVisionary: stage_train_visionary(ctx); break;
    case Stage::Infer: stage_infer(ctx); break;
    case Stage::TrainResponder: stage_train_responder(ctx); break;
    case Stage::Generate: stage_generate(ctx); break;
    case Stage::Eval: stage_eval(ctx); break;
    case Stage::Judge: stage_judge(ctx); break;
    case Stage::AbPack: stage_abpack(ctx); break;
  }
  return ctx.finish();
}

std::vector<RunManifest> run_pipeline(const PipelineConfig& cfg, const Workspace& ws, Gateway& gateway) {
  WorkspaceLock lock(ws);
  std::vector<RunManifest> out;
  for (auto s : core_stages()) out.push_back(run_stage(s, cfg, ws, gateway));
  return out;
}

}  // namespace sibyl
