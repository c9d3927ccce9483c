#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sibyl/pipeline.hpp"
#include "sibyl/service.hpp"

namespace fs = std::filesystem;
using namespace sibyl;

namespace {

struct Globals {
  std::string config;
  std::string workspace;
  std::optional<std::uint64_t> seed;
  std::string backend;
  bool verbose = false;
};

Workspace workspace_of(const Globals& g) {
  if (!g.workspace.empty()) return {g.workspace};
  if (const char* env = std::getenv("SIBYL_WORKSPACE"); env && *env) return {env};
  return {"workspace"};
}

std::string rebackend(const std::string& id, const std::string& backend) {
  const auto colon = id.find(':');
  return backend + ":" + (colon == std::string::npos ? id : id.substr(colon + 1));
}

/// File config, then subcommand overrides, then global flags.
PipelineConfig resolve(const Globals& g, json overrides) {
  if (!overrides.is_object()) overrides = json::object();
  if (g.seed) overrides["seed"] = *g.seed;
  json doc = json::object();
  fs::path base = fs::current_path();
  if (!g.config.empty()) {
    try {
      doc = json::parse(read_file(g.config));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigInvalid, g.config + ": " + e.what());
    }
    base = fs::absolute(g.config).parent_path();
  }
  auto cfg = parse_config(doc, base, overrides);
  if (!g.backend.empty()) {
    overrides["models"] = {{"teacher", rebackend(cfg.teacher, g.backend)},
                           {"student_base", rebackend(cfg.student_base, g.backend)},
                           {"responder_base", rebackend(cfg.responder_base, g.backend)},
                           {"judge", rebackend(cfg.judge_model, g.backend)}};
    cfg = parse_config(doc, base, overrides);
  }
  return cfg;
}

void print_manifest(const RunManifest& m) {
  std::cout << to_string(m.stage) << " -> " << m.file.string() << "\n";
  for (const auto& o : m.outputs) std::cout << "  " << o.path.generic_string() << "  " << o.sha256.substr(0, 16) << "\n";
}

RunManifest stage(const Globals& g, Stage s, const json& overrides) {
  const auto cfg = resolve(g, overrides);
  const auto ws = workspace_of(g);
  WorkspaceLock lock(ws);
  auto gw = make_gateway(ws, cfg.max_in_flight);
  auto m = run_stage(s, cfg, ws, *gw);
  print_manifest(m);
  return m;
}

template <typename T>
void set_if(json& j, const std::string& key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

InferenceService* g_service = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sibyl: visionary commonsense for empathetic response generation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--workspace", g.workspace, "Workspace directory (default $SIBYL_WORKSPACE or ./workspace)");
  app.add_option("--seed", g.seed, "Override the experiment seed");
  app.add_option("--backend", g.backend, "Route every model through this backend (mock|remote)");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  std::function<int()> action;

  // --- converters -----------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("convert-ed", "EmpatheticDialogues CSV -> ingestion JSONL");
    auto in = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("train");
    cmd->add_option("--input", *in, "Raw CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", *out, "Output JSONL")->required();
    cmd->add_option("--split", *split, "train|valid|test");
    cmd->callback([=, &action] {
      action = [=] {
        auto r = convert_ed_csv(*in, parse_split(*split));
        save_dialogues(*out, r.dialogues);
        for (const auto& x : r.rejected) std::cerr << "rejected " << x << "\n";
        std::cout << r.dialogues.size() << " dialogues, " << r.rejected.size() << " rejected\n";
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("convert-esconv", "ESConv JSON -> ingestion JSONL");
    auto in = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("train");
    auto prefix = std::make_shared<std::string>("esconv");
    cmd->add_option("--input", *in, "Raw JSON array")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", *out, "Output JSONL")->required();
    cmd->add_option("--split", *split, "train|valid|test");
    cmd->add_option("--prefix", *prefix, "Dialogue id prefix");
    cmd->callback([=, &action] {
      action = [=] {
        auto r = convert_esconv_json(*in, parse_split(*split), *prefix);
        save_dialogues(*out, r.dialogues);
        for (const auto& x : r.rejected) std::cerr << "rejected " << x << "\n";
        std::cout << r.dialogues.size() << " dialogues, " << r.rejected.size() << " rejected\n";
        return 0;
      };
    });
  }

  // --- stages -----------------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("ingest", "Validate and copy the three splits into the workspace");
    auto dataset = std::make_shared<std::optional<std::string>>();
    auto train = std::make_shared<std::optional<std::string>>();
    auto valid = std::make_shared<std::optional<std::string>>();
    auto test = std::make_shared<std::optional<std::string>>();
    cmd->add_option("--dataset", *dataset, "ed|esconv");
    cmd->add_option("--train", *train, "TRAIN input (.jsonl, ED .csv or ESConv .json)");
    cmd->add_option("--valid", *valid, "VALID input");
    cmd->add_option("--test", *test, "TEST input");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        json o = json::object();
        set_if(o, "dataset", *dataset);
        json inputs = json::object();
        for (auto [k, v] : {std::pair{"train", train}, std::pair{"valid", valid}, std::pair{"test", test}}) {
          if (*v) inputs[k] = fs::absolute(**v).string();
        }
        if (!inputs.empty()) o["inputs"] = inputs;
        stage(g, Stage::Ingest, o);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("acquire", "Teacher annotation of TRAIN/VALID views");
    auto dataset = std::make_shared<std::optional<std::string>>();
    auto split = std::make_shared<std::optional<std::string>>();
    auto teacher = std::make_shared<std::optional<std::string>>();
    auto stop_after = std::make_shared<std::optional<std::size_t>>();
    cmd->add_option("--dataset", *dataset, "ed|esconv");
    cmd->add_option("--split", *split, "train|valid|all");
    cmd->add_option("--teacher", *teacher, "Teacher backend id, e.g. remote:gpt-4o");
    cmd->add_option("--stop-after", *stop_after, "Stop after this many tasks (resume later)");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        json o = json::object();
        set_if(o, "dataset", *dataset);
        if (*teacher) o["models"]["teacher"] = **teacher;
        if (*split && **split != "all") o["acquire"]["splits"] = json::array({**split});
        if (*stop_after) o["acquire"]["stop_after_tasks"] = **stop_after;
        stage(g, Stage::Acquire, o);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("train-visionary", "Fine-tune the category students on oracle knowledge");
    auto category = std::make_shared<std::string>("all");
    cmd->add_option("--category", *category, "all|cause|subsequent|emotion|intent (comma list)");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        stage(g, Stage::TrainVisionary, {{"train", {{"categories", *category}}}});
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("infer", "Visionary knowledge for every view");
    cmd->callback([&action, &g] {
      action = [&g] {
        stage(g, Stage::Infer, json::object());
        return 0;
      };
    });
  }
  auto generation_flags = [](CLI::App* cmd, std::shared_ptr<std::optional<std::string>> strategy,
                             std::shared_ptr<std::optional<std::string>> mask) {
    cmd->add_option("--strategy", *strategy, "finetuned|prompt");
    cmd->add_option("--mask", *mask, "all|-cause|-subs|-emo|-intent");
  };
  auto generation_overrides = [](const std::optional<std::string>& strategy, const std::optional<std::string>& mask) {
    json o = json::object();
    if (strategy) o["generate"]["strategy"] = *strategy;
    if (mask) o["generate"]["mask"] = *mask;
    return o;
  };
  {
    auto* cmd = app.add_subcommand("train-responder", "Fine-tune the responder on knowledge-augmented prompts");
    auto strategy = std::make_shared<std::optional<std::string>>();
    auto mask = std::make_shared<std::optional<std::string>>();
    auto knowledge = std::make_shared<std::optional<std::string>>();
    generation_flags(cmd, strategy, mask);
    cmd->add_option("--knowledge", *knowledge, "visionary_model|teacher_oracle");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        auto o = generation_overrides(*strategy, *mask);
        if (*knowledge) o["generate"]["knowledge"] = **knowledge;
        stage(g, Stage::TrainResponder, o);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("generate", "Responses for TEST views");
    auto strategy = std::make_shared<std::optional<std::string>>();
    auto mask = std::make_shared<std::optional<std::string>>();
    generation_flags(cmd, strategy, mask);
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        stage(g, Stage::Generate, generation_overrides(*strategy, *mask));
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("eval", "Automatic metrics for a run");
    auto strategy = std::make_shared<std::optional<std::string>>();
    auto mask = std::make_shared<std::optional<std::string>>();
    auto run = std::make_shared<std::string>();
    auto refs = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto dataset = std::make_shared<std::string>("ed");
    auto embeddings = std::make_shared<std::string>("hash:64");
    auto smooth = std::make_shared<bool>(false);
    generation_flags(cmd, strategy, mask);
    cmd->add_option("--run", *run, "Run file (standalone mode, with --refs and --out)");
    cmd->add_option("--refs", *refs, "Reference corpus (ingestion JSONL, TEST split)");
    cmd->add_option("--out", *out, "Report file");
    cmd->add_option("--dataset", *dataset, "Dataset of --refs");
    cmd->add_option("--embeddings", *embeddings, "hash:<dim> or a word-vector text file");
    cmd->add_flag("--smooth", *smooth, "Smooth zero BLEU precisions");
    cmd->callback([=, &action, &g] {
      action = [=, &g]() -> int {
        if (run->empty()) {
          auto o = generation_overrides(*strategy, *mask);
          if (*smooth) o["eval"]["bleu_smooth"] = true;
          stage(g, Stage::Eval, o);
          return 0;
        }
        if (refs->empty() || out->empty()) throw CLI::ValidationError("--run needs --refs and --out");
        std::map<ContextRef, std::string> gold;
        for (const auto& v : context_views(load_dialogues(*refs, parse_dataset(*dataset), Split::Test))) {
          gold[v.ref()] = v.target.text;
        }
        std::vector<metrics::EvalPair> pairs;
        for (const auto& r : load_run(*run)) {
          auto it = gold.find(r.context_ref);
          if (it == gold.end()) throw Error(ErrorCode::ViewMismatch, r.context_ref.str() + " not in " + *refs);
          pairs.push_back(metrics::make_pair(r.response, {it->second}));
        }
        std::unique_ptr<metrics::EmbeddingProvider> provider;
        if (embeddings->rfind("hash:", 0) == 0) {
          provider = std::make_unique<metrics::HashEmbeddingProvider>(std::stoul(embeddings->substr(5)),
                                                                      g.seed.value_or(13));
        } else {
          provider = std::make_unique<metrics::TableEmbeddingProvider>(metrics::TableEmbeddingProvider::load(*embeddings));
        }
        const auto report = metrics::evaluate(pairs, *provider, {*smooth});
        write_file(*out, report.to_flat());
        std::cout << report.to_flat();
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("judge", "G-Eval aspect scores for a run");
    auto strategy = std::make_shared<std::optional<std::string>>();
    auto mask = std::make_shared<std::optional<std::string>>();
    auto judge = std::make_shared<std::optional<std::string>>();
    auto items = std::make_shared<std::optional<std::size_t>>();
    auto aspects = std::make_shared<std::vector<std::string>>();
    generation_flags(cmd, strategy, mask);
    cmd->add_option("--judge", *judge, "Judge backend id");
    cmd->add_option("--items", *items, "Responses to score (default 200)");
    cmd->add_option("--aspects", *aspects, "naturalness coherence empathy supportiveness");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        auto o = generation_overrides(*strategy, *mask);
        if (*judge) o["models"]["judge"] = **judge;
        if (*items) o["judge"]["items"] = **items;
        if (!aspects->empty()) o["judge"]["aspects"] = *aspects;
        stage(g, Stage::Judge, o);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("abpack", "Blind A/B annotation sheet for two runs");
    auto run_a = std::make_shared<std::optional<std::string>>();
    auto run_b = std::make_shared<std::optional<std::string>>();
    auto items = std::make_shared<std::optional<std::size_t>>();
    cmd->add_option("--run-a", *run_a, "Run id of system A, e.g. finetuned_all");
    cmd->add_option("--run-b", *run_b, "Run id of system B");
    cmd->add_option("--items", *items, "Items to sample (default 200)");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        json o = json::object();
        if (*run_a) o["abtest"]["run_a"] = **run_a;
        if (*run_b) o["abtest"]["run_b"] = **run_b;
        if (*items) o["abtest"]["items"] = **items;
        stage(g, Stage::AbPack, o);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("abscore", "De-blind annotated A/B sheets and tally");
    auto sheets = std::make_shared<std::vector<std::string>>();
    auto key = std::make_shared<std::string>();
    auto sys_a = std::make_shared<std::string>();
    auto sys_b = std::make_shared<std::string>();
    cmd->add_option("--sheets", *sheets, "One annotated sheet per annotator")->required()->check(CLI::ExistingFile);
    cmd->add_option("--key", *key, "De-blinding key")->required()->check(CLI::ExistingFile);
    cmd->add_option("--system-a", *sys_a, "System A name (default: from the key)");
    cmd->add_option("--system-b", *sys_b, "System B name (default: from the key)");
    cmd->callback([=, &action] {
      action = [=] {
        const auto key_rows = csv::read(*key);
        auto a = *sys_a, b = *sys_b;
        if ((a.empty() || b.empty()) && key_rows.size() > 1 && key_rows[0].size() >= 5) {
          a = a.empty() ? key_rows[1][3] : a;
          b = b.empty() ? key_rows[1][4] : b;
        }
        std::vector<std::vector<csv::Row>> annotated;
        for (const auto& s : *sheets) annotated.push_back(csv::read(s));
        const auto res = score_ab(annotated, key_rows, a, b);
        std::cout << "system_a=" << res.system_a << "\nsystem_b=" << res.system_b << "\n";
        for (const auto& [aspect, t] : res.tallies) {
          std::cout << aspect << ".win=" << t.win << "\n"
                    << aspect << ".tie=" << t.tie << "\n"
                    << aspect << ".loss=" << t.loss << "\n";
          const auto& k = res.kappa.at(aspect);
          std::cout << aspect << ".kappa=" << (k ? std::to_string(*k) : std::string("undefined")) << "\n";
        }
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("sample-sheet", "Human validation sheet over oracle knowledge");
    auto n = std::make_shared<std::size_t>(400);
    auto out = std::make_shared<std::string>();
    auto annotator = std::make_shared<std::string>();
    auto hide = std::make_shared<bool>(false);
    cmd->add_option("--n", *n, "Entries to sample");
    cmd->add_option("--out", *out, "CSV output")->required();
    cmd->add_option("--annotator", *annotator, "Annotator id written on every row");
    cmd->add_flag("--hide-category", *hide, "Blank the category column");
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        const auto cfg = resolve(g, json::object());
        const auto ws = workspace_of(g);
        const auto store = KnowledgeStore::load(ws.oracle_store());
        if (store.size() == 0) throw Error(ErrorCode::MissingUpstream, ws.oracle_store().string() + " is empty");
        std::map<ContextRef, std::string> contexts;
        for (auto s : {Split::Train, Split::Valid}) {
          for (const auto& v : context_views(load_dialogues(ws.corpus(s), cfg.dataset, s))) {
            auto clip = v.history;
            clip.push_back(v.target);
            contexts[v.ref()] = format_clip(clip, cfg.dataset);
          }
        }
        SheetConfig sc;
        sc.n = *n;
        sc.seed = cfg.seed;
        sc.show_category = !*hide;
        sc.annotator_id = *annotator;
        const auto rows = sample_validation_sheet(store, contexts, sc);
        csv::write(*out, rows);
        std::cout << rows.size() - 1 << " rows -> " << *out << "\n";
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("run", "ingest through eval in one go");
    cmd->callback([&action, &g] {
      action = [&g] {
        const auto cfg = resolve(g, json::object());
        const auto ws = workspace_of(g);
        auto gw = make_gateway(ws, cfg.max_in_flight);
        for (const auto& m : run_pipeline(cfg, ws, *gw)) print_manifest(m);
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("status", "List manifests in the workspace");
    cmd->callback([&action, &g] {
      action = [&g] {
        for (const auto& m : load_manifests(workspace_of(g))) {
          std::cout << m.file.filename().string() << "  " << m.run_id << "  " << m.finished_at << "\n";
        }
        return 0;
      };
    });
  }
  {
    auto* cmd = app.add_subcommand("serve", "HTTP inference service");
    auto host = std::make_shared<std::string>("127.0.0.1");
    auto port = std::make_shared<int>(8080);
    auto ttl = std::make_shared<long>(3600);
    auto strategy = std::make_shared<std::optional<std::string>>();
    auto mask = std::make_shared<std::optional<std::string>>();
    cmd->add_option("--host", *host, "Bind address");
    cmd->add_option("--port", *port, "Port (0 picks one)");
    cmd->add_option("--ttl", *ttl, "Session TTL in seconds");
    generation_flags(cmd, strategy, mask);
    cmd->callback([=, &action, &g] {
      action = [=, &g] {
        const auto cfg = resolve(g, generation_overrides(*strategy, *mask));
        const auto ws = workspace_of(g);
        for (const auto& p : {ws.ensemble(), ws.demonstrations()}) {
          if (!fs::exists(p)) throw Error(ErrorCode::MissingUpstream, p.string());
        }
        ServiceConfig sc;
        sc.dataset = cfg.dataset;
        sc.ensemble = ensemble_from_json(json::parse(read_file(ws.ensemble())));
        sc.demonstrations = demonstrations_from_json(json::parse(read_file(ws.demonstrations())));
        sc.student_decode = cfg.student_decode;
        sc.response_decode = cfg.response_decode;
        sc.session_ttl = std::chrono::seconds(*ttl);
        if (cfg.strategy == Strategy::Finetuned && fs::exists(ws.responder_model(cfg.mask))) {
          sc.responder = handle_from_json(json::parse(read_file(ws.responder_model(cfg.mask))).at("handle"));
        } else {
          sc.responder = ModelHandle{cfg.responder_base, ModelKind::Responder, std::nullopt};
        }
        auto gw = make_gateway(ws, cfg.max_in_flight);
        InferenceService svc(sc, *gw);
        const int bound = svc.bind(*host, *port);
        g_service = &svc;
        std::signal(SIGINT, [](int) {
          if (g_service) g_service->stop();
        });
        std::signal(SIGTERM, [](int) {
          if (g_service) g_service->stop();
        });
        std::cout << "listening on http://" << *host << ":" << bound << std::endl;
        svc.listen();
        g_service = nullptr;
        return 0;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("sibyl"));
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::warn);
  try {
    return action ? action() : 0;
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.detail() << "\n";
    return 1;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
