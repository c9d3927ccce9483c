#include "sibyl/responder.hpp"

#include <mutex>

namespace sibyl {

std::string_view to_string(Strategy s) noexcept { return s == Strategy::Finetuned ? "finetuned" : "prompt"; }

Strategy parse_strategy(std::string_view s) {
  const auto v = to_lower_ascii(s);
  if (v == "finetuned") return Strategy::Finetuned;
  if (v == "prompt" || v == "prompt_based" || v == "prompt-based") return Strategy::PromptBased;
  throw Error(ErrorCode::ConfigInvalid, "unknown strategy '" + std::string(s) + "'");
}

DecodeParams default_response_decode(std::int64_t seed) {
  DecodeParams d;
  d.temperature = 0.7;
  d.top_p = 0.9;
  d.max_new_tokens = 128;
  d.seed = seed;
  return d;
}

std::vector<SftExample> build_responder_corpus(std::span<const ContextView> views, const KnowledgeStore& bundles,
                                               CategoryMask mask) {
  std::vector<SftExample> out;
  out.reserve(views.size());
  for (const auto& v : views) {
    const auto* bundle = bundles.find(v.ref());
    if (!bundle) throw Error(ErrorCode::MissingKnowledge, v.ref().str() + " has no knowledge bundle");
    SftExample e;
    e.prompt = render_generation_prompt(v, *bundle, mask);
    e.target = v.target.text;
    e.context_ref = v.ref();
    e.split = v.split;
    out.push_back(std::move(e));
  }
  return out;
}

json run_spec_to_json(const RunSpec& spec) {
  return {{"run_id", spec.run_id},
          {"strategy", to_string(spec.strategy)},
          {"mask", spec.mask.label()},
          {"responder", handle_to_json(spec.responder)},
          {"knowledge_provenance", to_string(spec.knowledge_provenance)},
          {"split", to_string(spec.split)},
          {"decode", decode_to_json(spec.decode)}};
}

namespace {

void check_views(const RunSpec& spec, std::span<const ContextView> views, const KnowledgeStore& bundles) {
  for (const auto& v : views) {
    if (v.split != spec.split) {
      throw Error(ErrorCode::ConfigInvalid, "view " + v.ref().str() + " is not in the run's " +
                                                std::string(to_string(spec.split)) + " split");
    }
    const auto* b = bundles.find(v.ref());
    if (b && v.split == Split::Test && b->provenance == Provenance::TeacherOracle) {
      throw Error(ErrorCode::LeakageViolation, "teacher oracle knowledge offered for TEST view " + v.ref().str());
    }
  }
}

}  // namespace

std::vector<RenderedPrompt> render_run_prompts(const RunSpec& spec, std::span<const ContextView> views,
                                               const KnowledgeStore& bundles) {
  check_views(spec, views, bundles);
  std::vector<RenderedPrompt> out;
  out.reserve(views.size());
  for (const auto& v : views) {
    const auto* b = bundles.find(v.ref());
    if (!b) throw Error(ErrorCode::MissingKnowledge, v.ref().str() + " has no knowledge bundle");
    out.push_back(render_generation_prompt(v, *b, spec.mask));
  }
  return out;
}

GenerationRun generate_responses(const RunSpec& spec, std::span<const ContextView> views,
                                 const KnowledgeStore& bundles, Gateway& gateway) {
  const auto prompts = render_run_prompts(spec, views, bundles);
  GenerationRun run;
  run.spec = spec;
  std::vector<std::optional<std::string>> responses(views.size());
  std::vector<std::string> errors(views.size());
  parallel_for(views.size(), spec.max_in_flight, [&](std::size_t i) {
    try {
      responses[i] = trim(gateway.generate(spec.responder, prompts[i], spec.decode).front());
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (responses[i]) {
      run.outputs.push_back({views[i].ref(), *responses[i], prompts[i].hash()});
    } else {
      run.failures.emplace_back(views[i].ref(), errors[i]);
    }
  }
  return run;
}

void save_run(const std::filesystem::path& path, const GenerationRun& run) {
  std::vector<json> records;
  for (const auto& o : run.outputs) {
    records.push_back({{"dialogue_id", o.context_ref.dialogue_id},
                       {"cut", o.context_ref.cut},
                       {"response", o.response},
                       {"mask", run.spec.mask.label()},
                       {"strategy", to_string(run.spec.strategy)}});
  }
  write_jsonl(path, records);
}

std::vector<RunRecord> load_run(const std::filesystem::path& path) {
  std::vector<RunRecord> out;
  for (const auto& j : read_jsonl(path)) {
    try {
      out.push_back({{j.at("dialogue_id").get<std::string>(), j.at("cut").get<std::size_t>()},
                     j.at("response").get<std::string>(),
                     j.value("mask", "all"),
                     j.value("strategy", "finetuned")});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sibyl
