#include "sibyl/teacher.hpp"

#include <atomic>
#include <mutex>
#include <thread>

namespace sibyl {

ParsedAnswer parse_answer(std::string_view raw) {
  static constexpr std::string_view kMarker = "Answer:";
  const auto pos = raw.rfind(kMarker);
  ParsedAnswer out;
  if (pos == std::string_view::npos) {
    out.text = trim(raw);
    out.low_confidence = true;
  } else {
    out.text = trim(raw.substr(pos + kMarker.size()));
  }
  if (out.text.empty()) throw Error(ErrorCode::EmptyCompletion, "completion has no answer text");
  return out;
}

std::string_view to_string(TaskStatus s) noexcept {
  switch (s) {
    case TaskStatus::Pending: return "pending";
    case TaskStatus::Done: return "done";
    case TaskStatus::Failed: return "failed";
  }
  return "pending";
}

json acquire_config_to_json(const AcquireConfig& c) {
  return {{"max_in_flight", c.max_in_flight},
          {"retry_cap", c.retry_cap},
          {"retry_temperature", c.retry_temperature},
          {"word_limit", c.word_limit},
          {"decode", decode_to_json(c.decode)}};
}

void check_demonstrations(const DemonstrationSet& demos) {
  for (const auto& [c, demo] : demos) {
    if (demo.view.split != Split::Train) {
      throw Error(ErrorCode::DemoSplitViolation, std::string(to_string(c)) + " demonstration " + demo.view.ref().str() +
                                                     " is from the " + std::string(to_string(demo.view.split)) +
                                                     " split");
    }
  }
}

namespace {

json view_to_json(const ContextView& v) {
  json history = json::array();
  for (const auto& u : v.history) history.push_back({{"role", to_string(u.role)}, {"text", u.text}});
  return {{"dialogue_id", v.dialogue_id},
          {"dataset", to_string(v.dataset)},
          {"split", to_string(v.split)},
          {"cut", v.cut},
          {"history", history},
          {"target", v.target.text}};
}

ContextView view_from_json(const json& j) {
  ContextView v;
  v.dialogue_id = j.at("dialogue_id").get<std::string>();
  v.dataset = parse_dataset(j.at("dataset").get<std::string>());
  v.split = parse_split(j.at("split").get<std::string>());
  v.cut = j.at("cut").get<std::size_t>();
  std::size_t i = 0;
  for (const auto& u : j.at("history")) {
    v.history.push_back({i++, parse_role(u.at("role").get<std::string>()), u.at("text").get<std::string>()});
  }
  v.target = {v.cut, Role::Supporter, j.at("target").get<std::string>()};
  return v;
}

/// One teacher query with the re-query policy applied.
AcquisitionTask run_task(Gateway& gateway, const ModelHandle& teacher, const RenderedPrompt& prompt,
                         const AcquireConfig& cfg) {
  AcquisitionTask task;
  DecodeParams params = cfg.decode;
  const std::int64_t base_seed = cfg.decode.seed.value_or(0);
  std::optional<ParsedAnswer> best;
  while (true) {
    ++task.attempts;
    std::string raw;
    try {
      raw = gateway.generate(teacher, prompt, params).front();
    } catch (const Error& e) {
      task.status = TaskStatus::Failed;
      task.flags.push_back("backend_error");
      task.text = e.what();
      return task;
    }
    std::optional<ParsedAnswer> parsed;
    try {
      parsed = parse_answer(raw);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyCompletion) throw;
    }
    const bool over_length = parsed && word_count(parsed->text) > cfg.word_limit;
    if (parsed && !parsed->low_confidence && !over_length) {
      best = parsed;
      task.flags.clear();
      break;
    }
    if (parsed) {
      best = parsed;
      task.flags.clear();
      if (parsed->low_confidence) task.flags.push_back("low_confidence");
      if (over_length) task.flags.push_back("over_length");
    }
    if (task.attempts > cfg.retry_cap) break;
    params.temperature = cfg.retry_temperature;
    params.seed = base_seed + task.attempts;
  }
  if (!best) {
    task.status = TaskStatus::Failed;
    task.flags = {"parse_failure"};
    return task;
  }
  task.status = TaskStatus::Done;
  task.text = best->text;
  return task;
}

}  // namespace

json demonstrations_to_json(const DemonstrationSet& demos) {
  json j = json::object();
  for (const auto& [c, d] : demos) j[std::string(to_string(c))] = {{"view", view_to_json(d.view)}, {"answer", d.answer}};
  return j;
}

DemonstrationSet demonstrations_from_json(const json& j) {
  DemonstrationSet demos;
  try {
    for (const auto& [k, v] : j.items()) {
      demos[parse_category(k)] = Demonstration{view_from_json(v.at("view")), v.at("answer").get<std::string>()};
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("demonstrations: ") + e.what());
  }
  return demos;
}

DemonstrationSet select_demonstrations(std::span<const ContextView> train_views, Gateway& gateway,
                                       const ModelHandle& teacher, std::uint64_t seed, const AcquireConfig& cfg) {
  std::vector<const ContextView*> pool;
  for (const auto& v : train_views) {
    if (v.split == Split::Train) pool.push_back(&v);
  }
  if (pool.empty()) throw Error(ErrorCode::InsufficientEntries, "no TRAIN views to draw demonstrations from");
  DemonstrationSet demos;
  for (auto c : kAllCategories) {
    const auto pick = sample_without_replacement(pool.size(), 1, seed * 4 + static_cast<std::uint64_t>(c)).front();
    const ContextView& view = *pool[pick];
    const auto prompt = render_acquisition_prompt(view, c, builtin_demonstration(c));
    auto task = run_task(gateway, teacher, prompt, cfg);
    if (task.status != TaskStatus::Done) {
      throw Error(ErrorCode::ParseFailure, "could not obtain an answer for the " + std::string(to_string(c)) +
                                               " demonstration " + view.ref().str());
    }
    demos[c] = Demonstration{view, task.text};
  }
  check_demonstrations(demos);
  return demos;
}

AcquireResult acquire_corpus(std::span<const ContextView> views, Gateway& gateway, const ModelHandle& teacher,
                             const DemonstrationSet& demos, const std::filesystem::path& store_path,
                             const AcquireConfig& cfg) {
  if (teacher.kind != ModelKind::Teacher) {
    throw Error(ErrorCode::ConfigInvalid, teacher.backend_id + " is not a TEACHER handle");
  }
  check_demonstrations(demos);
  for (auto c : kAllCategories) {
    if (!demos.contains(c)) throw Error(ErrorCode::ConfigInvalid, "no demonstration for " + std::string(to_string(c)));
  }
  for (const auto& v : views) {
    if (v.split == Split::Test) {
      throw Error(ErrorCode::LeakageViolation, "teacher acquisition requested for TEST view " + v.ref().str());
    }
  }

  const auto existing = KnowledgeStore::load(store_path);
  AcquireResult result;
  std::vector<const ContextView*> pending;
  for (const auto& v : views) {
    if (existing.contains(v.ref())) {
      ++result.skipped_views;
    } else {
      pending.push_back(&v);
    }
  }

  const std::size_t n_tasks = pending.size() * kAllCategories.size();
  result.tasks.resize(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) {
    result.tasks[i].context_ref = pending[i / 4]->ref();
    result.tasks[i].category = kAllCategories[i % 4];
  }

  std::mutex writer;
  std::vector<int> finished_per_view(pending.size(), 0);
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> tickets{0};
  const std::size_t limit = cfg.stop_after_tasks.value_or(n_tasks);

  auto worker = [&] {
    while (true) {
      if (tickets.fetch_add(1) >= limit) return;
      const auto i = next.fetch_add(1);
      if (i >= n_tasks) return;
      const auto& view = *pending[i / 4];
      const auto category = kAllCategories[i % 4];
      const auto prompt = render_acquisition_prompt(view, category, demos.at(category));
      auto done = run_task(gateway, teacher, prompt, cfg);
      done.context_ref = view.ref();
      done.category = category;

      std::lock_guard lock(writer);
      result.tasks[i] = std::move(done);
      if (++finished_per_view[i / 4] < 4) continue;
      const std::size_t first = (i / 4) * 4;
      KnowledgeBundle bundle;
      bundle.context_ref = view.ref();
      bundle.provenance = Provenance::TeacherOracle;
      // Parse failures are final and recorded as flagged, absent entries. Backend
      // errors leave the view unpersisted so a resumed run retries it.
      bool persist = true;
      for (std::size_t k = first; k < first + 4; ++k) {
        const auto& t = result.tasks[k];
        if (t.status == TaskStatus::Done) bundle.entries[t.category] = t.text;
        if (t.status == TaskStatus::Failed && t.flags != std::vector<std::string>{"parse_failure"}) persist = false;
        if (!t.flags.empty()) bundle.flags[t.category] = t.flags;
      }
      if (persist && !bundle.entries.empty()) {
        KnowledgeStore::append(store_path, bundle);
        ++result.bundles_written;
      }
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.max_in_flight, n_tasks));
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  pool.clear();

  // Appends arrive in completion order; rewrite sorted so the artifact is stable.
  if (std::filesystem::exists(store_path)) KnowledgeStore::load(store_path).save(store_path);

  std::size_t done = 0, failed = 0, pending_count = 0;
  for (const auto& t : result.tasks) {
    done += t.status == TaskStatus::Done;
    failed += t.status == TaskStatus::Failed;
    pending_count += t.status == TaskStatus::Pending;
  }
  json demo_ids = json::object();
  json template_hashes = json::object();
  for (const auto& [c, d] : demos) {
    demo_ids[std::string(to_string(c))] = {{"dialogue_id", d.view.dialogue_id}, {"cut", d.view.cut},
                                           {"split", to_string(d.view.split)}};
    template_hashes[std::string(to_string(c))] = sha256_hex(render_acquisition_prompt(d.view, c, d).messages[0].text);
  }
  result.manifest = {{"teacher", handle_to_json(teacher)},
                     {"acquire_config", acquire_config_to_json(cfg)},
                     {"demonstrations", demo_ids},
                     {"template_hashes", template_hashes},
                     {"tasks", {{"done", done}, {"failed", failed}, {"pending", pending_count}}},
                     {"views", {{"skipped", result.skipped_views}, {"pending", pending.size()}}},
                     {"bundles_written", result.bundles_written}};
  return result;
}

std::vector<csv::Row> sample_validation_sheet(const KnowledgeStore& store,
                                              const std::map<ContextRef, std::string>& contexts,
                                              const SheetConfig& cfg) {
  struct Entry {
    const KnowledgeBundle* bundle;
    KnowledgeCategory category;
  };
  std::vector<Entry> entries;
  for (const auto& [ref, b] : store.bundles()) {
    for (const auto& [c, text] : b.entries) entries.push_back({&b, c});
  }
  if (cfg.n > entries.size()) {
    throw Error(ErrorCode::InsufficientEntries, "store has " + std::to_string(entries.size()) + " entries, " +
                                                    std::to_string(cfg.n) + " requested");
  }
  std::vector<csv::Row> rows = {{"context", "category", "knowledge", "accept", "annotator_id"}};
  for (auto idx : sample_without_replacement(entries.size(), cfg.n, cfg.seed)) {
    const auto& e = entries[idx];
    const auto it = contexts.find(e.bundle->context_ref);
    rows.push_back({it == contexts.end() ? e.bundle->context_ref.str() : it->second,
                    cfg.show_category ? std::string(to_string(e.category)) : std::string(),
                    e.bundle->entries.at(e.category), "", cfg.annotator_id});
  }
  return rows;
}

}  // namespace sibyl
