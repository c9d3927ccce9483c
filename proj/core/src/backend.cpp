#include "sibyl/backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

namespace sibyl {

void DecodeParams::validate() const {
  if (!(temperature >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "top_p must be in (0, 1]");
  if (n_samples < 1) throw Error(ErrorCode::ConfigInvalid, "n_samples must be >= 1");
  if (max_new_tokens < 1) throw Error(ErrorCode::ConfigInvalid, "max_new_tokens must be >= 1");
}

json decode_to_json(const DecodeParams& d) {
  return {{"temperature", d.temperature},
          {"top_p", d.top_p},
          {"n_samples", d.n_samples},
          {"max_new_tokens", d.max_new_tokens},
          {"seed", d.seed ? json(*d.seed) : json(nullptr)}};
}

DecodeParams decode_from_json(const json& j, const DecodeParams& defaults) {
  DecodeParams d = defaults;
  try {
    if (j.contains("temperature")) d.temperature = j["temperature"].get<double>();
    if (j.contains("top_p")) d.top_p = j["top_p"].get<double>();
    if (j.contains("n_samples")) d.n_samples = j["n_samples"].get<int>();
    if (j.contains("max_new_tokens")) d.max_new_tokens = j["max_new_tokens"].get<int>();
    if (j.contains("seed")) d.seed = j["seed"].is_null() ? std::nullopt : std::optional(j["seed"].get<std::int64_t>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("decode params: ") + e.what());
  }
  d.validate();
  return d;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw Error(ErrorCode::ConfigInvalid, "learning_rate must be > 0");
  if (batch_size < 1) throw Error(ErrorCode::ConfigInvalid, "batch_size must be >= 1");
  if (max_epochs < 1) throw Error(ErrorCode::ConfigInvalid, "max_epochs must be >= 1");
  if (optimizer != "adam") throw Error(ErrorCode::ConfigInvalid, "optimizer must be 'adam'");
  if (adapter.rank <= 0) throw Error(ErrorCode::ConfigInvalid, "adapter.rank must be > 0");
  if (adapter.alpha <= 0) throw Error(ErrorCode::ConfigInvalid, "adapter.alpha must be > 0");
  if (!(adapter.dropout >= 0.0 && adapter.dropout < 1.0)) {
    throw Error(ErrorCode::ConfigInvalid, "adapter.dropout must be in [0, 1)");
  }
  if (adapter.target_projections.empty()) throw Error(ErrorCode::ConfigInvalid, "adapter targets are empty");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"optimizer", c.optimizer},
          {"adapter",
           {{"rank", c.adapter.rank},
            {"alpha", c.adapter.alpha},
            {"dropout", c.adapter.dropout},
            {"target_projections", c.adapter.target_projections}}},
          {"selection_metric", "valid_nll"}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  try {
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
    if (j.contains("optimizer")) c.optimizer = j["optimizer"].get<std::string>();
    if (j.contains("adapter")) {
      const auto& a = j["adapter"];
      if (a.contains("rank")) c.adapter.rank = a["rank"].get<int>();
      if (a.contains("alpha")) c.adapter.alpha = a["alpha"].get<int>();
      if (a.contains("dropout")) c.adapter.dropout = a["dropout"].get<double>();
      if (a.contains("target_projections")) {
        c.adapter.target_projections = a["target_projections"].get<std::vector<std::string>>();
      }
    }
    if (j.contains("selection_metric") && j["selection_metric"].get<std::string>() != "valid_nll") {
      throw Error(ErrorCode::ConfigInvalid, "selection_metric must be 'valid_nll'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string_view to_string(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::Teacher: return "teacher";
    case ModelKind::Visionary: return "visionary";
    case ModelKind::Responder: return "responder";
    case ModelKind::Judge: return "judge";
  }
  return "responder";
}

ModelKind parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::Teacher, ModelKind::Visionary, ModelKind::Responder, ModelKind::Judge}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown model kind '" + std::string(s) + "'");
}

void ModelHandle::validate() const {
  if (backend_id.find(':') == std::string::npos || backend_id.front() == ':') {
    throw Error(ErrorCode::ConfigInvalid, "backend id '" + backend_id + "' is not <backend>:<model>");
  }
  if (kind == ModelKind::Visionary && !category) {
    throw Error(ErrorCode::ConfigInvalid, "visionary handle " + backend_id + " has no category");
  }
  if (kind != ModelKind::Visionary && category) {
    throw Error(ErrorCode::ConfigInvalid, "only visionary handles carry a category");
  }
}

std::string ModelHandle::backend_name() const { return backend_id.substr(0, backend_id.find(':')); }

std::string ModelHandle::model_name() const {
  const auto pos = backend_id.find(':');
  return pos == std::string::npos ? std::string() : backend_id.substr(pos + 1);
}

json handle_to_json(const ModelHandle& h) {
  json j = {{"backend_id", h.backend_id}, {"kind", to_string(h.kind)}};
  if (h.category) j["category"] = to_string(*h.category);
  return j;
}

ModelHandle handle_from_json(const json& j) {
  ModelHandle h;
  try {
    h.backend_id = j.at("backend_id").get<std::string>();
    h.kind = parse_model_kind(j.at("kind").get<std::string>());
    if (j.contains("category")) h.category = parse_category(j["category"].get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("model handle: ") + e.what());
  }
  h.validate();
  return h;
}

json sft_to_json(const SftExample& e) {
  return {{"context_ref", {{"dialogue_id", e.context_ref.dialogue_id}, {"cut", e.context_ref.cut}}},
          {"category", e.category ? json(to_string(*e.category)) : json(nullptr)},
          {"prompt_messages", prompt_to_json(e.prompt)},
          {"target", e.target},
          {"split", to_string(e.split)}};
}

SftExample sft_from_json(const json& j) {
  SftExample e;
  try {
    e.context_ref = {j.at("context_ref").at("dialogue_id").get<std::string>(),
                     j.at("context_ref").at("cut").get<std::size_t>()};
    if (!j.at("category").is_null()) e.category = parse_category(j["category"].get<std::string>());
    e.prompt = prompt_from_json(j.at("prompt_messages"));
    e.target = j.at("target").get<std::string>();
    e.split = parse_split(j.at("split").get<std::string>());
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::MalformedRecord, std::string("sft record: ") + ex.what());
  }
  return e;
}

int select_best_epoch(std::span<const double> valid_nll) {
  if (valid_nll.empty()) throw Error(ErrorCode::EmptyTrainset, "no epochs logged");
  const auto it = std::min_element(valid_nll.begin(), valid_nll.end());
  return static_cast<int>(it - valid_nll.begin()) + 1;
}

FineTuneResult Backend::fine_tune(const ModelHandle& base, std::span<const SftExample>, const TrainConfig&,
                                  std::span<const SftExample>) {
  throw Error(ErrorCode::BackendNoTrain, base.backend_id + " does not support training");
}

json chat_request(const ModelHandle& handle, const RenderedPrompt& prompt, const DecodeParams& params) {
  json messages = json::array();
  for (const auto& m : prompt.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.text}});
  json j = {{"model", handle.backend_id},
            {"messages", messages},
            {"temperature", params.temperature},
            {"top_p", params.top_p},
            {"n", params.n_samples},
            {"max_tokens", params.max_new_tokens},
            {"seed", params.seed ? json(*params.seed) : json(nullptr)}};
  return j;
}

// ---------------------------------------------------------------------------

Journal::Journal(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(*path_)) return;
  for_each_line(*path_, [&](std::size_t, const std::string& line) {
    try {
      const auto j = json::parse(line);
      cache_[j.at("hash").get<std::string>()] = j.at("response").get<std::vector<std::string>>();
      ++records_;
    } catch (const json::exception&) {
      // torn line from an interrupted write
    }
  });
}

std::optional<std::vector<std::string>> Journal::lookup(const std::string& hash) const {
  std::lock_guard lock(mu_);
  auto it = cache_.find(hash);
  if (it == cache_.end()) return std::nullopt;
  return it->second;
}

void Journal::record(const std::string& hash, const json& request, const std::vector<std::string>& response) {
  std::lock_guard lock(mu_);
  cache_[hash] = response;
  ++records_;
  if (!path_) return;
  if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
  std::ofstream out(*path_, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::Io, "cannot append to journal " + path_->string());
  const json line = {{"hash", hash}, {"request", request}, {"response", response}, {"timestamp", utc_timestamp()}};
  out << line.dump() << '\n';
  out.flush();
}

std::size_t Journal::size() const {
  std::lock_guard lock(mu_);
  return records_;
}

Gateway::Gateway(std::optional<std::filesystem::path> journal_path, RetryPolicy retry, std::ptrdiff_t max_in_flight)
    : journal_(journal_path ? Journal(*journal_path) : Journal()),
      retry_(retry),
      in_flight_(std::clamp<std::ptrdiff_t>(max_in_flight, 1, 1024)),
      sleep_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {}

void Gateway::register_backend(const std::string& name, std::shared_ptr<Backend> backend) {
  backends_[name] = std::move(backend);
}

Backend& Gateway::backend(const std::string& name) const {
  auto it = backends_.find(name);
  if (it == backends_.end()) throw Error(ErrorCode::UnknownBackend, "no backend registered as '" + name + "'");
  return *it->second;
}

std::vector<std::string> Gateway::generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                           const DecodeParams& params) {
  handle.validate();
  params.validate();
  if (prompt.messages.empty()) throw Error(ErrorCode::ConfigInvalid, "empty prompt");
  auto& be = backend(handle.backend_name());

  const json request = chat_request(handle, prompt, params);
  const std::string hash = sha256_hex(request.dump());
  if (auto cached = journal_.lookup(hash)) return *cached;

  struct Permit {
    std::counting_semaphore<1024>& sem;
    explicit Permit(std::counting_semaphore<1024>& s) : sem(s) { sem.acquire(); }
    ~Permit() { sem.release(); }
  } permit(in_flight_);

  auto backoff = retry_.initial_backoff;
  for (int attempt = 0;; ++attempt) {
    {
      std::lock_guard lock(stats_mu_);
      ++backend_calls_;
    }
    try {
      auto out = be.generate(handle, prompt, params);
      if (out.size() != static_cast<std::size_t>(params.n_samples)) {
        throw Error(ErrorCode::BackendRejected, "request " + hash.substr(0, 16) + ": expected " +
                                                    std::to_string(params.n_samples) + " completions, got " +
                                                    std::to_string(out.size()));
      }
      journal_.record(hash, request, out);
      return out;
    } catch (const Error& e) {
      if (!is_retriable(e.code()) || attempt >= retry_.max_retries) {
        if (contains(e.detail(), "request ")) throw;
        throw Error(e.code(), "request " + hash.substr(0, 16) + ": " + e.detail());
      }
      sleep_(backoff);
      backoff = std::min(retry_.max_backoff, std::chrono::milliseconds(static_cast<std::int64_t>(
                                                 static_cast<double>(backoff.count()) * retry_.multiplier)));
    }
  }
}

FineTuneResult Gateway::fine_tune(const ModelHandle& base, std::span<const SftExample> train,
                                  const TrainConfig& cfg, std::span<const SftExample> valid) {
  base.validate();
  cfg.validate();
  if (train.empty()) throw Error(ErrorCode::EmptyTrainset, "no training examples for " + base.backend_id);
  if (valid.empty() && cfg.selection_metric == SelectionMetric::ValidNll) {
    throw Error(ErrorCode::EmptyTrainset, "validation-NLL selection needs validation examples");
  }
  std::mutex* lock = nullptr;
  {
    std::lock_guard guard(train_mu_);
    auto& slot = train_locks_[base.backend_id];
    if (!slot) slot = std::make_unique<std::mutex>();
    lock = slot.get();
  }
  std::lock_guard exclusive(*lock);
  return backend(base.backend_name()).fine_tune(base, train, cfg, valid);
}

std::size_t Gateway::backend_calls() const {
  std::lock_guard lock(stats_mu_);
  return backend_calls_;
}

}  // namespace sibyl
