#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sibyl/error.hpp"
#include "sibyl/knowledge.hpp"

namespace sibyl {

struct DecodeParams {
  double temperature = 0.0;
  double top_p = 1.0;
  int n_samples = 1;
  int max_new_tokens = 256;
  std::optional<std::int64_t> seed;

  /// Throws ConfigInvalid on out-of-range fields.
  void validate() const;
  bool operator==(const DecodeParams&) const = default;
};

json decode_to_json(const DecodeParams& d);
DecodeParams decode_from_json(const json& j, const DecodeParams& defaults = {});

struct AdapterConfig {
  int rank = 8;
  int alpha = 16;
  double dropout = 0.05;
  std::vector<std::string> target_projections = {"Q", "V"};
  bool operator==(const AdapterConfig&) const = default;
};

enum class SelectionMetric { ValidNll };

/// Fine-tuning hyperparameters with adapter (LoRA) settings.
struct TrainConfig {
  double learning_rate = 3e-5;
  int batch_size = 16;
  int max_epochs = 5;
  std::string optimizer = "adam";
  AdapterConfig adapter;
  SelectionMetric selection_metric = SelectionMetric::ValidNll;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j, const TrainConfig& defaults = {});

enum class ModelKind { Teacher, Visionary, Responder, Judge };
std::string_view to_string(ModelKind k) noexcept;
ModelKind parse_model_kind(std::string_view s);

/// Opaque reference to a generative model. `backend_id` is "<backend>:<model>",
/// e.g. "mock:teacher" or "remote:gpt-4o".
struct ModelHandle {
  std::string backend_id;
  ModelKind kind = ModelKind::Responder;
  std::optional<KnowledgeCategory> category;

  /// Throws ConfigInvalid unless VISIONARY handles carry exactly one category.
  void validate() const;
  std::string backend_name() const;
  std::string model_name() const;
  bool operator==(const ModelHandle&) const = default;
};

json handle_to_json(const ModelHandle& h);
ModelHandle handle_from_json(const json& j);

/// One rendered prompt + target pair for fine-tuning.
struct SftExample {
  RenderedPrompt prompt;
  std::string target;
  ContextRef context_ref;
  std::optional<KnowledgeCategory> category;
  Split split = Split::Train;
};

json sft_to_json(const SftExample& e);
SftExample sft_from_json(const json& j);

struct FineTuneResult {
  ModelHandle handle;
  /// Validation NLL after each epoch (epoch i at index i-1).
  std::vector<double> valid_nll;
  /// 1-based epoch whose checkpoint is returned.
  int selected_epoch = 0;
  json manifest;
};

/// 1-based index of the minimum; the earliest epoch wins ties.
int select_best_epoch(std::span<const double> valid_nll);

/// Model provider. Implementations must be safe for concurrent generate calls.
class Backend {
 public:
  virtual ~Backend() = default;

  /// Returns exactly params.n_samples completions.
  virtual std::vector<std::string> generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                            const DecodeParams& params) = 0;

  /// Trains on next-token NLL of target tokens only; prompt tokens are excluded
  /// from the loss. Throws BackendNoTrain unless overridden.
  virtual FineTuneResult fine_tune(const ModelHandle& base, std::span<const SftExample> train,
                                   const TrainConfig& cfg, std::span<const SftExample> valid);
};

/// Canonical request body in chat-completions form.
json chat_request(const ModelHandle& handle, const RenderedPrompt& prompt, const DecodeParams& params);

/// Append-only request/response log keyed by a content hash of the request.
class Journal {
 public:
  Journal() = default;
  /// Loads existing records and appends new ones to `path`.
  explicit Journal(std::filesystem::path path);

  std::optional<std::vector<std::string>> lookup(const std::string& hash) const;
  void record(const std::string& hash, const json& request, const std::vector<std::string>& response);
  std::size_t size() const;
  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<std::string>> cache_;
  std::size_t records_ = 0;
};

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{10'000};
};

/// Front door for all model calls: resolves handles to backends, journals,
/// retries retriable failures with exponential backoff and caps in-flight calls.
class Gateway {
 public:
  explicit Gateway(std::optional<std::filesystem::path> journal_path = {}, RetryPolicy retry = {},
                   std::ptrdiff_t max_in_flight = 8);

  void register_backend(const std::string& name, std::shared_ptr<Backend> backend);
  Backend& backend(const std::string& name) const;

  std::vector<std::string> generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                    const DecodeParams& params);

  /// Serialized per backend_id of `base`.
  FineTuneResult fine_tune(const ModelHandle& base, std::span<const SftExample> train,
                           const TrainConfig& cfg, std::span<const SftExample> valid);

  const Journal& journal() const { return journal_; }
  /// Calls that reached a backend (journal hits excluded, retries included).
  std::size_t backend_calls() const;

  using Sleeper = std::function<void(std::chrono::milliseconds)>;
  void set_sleeper(Sleeper s) { sleep_ = std::move(s); }

 private:
  std::map<std::string, std::shared_ptr<Backend>> backends_;
  Journal journal_;
  RetryPolicy retry_;
  std::counting_semaphore<1024> in_flight_;
  std::mutex train_mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> train_locks_;
  mutable std::mutex stats_mu_;
  std::size_t backend_calls_ = 0;
  Sleeper sleep_;
};

}  // namespace sibyl
