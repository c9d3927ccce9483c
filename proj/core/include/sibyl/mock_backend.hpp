#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sibyl/backend.hpp"

namespace sibyl {

/// Deterministic in-process backend. The model name after "mock:" picks a policy:
///
///   <anything>              echo-hash: a sentence derived from SHA-256 of the prompt
///   echo-slot=<category>    repeats the named knowledge slot of a generation prompt
///   ratings=1x5,2x10,3x5    judge replies cycling through the given rating multiset
///   ft-<hex>                a fine-tuned model: memorized prompt -> target table,
///                           falling back to its base model's policy
///
/// With a store directory, fine-tuned tables persist as <dir>/<model>.json so a
/// later process can resolve the handle.
class MockBackend : public Backend {
 public:
  explicit MockBackend(std::optional<std::filesystem::path> store_dir = {});

  std::vector<std::string> generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                    const DecodeParams& params) override;

  FineTuneResult fine_tune(const ModelHandle& base, std::span<const SftExample> train,
                           const TrainConfig& cfg, std::span<const SftExample> valid) override;

  /// Fixes the validation-NLL log for fine-tunes tagged `tag` (a category name,
  /// or "responder"). Entries beyond cfg.max_epochs are ignored.
  void script_nll(const std::string& tag, std::vector<double> per_epoch);

 private:
  struct Tuned {
    std::string base_model;
    std::map<std::string, std::string> table;  // prompt hash -> target
  };
  const Tuned& tuned(const std::string& model) const;
  std::vector<double> nll_log(const std::string& tag, const std::string& corpus_hash, int epochs) const;

  std::optional<std::filesystem::path> store_dir_;
  mutable std::mutex mu_;
  mutable std::map<std::string, Tuned> tuned_;
  std::map<std::string, std::vector<double>> nll_scripts_;
};

/// Word list used by the echo-hash policy.
std::span<const std::string_view> echo_hash_vocabulary();

/// The echo-hash sentence for a digest: (8 + d[0] % 8) words, word i chosen by
/// d[1 + i] % 64, first letter capitalized, terminated by '.'.
std::string echo_hash_sentence(const std::array<std::uint8_t, 32>& digest);

/// Digest input for sample `index`: prompt text, then "|seed=<s>|t=<temperature>|i=<index>".
/// The sample index only participates when temperature > 0.
std::string echo_hash_material(const RenderedPrompt& prompt, const DecodeParams& params, int index);

}  // namespace sibyl
