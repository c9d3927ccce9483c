#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sibyl/backend.hpp"
#include "sibyl/csv.hpp"

namespace sibyl {

enum class Aspect { Naturalness, Coherence, Empathy, Supportiveness };
std::string_view to_string(Aspect a) noexcept;
Aspect parse_aspect(std::string_view s);

/// Judge sampling: 20 samples at temperature 1, top_p 1.
struct GEvalConfig {
  int n_samples = 20;
  double temperature = 1.0;
  double top_p = 1.0;
  int min_rating = 1;
  int max_rating = 3;
  int max_new_tokens = 256;
  std::optional<std::int64_t> seed;

  DecodeParams decode() const;
};

json geval_config_to_json(const GEvalConfig& c);

/// Rating scale rubric used in the SYSTEM message of an aspect prompt.
std::string aspect_criterion(Aspect a);

/// Judge prompt for one (history, response) under an aspect.
RenderedPrompt render_judge_prompt(std::span<const Utterance> history, Dataset dataset,
                                   std::string_view response, Aspect aspect);

/// Integer after the last "Rating:" marker; accepts "2" and "2/3". nullopt when
/// absent or outside [min, max].
std::optional<int> parse_rating(std::string_view text, int min_rating = 1, int max_rating = 3);

struct JudgeScore {
  Aspect aspect = Aspect::Empathy;
  std::vector<int> samples;
  std::map<int, double> probs;
  double weighted = 0;
  std::size_t dropped = 0;
};

/// Probability-weighted rating from parsed samples. Throws AllSamplesUnparseable
/// when `samples` is empty.
JudgeScore weigh_ratings(Aspect aspect, std::vector<int> samples, std::size_t dropped = 0);

JudgeScore geval_score(std::span<const Utterance> history, Dataset dataset, std::string_view response,
                       Aspect aspect, const ModelHandle& judge, Gateway& gateway, const GEvalConfig& cfg = {});

// ---------------------------------------------------------------------------
// Human A/B tests

struct AbItem {
  std::string item_id;
  ContextRef context_ref;
  std::string context;
  std::string response_a;  // from system A
  std::string response_b;  // from system B
  std::string system_a;
  std::string system_b;
  /// true: response_1 shown to annotators is system B's.
  bool flipped = false;
};

struct AbRunInput {
  std::string system;
  std::map<ContextRef, std::string> responses;
};

/// Samples `n_items` shared views and randomizes presentation order per item.
/// Throws ViewMismatch when the runs cover different views or n_items exceeds them.
std::vector<AbItem> build_ab_pack(const AbRunInput& a, const AbRunInput& b,
                                  const std::map<ContextRef, std::string>& contexts, std::size_t n_items,
                                  std::uint64_t seed);

/// Annotator-facing sheet: item_id, context, response_1, response_2, <aspect>...
std::vector<csv::Row> ab_sheet(const std::vector<AbItem>& items, const std::vector<std::string>& aspects);
/// De-blinding key: item_id, which_system_is_response_1.
std::vector<csv::Row> ab_key(const std::vector<AbItem>& items);

struct AbTally {
  std::size_t win = 0;
  std::size_t tie = 0;
  std::size_t loss = 0;
};

struct AbResult {
  std::string system_a;
  std::string system_b;
  /// Per aspect, outcomes from system A's side over all (item, annotator) votes.
  std::map<std::string, AbTally> tallies;
  /// Per aspect Fleiss kappa over {a, b, tie}; absent when undefined.
  std::map<std::string, std::optional<double>> kappa;
};

/// De-blinds annotated sheets (one per annotator) with the key and tallies.
AbResult score_ab(const std::vector<std::vector<csv::Row>>& sheets, const std::vector<csv::Row>& key,
                  const std::string& system_a, const std::string& system_b);

/// Fleiss kappa for an items x raters matrix of category labels.
/// Throws RaggedMatrix, or Degenerate when expected agreement is 1.
double fleiss_kappa(const std::vector<std::vector<int>>& ratings);

}  // namespace sibyl
