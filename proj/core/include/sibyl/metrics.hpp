#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sibyl/util.hpp"

namespace sibyl::metrics {

using Tokens = std::vector<std::string>;

/// Lowercases, separates ASCII punctuation into standalone tokens and splits
/// on whitespace (including the Unicode space separators).
Tokens tokenize(std::string_view text);

/// Porter (1980) suffix-stripping stemmer for lowercase ASCII words.
std::string porter_stem(std::string_view word);

struct EvalPair {
  Tokens candidate;
  std::vector<Tokens> references;
  std::string raw_candidate;
  std::vector<std::string> raw_references;
};

EvalPair make_pair(std::string_view candidate, const std::vector<std::string>& references);

/// All n-grams of a token list, joined by a single space.
std::vector<std::string> ngrams(const Tokens& tokens, int n);

struct BleuOptions {
  /// Replace zero precisions by 1e-9 / total instead of returning 0.
  bool smooth = false;
};

/// Corpus BLEU-n: clipped n-gram precisions summed over the corpus, uniform
/// geometric mean up to n, brevity penalty against the closest reference length.
double bleu(const std::vector<EvalPair>& pairs, int n, BleuOptions opts = {});

/// Unique n-grams / total n-grams over all candidates; 0 when none has length >= n.
double distinct(const std::vector<Tokens>& candidates, int n);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// Mean over pairs of the LCS F-measure 2PR/(P+R); max over references.
double rouge_l(const std::vector<EvalPair>& pairs);

struct MeteorStats {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0;
  double recall = 0;
  double fmean = 0;
  double penalty = 0;
  double score = 0;
};

/// Single-reference METEOR with exact then Porter-stem matching.
/// Within each stage the k-th unaligned candidate occurrence of a key aligns to
/// the k-th unaligned reference occurrence of the same key.
MeteorStats meteor_pair(const Tokens& candidate, const Tokens& reference);
/// Mean over pairs; max over references per pair.
double meteor(const std::vector<EvalPair>& pairs);

/// Original CIDEr (no length penalty, no clipping), scaled by 10. Document
/// frequency is counted over the reference sets; idf = log(N / max(1, df)).
double cider(const std::vector<EvalPair>& pairs);
/// Per-item CIDEr values (same corpus statistics as cider()).
std::vector<double> cider_items(const std::vector<EvalPair>& pairs);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const = 0;
  /// Out-of-vocabulary tokens map to the zero vector.
  virtual std::vector<double> vector(const std::string& token) const = 0;
};

/// Deterministic token vectors with components in [0, 1) derived from
/// SHA-256(seed, token, block). Test and smoke-run provider.
class HashEmbeddingProvider : public EmbeddingProvider {
 public:
  HashEmbeddingProvider(std::size_t dimension, std::uint64_t seed);
  std::size_t dimension() const override { return dim_; }
  std::vector<double> vector(const std::string& token) const override;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Word vectors from the text format "token v1 v2 ... vd", one per line.
/// A leading "<count> <dim>" header line is skipped.
class TableEmbeddingProvider : public EmbeddingProvider {
 public:
  TableEmbeddingProvider(std::size_t dimension, std::unordered_map<std::string, std::vector<double>> table);
  static TableEmbeddingProvider load(const std::filesystem::path& path);
  std::size_t dimension() const override { return dim_; }
  std::vector<double> vector(const std::string& token) const override;

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::vector<double>> table_;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> mean_pool(const Tokens& tokens, const EmbeddingProvider& provider);
std::vector<double> extrema_pool(const Tokens& tokens, const EmbeddingProvider& provider);

struct EmbeddingScores {
  double average = 0;
  double extrema = 0;
};

/// Mean over pairs of the pooled-vector cosines; max over references.
EmbeddingScores embedding_scores(const std::vector<EvalPair>& pairs, const EmbeddingProvider& provider);

struct MetricReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double dist1 = 0, dist2 = 0, dist3 = 0;
  double rouge_l = 0;
  double meteor = 0;
  double cider = 0;
  double avg_cos = 0;
  double ext_cos = 0;
  std::size_t pairs = 0;

  /// (name, value) in report order.
  std::vector<std::pair<std::string, double>> items() const;
  /// "key=value" lines.
  std::string to_flat() const;
  static MetricReport from_flat(std::string_view text);
};

MetricReport evaluate(const std::vector<EvalPair>& pairs, const EmbeddingProvider& provider, BleuOptions opts = {});

/// Fraction of `samples` bootstrap resamples (shared indices for both systems)
/// in which system A's sentence-level score total exceeds system B's.
double paired_bootstrap(const std::vector<double>& per_item_a, const std::vector<double>& per_item_b,
                        std::size_t samples, std::uint64_t seed);

}  // namespace sibyl::metrics
