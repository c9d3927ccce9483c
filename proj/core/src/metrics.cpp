#include "sibyl/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "sibyl/error.hpp"

namespace sibyl::metrics {

namespace {

/// Byte length of a Unicode space separator starting at s[i], or 0.
std::size_t unicode_space(std::string_view s, std::size_t i) {
  const auto at = [&](std::size_t k) { return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u; };
  if (at(0) == 0xC2 && at(1) == 0xA0) return 2;                                      // U+00A0
  if (at(0) == 0xE2 && at(1) == 0x80 && (at(2) <= 0x8A && at(2) >= 0x80)) return 3;  // U+2000..U+200A
  if (at(0) == 0xE2 && at(1) == 0x80 && (at(2) == 0xA8 || at(2) == 0xA9 || at(2) == 0xAF)) return 3;
  if (at(0) == 0xE2 && at(1) == 0x81 && at(2) == 0x9F) return 3;  // U+205F
  if (at(0) == 0xE3 && at(1) == 0x80 && at(2) == 0x80) return 3;  // U+3000
  return 0;
}

void check_nonempty(std::size_t n) {
  if (n == 0) throw Error(ErrorCode::EmptyCorpus, "no pairs to score");
}

using Counts = std::map<std::string, std::size_t>;

Counts count_ngrams(const Tokens& tokens, int n) {
  Counts c;
  for (auto& g : ngrams(tokens, n)) ++c[g];
  return c;
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
      ++i;
    } else if (const auto w = unicode_space(text, i)) {
      flush();
      i += w;
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    } else {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      ++i;
    }
  }
  flush();
  return out;
}

EvalPair make_pair(std::string_view candidate, const std::vector<std::string>& references) {
  if (references.empty()) throw Error(ErrorCode::EmptyCorpus, "pair without references");
  EvalPair p;
  p.raw_candidate = candidate;
  p.raw_references = references;
  p.candidate = tokenize(candidate);
  for (const auto& r : references) p.references.push_back(tokenize(r));
  return p;
}

std::vector<std::string> ngrams(const Tokens& tokens, int n) {
  std::vector<std::string> out;
  if (n <= 0 || tokens.size() < static_cast<std::size_t>(n)) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string g = tokens[i];
    for (int k = 1; k < n; ++k) g += " " + tokens[i + static_cast<std::size_t>(k)];
    out.push_back(std::move(g));
  }
  return out;
}

double bleu(const std::vector<EvalPair>& pairs, int n, BleuOptions opts) {
  check_nonempty(pairs.size());
  if (n < 1 || n > 4) throw Error(ErrorCode::ConfigInvalid, "BLEU order must be 1..4");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0, ref_len = 0;
  for (const auto& p : pairs) {
    const auto c = p.candidate.size();
    cand_len += static_cast<double>(c);
    // Closest reference length; the shorter one on ties.
    std::size_t best = p.references.front().size();
    for (const auto& r : p.references) {
      const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(c));
      const auto bd = std::abs(static_cast<long>(best) - static_cast<long>(c));
      if (d < bd || (d == bd && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int k = 1; k <= n; ++k) {
      const auto cand = count_ngrams(p.candidate, k);
      Counts max_ref;
      for (const auto& r : p.references) {
        for (const auto& [g, cnt] : count_ngrams(r, k)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : cand) {
        auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(k - 1)] += static_cast<double>(std::min(cnt, it == max_ref.end() ? 0 : it->second));
        total[static_cast<std::size_t>(k - 1)] += static_cast<double>(cnt);
      }
    }
  }
  double log_sum = 0;
  for (int k = 0; k < n; ++k) {
    const auto idx = static_cast<std::size_t>(k);
    if (total[idx] == 0) return 0.0;
    double p = matched[idx] / total[idx];
    if (p == 0) {
      if (!opts.smooth) return 0.0;
      p = 1e-9 / total[idx];
    }
    log_sum += std::log(p);
  }
  if (cand_len == 0) return 0.0;
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / n);
}

double distinct(const std::vector<Tokens>& candidates, int n) {
  check_nonempty(candidates.size());
  if (n < 1) throw Error(ErrorCode::ConfigInvalid, "distinct order must be >= 1");
  std::set<std::string> unique;
  std::size_t total = 0;
  for (const auto& c : candidates) {
    for (auto& g : ngrams(c, n)) {
      unique.insert(std::move(g));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const std::vector<EvalPair>& pairs) {
  check_nonempty(pairs.size());
  double sum = 0;
  for (const auto& p : pairs) {
    double best = 0;
    for (const auto& r : p.references) {
      const auto lcs = static_cast<double>(lcs_length(p.candidate, r));
      if (lcs == 0) continue;
      const double prec = lcs / static_cast<double>(p.candidate.size());
      const double rec = lcs / static_cast<double>(r.size());
      best = std::max(best, 2 * prec * rec / (prec + rec));
    }
    sum += best;
  }
  return sum / static_cast<double>(pairs.size());
}

MeteorStats meteor_pair(const Tokens& candidate, const Tokens& reference) {
  MeteorStats s;
  if (candidate.empty() || reference.empty()) return s;
  std::vector<int> cand_to_ref(candidate.size(), -1);
  std::vector<bool> ref_used(reference.size(), false);
  auto stage = [&](auto&& key) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (cand_to_ref[i] >= 0) continue;
      const auto k = key(candidate[i]);
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (!ref_used[j] && key(reference[j]) == k) {
          cand_to_ref[i] = static_cast<int>(j);
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  stage([](const std::string& w) { return w; });
  stage([](const std::string& w) { return porter_stem(w); });

  int prev_ref = -2;
  bool prev_matched = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    const int j = cand_to_ref[i];
    if (j < 0) {
      prev_matched = false;
      continue;
    }
    ++s.matches;
    if (!prev_matched || j != prev_ref + 1) ++s.chunks;
    prev_ref = j;
    prev_matched = true;
  }
  if (s.matches == 0) return s;
  const auto m = static_cast<double>(s.matches);
  s.precision = m / static_cast<double>(candidate.size());
  s.recall = m / static_cast<double>(reference.size());
  s.fmean = 10 * s.precision * s.recall / (s.recall + 9 * s.precision);
  s.penalty = 0.5 * std::pow(static_cast<double>(s.chunks) / m, 3);
  s.score = s.fmean * (1 - s.penalty);
  return s;
}

double meteor(const std::vector<EvalPair>& pairs) {
  check_nonempty(pairs.size());
  double sum = 0;
  for (const auto& p : pairs) {
    double best = 0;
    for (const auto& r : p.references) best = std::max(best, meteor_pair(p.candidate, r).score);
    sum += best;
  }
  return sum / static_cast<double>(pairs.size());
}

std::vector<double> cider_items(const std::vector<EvalPair>& pairs) {
  if (pairs.size() < 2) throw Error(ErrorCode::CorpusTooSmall, "CIDEr needs at least 2 items for idf");
  const double n_items = static_cast<double>(pairs.size());
  std::vector<double> scores(pairs.size(), 0.0);
  for (int n = 1; n <= 4; ++n) {
    std::map<std::string, double> df;
    for (const auto& p : pairs) {
      std::set<std::string> seen;
      for (const auto& r : p.references) {
        for (auto& g : ngrams(r, n)) seen.insert(std::move(g));
      }
      for (const auto& g : seen) df[g] += 1;
    }
    auto weigh = [&](const Tokens& t) {
      std::map<std::string, double> v;
      for (const auto& [g, cnt] : count_ngrams(t, n)) {
        auto it = df.find(g);
        const double d = it == df.end() ? 0.0 : it->second;
        v[g] = static_cast<double>(cnt) * std::log(n_items / std::max(1.0, d));
      }
      return v;
    };
    auto norm = [](const std::map<std::string, double>& v) {
      double s = 0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto vc = weigh(pairs[i].candidate);
      const double nc = norm(vc);
      double sum = 0;
      for (const auto& r : pairs[i].references) {
        const auto vr = weigh(r);
        const double nr = norm(vr);
        if (nc == 0 || nr == 0) continue;
        double dot = 0;
        for (const auto& [g, x] : vc) {
          auto it = vr.find(g);
          if (it != vr.end()) dot += x * it->second;
        }
        sum += dot / (nc * nr);
      }
      scores[i] += sum / static_cast<double>(pairs[i].references.size());
    }
  }
  for (auto& s : scores) s = 10.0 * s / 4.0;
  return scores;
}

double cider(const std::vector<EvalPair>& pairs) {
  const auto items = cider_items(pairs);
  return std::accumulate(items.begin(), items.end(), 0.0) / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------

HashEmbeddingProvider::HashEmbeddingProvider(std::size_t dimension, std::uint64_t seed)
    : dim_(dimension), seed_(seed) {
  if (dim_ == 0) throw Error(ErrorCode::DimensionMismatch, "embedding dimension must be > 0");
}

std::vector<double> HashEmbeddingProvider::vector(const std::string& token) const {
  std::vector<double> v;
  v.reserve(dim_);
  for (std::size_t block = 0; v.size() < dim_; ++block) {
    const auto d = sha256_digest(std::to_string(seed_) + "|" + token + "|" + std::to_string(block));
    for (std::size_t k = 0; k + 4 <= d.size() && v.size() < dim_; k += 4) {
      const std::uint32_t x = (std::uint32_t{d[k]} << 24) | (std::uint32_t{d[k + 1]} << 16) |
                              (std::uint32_t{d[k + 2]} << 8) | std::uint32_t{d[k + 3]};
      v.push_back(static_cast<double>(x) / 4294967296.0);
    }
  }
  return v;
}

TableEmbeddingProvider::TableEmbeddingProvider(std::size_t dimension,
                                               std::unordered_map<std::string, std::vector<double>> table)
    : dim_(dimension), table_(std::move(table)) {
  for (const auto& [t, v] : table_) {
    if (v.size() != dim_) {
      throw Error(ErrorCode::DimensionMismatch, "vector for '" + t + "' has " + std::to_string(v.size()) +
                                                    " components, expected " + std::to_string(dim_));
    }
  }
}

TableEmbeddingProvider TableEmbeddingProvider::load(const std::filesystem::path& path) {
  std::unordered_map<std::string, std::vector<double>> table;
  std::size_t dim = 0;
  bool first = true;
  for_each_line(path, [&](std::size_t n, const std::string& line) {
    auto fields = split_whitespace(line);
    if (first) {
      first = false;
      if (fields.size() == 2 && std::all_of(line.begin(), line.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c)) || std::isspace(static_cast<unsigned char>(c));
          })) {
        return;
      }
    }
    if (fields.size() < 2) throw Error(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(n));
    std::vector<double> v;
    v.reserve(fields.size() - 1);
    try {
      for (std::size_t i = 1; i < fields.size(); ++i) v.push_back(std::stod(fields[i]));
    } catch (const std::exception&) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(n) + ": bad number");
    }
    if (dim == 0) dim = v.size();
    if (v.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch, path.string() + ":" + std::to_string(n) + ": " +
                                                    std::to_string(v.size()) + " components, expected " +
                                                    std::to_string(dim));
    }
    table.emplace(fields[0], std::move(v));
  });
  if (dim == 0) throw Error(ErrorCode::EmptyFile, path.string());
  return TableEmbeddingProvider(dim, std::move(table));
}

std::vector<double> TableEmbeddingProvider::vector(const std::string& token) const {
  auto it = table_.find(token);
  return it == table_.end() ? std::vector<double>(dim_, 0.0) : it->second;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

std::vector<double> checked_vector(const EmbeddingProvider& provider, const std::string& token) {
  auto v = provider.vector(token);
  if (v.size() != provider.dimension()) {
    throw Error(ErrorCode::DimensionMismatch, "provider returned " + std::to_string(v.size()) +
                                                  " components for '" + token + "', expected " +
                                                  std::to_string(provider.dimension()));
  }
  return v;
}

}  // namespace

std::vector<double> mean_pool(const Tokens& tokens, const EmbeddingProvider& provider) {
  std::vector<double> acc(provider.dimension(), 0.0);
  if (tokens.empty()) return acc;
  for (const auto& t : tokens) {
    const auto v = checked_vector(provider, t);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (auto& x : acc) x /= static_cast<double>(tokens.size());
  return acc;
}

std::vector<double> extrema_pool(const Tokens& tokens, const EmbeddingProvider& provider) {
  std::vector<double> hi(provider.dimension(), 0.0), lo(provider.dimension(), 0.0);
  for (const auto& t : tokens) {
    const auto v = checked_vector(provider, t);
    for (std::size_t i = 0; i < hi.size(); ++i) {
      hi[i] = std::max(hi[i], v[i]);
      lo[i] = std::min(lo[i], v[i]);
    }
  }
  // Equal magnitudes resolve to the positive extreme.
  for (std::size_t i = 0; i < hi.size(); ++i) {
    if (-lo[i] > hi[i]) hi[i] = lo[i];
  }
  return hi;
}

EmbeddingScores embedding_scores(const std::vector<EvalPair>& pairs, const EmbeddingProvider& provider) {
  check_nonempty(pairs.size());
  EmbeddingScores s;
  for (const auto& p : pairs) {
    const auto cm = mean_pool(p.candidate, provider);
    const auto ce = extrema_pool(p.candidate, provider);
    double best_avg = -1, best_ext = -1;
    for (const auto& r : p.references) {
      best_avg = std::max(best_avg, cosine(cm, mean_pool(r, provider)));
      best_ext = std::max(best_ext, cosine(ce, extrema_pool(r, provider)));
    }
    s.average += best_avg;
    s.extrema += best_ext;
  }
  s.average /= static_cast<double>(pairs.size());
  s.extrema /= static_cast<double>(pairs.size());
  return s;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, double>> MetricReport::items() const {
  return {{"bleu1", bleu1}, {"bleu2", bleu2},     {"bleu3", bleu3},   {"bleu4", bleu4},
          {"dist1", dist1}, {"dist2", dist2},     {"dist3", dist3},   {"rouge_l", rouge_l},
          {"meteor", meteor}, {"cider", cider},   {"avg_cos", avg_cos}, {"ext_cos", ext_cos},
          {"pairs", static_cast<double>(pairs)}};
}

std::string MetricReport::to_flat() const {
  std::string out;
  char buf[64];
  for (const auto& [k, v] : items()) {
    if (k == "pairs") {
      std::snprintf(buf, sizeof buf, "%zu", pairs);
    } else {
      std::snprintf(buf, sizeof buf, "%.10f", v);
    }
    out += k + "=" + buf + "\n";
  }
  return out;
}

MetricReport MetricReport::from_flat(std::string_view text) {
  std::map<std::string, double> kv;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::MalformedRecord, "report line '" + line + "'");
    kv[trim(line.substr(0, eq))] = std::stod(line.substr(eq + 1));
  }
  MetricReport r;
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw Error(ErrorCode::MalformedRecord, std::string("report lacks ") + k);
    return it->second;
  };
  r.bleu1 = get("bleu1"), r.bleu2 = get("bleu2"), r.bleu3 = get("bleu3"), r.bleu4 = get("bleu4");
  r.dist1 = get("dist1"), r.dist2 = get("dist2"), r.dist3 = get("dist3");
  r.rouge_l = get("rouge_l"), r.meteor = get("meteor"), r.cider = get("cider");
  r.avg_cos = get("avg_cos"), r.ext_cos = get("ext_cos");
  r.pairs = static_cast<std::size_t>(get("pairs"));
  return r;
}

MetricReport evaluate(const std::vector<EvalPair>& pairs, const EmbeddingProvider& provider, BleuOptions opts) {
  check_nonempty(pairs.size());
  MetricReport r;
  r.bleu1 = bleu(pairs, 1, opts);
  r.bleu2 = bleu(pairs, 2, opts);
  r.bleu3 = bleu(pairs, 3, opts);
  r.bleu4 = bleu(pairs, 4, opts);
  std::vector<Tokens> cands;
  cands.reserve(pairs.size());
  for (const auto& p : pairs) cands.push_back(p.candidate);
  r.dist1 = distinct(cands, 1);
  r.dist2 = distinct(cands, 2);
  r.dist3 = distinct(cands, 3);
  r.rouge_l = rouge_l(pairs);
  r.meteor = meteor(pairs);
  r.cider = cider(pairs);
  const auto emb = embedding_scores(pairs, provider);
  r.avg_cos = emb.average;
  r.ext_cos = emb.extrema;
  r.pairs = pairs.size();
  return r;
}

double paired_bootstrap(const std::vector<double>& per_item_a, const std::vector<double>& per_item_b,
                        std::size_t samples, std::uint64_t seed) {
  if (per_item_a.size() != per_item_b.size()) {
    throw Error(ErrorCode::DimensionMismatch, "bootstrap needs paired per-item scores");
  }
  check_nonempty(per_item_a.size());
  if (samples == 0) throw Error(ErrorCode::ConfigInvalid, "bootstrap needs >= 1 sample");
  std::mt19937_64 rng(seed);
  std::size_t wins = 0;
  const auto n = per_item_a.size();
  for (std::size_t s = 0; s < samples; ++s) {
    double a = 0, b = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = static_cast<std::size_t>(uniform_below(rng, n));
      a += per_item_a[i];
      b += per_item_b[i];
    }
    wins += a > b;
  }
  return static_cast<double>(wins) / static_cast<double>(samples);
}

}  // namespace sibyl::metrics
