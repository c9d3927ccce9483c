#include "sibyl/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "sibyl/error.hpp"

namespace sibyl {

std::string_view to_string(Aspect a) noexcept {
  switch (a) {
    case Aspect::Naturalness: return "naturalness";
    case Aspect::Coherence: return "coherence";
    case Aspect::Empathy: return "empathy";
    case Aspect::Supportiveness: return "supportiveness";
  }
  return "?";
}

Aspect parse_aspect(std::string_view s) {
  const auto v = to_lower_ascii(trim(s));
  if (v == "naturalness" || v == "nat") return Aspect::Naturalness;
  if (v == "coherence" || v == "coh") return Aspect::Coherence;
  if (v == "empathy" || v == "emp") return Aspect::Empathy;
  if (v == "supportiveness" || v == "sup") return Aspect::Supportiveness;
  throw Error(ErrorCode::ConfigInvalid, "unknown aspect '" + std::string(s) + "'");
}

DecodeParams GEvalConfig::decode() const {
  DecodeParams p;
  p.temperature = temperature;
  p.top_p = top_p;
  p.n_samples = n_samples;
  p.max_new_tokens = max_new_tokens;
  p.seed = seed;
  return p;
}

json geval_config_to_json(const GEvalConfig& c) {
  json j{{"n", c.n_samples},
         {"temperature", c.temperature},
         {"top_p", c.top_p},
         {"ratings", json::array()},
         {"max_new_tokens", c.max_new_tokens}};
  for (int r = c.min_rating; r <= c.max_rating; ++r) j["ratings"].push_back(r);
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

namespace {

std::string_view aspect_title(Aspect a) {
  switch (a) {
    case Aspect::Naturalness: return "Naturalness";
    case Aspect::Coherence: return "Coherence";
    case Aspect::Empathy: return "Empathy";
    case Aspect::Supportiveness: return "Supportiveness";
  }
  return "?";
}

}  // namespace

std::string aspect_criterion(Aspect a) {
  switch (a) {
    case Aspect::Empathy:
      return "Empathy (1-3) Is the response empathetically written?\n\n"
             "- A score of 1 (bad) means that the response is not empathetic.\n"
             "- A score of 2 (ok) means the response is totally ok, but empathetic to some extent.\n"
             "- A score of 3 (good) means the response is empathetic, showing the Listener understands the "
             "User's emotional state and situation.";
    case Aspect::Naturalness:
      return "Naturalness (1-3) Is the response naturally written?\n\n"
             "- A score of 1 (bad) means that the response is not natural.\n"
             "- A score of 2 (ok) means the response is totally ok, but natural to some extent.\n"
             "- A score of 3 (good) means the response is natural, reading like something a person would say "
             "in this conversation.";
    case Aspect::Coherence:
      return "Coherence (1-3) Is the response coherent with the conversation history?\n\n"
             "- A score of 1 (bad) means that the response is not coherent.\n"
             "- A score of 2 (ok) means the response is totally ok, but coherent to some extent.\n"
             "- A score of 3 (good) means the response is coherent, following logically from the "
             "conversation history and staying on topic.";
    case Aspect::Supportiveness:
      return "Supportiveness (1-3) Is the response supportive?\n\n"
             "- A score of 1 (bad) means that the response is not supportive.\n"
             "- A score of 2 (ok) means the response is totally ok, but supportive to some extent.\n"
             "- A score of 3 (good) means the response is supportive, helping the User cope with the "
             "emotional state and situation.";
  }
  return {};
}

RenderedPrompt render_judge_prompt(std::span<const Utterance> history, Dataset dataset,
                                   std::string_view response, Aspect aspect) {
  const auto title = std::string(aspect_title(aspect));
  RenderedPrompt p;
  p.template_id = TemplateId::Judge;
  p.messages.push_back(
      {MessageRole::System,
       "Your task is to rate the responses on one metric.\n"
       "Please make sure you read and understand these instructions carefully. Please keep this conversation "
       "history open while reviewing, and refer to it as needed.\n"
       "Evaluation Criteria:\n" +
           aspect_criterion(aspect) +
           "\nEvaluation Steps:\n"
           "1. Read the conversation, the conversation between the two individuals.\n"
           "2. Read the potential response for the next turn in the conversation.\n"
           "3. Evaluate the response based on its " +
           title +
           ", using the provided criteria.\n"
           "4. Assign a rating score of 1, 2, or 3 based on the evaluation."});
  p.messages.push_back({MessageRole::User,
                        "Conversation History:\n" + format_clip(history, dataset) + "\nResponse:\n" +
                            std::string(response) +
                            "\n\nEvaluation Form (Answer by starting with \"Analysis:\" to analyze the given "
                            "example regarding the evaluation criteria as concise as possible, and then give the "
                            "numeric rating on the next line by \"Rating:\"):\n" +
                            title + ":"});
  return p;
}

std::optional<int> parse_rating(std::string_view text, int min_rating, int max_rating) {
  constexpr std::string_view marker = "Rating:";
  const auto pos = text.rfind(marker);
  if (pos == std::string_view::npos) return std::nullopt;
  auto i = pos + marker.size();
  while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '*')) ++i;
  const auto start = i;
  while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
  if (i == start || i - start > 3) return std::nullopt;
  const int r = std::stoi(std::string(text.substr(start, i - start)));
  if (i < text.size() && text[i] == '/') {
    auto j = i + 1;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i + 1) return std::nullopt;
  }
  if (r < min_rating || r > max_rating) return std::nullopt;
  return r;
}

JudgeScore weigh_ratings(Aspect aspect, std::vector<int> samples, std::size_t dropped) {
  if (samples.empty()) {
    throw Error(ErrorCode::AllSamplesUnparseable,
                std::string(to_string(aspect)) + ": none of " + std::to_string(dropped) + " samples parsed");
  }
  JudgeScore s;
  s.aspect = aspect;
  s.dropped = dropped;
  std::map<int, std::size_t> counts;
  for (int r : samples) ++counts[r];
  const auto n = static_cast<double>(samples.size());
  for (const auto& [r, c] : counts) {
    s.probs[r] = static_cast<double>(c) / n;
    s.weighted += static_cast<double>(r) * static_cast<double>(c);
  }
  s.weighted /= n;
  s.samples = std::move(samples);
  return s;
}

JudgeScore geval_score(std::span<const Utterance> history, Dataset dataset, std::string_view response,
                       Aspect aspect, const ModelHandle& judge, Gateway& gateway, const GEvalConfig& cfg) {
  const auto prompt = render_judge_prompt(history, dataset, response, aspect);
  const auto outputs = gateway.generate(judge, prompt, cfg.decode());
  std::vector<int> ratings;
  std::size_t dropped = 0;
  for (const auto& o : outputs) {
    if (auto r = parse_rating(o, cfg.min_rating, cfg.max_rating)) {
      ratings.push_back(*r);
    } else {
      ++dropped;
      spdlog::warn("judge sample without a usable rating ({}): {:.60}", to_string(aspect), o);
    }
  }
  return weigh_ratings(aspect, std::move(ratings), dropped);
}

// ---------------------------------------------------------------------------

std::vector<AbItem> build_ab_pack(const AbRunInput& a, const AbRunInput& b,
                                  const std::map<ContextRef, std::string>& contexts, std::size_t n_items,
                                  std::uint64_t seed) {
  std::set<ContextRef> ka, kb;
  for (const auto& [k, v] : a.responses) ka.insert(k);
  for (const auto& [k, v] : b.responses) kb.insert(k);
  if (ka != kb) {
    throw Error(ErrorCode::ViewMismatch, a.system + " covers " + std::to_string(ka.size()) + " views, " +
                                             b.system + " covers " + std::to_string(kb.size()));
  }
  if (a.system == b.system) throw Error(ErrorCode::ViewMismatch, "both runs are '" + a.system + "'");
  std::vector<ContextRef> shared(ka.begin(), ka.end());
  if (n_items > shared.size()) {
    throw Error(ErrorCode::ViewMismatch, "asked for " + std::to_string(n_items) + " items, only " +
                                             std::to_string(shared.size()) + " shared views");
  }
  auto idx = sample_without_replacement(shared.size(), n_items, seed);
  std::sort(idx.begin(), idx.end());
  std::vector<ContextRef> picked;
  for (auto k : idx) picked.push_back(shared[k]);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<AbItem> items;
  items.reserve(picked.size());
  for (std::size_t i = 0; i < picked.size(); ++i) {
    const auto& ref = picked[i];
    AbItem it;
    char id[32];
    std::snprintf(id, sizeof id, "item-%04zu", i + 1);
    it.item_id = id;
    it.context_ref = ref;
    auto c = contexts.find(ref);
    if (c == contexts.end()) throw Error(ErrorCode::ViewMismatch, "no context for " + ref.str());
    it.context = c->second;
    it.response_a = a.responses.at(ref);
    it.response_b = b.responses.at(ref);
    it.system_a = a.system;
    it.system_b = b.system;
    it.flipped = uniform_below(rng, 2) == 1;
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<csv::Row> ab_sheet(const std::vector<AbItem>& items, const std::vector<std::string>& aspects) {
  std::vector<csv::Row> rows;
  csv::Row header{"item_id", "context", "response_1", "response_2"};
  header.insert(header.end(), aspects.begin(), aspects.end());
  rows.push_back(std::move(header));
  for (const auto& it : items) {
    csv::Row r{it.item_id, it.context, it.flipped ? it.response_b : it.response_a,
               it.flipped ? it.response_a : it.response_b};
    r.resize(r.size() + aspects.size());
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<csv::Row> ab_key(const std::vector<AbItem>& items) {
  std::vector<csv::Row> rows{{"item_id", "which_system_is_response_1", "context_ref", "system_a", "system_b"}};
  for (const auto& it : items) {
    rows.push_back({it.item_id, it.flipped ? it.system_b : it.system_a, it.context_ref.str(), it.system_a,
                    it.system_b});
  }
  return rows;
}

namespace {

std::size_t column(const csv::Row& header, std::string_view name) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw Error(ErrorCode::MalformedRecord, "missing column '" + std::string(name) + "'");
}

}  // namespace

AbResult score_ab(const std::vector<std::vector<csv::Row>>& sheets, const std::vector<csv::Row>& key,
                  const std::string& system_a, const std::string& system_b) {
  if (key.empty()) throw Error(ErrorCode::EmptyFile, "A/B key");
  const auto k_item = column(key[0], "item_id");
  const auto k_first = column(key[0], "which_system_is_response_1");
  std::map<std::string, std::string> first_of;
  std::vector<std::string> order;
  for (std::size_t i = 1; i < key.size(); ++i) {
    const auto& row = key[i];
    if (row.size() <= std::max(k_item, k_first)) throw Error(ErrorCode::MalformedRecord, "short key row");
    const auto& s = row[k_first];
    if (s != system_a && s != system_b) {
      throw Error(ErrorCode::ViewMismatch, "key names system '" + s + "', expected " + system_a + "|" + system_b);
    }
    first_of[row[k_item]] = s;
    order.push_back(row[k_item]);
  }
  if (sheets.empty()) throw Error(ErrorCode::EmptyFile, "no annotated sheets");

  static const std::set<std::string> fixed{"item_id", "context", "response_1", "response_2"};
  std::vector<std::string> aspects;
  for (const auto& h : sheets[0].at(0)) {
    if (!fixed.contains(h)) aspects.push_back(h);
  }

  AbResult res;
  res.system_a = system_a;
  res.system_b = system_b;
  // votes[aspect][item] = per-annotator label: 0 = system A, 1 = system B, 2 = tie.
  std::map<std::string, std::map<std::string, std::vector<int>>> votes;
  for (const auto& sheet : sheets) {
    if (sheet.empty()) throw Error(ErrorCode::EmptyFile, "annotated sheet");
    const auto s_item = column(sheet[0], "item_id");
    std::map<std::string, std::size_t> cols;
    for (const auto& a : aspects) cols[a] = column(sheet[0], a);
    for (std::size_t i = 1; i < sheet.size(); ++i) {
      const auto& row = sheet[i];
      const auto& item = row.at(s_item);
      auto f = first_of.find(item);
      if (f == first_of.end()) throw Error(ErrorCode::ViewMismatch, "item '" + item + "' not in key");
      const bool a_first = f->second == system_a;
      for (const auto& a : aspects) {
        const auto v = to_lower_ascii(trim(cols[a] < row.size() ? row[cols[a]] : std::string()));
        int label;
        if (v == "tie") {
          label = 2;
        } else if (v == "1") {
          label = a_first ? 0 : 1;
        } else if (v == "2") {
          label = a_first ? 1 : 0;
        } else {
          throw Error(ErrorCode::MalformedRecord, "item " + item + " aspect " + a + ": '" + v + "' is not 1|2|tie");
        }
        votes[a][item].push_back(label);
      }
    }
  }
  for (const auto& a : aspects) {
    auto& t = res.tallies[a];
    std::vector<std::vector<int>> matrix;
    for (const auto& [item, labels] : votes[a]) {
      for (int l : labels) {
        if (l == 0) ++t.win;
        else if (l == 1) ++t.loss;
        else ++t.tie;
      }
      matrix.push_back(labels);
    }
    try {
      res.kappa[a] = matrix.empty() ? std::nullopt : std::optional<double>(fleiss_kappa(matrix));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Degenerate && e.code() != ErrorCode::RaggedMatrix) throw;
      res.kappa[a] = std::nullopt;
    }
  }
  return res;
}

double fleiss_kappa(const std::vector<std::vector<int>>& ratings) {
  if (ratings.empty()) throw Error(ErrorCode::RaggedMatrix, "no items");
  const auto raters = ratings[0].size();
  if (raters < 2) throw Error(ErrorCode::RaggedMatrix, "need at least 2 raters per item");
  std::map<int, double> category_totals;
  double p_bar = 0;
  bool unanimous = true;
  for (std::size_t i = 0; i < ratings.size(); ++i) {
    if (ratings[i].size() != raters) {
      throw Error(ErrorCode::RaggedMatrix, "item " + std::to_string(i) + " has " +
                                               std::to_string(ratings[i].size()) + " ratings, expected " +
                                               std::to_string(raters));
    }
    std::map<int, double> n_ij;
    for (int c : ratings[i]) ++n_ij[c];
    unanimous = unanimous && n_ij.size() == 1;
    double agree = 0;
    for (const auto& [c, n] : n_ij) {
      agree += n * (n - 1);
      category_totals[c] += n;
    }
    const auto m = static_cast<double>(raters);
    p_bar += agree / (m * (m - 1));
  }
  const auto n_items = static_cast<double>(ratings.size());
  p_bar /= n_items;
  double p_e = 0;
  for (const auto& [c, total] : category_totals) {
    const double p = total / (n_items * static_cast<double>(raters));
    p_e += p * p;
  }
  if (category_totals.size() == 1) throw Error(ErrorCode::Degenerate, "all ratings in one category");
  if (unanimous) return 1.0;
  return (p_bar - p_e) / (1 - p_e);
}

}  // namespace sibyl
