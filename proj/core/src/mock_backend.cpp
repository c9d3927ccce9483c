#include "sibyl/mock_backend.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>

namespace sibyl {

namespace {

constexpr std::array<std::string_view, 64> kVocabulary = {
    "the",     "listener", "speaker", "feels",    "hopes",   "wants",    "to",       "share",
    "support", "comfort",  "a",       "friend",   "worried", "about",    "work",     "family",
    "calm",    "and",      "kind",    "future",   "plans",   "after",    "news",     "happy",
    "sad",     "anxious",  "proud",   "tired",    "excited", "because",  "of",       "their",
    "day",     "trip",     "exam",    "job",      "dog",     "home",     "will",     "likely",
    "offer",   "advice",   "ask",     "more",     "listen",  "reassure", "encourage", "gently",
    "soon",    "again",    "with",    "care",     "warm",    "words",    "next",     "step",
    "is",      "intends",  "react",   "relieved", "lonely",  "grateful", "nervous",  "curious",
};

std::string format_temperature(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

struct Policy {
  enum class Kind { EchoHash, EchoSlot, Ratings } kind = Kind::EchoHash;
  KnowledgeCategory slot = KnowledgeCategory::EmotionState;
  std::vector<int> ratings;
};

Policy parse_policy(const std::string& model) {
  Policy p;
  if (model.rfind("echo-slot=", 0) == 0) {
    p.kind = Policy::Kind::EchoSlot;
    p.slot = parse_category(model.substr(10));
  } else if (model.rfind("ratings=", 0) == 0) {
    p.kind = Policy::Kind::Ratings;
    std::string spec = model.substr(8);
    std::size_t start = 0;
    for (std::size_t i = 0; i <= spec.size(); ++i) {
      if (i < spec.size() && spec[i] != ',') continue;
      const auto item = spec.substr(start, i - start);
      start = i + 1;
      const auto x = item.find('x');
      try {
        const int rating = std::stoi(item.substr(0, x));
        const int count = x == std::string::npos ? 1 : std::stoi(item.substr(x + 1));
        for (int k = 0; k < count; ++k) p.ratings.push_back(rating);
      } catch (const std::exception&) {
        throw Error(ErrorCode::ConfigInvalid, "bad mock ratings spec '" + spec + "'");
      }
    }
    if (p.ratings.empty()) throw Error(ErrorCode::ConfigInvalid, "empty mock ratings spec");
  }
  return p;
}

std::string slot_text(const RenderedPrompt& prompt, KnowledgeCategory c) {
  if (prompt.messages.empty()) return {};
  const auto& system = prompt.messages.front().text;
  for (auto dataset : {Dataset::ED, Dataset::ESConv}) {
    const auto lead = slot_lead_in(c, dataset);
    const auto pos = system.find(lead);
    if (pos == std::string::npos) continue;
    const auto begin = pos + lead.size();
    const auto end = system.find('\n', begin);
    auto value = trim(system.substr(begin, end == std::string::npos ? std::string::npos : end - begin));
    while (!value.empty() && value.back() == '.') value.pop_back();
    return value;
  }
  return {};
}

std::vector<std::string> run_policy(const Policy& policy, const RenderedPrompt& prompt, const DecodeParams& params) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(params.n_samples));
  for (int i = 0; i < params.n_samples; ++i) {
    const auto digest = sha256_digest(echo_hash_material(prompt, params, i));
    switch (policy.kind) {
      case Policy::Kind::EchoHash: {
        const auto sentence = echo_hash_sentence(digest);
        if (prompt.template_id == TemplateId::Acquire) {
          out.push_back("Analysis: the reply follows from the clip.\nAnswer: " + sentence);
        } else if (prompt.template_id == TemplateId::Judge) {
          out.push_back("Analysis: " + sentence + "\nRating: " + std::to_string(1 + digest[31] % 3));
        } else {
          out.push_back(sentence);
        }
        break;
      }
      case Policy::Kind::EchoSlot: {
        const auto value = slot_text(prompt, policy.slot);
        out.push_back(value.empty() ? "I understand." : "I understand. " + value + ".");
        break;
      }
      case Policy::Kind::Ratings: {
        const auto r = policy.ratings[static_cast<std::size_t>(i) % policy.ratings.size()];
        out.push_back("Analysis: scripted judgement.\nRating: " + std::to_string(r));
        break;
      }
    }
  }
  return out;
}

std::string corpus_hash(std::span<const SftExample> train, std::span<const SftExample> valid) {
  std::string material;
  for (const auto& e : train) material += sft_to_json(e).dump() + "\n";
  material += "|valid|\n";
  for (const auto& e : valid) material += sft_to_json(e).dump() + "\n";
  return sha256_hex(material);
}

}  // namespace

std::span<const std::string_view> echo_hash_vocabulary() { return kVocabulary; }

std::string echo_hash_sentence(const std::array<std::uint8_t, 32>& digest) {
  const std::size_t words = 8 + digest[0] % 8;
  std::string out;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) out.push_back(' ');
    out += kVocabulary[digest[1 + i] % kVocabulary.size()];
  }
  out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  out.push_back('.');
  return out;
}

std::string echo_hash_material(const RenderedPrompt& prompt, const DecodeParams& params, int index) {
  std::string m = prompt.text();
  m += "|seed=" + (params.seed ? std::to_string(*params.seed) : std::string("none"));
  m += "|t=" + format_temperature(params.temperature);
  if (params.temperature > 0) m += "|i=" + std::to_string(index);
  return m;
}

MockBackend::MockBackend(std::optional<std::filesystem::path> store_dir) : store_dir_(std::move(store_dir)) {}

void MockBackend::script_nll(const std::string& tag, std::vector<double> per_epoch) {
  std::lock_guard lock(mu_);
  nll_scripts_[tag] = std::move(per_epoch);
}

const MockBackend::Tuned& MockBackend::tuned(const std::string& model) const {
  std::lock_guard lock(mu_);
  if (auto it = tuned_.find(model); it != tuned_.end()) return it->second;
  if (!store_dir_) throw Error(ErrorCode::UnknownBackend, "unknown fine-tuned mock model " + model);
  const auto path = *store_dir_ / (model + ".json");
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::UnknownBackend, "no stored mock model " + path.string());
  const auto j = json::parse(read_file(path));
  Tuned t;
  t.base_model = j.at("base_model").get<std::string>();
  t.table = j.at("table").get<std::map<std::string, std::string>>();
  return tuned_.emplace(model, std::move(t)).first->second;
}

std::vector<std::string> MockBackend::generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                               const DecodeParams& params) {
  auto model = handle.model_name();
  if (model.rfind("ft-", 0) == 0) {
    const auto& t = tuned(model);
    if (auto it = t.table.find(prompt.hash()); it != t.table.end()) {
      return std::vector<std::string>(static_cast<std::size_t>(params.n_samples), it->second);
    }
    model = t.base_model;
  }
  return run_policy(parse_policy(model), prompt, params);
}

std::vector<double> MockBackend::nll_log(const std::string& tag, const std::string& hash, int epochs) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = nll_scripts_.find(tag); it != nll_scripts_.end()) {
      std::vector<double> log = it->second;
      if (log.size() > static_cast<std::size_t>(epochs)) log.resize(static_cast<std::size_t>(epochs));
      return log;
    }
  }
  // Convex curve whose minimum (epoch 2..4) depends on the corpus.
  const int best = 2 + static_cast<int>(std::stoul(hash.substr(0, 2), nullptr, 16) % 3);
  std::vector<double> log;
  for (int e = 1; e <= epochs; ++e) log.push_back(0.5 + 0.1 * (e - best) * (e - best) + 0.01 * e);
  return log;
}

FineTuneResult MockBackend::fine_tune(const ModelHandle& base, std::span<const SftExample> train,
                                      const TrainConfig& cfg, std::span<const SftExample> valid) {
  if (train.empty()) throw Error(ErrorCode::EmptyTrainset, "no training examples for " + base.backend_id);
  const auto hash = corpus_hash(train, valid);
  const std::string tag = train.front().category ? std::string(to_string(*train.front().category)) : "responder";
  const auto cfg_json = train_config_to_json(cfg);
  const std::string model = "ft-" + sha256_hex(base.backend_id + "|" + hash + "|" + cfg_json.dump()).substr(0, 16);

  Tuned t;
  t.base_model = base.model_name();
  if (t.base_model.rfind("ft-", 0) == 0) t.base_model = tuned(t.base_model).base_model;
  for (const auto& e : train) t.table[e.prompt.hash()] = e.target;

  FineTuneResult r;
  r.handle = base;
  r.handle.backend_id = base.backend_name() + ":" + model;
  r.valid_nll = nll_log(tag, hash, cfg.max_epochs);
  if (r.valid_nll.empty()) throw Error(ErrorCode::EmptyTrainset, "empty NLL log for " + tag);
  r.selected_epoch = select_best_epoch(r.valid_nll);
  r.manifest = {{"base", handle_to_json(base)},
                {"model", handle_to_json(r.handle)},
                {"tag", tag},
                {"train_config", cfg_json},
                {"train_examples", train.size()},
                {"valid_examples", valid.size()},
                {"corpus_sha256", hash},
                {"valid_nll", r.valid_nll},
                {"selected_epoch", r.selected_epoch},
                {"loss", "next-token NLL on target tokens; prompt tokens masked"}};

  if (store_dir_) {
    json j = {{"base_model", t.base_model}, {"table", t.table}};
    write_file(*store_dir_ / (model + ".json"), j.dump(1) + "\n");
  }
  {
    std::lock_guard lock(mu_);
    tuned_[model] = std::move(t);
  }
  return r;
}

}  // namespace sibyl
