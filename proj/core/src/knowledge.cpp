#include "sibyl/knowledge.hpp"

#include <cctype>
#include <fstream>

#include "sibyl/error.hpp"

namespace sibyl {

std::string_view to_string(KnowledgeCategory c) noexcept {
  switch (c) {
    case KnowledgeCategory::Cause: return "cause";
    case KnowledgeCategory::SubsequentEvent: return "subsequent";
    case KnowledgeCategory::EmotionState: return "emotion";
    case KnowledgeCategory::Intention: return "intent";
  }
  return "cause";
}

KnowledgeCategory parse_category(std::string_view s) {
  const auto v = to_lower_ascii(trim(s));
  if (v == "cause") return KnowledgeCategory::Cause;
  if (v == "subsequent" || v == "subs" || v == "subsequent_event") return KnowledgeCategory::SubsequentEvent;
  if (v == "emotion" || v == "emo" || v == "emotion_state") return KnowledgeCategory::EmotionState;
  if (v == "intent" || v == "intention") return KnowledgeCategory::Intention;
  throw Error(ErrorCode::ConfigInvalid, "unknown knowledge category '" + std::string(s) + "'");
}

CategoryMask CategoryMask::parse(std::string_view spec) {
  const auto v = to_lower_ascii(trim(spec));
  if (v.empty() || v == "all") return all();
  if (v == "none") return none();
  if (v.front() == '-') return all_except(parse_category(std::string_view(v).substr(1)));
  CategoryMask m;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= v.size(); ++i) {
    if (i == v.size() || v[i] == ',' || v[i] == '+') {
      if (i > start) m = m.with(parse_category(std::string_view(v).substr(start, i - start)));
      start = i + 1;
    }
  }
  return m;
}

CategoryMask CategoryMask::from_names(const std::vector<std::string>& names) {
  CategoryMask m;
  for (const auto& n : names) m = m.with(parse_category(n));
  return m;
}

std::size_t CategoryMask::size() const {
  std::size_t n = 0;
  for (auto c : kAllCategories) n += has(c) ? 1 : 0;
  return n;
}

std::vector<std::string> CategoryMask::names() const {
  std::vector<std::string> out;
  for (auto c : kAllCategories) {
    if (has(c)) out.emplace_back(to_string(c));
  }
  return out;
}

std::string CategoryMask::label() const {
  if (*this == all()) return "all";
  if (empty()) return "none";
  if (size() == 3) {
    for (auto c : kAllCategories) {
      if (!has(c)) return "-" + std::string(to_string(c));
    }
  }
  std::string out;
  for (const auto& n : names()) out += (out.empty() ? "" : "+") + n;
  return out;
}

std::string_view to_string(Provenance p) noexcept {
  return p == Provenance::TeacherOracle ? "teacher_oracle" : "visionary_model";
}

Provenance parse_provenance(std::string_view s) {
  const auto v = to_lower_ascii(s);
  if (v == "teacher_oracle") return Provenance::TeacherOracle;
  if (v == "visionary_model") return Provenance::VisionaryModel;
  throw Error(ErrorCode::MalformedRecord, "unknown provenance '" + std::string(s) + "'");
}

const std::string& KnowledgeBundle::at(KnowledgeCategory c) const {
  auto it = entries.find(c);
  if (it == entries.end()) {
    throw Error(ErrorCode::MissingKnowledge, context_ref.str() + " has no " + std::string(to_string(c)) + " entry");
  }
  return it->second;
}

std::map<KnowledgeCategory, std::size_t> KnowledgeBundle::word_counts() const {
  std::map<KnowledgeCategory, std::size_t> out;
  for (const auto& [c, text] : entries) out[c] = word_count(text);
  return out;
}

json bundle_to_json(const KnowledgeBundle& b) {
  json j = {{"dialogue_id", b.context_ref.dialogue_id},
            {"cut", b.context_ref.cut},
            {"provenance", to_string(b.provenance)}};
  for (auto c : kAllCategories) {
    auto it = b.entries.find(c);
    j[std::string(to_string(c))] = it == b.entries.end() ? json(nullptr) : json(it->second);
  }
  json flags = json::object();
  for (const auto& [c, f] : b.flags) {
    if (!f.empty()) flags[std::string(to_string(c))] = f;
  }
  if (!flags.empty()) j["flags"] = flags;
  return j;
}

KnowledgeBundle bundle_from_json(const json& j) {
  KnowledgeBundle b;
  try {
    b.context_ref = {j.at("dialogue_id").get<std::string>(), j.at("cut").get<std::size_t>()};
    b.provenance = parse_provenance(j.at("provenance").get<std::string>());
    for (auto c : kAllCategories) {
      const std::string key(to_string(c));
      if (j.contains(key) && j[key].is_string()) {
        auto text = j[key].get<std::string>();
        if (trim(text).empty()) throw Error(ErrorCode::MalformedRecord, b.context_ref.str() + ": empty " + key);
        b.entries[c] = std::move(text);
      }
    }
    if (j.contains("flags")) {
      for (const auto& [k, v] : j["flags"].items()) b.flags[parse_category(k)] = v.get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("knowledge record: ") + e.what());
  }
  return b;
}

void KnowledgeStore::put(KnowledgeBundle bundle) {
  auto ref = bundle.context_ref;
  bundles_[ref] = std::move(bundle);
}

const KnowledgeBundle* KnowledgeStore::find(const ContextRef& ref) const {
  auto it = bundles_.find(ref);
  return it == bundles_.end() ? nullptr : &it->second;
}

KnowledgeStore KnowledgeStore::load(const std::filesystem::path& path) {
  KnowledgeStore store;
  if (!std::filesystem::exists(path)) return store;
  for (const auto& j : read_jsonl(path)) store.put(bundle_from_json(j));
  return store;
}

void KnowledgeStore::save(const std::filesystem::path& path) const {
  std::vector<json> records;
  records.reserve(bundles_.size());
  for (const auto& [ref, b] : bundles_) records.push_back(bundle_to_json(b));
  write_jsonl(path, records);
}

void KnowledgeStore::append(const std::filesystem::path& path, const KnowledgeBundle& bundle) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::Io, "cannot append to " + path.string());
  out << bundle_to_json(bundle).dump() << '\n';
  out.flush();
}

// ---------------------------------------------------------------------------

std::string_view to_string(TemplateId t) noexcept {
  switch (t) {
    case TemplateId::Acquire: return "acquire";
    case TemplateId::Visionary: return "visionary";
    case TemplateId::Generate: return "generate";
    case TemplateId::Judge: return "judge";
  }
  return "generate";
}

std::string_view to_string(MessageRole r) noexcept {
  switch (r) {
    case MessageRole::System: return "system";
    case MessageRole::User: return "user";
    case MessageRole::Assistant: return "assistant";
  }
  return "user";
}

TemplateId parse_template_id(std::string_view s) {
  for (auto t : {TemplateId::Acquire, TemplateId::Visionary, TemplateId::Generate, TemplateId::Judge}) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorCode::MalformedRecord, "unknown template id '" + std::string(s) + "'");
}

MessageRole parse_message_role(std::string_view s) {
  for (auto r : {MessageRole::System, MessageRole::User, MessageRole::Assistant}) {
    if (to_string(r) == s) return r;
  }
  throw Error(ErrorCode::MalformedRecord, "unknown message role '" + std::string(s) + "'");
}

std::string RenderedPrompt::text() const {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += "\n\n";
    out += "[";
    out += to_upper_ascii(to_string(m.role));
    out += "]\n";
    out += m.text;
  }
  return out;
}

std::string RenderedPrompt::hash() const { return sha256_hex(text()); }

json prompt_to_json(const RenderedPrompt& p) {
  json messages = json::array();
  for (const auto& m : p.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.text}});
  json j = {{"template", to_string(p.template_id)}, {"messages", messages}};
  if (p.category) j["category"] = to_string(*p.category);
  return j;
}

RenderedPrompt prompt_from_json(const json& j) {
  RenderedPrompt p;
  p.template_id = parse_template_id(j.at("template").get<std::string>());
  for (const auto& m : j.at("messages")) {
    p.messages.push_back({parse_message_role(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
  }
  if (j.contains("category")) p.category = parse_category(j["category"].get<std::string>());
  return p;
}

// ---------------------------------------------------------------------------
// Templates

namespace {

std::string capitalize(std::string_view s) {
  std::string out(s);
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

/// Category-specific phrases of the acquisition/visionary template.
struct CategoryPhrases {
  std::string objective;    // "...make inferences to identify <objective>."
  std::string explanation;  // "an explanation of <explanation>"
  std::string question;
  std::string subject;      // "inference (no more than 40 words) of <subject> of the last utterance"
};

CategoryPhrases phrases(KnowledgeCategory c, Dataset dataset) {
  const auto labels = role_labels(dataset);
  const std::string s(labels.seeker), l(labels.supporter);
  switch (c) {
    case KnowledgeCategory::Cause:
      return {"the underlying cause of the latest utterance stated by the " + l +
                  " (the reason contributing to the utterance stated by the " + l + ")",
              "the causes", "What is the cause of the " + l + " to post the next response?", "the cause"};
    case KnowledgeCategory::SubsequentEvent:
      return {"the subsequent event about the " + l + " that happens or could happen following the last utterance "
              "stated by the " + l,
              "the subsequent events",
              "What will be the potential subsequent events involving the " + l + " that may occur after the " + s +
                  "'s last utterance?",
              "the subsequent event"};
    case KnowledgeCategory::EmotionState:
      return {"the possible emotional reaction of the " + s + " in response to the last utterance stated by the " + s,
              "the emotional reactions", "What is the emotional reaction of the " + s + " in their last utterance?",
              "the emotional reaction"};
    case KnowledgeCategory::Intention:
      return {"the " + l + "'s intent to post the last utterance according to the emotion reaction of the " + s,
              "the intents",
              "What is the " + l + "'s intent to post the last utterance according to the emotional reaction of the " +
                  s + "?",
              "the intent"};
  }
  return {};
}

std::string system_text(KnowledgeCategory c, Dataset dataset, const Demonstration& demo) {
  const auto labels = role_labels(dataset);
  const auto p = phrases(c, dataset);
  std::vector<Utterance> demo_clip = demo.view.history;
  demo_clip.push_back(demo.view.target);
  std::string out;
  out += "Given a dyadic dialogue clip between a " + std::string(labels.supporter) + " and a " +
         std::string(labels.seeker) + ", the objective is to comprehend the dialogue and make inferences to identify " +
         p.objective + ".\n\n";
  out += "I will provide an example of a conversation clip and an explanation of " + p.explanation +
         ", which are as follows:\n\n";
  out += format_clip(demo_clip, demo.view.dataset) + "\n\n";
  out += p.question +
         " Please make inferences based on the utterances before the last utterance of the conversation. "
         "Please generate the answer like this: Answer: " +
         trim(demo.answer);
  return out;
}

std::string user_text(KnowledgeCategory c, Dataset dataset, std::span<const Utterance> clip) {
  const auto p = phrases(c, dataset);
  std::string out;
  out += "Now, generate one concise and relevant inference (no more than 40 words) of " + p.subject +
         " of the last utterance. The conversation clip is:\n\n";
  out += format_clip(clip, dataset) + "\n\n";
  out += p.question + "\n\nAnswer:";
  return out;
}

void check_demo(const Demonstration& demo) {
  if (demo.view.split != Split::Train) {
    throw Error(ErrorCode::DemoSplitViolation, "demonstration " + demo.view.ref().str() + " is from the " +
                                                   std::string(to_string(demo.view.split)) + " split");
  }
}

/// Slot value with trailing periods removed; the template supplies the final '.'.
std::string slot_value(std::string_view text) {
  auto v = trim(text);
  while (!v.empty() && v.back() == '.') v.pop_back();
  return trim(v);
}

}  // namespace

std::string format_clip(std::span<const Utterance> utterances, Dataset dataset) {
  const auto labels = role_labels(dataset);
  std::string out;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (i) out.push_back('\n');
    const auto& u = utterances[i];
    out += "(" + std::to_string(i + 1) + ")" +
           capitalize(u.role == Role::Seeker ? labels.seeker : labels.supporter) + ": " + u.text;
  }
  return out;
}

Demonstration builtin_demonstration(KnowledgeCategory c) {
  Demonstration d;
  d.view.dialogue_id = "builtin-job-interview";
  d.view.dataset = Dataset::ED;
  d.view.split = Split::Train;
  d.view.cut = 3;
  d.view.history = {
      {0, Role::Seeker,
       "Job interviews always make me sweat bullets, makes me uncomfortable in general to be looked at under a "
       "microscope like that."},
      {1, Role::Supporter, "Don't be nervous. Just be prepared."},
      {2, Role::Seeker,
       "I feel like getting prepared and then having a curve ball thrown at you throws you off."},
  };
  d.view.target = {3, Role::Supporter, "Yes but if you stay calm it will be ok."};
  switch (c) {
    case KnowledgeCategory::Cause:
      d.answer =
          "The cause of the listener's last utterance is to reassure and encourage the speaker, emphasizing the "
          "importance of staying calm despite unexpected challenges during a job interview.";
      break;
    case KnowledgeCategory::SubsequentEvent:
      d.answer =
          "The listener will likely keep encouraging the speaker and may share practical tips for handling "
          "unexpected questions calmly during the interview.";
      break;
    case KnowledgeCategory::EmotionState:
      d.answer =
          "The speaker feels anxious and uneasy about job interviews, worried that unexpected questions will throw "
          "them off despite careful preparation.";
      break;
    case KnowledgeCategory::Intention:
      d.answer =
          "The listener intends to calm the speaker's nerves and build their confidence by reassuring them that "
          "staying calm will carry them through.";
      break;
  }
  return d;
}

RenderedPrompt render_acquisition_prompt(const ContextView& view, KnowledgeCategory category,
                                         const Demonstration& demo) {
  check_demo(demo);
  std::vector<Utterance> clip = view.history;
  clip.push_back(view.target);
  RenderedPrompt p;
  p.template_id = TemplateId::Acquire;
  p.category = category;
  p.messages.push_back({MessageRole::System, system_text(category, view.dataset, demo)});
  p.messages.push_back({MessageRole::User, user_text(category, view.dataset, clip)});
  return p;
}

RenderedPrompt render_visionary_prompt(std::span<const Utterance> history, Dataset dataset,
                                       KnowledgeCategory category, const Demonstration& demo) {
  check_demo(demo);
  RenderedPrompt p;
  p.template_id = TemplateId::Visionary;
  p.category = category;
  p.messages.push_back({MessageRole::System, system_text(category, dataset, demo)});
  p.messages.push_back({MessageRole::User, user_text(category, dataset, history)});
  return p;
}

RenderedPrompt render_visionary_prompt(const ContextView& view, KnowledgeCategory category,
                                       const Demonstration& demo) {
  return render_visionary_prompt(view.history, view.dataset, category, demo);
}

std::string slot_lead_in(KnowledgeCategory c, Dataset dataset) {
  const auto labels = role_labels(dataset);
  const std::string s(labels.seeker), l(labels.supporter);
  switch (c) {
    case KnowledgeCategory::Cause:
      return "The underlying cause of the " + l + "'s next utterance (the reason contributing to response) is:";
    case KnowledgeCategory::SubsequentEvent:
      return "The subsequent event about the " + l +
             " that happens or could happen following the last utterance stated by the " + l + ":";
    case KnowledgeCategory::EmotionState:
      return "The possible emotional reaction of the " + s + " in response to the last utterance stated by the " + s +
             " is:";
    case KnowledgeCategory::Intention:
      return "The " + l + "'s intent to post the last utterance according to the emotion reaction of the " + s +
             " is:";
  }
  return {};
}

RenderedPrompt render_generation_prompt(std::span<const Utterance> history, Dataset dataset,
                                        const KnowledgeBundle& knowledge, CategoryMask mask) {
  for (auto c : kAllCategories) {
    if (mask.has(c) && !knowledge.has(c)) {
      throw Error(ErrorCode::MissingKnowledge,
                  knowledge.context_ref.str() + " has no " + std::string(to_string(c)) + " entry");
    }
  }
  const auto labels = role_labels(dataset);
  std::string system = "Assuming that you are a highly empathetic person, there is a dyadic dialogue clip between a " +
                       std::string(labels.supporter) + " and a " + std::string(labels.seeker) +
                       ". You should first identify emotion of the " + std::string(labels.seeker) +
                       " in the dyadic dialogue clip, and then generate a concise, relevant, and empathetic response "
                       "for the following conversation.";
  if (!mask.empty()) {
    system += "\nPlease generate a response that incorporates relevant common-sense knowledge:";
    for (auto c : kAllCategories) {
      if (!mask.has(c)) continue;
      system += "\n\n" + slot_lead_in(c, dataset) + " " + slot_value(knowledge.at(c)) + ".";
    }
  }
  RenderedPrompt p;
  p.template_id = TemplateId::Generate;
  p.messages.push_back({MessageRole::System, std::move(system)});
  for (const auto& u : history) {
    p.messages.push_back({u.role == Role::Seeker ? MessageRole::User : MessageRole::Assistant, u.text});
  }
  return p;
}

RenderedPrompt render_generation_prompt(const ContextView& view, const KnowledgeBundle& knowledge,
                                        CategoryMask mask) {
  return render_generation_prompt(view.history, view.dataset, knowledge, mask);
}

std::size_t count_slot_lead_ins(std::string_view text) {
  std::size_t n = 0;
  for (auto dataset : {Dataset::ED, Dataset::ESConv}) {
    for (auto c : kAllCategories) {
      const auto lead = slot_lead_in(c, dataset);
      for (auto pos = text.find(lead); pos != std::string_view::npos; pos = text.find(lead, pos + lead.size())) ++n;
    }
  }
  return n;
}

}  // namespace sibyl
