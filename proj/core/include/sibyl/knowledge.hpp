#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sibyl/corpus.hpp"

namespace sibyl {

enum class KnowledgeCategory : std::uint8_t { Cause, SubsequentEvent, EmotionState, Intention };

/// Slot order of the generation prompt: cause, subsequent, emotion, intent.
inline constexpr std::array<KnowledgeCategory, 4> kAllCategories = {
    KnowledgeCategory::Cause, KnowledgeCategory::SubsequentEvent, KnowledgeCategory::EmotionState,
    KnowledgeCategory::Intention};

/// Stable serialization names: "cause", "subsequent", "emotion", "intent".
std::string_view to_string(KnowledgeCategory c) noexcept;
KnowledgeCategory parse_category(std::string_view s);

/// Set of categories included in a generation prompt.
class CategoryMask {
 public:
  constexpr CategoryMask() = default;
  static constexpr CategoryMask all() { return CategoryMask(0b1111); }
  static constexpr CategoryMask none() { return CategoryMask(0); }
  static CategoryMask all_except(KnowledgeCategory c) { return all().without(c); }

  /// Accepts "all", "none", "-cause", "-subs", "-emo", "-intent" (and the long
  /// category names after '-'), or a comma list of category names.
  static CategoryMask parse(std::string_view spec);
  static CategoryMask from_names(const std::vector<std::string>& names);

  constexpr bool has(KnowledgeCategory c) const { return bits_ & bit(c); }
  CategoryMask with(KnowledgeCategory c) const { return CategoryMask(bits_ | bit(c)); }
  CategoryMask without(KnowledgeCategory c) const { return CategoryMask(bits_ & ~bit(c)); }
  std::size_t size() const;
  bool empty() const { return bits_ == 0; }
  std::vector<std::string> names() const;
  /// "all", "none", "-<name>" for single removals, otherwise "+"-joined names.
  std::string label() const;

  bool operator==(const CategoryMask&) const = default;

 private:
  constexpr explicit CategoryMask(std::uint8_t bits) : bits_(bits) {}
  static constexpr std::uint8_t bit(KnowledgeCategory c) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(c));
  }
  std::uint8_t bits_ = 0;
};

enum class Provenance { TeacherOracle, VisionaryModel };
std::string_view to_string(Provenance p) noexcept;
Provenance parse_provenance(std::string_view s);

struct KnowledgeBundle {
  ContextRef context_ref;
  Provenance provenance = Provenance::TeacherOracle;
  std::map<KnowledgeCategory, std::string> entries;
  /// Per-category quality flags ("low_confidence", "over_length", "parse_failure").
  std::map<KnowledgeCategory, std::vector<std::string>> flags;

  bool has(KnowledgeCategory c) const { return entries.contains(c); }
  const std::string& at(KnowledgeCategory c) const;
  bool complete() const { return entries.size() == kAllCategories.size(); }
  /// Whitespace-token count of each present entry.
  std::map<KnowledgeCategory, std::size_t> word_counts() const;

  bool operator==(const KnowledgeBundle&) const = default;
};

json bundle_to_json(const KnowledgeBundle& b);
KnowledgeBundle bundle_from_json(const json& j);

/// Line-delimited bundle store, keyed by context ref.
class KnowledgeStore {
 public:
  void put(KnowledgeBundle bundle);
  const KnowledgeBundle* find(const ContextRef& ref) const;
  bool contains(const ContextRef& ref) const { return find(ref) != nullptr; }
  std::size_t size() const { return bundles_.size(); }
  const std::map<ContextRef, KnowledgeBundle>& bundles() const { return bundles_; }

  static KnowledgeStore load(const std::filesystem::path& path);
  /// Writes records in context-ref order.
  void save(const std::filesystem::path& path) const;
  /// Appends one record without rewriting the file.
  static void append(const std::filesystem::path& path, const KnowledgeBundle& bundle);

 private:
  std::map<ContextRef, KnowledgeBundle> bundles_;
};

// ---------------------------------------------------------------------------
// Prompts

enum class TemplateId { Acquire, Visionary, Generate, Judge };
enum class MessageRole { System, User, Assistant };
std::string_view to_string(TemplateId t) noexcept;
std::string_view to_string(MessageRole r) noexcept;
TemplateId parse_template_id(std::string_view s);
MessageRole parse_message_role(std::string_view s);

struct Message {
  MessageRole role = MessageRole::User;
  std::string text;
  bool operator==(const Message&) const = default;
};

struct RenderedPrompt {
  TemplateId template_id = TemplateId::Generate;
  std::vector<Message> messages;
  std::optional<KnowledgeCategory> category;

  /// Canonical text form used for golden files and hashing:
  /// "[SYSTEM]\n<text>\n\n[USER]\n<text>..." with no trailing newline.
  std::string text() const;
  std::string hash() const;
  bool operator==(const RenderedPrompt&) const = default;
};

json prompt_to_json(const RenderedPrompt& p);
RenderedPrompt prompt_from_json(const json& j);

/// One worked example shown to the model inside the SYSTEM message.
struct Demonstration {
  ContextView view;
  std::string answer;
};

/// The job-interview demonstration (ED, TRAIN) with a hand-written answer per
/// category. Used to bootstrap answers for demonstrations drawn from a corpus.
Demonstration builtin_demonstration(KnowledgeCategory c);

/// Clip formatting shared by all templates: "(1)Speaker: ...\n(2)Listener: ...".
std::string format_clip(std::span<const Utterance> utterances, Dataset dataset);

/// Teacher prompt: the USER clip includes the target response.
/// Throws DemoSplitViolation if the demonstration is not from TRAIN.
RenderedPrompt render_acquisition_prompt(const ContextView& view, KnowledgeCategory category,
                                         const Demonstration& demo);

/// Student prompt: identical to the acquisition prompt with the target removed.
RenderedPrompt render_visionary_prompt(std::span<const Utterance> history, Dataset dataset,
                                       KnowledgeCategory category, const Demonstration& demo);
RenderedPrompt render_visionary_prompt(const ContextView& view, KnowledgeCategory category,
                                       const Demonstration& demo);

/// Lead-in sentence of a generation-prompt knowledge slot, e.g.
/// "The possible emotional reaction of the speaker in response to ...".
std::string slot_lead_in(KnowledgeCategory c, Dataset dataset);

/// Responder prompt: SYSTEM instruction with the masked knowledge slots, then
/// the history as alternating USER/ASSISTANT messages.
/// Throws MissingKnowledge if a masked-in category has no entry.
RenderedPrompt render_generation_prompt(std::span<const Utterance> history, Dataset dataset,
                                        const KnowledgeBundle& knowledge, CategoryMask mask);
RenderedPrompt render_generation_prompt(const ContextView& view, const KnowledgeBundle& knowledge,
                                        CategoryMask mask);

/// Number of generation slot lead-ins (either dataset's wording) in a text.
std::size_t count_slot_lead_ins(std::string_view text);

}  // namespace sibyl
