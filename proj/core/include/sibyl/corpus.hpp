#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sibyl/util.hpp"

namespace sibyl {

enum class Role { Seeker, Supporter };
enum class Dataset { ED, ESConv };
enum class Split { Train, Valid, Test };

std::string_view to_string(Role r) noexcept;
std::string_view to_string(Dataset d) noexcept;
std::string_view to_string(Split s) noexcept;
Role parse_role(std::string_view s);
Dataset parse_dataset(std::string_view s);
Split parse_split(std::string_view s);

/// Dataset-appropriate surface words for the two sides of a conversation.
/// ED uses speaker/listener, ESConv seeker/supporter.
struct RoleLabels {
  std::string_view seeker;
  std::string_view supporter;
};
RoleLabels role_labels(Dataset d) noexcept;

struct Utterance {
  std::size_t index = 0;
  Role role = Role::Seeker;
  std::string text;

  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::string id;
  Dataset dataset = Dataset::ED;
  Split split = Split::Train;
  std::vector<Utterance> utterances;
  std::map<std::string, std::string> meta;

  bool operator==(const Dialogue&) const = default;
};

/// (dialogue_id, cut) pair identifying one context view.
struct ContextRef {
  std::string dialogue_id;
  std::size_t cut = 0;

  auto operator<=>(const ContextRef&) const = default;
  std::string str() const { return dialogue_id + "#" + std::to_string(cut); }
};

/// History C = u_0..u_{cut-1} and target Y = u_cut of one dialogue.
struct ContextView {
  std::string dialogue_id;
  Dataset dataset = Dataset::ED;
  Split split = Split::Train;
  std::size_t cut = 0;
  std::vector<Utterance> history;
  Utterance target;

  ContextRef ref() const { return {dialogue_id, cut}; }
  bool operator==(const ContextView&) const = default;
};

/// Throws Error(RoleViolation | MalformedRecord) naming the dialogue.
void validate(const Dialogue& d);

/// Parses one ingestion record; `line` is used only for error messages.
Dialogue dialogue_from_json(const json& record, std::size_t line = 0);
json dialogue_to_json(const Dialogue& d);

/// Reads a line-delimited ingestion file. Every record must match `dataset`
/// and `split`; ids must be unique within the file.
std::vector<Dialogue> load_dialogues(const std::filesystem::path& path, Dataset dataset, Split split);
void save_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);

/// One view per supporter utterance at index >= 1, ordered by cut.
std::vector<ContextView> context_views(const Dialogue& d);
std::vector<ContextView> context_views(const std::vector<Dialogue>& dialogues);

/// Throws MalformedRecord if any id appears in more than one split.
void check_split_partition(const std::vector<Dialogue>& train, const std::vector<Dialogue>& valid,
                           const std::vector<Dialogue>& test);

// Converters from the public raw layouts. Dialogues that fail validation are
// reported in `rejected` rather than dropped silently.

struct ConversionResult {
  std::vector<Dialogue> dialogues;
  std::vector<std::string> rejected;  // "<id>: <reason>"
};

/// EmpatheticDialogues CSV (conv_id,utterance_idx,context,prompt,speaker_idx,utterance,...).
/// Rows are grouped by conv_id in file order; utterance_idx parity gives the role;
/// "_comma_" is restored to ",".
ConversionResult convert_ed_csv(const std::filesystem::path& path, Split split);

/// ESConv JSON array of {"emotion_type","problem_type","dialog":[{"speaker","content"}]}.
/// Consecutive same-role turns are merged with a single space; leading supporter
/// turns are dropped so the dialogue opens with the seeker.
ConversionResult convert_esconv_json(const std::filesystem::path& path, Split split,
                                          std::string_view id_prefix = "esconv");

}  // namespace sibyl
