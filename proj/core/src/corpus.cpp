#include "sibyl/corpus.hpp"

#include <set>
#include <unordered_map>
#include <unordered_set>

#include "sibyl/csv.hpp"
#include "sibyl/error.hpp"

namespace sibyl {

std::string_view to_string(Role r) noexcept { return r == Role::Seeker ? "seeker" : "supporter"; }

std::string_view to_string(Dataset d) noexcept { return d == Dataset::ED ? "ED" : "ESConv"; }

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Role parse_role(std::string_view s) {
  const auto v = to_lower_ascii(s);
  if (v == "seeker" || v == "speaker" || v == "user") return Role::Seeker;
  if (v == "supporter" || v == "listener" || v == "assistant") return Role::Supporter;
  throw Error(ErrorCode::MalformedRecord, "unknown role '" + std::string(s) + "'");
}

Dataset parse_dataset(std::string_view s) {
  const auto v = to_lower_ascii(s);
  if (v == "ed") return Dataset::ED;
  if (v == "esconv") return Dataset::ESConv;
  throw Error(ErrorCode::MalformedRecord, "unknown dataset '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  const auto v = to_lower_ascii(s);
  if (v == "train") return Split::Train;
  if (v == "valid" || v == "validation" || v == "dev") return Split::Valid;
  if (v == "test") return Split::Test;
  throw Error(ErrorCode::MalformedRecord, "unknown split '" + std::string(s) + "'");
}

RoleLabels role_labels(Dataset d) noexcept {
  if (d == Dataset::ED) return {"speaker", "listener"};
  return {"seeker", "supporter"};
}

void validate(const Dialogue& d) {
  if (d.id.empty()) throw Error(ErrorCode::MalformedRecord, "dialogue with empty id");
  if (d.utterances.size() < 2) {
    throw Error(ErrorCode::MalformedRecord, d.id + ": fewer than 2 utterances");
  }
  for (std::size_t i = 0; i < d.utterances.size(); ++i) {
    const auto& u = d.utterances[i];
    if (u.index != i) throw Error(ErrorCode::MalformedRecord, d.id + ": utterance index " + std::to_string(u.index) +
                                                                  " at position " + std::to_string(i));
    if (trim(u.text).empty()) {
      throw Error(ErrorCode::MalformedRecord, d.id + ": empty text at turn " + std::to_string(i));
    }
  }
  if (d.utterances.front().role != Role::Seeker) {
    throw Error(ErrorCode::RoleViolation, d.id + ": first utterance is not from the seeker");
  }
  for (std::size_t i = 1; i < d.utterances.size(); ++i) {
    if (d.utterances[i].role == d.utterances[i - 1].role) {
      throw Error(ErrorCode::RoleViolation, d.id + ": consecutive " + std::string(to_string(d.utterances[i].role)) +
                                                " turns at " + std::to_string(i - 1) + "," + std::to_string(i));
    }
  }
}

Dialogue dialogue_from_json(const json& record, std::size_t line) {
  const std::string where = line ? "line " + std::to_string(line) + ": " : std::string();
  auto malformed = [&](const std::string& why) { return Error(ErrorCode::MalformedRecord, where + why); };
  if (!record.is_object()) throw malformed("record is not an object");
  Dialogue d;
  try {
    if (!record.contains("id") || !record["id"].is_string()) throw malformed("missing string field 'id'");
    d.id = record["id"].get<std::string>();
    if (!record.contains("dataset")) throw malformed("missing field 'dataset'");
    d.dataset = parse_dataset(record["dataset"].get<std::string>());
    if (!record.contains("split")) throw malformed("missing field 'split'");
    d.split = parse_split(record["split"].get<std::string>());
    if (record.contains("meta") && !record["meta"].is_null()) {
      if (!record["meta"].is_object()) throw malformed("'meta' is not an object");
      for (const auto& [k, v] : record["meta"].items()) {
        d.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    }
    if (!record.contains("turns") || !record["turns"].is_array()) throw malformed("missing array field 'turns'");
    std::size_t i = 0;
    for (const auto& t : record["turns"]) {
      if (!t.is_object() || !t.contains("role") || !t.contains("text") || !t["text"].is_string()) {
        throw malformed("turn " + std::to_string(i) + " needs string 'role' and 'text'");
      }
      d.utterances.push_back({i, parse_role(t["role"].get<std::string>()), t["text"].get<std::string>()});
      ++i;
    }
  } catch (const json::exception& e) {
    throw malformed(e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MalformedRecord && !where.empty() && e.detail().rfind(where, 0) != 0) {
      throw malformed(e.detail());
    }
    throw;
  }
  try {
    validate(d);
  } catch (const Error& e) {
    throw Error(e.code(), where + e.detail());
  }
  return d;
}

json dialogue_to_json(const Dialogue& d) {
  json turns = json::array();
  for (const auto& u : d.utterances) turns.push_back({{"role", to_string(u.role)}, {"text", u.text}});
  json meta = json::object();
  for (const auto& [k, v] : d.meta) meta[k] = v;
  return {{"id", d.id}, {"dataset", to_string(d.dataset)}, {"split", to_string(d.split)}, {"meta", meta},
          {"turns", turns}};
}

std::vector<Dialogue> load_dialogues(const std::filesystem::path& path, Dataset dataset, Split split) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::Io, "no such file " + path.string());
  std::vector<Dialogue> out;
  std::unordered_set<std::string> ids;
  for_each_line(path, [&](std::size_t n, const std::string& line) {
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(n) + ": " + e.what());
    }
    auto d = dialogue_from_json(record, n);
    if (d.dataset != dataset) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(n) + ": dataset " +
                                                  std::string(to_string(d.dataset)) + " in a " +
                                                  std::string(to_string(dataset)) + " file");
    }
    if (d.split != split) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(n) + ": split " +
                                                  std::string(to_string(d.split)) + " in a " +
                                                  std::string(to_string(split)) + " file");
    }
    if (!ids.insert(d.id).second) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(n) + ": duplicate id " + d.id);
    }
    out.push_back(std::move(d));
  });
  if (out.empty()) throw Error(ErrorCode::EmptyFile, path.string());
  return out;
}

void save_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  std::vector<json> records;
  records.reserve(dialogues.size());
  for (const auto& d : dialogues) records.push_back(dialogue_to_json(d));
  write_jsonl(path, records);
}

std::vector<ContextView> context_views(const Dialogue& d) {
  std::vector<ContextView> views;
  for (std::size_t i = 1; i < d.utterances.size(); ++i) {
    if (d.utterances[i].role != Role::Supporter) continue;
    ContextView v;
    v.dialogue_id = d.id;
    v.dataset = d.dataset;
    v.split = d.split;
    v.cut = i;
    v.history.assign(d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(i));
    v.target = d.utterances[i];
    views.push_back(std::move(v));
  }
  return views;
}

std::vector<ContextView> context_views(const std::vector<Dialogue>& dialogues) {
  std::vector<ContextView> out;
  for (const auto& d : dialogues) {
    auto v = context_views(d);
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  }
  return out;
}

void check_split_partition(const std::vector<Dialogue>& train, const std::vector<Dialogue>& valid,
                           const std::vector<Dialogue>& test) {
  std::unordered_map<std::string, Split> seen;
  for (const auto* part : {&train, &valid, &test}) {
    for (const auto& d : *part) {
      auto [it, inserted] = seen.emplace(d.id, d.split);
      if (!inserted) {
        throw Error(ErrorCode::MalformedRecord, "dialogue " + d.id + " appears in both " +
                                                    std::string(to_string(it->second)) + " and " +
                                                    std::string(to_string(d.split)));
      }
    }
  }
}

namespace {

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

void finish(ConversionResult& result, Dialogue d) {
  try {
    validate(d);
    result.dialogues.push_back(std::move(d));
  } catch (const Error& e) {
    result.rejected.push_back(d.id + ": " + e.what());
  }
}

}  // namespace

ConversionResult convert_ed_csv(const std::filesystem::path& path, Split split) {
  ConversionResult result;
  std::unordered_map<std::string, std::size_t> by_conv;
  std::vector<Dialogue> groups;
  bool header = true;
  for_each_line(path, [&](std::size_t n, const std::string& line) {
    if (header) {
      header = false;
      if (line.rfind("conv_id", 0) == 0) return;
    }
    // Raw ED escapes commas inside text as "_comma_", so a plain split is exact.
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() < 6) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(n) + ": expected >= 6 columns");
    }
    std::size_t idx = 0;
    try {
      idx = static_cast<std::size_t>(std::stoul(fields[1]));
    } catch (const std::exception&) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(n) + ": bad utterance_idx");
    }
    auto [it, inserted] = by_conv.emplace(fields[0], groups.size());
    if (inserted) {
      Dialogue d;
      d.id = fields[0];
      d.dataset = Dataset::ED;
      d.split = split;
      d.meta["emotion"] = fields[2];
      d.meta["prompt"] = replace_all(fields[3], "_comma_", ",");
      groups.push_back(std::move(d));
    }
    auto& d = groups[it->second];
    d.utterances.push_back({d.utterances.size(), idx % 2 == 1 ? Role::Seeker : Role::Supporter,
                            trim(replace_all(fields[5], "_comma_", ","))});
  });
  for (auto& d : groups) finish(result, std::move(d));
  return result;
}

ConversionResult convert_esconv_json(const std::filesystem::path& path, Split split, std::string_view id_prefix) {
  ConversionResult result;
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::MalformedRecord, path.string() + ": expected a JSON array");
  for (std::size_t k = 0; k < doc.size(); ++k) {
    const auto& conv = doc[k];
    Dialogue d;
    d.id = std::string(id_prefix) + "-" + std::to_string(k);
    d.dataset = Dataset::ESConv;
    d.split = split;
    for (const char* key : {"emotion_type", "problem_type", "situation", "experience_type"}) {
      if (conv.contains(key) && conv[key].is_string()) d.meta[key] = conv[key].get<std::string>();
    }
    if (!conv.contains("dialog") || !conv["dialog"].is_array()) {
      result.rejected.push_back(d.id + ": missing 'dialog' array");
      continue;
    }
    try {
      for (const auto& turn : conv["dialog"]) {
        const auto role = parse_role(turn.at("speaker").get<std::string>());
        const auto text = trim(turn.at("content").get<std::string>());
        if (text.empty()) continue;
        if (d.utterances.empty() && role == Role::Supporter) continue;
        if (!d.utterances.empty() && d.utterances.back().role == role) {
          d.utterances.back().text += " " + text;
        } else {
          d.utterances.push_back({d.utterances.size(), role, text});
        }
      }
    } catch (const std::exception& e) {
      result.rejected.push_back(d.id + ": " + e.what());
      continue;
    }
    finish(result, std::move(d));
  }
  return result;
}

}  // namespace sibyl
