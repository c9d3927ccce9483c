#include <gtest/gtest.h>

#include "sibyl/csv.hpp"
#include "sibyl/error.hpp"
#include "support.hpp"

using namespace sibyl;
using sibyl::testing::fixture;
using sibyl::testing::make_dialogue;
using sibyl::testing::TempDir;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no sibyl::Error thrown";
  return ErrorCode::Io;
}

}  // namespace

TEST(LoadDialogues, ThreeRecordsInFileOrder) {
  auto ds = load_dialogues(fixture("three_dialogues.jsonl"), Dataset::ED, Split::Train);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[0].id, "ed-a");
  EXPECT_EQ(ds[1].id, "ed-b");
  EXPECT_EQ(ds[2].id, "ed-c");
  EXPECT_EQ(ds[2].utterances.size(), 6u);
  EXPECT_EQ(ds[0].meta.at("emotion"), "excited");
}

TEST(LoadDialogues, RoleViolationNamesTheRecord) {
  try {
    load_dialogues(fixture("role_violation.jsonl"), Dataset::ED, Split::Train);
    FAIL() << "expected ROLE_VIOLATION";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RoleViolation);
    EXPECT_NE(e.detail().find("ed-bad"), std::string::npos) << e.detail();
  }
}

TEST(LoadDialogues, RejectsWrongSplitAndDuplicates) {
  TempDir tmp;
  auto d = make_dialogue("x", {"hi there", "hello"});
  save_dialogues(tmp / "a.jsonl", {d, d});
  EXPECT_EQ(code_of([&] { load_dialogues(tmp / "a.jsonl", Dataset::ED, Split::Train); }), ErrorCode::MalformedRecord);
  save_dialogues(tmp / "b.jsonl", {d});
  EXPECT_EQ(code_of([&] { load_dialogues(tmp / "b.jsonl", Dataset::ED, Split::Test); }), ErrorCode::MalformedRecord);
  EXPECT_EQ(code_of([&] { load_dialogues(tmp / "b.jsonl", Dataset::ESConv, Split::Train); }),
            ErrorCode::MalformedRecord);
  write_file(tmp / "c.jsonl", "\n\n");
  EXPECT_EQ(code_of([&] { load_dialogues(tmp / "c.jsonl", Dataset::ED, Split::Train); }), ErrorCode::EmptyFile);
  write_file(tmp / "d.jsonl", "{not json}\n");
  EXPECT_EQ(code_of([&] { load_dialogues(tmp / "d.jsonl", Dataset::ED, Split::Train); }), ErrorCode::MalformedRecord);
}

TEST(Validate, Invariants) {
  EXPECT_EQ(code_of([] { validate(make_dialogue("one", {"only me"})); }), ErrorCode::MalformedRecord);
  EXPECT_EQ(code_of([] { validate(make_dialogue("blank", {"hi", "   "})); }), ErrorCode::MalformedRecord);
  auto d = make_dialogue("flip", {"a", "b"});
  d.utterances[0].role = Role::Supporter;
  d.utterances[1].role = Role::Seeker;
  EXPECT_EQ(code_of([&] { validate(d); }), ErrorCode::RoleViolation);
}

TEST(ConvertEd, GroupsRowsByConversation) {
  auto r = convert_ed_csv(fixture("ed_raw.csv"), Split::Train);
  ASSERT_TRUE(r.rejected.empty());
  ASSERT_EQ(r.dialogues.size(), 4u);
  std::vector<std::size_t> sizes;
  for (const auto& d : r.dialogues) sizes.push_back(d.utterances.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 4, 2}));
  EXPECT_EQ(r.dialogues[0].utterances[0].text, "I found my old diary from middle school, it was hilarious.");
  EXPECT_EQ(r.dialogues[1].meta.at("emotion"), "afraid");
  EXPECT_EQ(r.dialogues[2].utterances[3].role, Role::Supporter);
}

TEST(ConvertEsconv, MergesTurnsAndDropsLeadingSupporter) {
  auto r = convert_esconv_json(fixture("esconv_raw.json"), Split::Valid, "esc");
  ASSERT_TRUE(r.rejected.empty());
  ASSERT_EQ(r.dialogues.size(), 2u);
  const auto& d = r.dialogues[0];
  EXPECT_EQ(d.id, "esc-0");
  EXPECT_EQ(d.dataset, Dataset::ESConv);
  ASSERT_EQ(d.utterances.size(), 4u);
  EXPECT_EQ(d.utterances[0].text, "Not great. I might lose my job. The company is cutting staff.");
  EXPECT_EQ(d.utterances[3].text, "Six years shows real commitment. Have you started looking at other options?");
  EXPECT_EQ(d.meta.at("problem_type"), "job crisis");
}

TEST(ContextViews, FourTurnGivesCutsOneAndThree) {
  auto views = context_views(make_dialogue("d", {"s0", "l1", "s2", "l3"}));
  ASSERT_EQ(views.size(), 2u);
  EXPECT_EQ(views[0].cut, 1u);
  EXPECT_EQ(views[1].cut, 3u);
  EXPECT_EQ(views[1].target.text, "l3");
}

TEST(ContextViews, TwoTurnMinimal) {
  auto views = context_views(make_dialogue("d", {"s0", "l1"}));
  ASSERT_EQ(views.size(), 1u);
  ASSERT_EQ(views[0].history.size(), 1u);
  EXPECT_EQ(views[0].history[0].text, "s0");
  EXPECT_EQ(views[0].target.text, "l1");
}

TEST(ContextViews, SixTurnFixtureByEnumeration) {
  auto ds = load_dialogues(fixture("three_dialogues.jsonl"), Dataset::ED, Split::Train);
  const auto& d = ds[2];
  std::vector<std::size_t> expected;
  for (std::size_t i = 1; i < d.utterances.size(); ++i) {
    if (d.utterances[i].role == Role::Supporter) expected.push_back(i);
  }
  auto views = context_views(d);
  ASSERT_EQ(views.size(), expected.size());
  ASSERT_EQ(views.size(), 3u);
  for (std::size_t k = 0; k < views.size(); ++k) {
    EXPECT_EQ(views[k].history.size(), expected[k]);
    EXPECT_EQ(views[k].target, d.utterances[expected[k]]);
  }
  EXPECT_EQ(views[0].history.size(), 1u);
  EXPECT_EQ(views[1].history.size(), 3u);
  EXPECT_EQ(views[2].history.size(), 5u);
}

TEST(ContextViews, PropertyPrefixesOfRandomDialogues) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    auto d = sibyl::testing::random_dialogue(rng, "r" + std::to_string(trial), Split::Train, 11);
    const auto views = context_views(d);
    EXPECT_EQ(views.size(), d.utterances.size() / 2);
    for (const auto& v : views) {
      ASSERT_LT(v.cut, d.utterances.size());
      EXPECT_EQ(v.target.role, Role::Supporter);
      EXPECT_EQ(v.history.size(), v.cut);
      for (std::size_t i = 0; i < v.cut; ++i) EXPECT_EQ(v.history[i], d.utterances[i]);
      EXPECT_EQ(v.ref().str(), d.id + "#" + std::to_string(v.cut));
    }
  }
}

TEST(DialogueJson, RoundTripProperty) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto d = sibyl::testing::random_dialogue(rng, "j" + std::to_string(trial), Split::Valid);
    d.meta["emotion"] = "e" + std::to_string(trial);
    EXPECT_EQ(dialogue_from_json(json::parse(dialogue_to_json(d).dump())), d);
  }
}

TEST(SplitPartition, RejectsSharedIds) {
  auto a = make_dialogue("same", {"a", "b"}, Split::Train);
  auto b = make_dialogue("same", {"a", "b"}, Split::Test);
  auto c = make_dialogue("other", {"a", "b"}, Split::Valid);
  EXPECT_NO_THROW(check_split_partition({a}, {c}, {}));
  EXPECT_EQ(code_of([&] { check_split_partition({a}, {c}, {b}); }), ErrorCode::MalformedRecord);
}

TEST(Csv, RoundTripProperty) {
  std::mt19937_64 rng(3);
  const std::string alphabet = "ab ,\"\n\r;x";
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<csv::Row> rows(1 + uniform_below(rng, 4));
    const auto width = 1 + uniform_below(rng, 4);
    for (auto& r : rows) {
      for (std::size_t c = 0; c < width; ++c) {
        std::string f;
        const auto len = uniform_below(rng, 6);
        for (std::size_t k = 0; k < len; ++k) f += alphabet[uniform_below(rng, alphabet.size())];
        r.push_back(f);
      }
    }
    std::string doc;
    for (const auto& r : rows) doc += csv::format_row(r) + "\n";
    EXPECT_EQ(csv::parse(doc), rows) << doc;
  }
}

TEST(Sampling, WithoutReplacementIsDistinctAndSeeded) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = sample_without_replacement(50, 20, seed);
    auto b = sample_without_replacement(50, 20, seed);
    EXPECT_EQ(a, b);
    std::set<std::size_t> s(a.begin(), a.end());
    EXPECT_EQ(s.size(), 20u);
    EXPECT_LT(*s.rbegin(), 50u);
  }
}
