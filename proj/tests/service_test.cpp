#include <gtest/gtest.h>

#include <httplib.h>

#include <thread>

#include "sibyl/mock_backend.hpp"
#include "sibyl/service.hpp"
#include "support.hpp"

using namespace sibyl;

namespace {

class Failing : public Backend {
 public:
  std::vector<std::string> generate(const ModelHandle&, const RenderedPrompt&, const DecodeParams&) override {
    throw Error(ErrorCode::BackendRejected, "student offline");
  }
};

ServiceConfig config(const std::string& responder = "mock:responder", const std::string& intent_model = "mock:student") {
  ServiceConfig c;
  for (auto k : kAllCategories) {
    c.ensemble.handles[k] = {k == KnowledgeCategory::Intention ? intent_model : "mock:student", ModelKind::Visionary, k};
    c.demonstrations[k] = builtin_demonstration(k);
  }
  c.responder = {responder, ModelKind::Responder, std::nullopt};
  c.response_decode = default_response_decode(13);
  return c;
}

struct Harness {
  Gateway gw;
  std::unique_ptr<InferenceService> svc;

  explicit Harness(ServiceConfig cfg = config()) {
    gw.register_backend("mock", std::make_shared<MockBackend>());
    gw.register_backend("down", std::make_shared<Failing>());
    svc = std::make_unique<InferenceService>(std::move(cfg), gw);
  }
};

json turn(const std::string& sid, const std::string& text, json extra = json::object()) {
  extra["session_id"] = sid;
  extra["utterance"] = text;
  return extra;
}

}  // namespace

TEST(Service, FullMaskReturnsAllKnowledge) {
  Harness h;
  const auto r = h.svc->post_turn(turn("s1", "My sister is moving abroad next month."));
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("session_id"), "s1");
  EXPECT_EQ(r.body.at("turn"), 1);
  EXPECT_EQ(r.body.at("mask").size(), 4u);
  for (auto c : kAllCategories) {
    const auto& k = r.body.at("knowledge").at(std::string(to_string(c)));
    ASSERT_TRUE(k.is_string());
    EXPECT_FALSE(k.get<std::string>().empty());
  }
  EXPECT_FALSE(r.body.at("response").get<std::string>().empty());
  EXPECT_FALSE(r.body.contains("prompts"));
}

TEST(Service, MaskedDebugTurnExposesPrompts) {
  Harness h;
  const auto r = h.svc->post_turn(turn("s2", "I failed my driving test again.",
                                       {{"mask", {"cause", "emotion"}}, {"debug", true}}));
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto& k = r.body.at("knowledge");
  EXPECT_TRUE(k.at("cause").is_string());
  EXPECT_TRUE(k.at("emotion").is_string());
  EXPECT_TRUE(k.at("subsequent").is_null());
  EXPECT_TRUE(k.at("intent").is_null());
  const auto& prompts = r.body.at("prompts");
  EXPECT_EQ(prompts.at("visionary").size(), 2u);
  EXPECT_EQ(count_slot_lead_ins(prompts.at("generation").get<std::string>()), 2u);
  EXPECT_NE(prompts.at("generation").get<std::string>().find(k.at("cause").get<std::string>().substr(0, 20)),
            std::string::npos);
}

TEST(Service, TranscriptMatchesClientReplay) {
  Harness h(config("mock:echo-slot=cause"));
  std::vector<std::pair<std::string, std::string>> replay;
  for (int i = 0; i < 10; ++i) {
    const auto text = "Message number " + std::to_string(i) + " about my week.";
    const auto r = h.svc->post_turn(turn("s3", text));
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body.at("turn"), 2 * i + 1);
    auto cause = r.body.at("knowledge").at("cause").get<std::string>();
    while (!cause.empty() && cause.back() == '.') cause.pop_back();
    EXPECT_EQ(r.body.at("response"), "I understand. " + cause + ".");
    replay.emplace_back("user", text);
    replay.emplace_back("assistant", r.body.at("response").get<std::string>());
  }
  const auto t = h.svc->get_session("s3");
  ASSERT_EQ(t.status, 200);
  const auto& turns = t.body.at("transcript");
  ASSERT_EQ(turns.size(), replay.size());
  for (std::size_t i = 0; i < replay.size(); ++i) {
    EXPECT_EQ(turns[i].at("index"), i);
    EXPECT_EQ(turns[i].at("role"), replay[i].first);
    EXPECT_EQ(turns[i].at("text"), replay[i].second);
    EXPECT_EQ(turns[i].contains("knowledge"), replay[i].first == "assistant");
  }
}

TEST(Service, RequestErrors) {
  Harness h;
  EXPECT_EQ(h.svc->post_turn(json::array()).status, 400);
  EXPECT_EQ(h.svc->post_turn(turn("s", "   ")).status, 400);
  const auto empty = h.svc->post_turn(turn("s", "hi", {{"mask", json::array()}}));
  EXPECT_EQ(empty.status, 400);
  EXPECT_EQ(empty.body.at("error"), "empty_mask");
  EXPECT_EQ(h.svc->post_turn(turn("s", "hi", {{"mask", {"humour"}}})).status, 400);
  EXPECT_EQ(h.svc->post_turn(turn("s", "hi", {{"mask", "cause"}})).status, 400);

  const auto bare = h.svc->post_turn(turn("s", "hi", {{"no_knowledge", true}, {"debug", true}}));
  ASSERT_EQ(bare.status, 200);
  for (const auto& [name, v] : bare.body.at("knowledge").items()) EXPECT_TRUE(v.is_null()) << name;
  EXPECT_EQ(count_slot_lead_ins(bare.body.at("prompts").at("generation").get<std::string>()), 0u);

  const auto fresh = h.svc->post_turn({{"utterance", "new here"}});
  ASSERT_EQ(fresh.status, 200);
  EXPECT_EQ(fresh.body.at("session_id").get<std::string>().rfind("s-", 0), 0u);

  EXPECT_EQ(h.svc->get_session("nope").status, 404);
  EXPECT_EQ(h.svc->delete_session("s").status, 204);
  EXPECT_EQ(h.svc->get_session("s").status, 404);
  EXPECT_EQ(h.svc->delete_session("s").status, 404);
}

TEST(Service, BackendFailureNamesCategory) {
  Harness h(config("mock:responder", "down:student"));
  const auto r = h.svc->post_turn(turn("s4", "Work has been rough."));
  EXPECT_EQ(r.status, 502);
  EXPECT_EQ(r.body.at("category"), "intent");
  EXPECT_EQ(r.body.at("error"), "BACKEND_REJECTED");
  EXPECT_EQ(h.svc->get_session("s4").body.at("transcript").size(), 0u);

  Harness masked(config("mock:responder", "down:student"));
  EXPECT_EQ(masked.svc->post_turn(turn("s5", "Work has been rough.", {{"mask", {"cause"}}})).status, 200);

  Harness responder_down(config("down:responder"));
  const auto rr = responder_down.svc->post_turn(turn("s6", "hello"));
  EXPECT_EQ(rr.status, 502);
  EXPECT_EQ(rr.body.at("category"), "responder");
}

TEST(Service, HttpRoundTrip) {
  Harness h;
  const int port = h.svc->bind("127.0.0.1", 0);
  std::thread server([&] { h.svc->listen(); });
  httplib::Client cli("127.0.0.1", port);
  for (int i = 0; i < 50 && !cli.Get("/v1/session/warmup"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));

  auto res = cli.Post("/v1/turn", turn("web", "I got the job!").dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto body = json::parse(res->body);
  EXPECT_EQ(body.at("session_id"), "web");

  res = cli.Get("/v1/session/web");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body).at("transcript").size(), 2u);

  res = cli.Post("/v1/turn", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body).at("error"), "bad_request");

  res = cli.Options("/v1/turn");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);

  res = cli.Delete("/v1/session/web");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  res = cli.Get("/v1/session/web");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);

  h.svc->stop();
  server.join();
}
