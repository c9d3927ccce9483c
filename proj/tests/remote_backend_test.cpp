#include <gtest/gtest.h>

#include <httplib.h>

#include <mutex>
#include <thread>

#include "sibyl/remote_backend.hpp"
#include "support.hpp"

using namespace sibyl;

namespace {

/// Chat-completions stand-in that answers with one choice per request.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      bodies.push_back(json::parse(req.body));
      auth.push_back(req.get_header_value("Authorization"));
      if (!scripted_status.empty()) {
        res.status = scripted_status.front();
        res.set_content(scripted_body, "application/json");
        scripted_status.erase(scripted_status.begin());
        return;
      }
      json choice = {{"message", {{"role", "assistant"}, {"content", "reply " + std::to_string(bodies.size())}}}};
      res.set_content(json{{"choices", json::array({choice})}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string base() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  std::mutex mu_;
  std::vector<json> bodies;
  std::vector<std::string> auth;
  std::vector<int> scripted_status;
  std::string scripted_body;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

RenderedPrompt prompt() {
  RenderedPrompt p;
  p.messages = {{MessageRole::System, "sys"}, {MessageRole::User, "hello"}};
  return p;
}

const ModelHandle kJudge{"remote:gpt-4o", ModelKind::Judge, std::nullopt};

ErrorCode failure(RemoteBackend& be, DecodeParams d = {}) {
  try {
    be.generate(kJudge, prompt(), d);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected failure";
  return ErrorCode::Io;
}

}  // namespace

TEST(RemoteBackend, SendsChatRequestAndCollectsSamples) {
  FakeServer srv;
  RemoteBackend be(srv.base() + "/", "secret", std::chrono::seconds(5));
  DecodeParams d;
  d.n_samples = 3;
  d.temperature = 1.0;
  d.seed = 9;
  const auto out = be.generate(kJudge, prompt(), d);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], "reply 1");
  EXPECT_EQ(out[2], "reply 3");
  ASSERT_EQ(srv.bodies.size(), 3u);
  EXPECT_EQ(srv.bodies[0].at("model"), "gpt-4o");
  EXPECT_EQ(srv.bodies[0].at("n"), 3);
  EXPECT_EQ(srv.bodies[1].at("n"), 2);
  EXPECT_EQ(srv.bodies[0].at("seed"), 9);
  EXPECT_EQ(srv.bodies[0].at("messages")[0].at("role"), "system");
  EXPECT_EQ(srv.bodies[0].at("messages")[1].at("content"), "hello");
  EXPECT_EQ(srv.auth[0], "Bearer secret");
}

TEST(RemoteBackend, MapsHttpFailures) {
  FakeServer srv;
  RemoteBackend be(srv.base(), "", std::chrono::seconds(5));
  srv.scripted_status = {429};
  EXPECT_EQ(failure(be), ErrorCode::RateLimited);
  srv.scripted_status = {503};
  EXPECT_EQ(failure(be), ErrorCode::BackendUnreachable);
  srv.scripted_status = {400};
  srv.scripted_body = R"({"error":{"code":"context_length_exceeded"}})";
  EXPECT_EQ(failure(be), ErrorCode::ContextOverflow);
  srv.scripted_status = {401};
  srv.scripted_body = R"({"error":"bad key"})";
  EXPECT_EQ(failure(be), ErrorCode::BackendRejected);
  srv.scripted_status = {200};
  srv.scripted_body = "not json";
  EXPECT_EQ(failure(be), ErrorCode::BackendRejected);
  EXPECT_TRUE(srv.auth[0].empty());
}

TEST(RemoteBackend, GatewayRetriesRateLimits) {
  FakeServer srv;
  srv.scripted_status = {429, 429};
  Gateway gw;
  gw.set_sleeper([](std::chrono::milliseconds) {});
  gw.register_backend("remote", std::make_shared<RemoteBackend>(srv.base(), "", std::chrono::seconds(5)));
  EXPECT_EQ(gw.generate(kJudge, prompt(), {}).front(), "reply 3");
  EXPECT_EQ(gw.backend_calls(), 3u);
}

TEST(RemoteBackend, UnreachableHost) {
  RemoteBackend be("http://127.0.0.1:1", "", std::chrono::seconds(2));
  EXPECT_EQ(failure(be), ErrorCode::BackendUnreachable);
}

TEST(RemoteBackend, NoFineTuning) {
  RemoteBackend be("http://127.0.0.1:1", "");
  std::vector<SftExample> ex(1);
  try {
    be.fine_tune({"remote:m", ModelKind::Responder, std::nullopt}, ex, {}, ex);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BackendNoTrain);
  }
  EXPECT_THROW(RemoteBackend("localhost:80", ""), Error);
}
