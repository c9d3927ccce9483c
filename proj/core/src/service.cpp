#include "sibyl/service.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <random>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace sibyl {

namespace {

using Clock = std::chrono::steady_clock;

struct Turn {
  Role role;
  std::string text;
  json knowledge;  // supporter turns only
};

struct Session {
  std::mutex mu;
  std::vector<Utterance> history;
  std::vector<Turn> transcript;
  Clock::time_point last_used = Clock::now();
};

ServiceReply error_reply(int status, std::string_view code, const std::string& detail, json extra = json::object()) {
  extra["error"] = code;
  extra["detail"] = detail;
  return {status, extra};
}

json transcript_json(const std::string& id, const Session& s) {
  json turns = json::array();
  for (std::size_t i = 0; i < s.transcript.size(); ++i) {
    const auto& t = s.transcript[i];
    json j{{"index", i}, {"role", t.role == Role::Seeker ? "user" : "assistant"}, {"text", t.text}};
    if (!t.knowledge.is_null()) j["knowledge"] = t.knowledge;
    turns.push_back(std::move(j));
  }
  return {{"session_id", id}, {"transcript", turns}};
}

}  // namespace

struct InferenceService::Impl {
  ServiceConfig cfg;
  Gateway& gateway;
  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  httplib::Server server;
  std::atomic<std::uint64_t> next_id{0};

  Impl(ServiceConfig c, Gateway& gw) : cfg(std::move(c)), gateway(gw) {}

  void purge_locked() {
    const auto now = Clock::now();
    std::erase_if(sessions, [&](const auto& kv) {
      std::unique_lock l(kv.second->mu, std::try_to_lock);
      return l.owns_lock() && now - kv.second->last_used > cfg.session_ttl;
    });
  }

  std::shared_ptr<Session> find(const std::string& id, bool create) {
    std::lock_guard lock(sessions_mu);
    purge_locked();
    auto it = sessions.find(id);
    if (it != sessions.end()) return it->second;
    if (!create) return nullptr;
    auto s = std::make_shared<Session>();
    sessions.emplace(id, s);
    return s;
  }

  std::string fresh_id() {
    std::random_device rd;
    return "s-" + sha256_hex(std::to_string(rd()) + "|" + std::to_string(next_id++)).substr(0, 16);
  }

  ServiceReply turn(const json& req) {
    if (!req.is_object()) return error_reply(400, "bad_request", "body must be a JSON object");
    const auto utterance = req.contains("utterance") && req["utterance"].is_string()
                               ? trim(req["utterance"].get<std::string>())
                               : std::string();
    if (utterance.empty()) return error_reply(400, "bad_request", "utterance must be a non-empty string");
    std::string id;
    if (req.contains("session_id") && !req["session_id"].is_null()) {
      if (!req["session_id"].is_string() || req["session_id"].get<std::string>().empty()) {
        return error_reply(400, "bad_request", "session_id must be a non-empty string");
      }
      id = req["session_id"].get<std::string>();
    } else {
      id = fresh_id();
    }
    CategoryMask mask = CategoryMask::all();
    try {
      if (req.contains("mask") && !req["mask"].is_null()) {
        if (!req["mask"].is_array()) return error_reply(400, "bad_request", "mask must be a list of categories");
        mask = CategoryMask::from_names(req["mask"].get<std::vector<std::string>>());
      }
    } catch (const std::exception& e) {
      return error_reply(400, "bad_request", e.what());
    }
    const bool no_knowledge = req.value("no_knowledge", false);
    const bool debug = req.value("debug", false);
    if (no_knowledge) mask = CategoryMask::none();
    if (mask.empty() && !no_knowledge) {
      return error_reply(400, "empty_mask", "mask needs at least one category unless no_knowledge is set");
    }

    auto session = find(id, true);
    std::lock_guard lock(session->mu);
    session->last_used = Clock::now();
    auto history = session->history;
    history.push_back({history.size(), Role::Seeker, utterance});
    const ContextRef ref{id, history.size()};

    KnowledgeBundle bundle;
    bundle.context_ref = ref;
    bundle.provenance = Provenance::VisionaryModel;
    json prompts{{"visionary", json::object()}};
    for (auto c : kAllCategories) {
      if (!mask.has(c)) continue;
      const auto name = std::string(to_string(c));
      try {
        const auto prompt = render_visionary_prompt(history, cfg.dataset, c, cfg.demonstrations.at(c));
        if (debug) prompts["visionary"][name] = prompt.text();
        const auto raw = gateway.generate(cfg.ensemble.handles.at(c), prompt, cfg.student_decode).front();
        auto text = parse_answer(raw).text;
        if (text.empty()) throw Error(ErrorCode::EmptyCompletion, "empty inference");
        bundle.entries[c] = std::move(text);
      } catch (const Error& e) {
        spdlog::warn("turn {}: {} failed: {}", ref.str(), name, e.what());
        return error_reply(502, to_string(e.code()), e.what(), {{"category", name}});
      }
    }

    std::string response;
    try {
      const auto prompt = render_generation_prompt(history, cfg.dataset, bundle, mask);
      if (debug) prompts["generation"] = prompt.text();
      response = trim(gateway.generate(cfg.responder, prompt, cfg.response_decode).front());
    } catch (const Error& e) {
      spdlog::warn("turn {}: responder failed: {}", ref.str(), e.what());
      return error_reply(502, to_string(e.code()), e.what(), {{"category", "responder"}});
    }

    json knowledge = json::object();
    for (auto c : kAllCategories) {
      const auto name = std::string(to_string(c));
      knowledge[name] = bundle.has(c) ? json(bundle.at(c)) : json(nullptr);
    }
    history.push_back({history.size(), Role::Supporter, response});
    session->history = std::move(history);
    session->transcript.push_back({Role::Seeker, utterance, nullptr});
    session->transcript.push_back({Role::Supporter, response, knowledge});
    session->last_used = Clock::now();

    json body{{"session_id", id},
              {"turn", session->transcript.size() - 1},
              {"knowledge", knowledge},
              {"mask", mask.names()},
              {"response", response}};
    if (debug) body["prompts"] = prompts;
    return {200, body};
  }
};

InferenceService::InferenceService(ServiceConfig cfg, Gateway& gateway)
    : impl_(std::make_unique<Impl>(std::move(cfg), gateway)) {
  impl_->cfg.ensemble.validate();
  check_demonstrations(impl_->cfg.demonstrations);

  auto& srv = impl_->server;
  auto send = [](httplib::Response& res, const ServiceReply& r) {
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body.dump(), "application/json");
  };
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Post("/v1/turn", [this, send](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      send(res, error_reply(400, "bad_request", std::string("invalid JSON: ") + e.what()));
      return;
    }
    send(res, post_turn(body));
  });
  srv.Get(R"(/v1/session/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_session(req.matches[1]));
  });
  srv.Delete(R"(/v1/session/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, delete_session(req.matches[1]));
  });
}

InferenceService::~InferenceService() { stop(); }

ServiceReply InferenceService::post_turn(const json& request) {
  try {
    return impl_->turn(request);
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

ServiceReply InferenceService::get_session(const std::string& id) {
  auto s = impl_->find(id, false);
  if (!s) return error_reply(404, "not_found", "no session '" + id + "'");
  std::lock_guard lock(s->mu);
  return {200, transcript_json(id, *s)};
}

ServiceReply InferenceService::delete_session(const std::string& id) {
  std::lock_guard lock(impl_->sessions_mu);
  if (impl_->sessions.erase(id) == 0) return error_reply(404, "not_found", "no session '" + id + "'");
  return {204, json()};
}

int InferenceService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw Error(ErrorCode::Io, "cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void InferenceService::listen() { impl_->server.listen_after_bind(); }

void InferenceService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace sibyl
