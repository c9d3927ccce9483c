#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>

#include "sibyl/responder.hpp"
#include "sibyl/teacher.hpp"
#include "sibyl/visionary.hpp"

namespace sibyl {

struct ServiceConfig {
  Dataset dataset = Dataset::ED;
  VisionaryEnsemble ensemble;
  DemonstrationSet demonstrations;
  ModelHandle responder;
  DecodeParams student_decode;
  DecodeParams response_decode = default_response_decode();
  std::chrono::seconds session_ttl{3600};
};

/// Result of a request handled outside HTTP: status code and JSON body.
struct ServiceReply {
  int status = 200;
  json body;
};

/// Interactive front end: each turn runs the masked visionary students on the
/// session history, then the responder. Sessions live in memory with a TTL.
///
///   POST   /v1/turn          {"session_id","utterance","mask":[...],"debug":bool,"no_knowledge":bool}
///   GET    /v1/session/{id}  transcript
///   DELETE /v1/session/{id}
class InferenceService {
 public:
  InferenceService(ServiceConfig cfg, Gateway& gateway);
  ~InferenceService();
  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  ServiceReply post_turn(const json& request);
  ServiceReply get_session(const std::string& id);
  ServiceReply delete_session(const std::string& id);

  /// Binds the HTTP server; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sibyl
