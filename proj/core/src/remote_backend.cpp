#include "sibyl/remote_backend.hpp"

#include <httplib.h>

#include <cstdlib>

namespace sibyl {

RemoteBackend::RemoteBackend(std::string api_base, std::string api_key, std::chrono::seconds timeout)
    : api_key_(std::move(api_key)), timeout_(timeout) {
  while (!api_base.empty() && api_base.back() == '/') api_base.pop_back();
  const auto scheme = api_base.find("://");
  if (scheme == std::string::npos) throw Error(ErrorCode::ConfigInvalid, "api base '" + api_base + "' has no scheme");
  const auto path = api_base.find('/', scheme + 3);
  scheme_host_port_ = api_base.substr(0, path);
  path_prefix_ = path == std::string::npos ? std::string() : api_base.substr(path);
}

RemoteBackend RemoteBackend::from_env() {
  const char* base = std::getenv("SIBYL_API_BASE");
  const char* key = std::getenv("SIBYL_API_KEY");
  if (!base || !*base) throw Error(ErrorCode::ConfigInvalid, "SIBYL_API_BASE is not set");
  return RemoteBackend(base, key ? key : "");
}

std::vector<std::string> RemoteBackend::generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                                 const DecodeParams& params) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  std::size_t prompt_chars = 0;
  for (const auto& m : prompt.messages) prompt_chars += m.text.size();

  std::vector<std::string> out;
  // Some servers ignore "n"; keep asking for the remainder.
  for (int round = 0; out.size() < static_cast<std::size_t>(params.n_samples) && round < params.n_samples; ++round) {
    DecodeParams p = params;
    p.n_samples = params.n_samples - static_cast<int>(out.size());
    json body = chat_request(handle, prompt, p);
    body["model"] = handle.model_name();
    if (!p.seed) body.erase("seed");

    auto res = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
      throw Error(ErrorCode::BackendUnreachable, scheme_host_port_ + ": " + httplib::to_string(res.error()));
    }
    if (res->status == 429) throw Error(ErrorCode::RateLimited, "HTTP 429 from " + scheme_host_port_);
    if (res->status >= 500) {
      throw Error(ErrorCode::BackendUnreachable, "HTTP " + std::to_string(res->status) + " from " + scheme_host_port_);
    }
    if (res->status != 200) {
      const auto lower = to_lower_ascii(res->body);
      if (contains(lower, "context_length") || contains(lower, "maximum context") || res->status == 413) {
        throw Error(ErrorCode::ContextOverflow, "prompt of " + std::to_string(prompt_chars) + " characters rejected: " +
                                                    res->body.substr(0, 200));
      }
      throw Error(ErrorCode::BackendRejected, "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
      const auto reply = json::parse(res->body);
      for (const auto& choice : reply.at("choices")) {
        const auto& content = choice.at("message").at("content");
        out.push_back(content.is_string() ? content.get<std::string>() : std::string());
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::BackendRejected, std::string("malformed completion body: ") + e.what());
    }
  }
  if (out.size() > static_cast<std::size_t>(params.n_samples)) out.resize(static_cast<std::size_t>(params.n_samples));
  return out;
}

}  // namespace sibyl
