#pragma once

#include <chrono>
#include <string>

#include "sibyl/backend.hpp"

namespace sibyl {

/// Chat-completions HTTP client. Base URL and key come from SIBYL_API_BASE and
/// SIBYL_API_KEY unless given explicitly; the model name is the part of the
/// handle after "remote:".
class RemoteBackend : public Backend {
 public:
  RemoteBackend(std::string api_base, std::string api_key,
                std::chrono::seconds timeout = std::chrono::seconds(120));
  static RemoteBackend from_env();

  std::vector<std::string> generate(const ModelHandle& handle, const RenderedPrompt& prompt,
                                    const DecodeParams& params) override;

 private:
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::string api_key_;
  std::chrono::seconds timeout_;
};

}  // namespace sibyl
