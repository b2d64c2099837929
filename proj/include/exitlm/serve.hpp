#pragma once

#include "exitlm/common.hpp"

#include <memory>
#include <string>

namespace exitlm {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string checkpoint_path;
  std::string policy_path;
  double default_threshold = 0.9;
  int request_timeout_seconds = 60;
  int max_concurrent = 4;
  int max_new_cap = 64;
  bool kv_cache = false;
  bool deterministic = false;  // serialize request handling
  std::string log_path;        // JSONL request log; empty disables

  void validate() const {
    EXITLM_CHECK(default_threshold > 0 && default_threshold < 1,
                 "default threshold must lie in (0,1)");
    EXITLM_CHECK(max_concurrent >= 1 && max_new_cap >= 1 &&
                     request_timeout_seconds >= 1,
                 "invalid service config");
  }
};

// Running server handle; the destructor stops it.
class ServerHandle {
 public:
  ServerHandle();
  ~ServerHandle();
  ServerHandle(ServerHandle&&) noexcept;
  ServerHandle& operator=(ServerHandle&&) noexcept;

  int port() const;
  void stop();

  struct Impl;
  std::unique_ptr<Impl> impl;
};

// Loads the checkpoint and policy artifact, checks they agree on d_model and
// serves POST /generate plus GET /health until stopped.
ServerHandle start_server(const ServiceConfig& cfg);

// Blocking variant for the CLI.
int run_server(const ServiceConfig& cfg);

}  // namespace exitlm
