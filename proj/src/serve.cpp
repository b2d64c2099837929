#include "exitlm/serve.hpp"

#include "exitlm/controller.hpp"
#include "exitlm/model_io.hpp"
#include "exitlm/ppo.hpp"
#include "exitlm/tokenizer.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace exitlm {

using nlohmann::json;

struct ServerHandle::Impl {
  ServiceConfig cfg;
  Checkpoint ckpt;
  InferencePolicy policy;
  httplib::Server server;
  std::thread worker;
  int bound_port = 0;
  std::atomic<int> in_flight{0};
  std::atomic<std::uint64_t> request_counter{0};
  std::mutex serial_mutex;
  std::mutex log_mutex;
  std::ofstream log_file;

  void log(const json& j) {
    std::lock_guard<std::mutex> lock(log_mutex);
    if (log_file.is_open()) {
      log_file << j.dump() << "\n";
      log_file.flush();
    } else if (!cfg.log_path.empty()) {
      std::cerr << j.dump() << "\n";
    }
  }
};

namespace {

json error_body(const std::string& message) { return json{{"error", message}}; }

void handle_generate(ServerHandle::Impl& s, const httplib::Request& req,
                     httplib::Response& res) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t request_id = s.request_counter.fetch_add(1);

  if (s.in_flight.fetch_add(1) >= s.cfg.max_concurrent) {
    s.in_flight.fetch_sub(1);
    res.status = 429;
    res.set_content(error_body("too many concurrent requests").dump(),
                    "application/json");
    return;
  }
  struct Release {
    std::atomic<int>& counter;
    ~Release() { counter.fetch_sub(1); }
  } release{s.in_flight};

  std::optional<std::lock_guard<std::mutex>> serial;
  if (s.cfg.deterministic) serial.emplace(s.serial_mutex);

  json body;
  try {
    body = json::parse(req.body);
  } catch (const json::exception&) {
    res.status = 400;
    res.set_content(error_body("malformed JSON").dump(), "application/json");
    return;
  }

  try {
    if (!body.contains("inputs") || !body["inputs"].is_string()) {
      res.status = 400;
      res.set_content(error_body("missing string field 'inputs'").dump(),
                      "application/json");
      return;
    }
    const std::string inputs = body["inputs"];
    if (inputs.empty()) {
      res.status = 400;
      res.set_content(error_body("empty input").dump(), "application/json");
      return;
    }
    int max_new = 15;
    double threshold = s.cfg.default_threshold;
    if (body.contains("parameters")) {
      const auto& p = body["parameters"];
      if (p.contains("max_new_tokens")) {
        if (!p["max_new_tokens"].is_number_integer() ||
            p["max_new_tokens"].get<long>() < 1) {
          res.status = 400;
          res.set_content(error_body("max_new_tokens must be an integer >= 1").dump(),
                          "application/json");
          return;
        }
        max_new = static_cast<int>(
            std::min<long>(p["max_new_tokens"].get<long>(), s.cfg.max_new_cap));
      }
      if (p.contains("exit_threshold")) {
        if (!p["exit_threshold"].is_number()) {
          res.status = 400;
          res.set_content(error_body("exit_threshold must be a number").dump(),
                          "application/json");
          return;
        }
        // Per-request override, clamped into the open unit interval.
        threshold = std::clamp(p["exit_threshold"].get<double>(), 1e-9, 1.0 - 1e-9);
      }
    }

    ByteTokenizer tok;
    TokenSeq context = tok.encode(inputs);
    const int cap = s.ckpt.model.config.max_seq - max_new;
    if (cap < 1) {
      res.status = 400;
      res.set_content(error_body("max_new_tokens exceeds the model context").dump(),
                      "application/json");
      return;
    }
    if (static_cast<int>(context.size()) > cap) {
      context.erase(context.begin(), context.end() - cap);
    }

    ControllerConfig ctrl;
    ctrl.threshold = threshold;
    ctrl.max_new = max_new;
    ctrl.kv_cache = s.cfg.kv_cache;
    GenerationResult gen =
        generate(s.ckpt.model, s.policy, context, s.ckpt.schedule, ctrl);

    const double latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    json meta = {{"per_token_exit_layers", gen.per_token_exit_layer},
                 {"layers_executed_total", gen.layers_executed_total},
                 {"energy_proxy", gen.energy_proxy},
                 {"latency_ms", latency_ms},
                 {"threshold", threshold},
                 {"context_tokens", gen.context_tokens}};
    json out = {{"generated_text", tok.decode(gen.token_ids)}, {"meta", meta}};
    res.status = 200;
    res.set_content(out.dump(), "application/json");
    s.log({{"request_id", request_id},
           {"status", 200},
           {"threshold", threshold},
           {"context_tokens", gen.context_tokens},
           {"generated_tokens", gen.token_ids.size()},
           {"layers_executed_total", gen.layers_executed_total},
           {"latency_ms", latency_ms}});
  } catch (const std::exception& e) {
    const std::string opaque = "req-" + std::to_string(request_id);
    res.status = 500;
    res.set_content(json{{"error", "internal error"}, {"id", opaque}}.dump(),
                    "application/json");
    s.log({{"request_id", request_id}, {"status", 500}, {"detail", e.what()}});
  }
}

void handle_health(ServerHandle::Impl& s, const httplib::Request&,
                   httplib::Response& res) {
  json j = {{"status", "ok"},
            {"model", s.cfg.checkpoint_path},
            {"policy", s.cfg.policy_path},
            {"exit_schedule", s.ckpt.schedule.exit_layers},
            {"n_layers", s.ckpt.model.config.n_layers},
            {"d_model", s.ckpt.model.config.d_model},
            {"default_threshold", s.cfg.default_threshold}};
  res.set_content(j.dump(), "application/json");
}

}  // namespace

ServerHandle::ServerHandle() = default;
ServerHandle::~ServerHandle() { stop(); }
ServerHandle::ServerHandle(ServerHandle&&) noexcept = default;
ServerHandle& ServerHandle::operator=(ServerHandle&&) noexcept = default;

int ServerHandle::port() const { return impl ? impl->bound_port : 0; }

void ServerHandle::stop() {
  if (!impl) return;
  impl->server.stop();
  if (impl->worker.joinable()) impl->worker.join();
}

ServerHandle start_server(const ServiceConfig& cfg) {
  cfg.validate();
  ServerHandle handle;
  handle.impl = std::make_unique<ServerHandle::Impl>();
  auto& s = *handle.impl;
  s.cfg = cfg;
  s.ckpt = load_checkpoint(cfg.checkpoint_path);
  s.policy = load_policy(cfg.policy_path);
  EXITLM_CHECK(s.policy.input_dim == s.ckpt.model.config.d_model,
               "policy and checkpoint disagree on d_model");
  if (!cfg.log_path.empty()) s.log_file.open(cfg.log_path, std::ios::app);

  s.server.set_read_timeout(cfg.request_timeout_seconds, 0);
  s.server.set_write_timeout(cfg.request_timeout_seconds, 0);
  s.server.Post("/generate", [&s](const httplib::Request& req, httplib::Response& res) {
    handle_generate(s, req, res);
  });
  s.server.Get("/health", [&s](const httplib::Request& req, httplib::Response& res) {
    handle_health(s, req, res);
  });

  if (cfg.port == 0) {
    s.bound_port = s.server.bind_to_any_port(cfg.host);
    EXITLM_CHECK(s.bound_port > 0, "could not bind server port");
  } else {
    EXITLM_CHECK(s.server.bind_to_port(cfg.host, cfg.port),
                 "could not bind " + cfg.host + ":" + std::to_string(cfg.port));
    s.bound_port = cfg.port;
  }
  s.worker = std::thread([&s]() { s.server.listen_after_bind(); });
  s.server.wait_until_ready();
  return handle;
}

int run_server(const ServiceConfig& cfg) {
  ServerHandle handle = start_server(cfg);
  std::cerr << "serving on " << cfg.host << ":" << handle.port() << "\n";
  if (handle.impl->worker.joinable()) handle.impl->worker.join();
  return 0;
}

}  // namespace exitlm
