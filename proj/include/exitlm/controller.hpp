#pragma once

#include "exitlm/common.hpp"
#include "exitlm/lite.hpp"
#include "exitlm/metrics.hpp"
#include "exitlm/model.hpp"
#include "exitlm/ppo.hpp"

#include <chrono>
#include <vector>

namespace exitlm {

struct ControllerConfig {
  double threshold = 0.9;
  double softmax_temperature = 1.0;
  int max_new = 15;
  bool kv_cache = false;

  void validate() const {
    EXITLM_CHECK(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0,1)");
    EXITLM_CHECK(softmax_temperature > 0.0, "softmax temperature must be positive");
    EXITLM_CHECK(max_new >= 1, "max_new must be >= 1");
  }
};

struct GenerationResult {
  TokenSeq token_ids;
  std::vector<int> per_token_exit_layer;
  std::vector<int> per_token_consults;
  long layers_executed_total = 0;
  double latency_seconds = 0.0;
  double controller_seconds = 0.0;  // nested timing; the overhead harness
                                    // re-measures consults in isolation
  double energy_proxy = 0.0;
  int context_tokens = 0;
};

// Exit iff the policy's exit probability clears the threshold; equality
// exits.
inline bool decide(const InferencePolicy& policy, const VecX& hidden,
                   const ControllerConfig& cfg) {
  return policy.exit_probability(hidden, cfg.softmax_temperature) >= cfg.threshold;
}

namespace detail {

// Shared greedy generation loop. `choose_exit(hidden, exit_index)` is asked
// at every schedule layer before the final one; returning true decodes the
// token there. With kv_cache off the prefix is recomputed for every token.
template <class Scalar, class ChooseExit>
GenerationResult generate_loop(const TransformerModel<Scalar>& model,
                               const ExitSchedule& sched, const TokenSeq& context,
                               const ControllerConfig& cfg, const EnergyCosts& costs,
                               ChooseExit&& choose_exit, bool count_consults) {
  cfg.validate();
  sched.validate();
  EXITLM_CHECK(!context.empty(), "context must be non-empty");
  EXITLM_CHECK(static_cast<int>(context.size()) + cfg.max_new <= model.config.max_seq,
               "context overflow");

  GenerationResult result;
  result.context_tokens = static_cast<int>(context.size());
  const int n_points = sched.n_exit_points();
  const auto t_start = std::chrono::steady_clock::now();

  KVCache<Scalar> cache = make_cache(model);
  if (cfg.kv_cache) append_tokens(model, cache, context);
  TokenSeq stream = context;

  for (int t = 0; t < cfg.max_new; ++t) {
    if (!cfg.kv_cache) {
      cache = make_cache(model);
      append_tokens(model, cache, stream);
    }
    const int last = cache.n_positions - 1;
    int chosen_layer = sched.final_layer();
    int consults = 0;
    Vec<Scalar> hidden;
    for (int j = 0; j < n_points; ++j) {
      const int layer = sched.exit_layers[j];
      ascend(model, cache, layer);
      hidden = cache.hidden.col(last);
      if (layer == sched.final_layer()) break;  // no decision at the final layer
      bool take_exit;
      if (count_consults) {
        const auto c0 = std::chrono::steady_clock::now();
        take_exit = choose_exit(hidden, j);
        result.controller_seconds +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - c0)
                .count();
        ++consults;
      } else {
        take_exit = choose_exit(hidden, j);
      }
      if (take_exit) {
        chosen_layer = layer;
        break;
      }
    }
    const TokenId next =
        static_cast<TokenId>(argmax_lowest(decode_head(model, hidden)));
    result.token_ids.push_back(next);
    result.per_token_exit_layer.push_back(chosen_layer);
    result.per_token_consults.push_back(consults);
    result.layers_executed_total += chosen_layer;
    stream.push_back(next);
    if (cfg.kv_cache) {
      TokenSeq one{next};
      append_tokens(model, cache, one);
    }
  }

  result.latency_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  result.energy_proxy =
      energy_proxy(result.per_token_exit_layer, result.per_token_consults, costs);
  return result;
}

}  // namespace detail

// Dynamic early-exit generation: consult the exported policy at every exit
// point below the final layer, decode through the shared head at the first
// exit whose probability clears the threshold.
template <class Scalar>
GenerationResult generate(const TransformerModel<Scalar>& model,
                          const InferencePolicy& policy, const TokenSeq& context,
                          const ExitSchedule& sched, const ControllerConfig& cfg,
                          const EnergyCosts& costs = {}) {
  EXITLM_CHECK(policy.input_dim == model.config.d_model,
               "policy/model dimension mismatch");
  return detail::generate_loop(model, sched, context, cfg, costs,
                               [&](const Vec<Scalar>& hidden, int) {
                                 VecX h = hidden.template cast<double>();
                                 return decide(policy, h, cfg);
                               },
                               /*count_consults=*/true);
}

// Decodes every token at one fixed schedule layer (baselines and the
// motivation sweep).
template <class Scalar>
GenerationResult fixed_exit_generate(const TransformerModel<Scalar>& model,
                                     const TokenSeq& context, int exit_layer,
                                     const ExitSchedule& sched,
                                     const ControllerConfig& cfg,
                                     const EnergyCosts& costs = {}) {
  EXITLM_CHECK(sched.contains(exit_layer),
               "exit_layer " + std::to_string(exit_layer) + " is not a schedule layer");
  return detail::generate_loop(model, sched, context, cfg, costs,
                               [&](const Vec<Scalar>&, int j) {
                                 return sched.exit_layers[j] >= exit_layer;
                               },
                               /*count_consults=*/false);
}

}  // namespace exitlm
