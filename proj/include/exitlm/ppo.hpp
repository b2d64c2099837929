#pragma once

#include "exitlm/common.hpp"
#include "exitlm/exitenv.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace exitlm {

// Small tanh MLP stored layer by layer; the last layer is linear.
struct MlpParams {
  std::vector<MatX> w;
  std::vector<VecX> b;
};

// Actor-critic pair with mirrored trunks: the policy maps a hidden state to
// two action logits (continue, exit), the value net to a scalar. Keeping
// the trunks separate means value updates never move the policy.
struct PolicyNetwork {
  int input_dim = 0;
  int hidden_layers = 2;
  int hidden_units = 64;
  MlpParams pi;
  MlpParams vf;
};

PolicyNetwork make_policy(int input_dim, int hidden_layers, int hidden_units,
                          std::uint64_t seed);

Eigen::Vector2d policy_logits(const PolicyNetwork& policy, const VecX& obs);
Eigen::Vector2d policy_probs(const PolicyNetwork& policy, const VecX& obs);
double policy_value(const PolicyNetwork& policy, const VecX& obs);

struct PPOConfig {
  long total_steps = 500000;  // desk preset uses 200000
  int rollout_buffer_size = 4096;
  int minibatch_size = 512;
  int epochs_per_update = 6;
  double learning_rate = 5e-5;
  bool linear_lr_decay = true;
  double discount = 0.99;
  double clip_range = 0.2;
  double gae_lambda = 0.95;
  double entropy_coef = 0.0;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  int hidden_layers = 2;
  int hidden_units = 64;
  std::uint64_t seed = 0;

  // Table-style presets: "large" (buffer 4096/512, 6 epochs, lr 5e-5) and
  // "small" (buffer 256/32, 2 epochs, lr 1e-4).
  static PPOConfig preset(const std::string& name);

  void validate() const {
    EXITLM_CHECK(total_steps > 0 && rollout_buffer_size > 0 && minibatch_size > 0 &&
                     epochs_per_update > 0,
                 "ppo config fields must be positive");
    EXITLM_CHECK(rollout_buffer_size % minibatch_size == 0,
                 "rollout buffer size must be divisible by minibatch size");
    EXITLM_CHECK(learning_rate >= 0 && clip_range > 0, "invalid ppo config");
  }
};

struct RolloutBuffer {
  MatX observations;  // obs_dim x n
  std::vector<int> actions;
  VecX log_probs;
  VecX rewards;  // r_e for exits, r_c for continues; the other is zero
  VecX values;
  std::vector<std::uint8_t> dones;
  VecX advantages;
  VecX returns;
  int size = 0;
};

// Carries the environment cursor between rollouts plus episode bookkeeping.
struct CollectState {
  std::optional<EnvObservation> current;
  double episode_reward_sum = 0.0;
  long episode_steps = 0;
  long episodes_done = 0;
};

struct EpisodeStat {
  long episode_index = 0;
  double mean_step_reward = 0.0;
  double moving_average_50 = 0.0;
};

RolloutBuffer collect_rollout(Env& env, const PolicyNetwork& policy, int n_steps,
                              Rng& rng, CollectState& state,
                              std::vector<EpisodeStat>* episode_log = nullptr);

// GAE over the buffer, bootstrapping from the value of the observation that
// follows it; advantages are then normalized to mean 0, std 1 over the
// whole buffer and returns = advantages + values.
void compute_advantages(RolloutBuffer& buffer, double bootstrap_value,
                        double discount, double gae_lambda);

// Plain discounted returns (reference path for the GAE identity checks).
VecX discounted_returns(const VecX& rewards, const std::vector<std::uint8_t>& dones,
                        double discount, double bootstrap_value);

struct UpdateDiagnostics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

// Adam moments for both networks; kept by the training loop so optimizer
// state survives across updates.
struct PpoAdamState {
  MlpParams m1_pi, m2_pi, m1_vf, m2_vf;
  long t = 0;
};
PpoAdamState make_ppo_adam(const PolicyNetwork& policy);

UpdateDiagnostics ppo_update(PolicyNetwork& policy, const RolloutBuffer& buffer,
                             const PPOConfig& cfg, double learning_rate, Rng& rng,
                             PpoAdamState* opt_state = nullptr);

struct TrainResult {
  PolicyNetwork policy;       // final
  PolicyNetwork best_policy;  // best by moving-average reward
  std::vector<EpisodeStat> reward_curve;
  std::vector<UpdateDiagnostics> updates;
};

TrainResult train_ppo(Env& env, const PPOConfig& cfg);

void write_reward_curve_csv(const std::vector<EpisodeStat>& curve,
                            const std::filesystem::path& path);

// Full agent (policy + value + config) for resuming/exporting.
void save_agent(const PolicyNetwork& policy, const std::filesystem::path& path);
PolicyNetwork load_agent(const std::filesystem::path& path);

// -----------------------------------------------------------------------
// Inference-side artifact: the action network only, no value head.

struct InferencePolicy {
  int input_dim = 0;
  MlpParams pi;

  Eigen::Vector2d logits(const VecX& hidden) const;
  // softmax(logits / temperature)[exit]
  double exit_probability(const VecX& hidden, double temperature) const;
};

void export_policy(const PolicyNetwork& policy, const std::filesystem::path& path);
InferencePolicy load_policy(const std::filesystem::path& path);

// Constant-logit policy, handy as a forced-exit / never-exit stub.
InferencePolicy constant_policy(int input_dim, double continue_logit,
                                double exit_logit);

}  // namespace exitlm
