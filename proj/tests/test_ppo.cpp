#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitlm/ppo.hpp"
#include "test_oracles.hpp"
#include "test_support.hpp"

using namespace exitlm;
namespace oracle = exitlm::testing;
using exitlm::testing::TempDir;

namespace {

SyntheticExitEnv make_env(std::uint64_t seed) {
  SyntheticEnvConfig cfg;
  cfg.obs_dim = 16;
  cfg.n_exit_points = 4;
  cfg.tokens_per_episode = 6;
  RewardConfig rewards;
  return SyntheticExitEnv(cfg, rewards, seed);
}

bool mlp_equal(const MlpParams& a, const MlpParams& b) {
  for (std::size_t i = 0; i < a.w.size(); ++i) {
    if (a.w[i] != b.w[i] || a.b[i] != b.b[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("policy probabilities are a valid distribution") {
  PolicyNetwork p = make_policy(16, 2, 32, 5);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    VecX obs(16);
    for (int k = 0; k < 16; ++k) obs[k] = normal_real(rng, 0, 1);
    Eigen::Vector2d probs = policy_probs(p, obs);
    CHECK(probs[0] >= 0);
    CHECK(probs[1] >= 0);
    CHECK(std::abs(probs.sum() - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(policy_probs(p, VecX::Zero(7)), Error);
}

TEST_CASE("collect_rollout fills the buffer and is seed-deterministic") {
  auto env1 = make_env(3);
  auto env2 = make_env(3);
  PolicyNetwork p = make_policy(env1.observation_dim(), 2, 32, 4);
  Rng r1(9), r2(9);
  CollectState s1, s2;
  RolloutBuffer b1 = collect_rollout(env1, p, 256, r1, s1);
  RolloutBuffer b2 = collect_rollout(env2, p, 256, r2, s2);
  CHECK(b1.size == 256);
  CHECK(b1.observations.cols() == 256);
  CHECK(b1.actions == b2.actions);
  CHECK(b1.rewards == b2.rewards);
  CHECK(b1.observations == b2.observations);

  double exit_fraction = 0;
  for (int a : b1.actions) exit_fraction += a;
  exit_fraction /= b1.actions.size();
  CHECK(exit_fraction >= 0.0);
  CHECK(exit_fraction <= 1.0);
}

TEST_CASE("discounted returns match the backward-recursion oracle exactly") {
  VecX rewards(10);
  rewards << 1, -0.5, 0.25, 1, 0, -1, 0.75, 0.5, -0.25, 1;
  std::vector<std::uint8_t> dones = {0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  const double g = 0.97, bootstrap = 0.42;
  VecX got = discounted_returns(rewards, dones, g, bootstrap);
  std::vector<double> rv(rewards.data(), rewards.data() + 10);
  std::vector<bool> dv(dones.begin(), dones.end());
  auto want = oracle::oracle_discounted_returns(rv, dv, g, bootstrap);
  for (int t = 0; t < 10; ++t) CHECK(got[t] == want[t]);
}

TEST_CASE("GAE with lambda=1 equals Monte-Carlo advantage") {
  Rng rng(8);
  RolloutBuffer buf;
  const int n = 64;
  buf.size = n;
  buf.observations.setZero(4, n);
  buf.actions.assign(n, 0);
  buf.log_probs = VecX::Zero(n);
  buf.rewards.resize(n);
  buf.values.resize(n);
  buf.dones.assign(n, 0);
  for (int t = 0; t < n; ++t) {
    buf.rewards[t] = normal_real(rng, 0, 1);
    buf.values[t] = normal_real(rng, 0, 1);
    buf.dones[t] = uniform_real(rng, 0, 1) < 0.15;
  }
  const double g = 0.99, bootstrap = 0.3;
  compute_advantages(buf, bootstrap, g, 1.0);
  // returns = raw advantages + values = discounted Monte-Carlo returns.
  VecX mc = discounted_returns(buf.rewards, buf.dones, g, bootstrap);
  for (int t = 0; t < n; ++t) {
    CHECK(buf.returns[t] == doctest::Approx(mc[t]).epsilon(1e-9));
  }
}

TEST_CASE("zero advantages leave the policy untouched") {
  PolicyNetwork p = make_policy(8, 2, 16, 1);
  PolicyNetwork before = p;
  PPOConfig cfg;
  cfg.rollout_buffer_size = 64;
  cfg.minibatch_size = 16;
  cfg.epochs_per_update = 3;
  cfg.entropy_coef = 0.0;

  RolloutBuffer buf;
  buf.size = 64;
  buf.observations.setRandom(8, 64);
  buf.actions.assign(64, 0);
  for (int i = 0; i < 64; ++i) buf.actions[i] = i % 2;
  buf.log_probs.setZero(64);
  for (int i = 0; i < 64; ++i) {
    buf.log_probs[i] = std::log(policy_probs(p, buf.observations.col(i))[buf.actions[i]]);
  }
  buf.rewards.setZero(64);
  buf.values.setZero(64);
  buf.dones.assign(64, 0);
  compute_advantages(buf, 0.0, 0.99, 0.95);
  CHECK(buf.advantages.cwiseAbs().maxCoeff() == 0.0);

  Rng rng(3);
  UpdateDiagnostics diag = ppo_update(p, buf, cfg, 1e-3, rng);
  CHECK(mlp_equal(p.pi, before.pi));       // no policy-gradient signal
  CHECK_FALSE(mlp_equal(p.vf, before.vf)); // value regression still learns
  CHECK(diag.clip_fraction >= 0.0);
  CHECK(diag.clip_fraction <= 1.0);
}

TEST_CASE("learning rate zero freezes both networks") {
  auto env = make_env(12);
  PPOConfig cfg;
  cfg.total_steps = 512;
  cfg.rollout_buffer_size = 256;
  cfg.minibatch_size = 64;
  cfg.epochs_per_update = 2;
  cfg.learning_rate = 0.0;
  cfg.hidden_units = 16;
  cfg.seed = 5;
  TrainResult result = train_ppo(env, cfg);
  PolicyNetwork fresh = make_policy(env.observation_dim(), cfg.hidden_layers,
                                    cfg.hidden_units, cfg.seed);
  CHECK(mlp_equal(result.policy.pi, fresh.pi));
  CHECK(mlp_equal(result.policy.vf, fresh.vf));
  CHECK(!result.reward_curve.empty());
}

TEST_CASE("short training run keeps probabilities valid and logs episodes") {
  auto env = make_env(7);
  PPOConfig cfg = PPOConfig::preset("small");
  cfg.total_steps = 1024;
  cfg.seed = 11;
  TrainResult result = train_ppo(env, cfg);
  CHECK(result.updates.size() == 4);
  for (const auto& d : result.updates) {
    CHECK(std::isfinite(d.policy_loss));
    CHECK(d.clip_fraction >= 0.0);
    CHECK(d.clip_fraction <= 1.0);
  }
  REQUIRE(!result.reward_curve.empty());
  for (std::size_t i = 0; i < result.reward_curve.size(); ++i) {
    CHECK(result.reward_curve[i].episode_index == static_cast<long>(i));
    CHECK(std::isfinite(result.reward_curve[i].moving_average_50));
  }
  Rng rng(1);
  VecX obs(env.observation_dim());
  for (int k = 0; k < obs.size(); ++k) obs[k] = normal_real(rng, 0, 1);
  Eigen::Vector2d probs = policy_probs(result.policy, obs);
  CHECK(std::abs(probs.sum() - 1.0) < 1e-6);

  TempDir dir("curve");
  write_reward_curve_csv(result.reward_curve, dir.path() / "curve.csv");
  std::ifstream in(dir.path() / "curve.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "episode_index,mean_step_reward,moving_average_50");
}

TEST_CASE("policy export round trip") {
  TempDir dir("policy");
  PolicyNetwork p = make_policy(24, 2, 64, 19);
  const auto path = dir.path() / "policy.json";
  export_policy(p, path);
  InferencePolicy loaded = load_policy(path);
  CHECK(loaded.input_dim == 24);

  Rng rng(2);
  double max_diff = 0;
  for (int i = 0; i < 100; ++i) {
    VecX obs(24);
    for (int k = 0; k < 24; ++k) obs[k] = normal_real(rng, 0, 2);
    Eigen::Vector2d orig = policy_probs(p, obs);
    Eigen::Vector2d l = loaded.logits(obs);
    const double mx = l.maxCoeff();
    Eigen::Vector2d got = ((l.array() - mx).exp() / (l.array() - mx).exp().sum());
    max_diff = std::max(max_diff, (orig - got).cwiseAbs().maxCoeff());
  }
  CHECK(max_diff < 1e-6);

  // The inference artifact carries no value head.
  std::ifstream in(path);
  std::string body((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  CHECK(body.find("\"vf\"") == std::string::npos);
  CHECK(body.find("\"input_dim\":24") != std::string::npos);
}

TEST_CASE("agent save/load round trip and presets") {
  TempDir dir("agent");
  PolicyNetwork p = make_policy(12, 2, 32, 3);
  save_agent(p, dir.path() / "agent.json");
  PolicyNetwork loaded = load_agent(dir.path() / "agent.json");
  CHECK(mlp_equal(p.pi, loaded.pi));
  CHECK(mlp_equal(p.vf, loaded.vf));

  PPOConfig large = PPOConfig::preset("large");
  CHECK(large.rollout_buffer_size == 4096);
  CHECK(large.minibatch_size == 512);
  CHECK(large.epochs_per_update == 6);
  PPOConfig small = PPOConfig::preset("small");
  CHECK(small.rollout_buffer_size == 256);
  CHECK(small.minibatch_size == 32);
  CHECK(small.epochs_per_update == 2);
  CHECK_THROWS_AS(PPOConfig::preset("medium"), Error);
  PPOConfig bad;
  bad.rollout_buffer_size = 100;
  bad.minibatch_size = 33;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("constant stub policies") {
  InferencePolicy always = constant_policy(4, 0.0, 25.0);
  InferencePolicy never = constant_policy(4, 25.0, 0.0);
  VecX obs = VecX::Ones(4);
  CHECK(always.exit_probability(obs, 1.0) > 0.999999);
  CHECK(never.exit_probability(obs, 1.0) < 1e-6);
}
