#include "exitlm/ppo.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>

namespace exitlm {

using nlohmann::json;

namespace {

struct MlpForwardStash {
  std::vector<MatX> acts;  // acts[0] = input, then tanh outputs per hidden layer
  MatX out;
};

void mlp_forward(const MlpParams& p, const MatX& x, MlpForwardStash& stash) {
  const int n = static_cast<int>(p.w.size());
  stash.acts.assign(1, x);
  for (int i = 0; i < n - 1; ++i) {
    MatX z = p.w[i] * stash.acts.back();
    z.colwise() += p.b[i];
    stash.acts.push_back(z.array().tanh().matrix());
  }
  stash.out = p.w[n - 1] * stash.acts.back();
  stash.out.colwise() += p.b[n - 1];
}

VecX mlp_forward_one(const MlpParams& p, const VecX& x) {
  const int n = static_cast<int>(p.w.size());
  VecX h = x;
  for (int i = 0; i < n - 1; ++i) {
    h = ((p.w[i] * h + p.b[i]).array().tanh()).matrix();
  }
  return p.w[n - 1] * h + p.b[n - 1];
}

void mlp_backward(const MlpParams& p, const MlpForwardStash& stash, const MatX& d_out,
                  MlpParams& grads) {
  const int n = static_cast<int>(p.w.size());
  MatX d = d_out;
  for (int i = n - 1; i >= 0; --i) {
    grads.w[i] += d * stash.acts[i].transpose();
    grads.b[i] += d.rowwise().sum();
    if (i > 0) {
      d = (p.w[i].transpose() * d).cwiseProduct(
          (1.0 - stash.acts[i].array().square()).matrix());
    }
  }
}

MlpParams zeros_like(const MlpParams& p) {
  MlpParams z;
  for (const auto& w : p.w) z.w.push_back(MatX::Zero(w.rows(), w.cols()));
  for (const auto& b : p.b) z.b.push_back(VecX::Zero(b.rows()));
  return z;
}

std::vector<Eigen::Map<VecX>> flat_views(MlpParams& p) {
  std::vector<Eigen::Map<VecX>> out;
  for (auto& w : p.w) out.emplace_back(w.data(), w.size());
  for (auto& b : p.b) out.emplace_back(b.data(), b.size());
  return out;
}

MlpParams make_mlp(int in_dim, int hidden_layers, int hidden_units, int out_dim,
                   double out_gain, Rng& rng) {
  MlpParams p;
  int prev = in_dim;
  for (int i = 0; i < hidden_layers; ++i) {
    p.w.emplace_back(hidden_units, prev);
    p.b.emplace_back(VecX::Zero(hidden_units));
    prev = hidden_units;
  }
  p.w.emplace_back(out_dim, prev);
  p.b.emplace_back(VecX::Zero(out_dim));
  for (std::size_t i = 0; i < p.w.size(); ++i) {
    const double gain = i + 1 == p.w.size() ? out_gain : 1.0;
    const double std = gain / std::sqrt(static_cast<double>(p.w[i].cols()));
    for (Eigen::Index k = 0; k < p.w[i].size(); ++k) {
      p.w[i].data()[k] = normal_real(rng, 0.0, std);
    }
  }
  return p;
}

Eigen::Vector2d softmax2(const Eigen::Vector2d& logits) {
  const double mx = logits.maxCoeff();
  Eigen::Vector2d e = (logits.array() - mx).exp();
  return e / e.sum();
}

constexpr double kAdamBeta1 = 0.9, kAdamBeta2 = 0.999, kAdamEps = 1e-8;

void adam_apply(PpoAdamState& state, PolicyNetwork& p, MlpParams& g_pi,
                MlpParams& g_vf, double lr, double clip_norm) {
  auto gp = flat_views(g_pi);
  auto gv = flat_views(g_vf);
  if (clip_norm > 0) {
    double sq = 0;
    for (auto& g : gp) sq += g.squaredNorm();
    for (auto& g : gv) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
      const double s = clip_norm / norm;
      for (auto& g : gp) g *= s;
      for (auto& g : gv) g *= s;
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, state.t);
  const double bc2 = 1.0 - std::pow(kAdamBeta2, state.t);
  auto apply = [&](MlpParams& params, MlpParams& grads, MlpParams& m1, MlpParams& m2) {
    auto pv = flat_views(params);
    auto gv2 = flat_views(grads);
    auto m1v = flat_views(m1);
    auto m2v = flat_views(m2);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      m1v[i] = kAdamBeta1 * m1v[i] + (1 - kAdamBeta1) * gv2[i];
      m2v[i] = kAdamBeta2 * m2v[i] + (1 - kAdamBeta2) * gv2[i].cwiseProduct(gv2[i]);
      pv[i] -=
          (lr * (m1v[i] / bc1).array() / ((m2v[i] / bc2).array().sqrt() + kAdamEps))
              .matrix();
    }
  };
  apply(p.pi, g_pi, state.m1_pi, state.m2_pi);
  apply(p.vf, g_vf, state.m1_vf, state.m2_vf);
}

}  // namespace

PolicyNetwork make_policy(int input_dim, int hidden_layers, int hidden_units,
                          std::uint64_t seed) {
  EXITLM_CHECK(input_dim > 0 && hidden_layers >= 1 && hidden_units >= 1,
               "invalid policy shape");
  PolicyNetwork p;
  p.input_dim = input_dim;
  p.hidden_layers = hidden_layers;
  p.hidden_units = hidden_units;
  Rng rng(seed);
  p.pi = make_mlp(input_dim, hidden_layers, hidden_units, 2, 0.01, rng);
  p.vf = make_mlp(input_dim, hidden_layers, hidden_units, 1, 1.0, rng);
  return p;
}

Eigen::Vector2d policy_logits(const PolicyNetwork& policy, const VecX& obs) {
  EXITLM_CHECK(obs.size() == policy.input_dim, "observation dimension mismatch");
  return mlp_forward_one(policy.pi, obs);
}

Eigen::Vector2d policy_probs(const PolicyNetwork& policy, const VecX& obs) {
  return softmax2(policy_logits(policy, obs));
}

double policy_value(const PolicyNetwork& policy, const VecX& obs) {
  EXITLM_CHECK(obs.size() == policy.input_dim, "observation dimension mismatch");
  return mlp_forward_one(policy.vf, obs)[0];
}

PPOConfig PPOConfig::preset(const std::string& name) {
  PPOConfig cfg;
  if (name == "large") {
    return cfg;
  }
  if (name == "small") {
    cfg.rollout_buffer_size = 256;
    cfg.minibatch_size = 32;
    cfg.epochs_per_update = 2;
    cfg.learning_rate = 1e-4;
    cfg.hidden_units = 32;
    return cfg;
  }
  throw Error("unknown ppo preset: " + name);
}

RolloutBuffer collect_rollout(Env& env, const PolicyNetwork& policy, int n_steps,
                              Rng& rng, CollectState& state,
                              std::vector<EpisodeStat>* episode_log) {
  EXITLM_CHECK(n_steps > 0, "n_steps must be positive");
  RolloutBuffer buf;
  buf.observations.resize(env.observation_dim(), n_steps);
  buf.actions.resize(n_steps);
  buf.log_probs.resize(n_steps);
  buf.rewards.resize(n_steps);
  buf.values.resize(n_steps);
  buf.dones.assign(n_steps, 0);
  buf.size = n_steps;

  if (!state.current) state.current = env.reset();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n_steps; ++i) {
    const VecX& obs = state.current->hidden;
    const Eigen::Vector2d probs = policy_probs(policy, obs);
    const int action = unit(rng) < probs[0] ? 0 : 1;
    buf.observations.col(i) = obs;
    buf.actions[i] = action;
    buf.log_probs[i] = std::log(std::max(probs[action], 1e-300));
    buf.values[i] = policy_value(policy, obs);

    StepResult sr = env.step(action == 1 ? Action::kExit : Action::kContinue);
    buf.rewards[i] = sr.reward;
    buf.dones[i] = sr.done ? 1 : 0;
    state.episode_reward_sum += sr.reward;
    state.episode_steps += 1;
    if (sr.done) {
      if (episode_log) {
        EpisodeStat stat;
        stat.episode_index = state.episodes_done;
        stat.mean_step_reward = state.episode_reward_sum /
                                static_cast<double>(state.episode_steps);
        const std::size_t window_begin =
            episode_log->size() >= 49 ? episode_log->size() - 49 : 0;
        double sum = stat.mean_step_reward;
        long count = 1;
        for (std::size_t k = window_begin; k < episode_log->size(); ++k) {
          sum += (*episode_log)[k].mean_step_reward;
          ++count;
        }
        stat.moving_average_50 = sum / count;
        episode_log->push_back(stat);
      }
      state.episodes_done += 1;
      state.episode_reward_sum = 0.0;
      state.episode_steps = 0;
      state.current = env.reset();
    } else {
      state.current = sr.observation;
    }
  }
  return buf;
}

void compute_advantages(RolloutBuffer& buffer, double bootstrap_value, double discount,
                        double gae_lambda) {
  const int n = buffer.size;
  buffer.advantages.resize(n);
  buffer.returns.resize(n);
  double running = 0.0;
  for (int t = n - 1; t >= 0; --t) {
    const double nonterminal = buffer.dones[t] ? 0.0 : 1.0;
    const double next_value = t == n - 1 ? bootstrap_value : buffer.values[t + 1];
    const double delta =
        buffer.rewards[t] + discount * next_value * nonterminal - buffer.values[t];
    running = delta + discount * gae_lambda * nonterminal * running;
    buffer.advantages[t] = running;
  }
  buffer.returns = buffer.advantages + buffer.values;
  const double mean = buffer.advantages.mean();
  const double std = std::sqrt(
      (buffer.advantages.array() - mean).square().sum() / n);
  buffer.advantages = ((buffer.advantages.array() - mean) / (std + 1e-8)).matrix();
}

VecX discounted_returns(const VecX& rewards, const std::vector<std::uint8_t>& dones,
                        double discount, double bootstrap_value) {
  const int n = static_cast<int>(rewards.size());
  VecX out(n);
  double running = bootstrap_value;
  for (int t = n - 1; t >= 0; --t) {
    if (dones[t]) running = 0.0;
    running = rewards[t] + discount * running;
    out[t] = running;
  }
  return out;
}

PpoAdamState make_ppo_adam(const PolicyNetwork& policy) {
  PpoAdamState s;
  s.m1_pi = zeros_like(policy.pi);
  s.m2_pi = zeros_like(policy.pi);
  s.m1_vf = zeros_like(policy.vf);
  s.m2_vf = zeros_like(policy.vf);
  return s;
}

UpdateDiagnostics ppo_update(PolicyNetwork& policy, const RolloutBuffer& buffer,
                             const PPOConfig& cfg, double learning_rate, Rng& rng,
                             PpoAdamState* opt_state) {
  EXITLM_CHECK(buffer.size == cfg.rollout_buffer_size, "buffer not full");
  EXITLM_CHECK(buffer.advantages.size() == buffer.size,
               "advantages missing; call compute_advantages first");
  PpoAdamState local = opt_state ? PpoAdamState{} : make_ppo_adam(policy);
  PpoAdamState& opt = opt_state ? *opt_state : local;

  UpdateDiagnostics diag;
  long batches = 0;
  std::vector<int> order(buffer.size);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs_per_update; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < buffer.size; start += cfg.minibatch_size) {
      const int bsz = std::min(cfg.minibatch_size, buffer.size - start);
      MatX obs(buffer.observations.rows(), bsz);
      VecX adv(bsz), ret(bsz), old_lp(bsz);
      std::vector<int> act(bsz);
      for (int k = 0; k < bsz; ++k) {
        const int idx = order[start + k];
        obs.col(k) = buffer.observations.col(idx);
        adv[k] = buffer.advantages[idx];
        ret[k] = buffer.returns[idx];
        old_lp[k] = buffer.log_probs[idx];
        act[k] = buffer.actions[idx];
      }

      MlpForwardStash pi_stash, vf_stash;
      mlp_forward(policy.pi, obs, pi_stash);
      mlp_forward(policy.vf, obs, vf_stash);

      MatX d_logits = MatX::Zero(2, bsz);
      MatX d_value = MatX::Zero(1, bsz);
      double pg_loss = 0, v_loss = 0, ent_sum = 0;
      long clipped = 0;
      const double inv_b = 1.0 / bsz;
      for (int k = 0; k < bsz; ++k) {
        Eigen::Vector2d logits = pi_stash.out.col(k);
        Eigen::Vector2d probs = softmax2(logits);
        const double lp = std::log(std::max(probs[act[k]], 1e-300));
        const double ratio = std::exp(lp - old_lp[k]);
        const double surr1 = ratio * adv[k];
        const double clamped =
            std::clamp(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
        const double surr2 = clamped * adv[k];
        pg_loss += -std::min(surr1, surr2) * inv_b;
        if (std::abs(ratio - 1.0) > cfg.clip_range) ++clipped;

        // d(-min)/dlogp: zero when the clamped branch is strictly active.
        double g_lp = surr1 <= surr2 ? -adv[k] * ratio * inv_b : 0.0;
        Eigen::Vector2d onehot = Eigen::Vector2d::Zero();
        onehot[act[k]] = 1.0;
        d_logits.col(k) += g_lp * (onehot - probs);

        const double h = -(probs[0] * std::log(std::max(probs[0], 1e-300)) +
                           probs[1] * std::log(std::max(probs[1], 1e-300)));
        ent_sum += h;
        if (cfg.entropy_coef != 0.0) {
          // loss includes -entropy_coef * H
          for (int a = 0; a < 2; ++a) {
            const double lpa = std::log(std::max(probs[a], 1e-300));
            d_logits(a, k) += cfg.entropy_coef * probs[a] * (lpa + h) * inv_b;
          }
        }

        const double v = vf_stash.out(0, k);
        v_loss += 0.5 * (v - ret[k]) * (v - ret[k]) * inv_b;
        d_value(0, k) = cfg.value_coef * (v - ret[k]) * inv_b;
      }

      MlpParams g_pi = zeros_like(policy.pi);
      MlpParams g_vf = zeros_like(policy.vf);
      mlp_backward(policy.pi, pi_stash, d_logits, g_pi);
      mlp_backward(policy.vf, vf_stash, d_value, g_vf);
      adam_apply(opt, policy, g_pi, g_vf, learning_rate, cfg.max_grad_norm);

      diag.policy_loss += pg_loss;
      diag.value_loss += v_loss;
      diag.entropy += ent_sum / bsz;
      diag.clip_fraction += static_cast<double>(clipped) / bsz;
      ++batches;
    }
  }
  diag.policy_loss /= batches;
  diag.value_loss /= batches;
  diag.entropy /= batches;
  diag.clip_fraction /= batches;
  EXITLM_CHECK(std::isfinite(diag.policy_loss) && std::isfinite(diag.value_loss),
               "ppo update diverged (non-finite loss)");
  return diag;
}

TrainResult train_ppo(Env& env, const PPOConfig& cfg) {
  cfg.validate();
  TrainResult result;
  result.policy =
      make_policy(env.observation_dim(), cfg.hidden_layers, cfg.hidden_units, cfg.seed);
  Rng rng(cfg.seed + 0x9e3779b97f4a7c15ULL);
  CollectState state;
  PpoAdamState adam = make_ppo_adam(result.policy);

  double best_ma = -std::numeric_limits<double>::infinity();
  result.best_policy = result.policy;
  long steps = 0;
  while (steps < cfg.total_steps) {
    RolloutBuffer buffer = collect_rollout(env, result.policy, cfg.rollout_buffer_size,
                                           rng, state, &result.reward_curve);
    const double bootstrap = policy_value(result.policy, state.current->hidden);
    compute_advantages(buffer, bootstrap, cfg.discount, cfg.gae_lambda);

    const double frac =
        cfg.linear_lr_decay
            ? std::max(0.0, 1.0 - static_cast<double>(steps) / cfg.total_steps)
            : 1.0;
    const double lr = cfg.learning_rate * frac;

    UpdateDiagnostics diag = ppo_update(result.policy, buffer, cfg, lr, rng, &adam);
    result.updates.push_back(diag);
    steps += buffer.size;

    if (!result.reward_curve.empty() &&
        result.reward_curve.back().moving_average_50 > best_ma) {
      best_ma = result.reward_curve.back().moving_average_50;
      result.best_policy = result.policy;
    }
  }
  return result;
}

void write_reward_curve_csv(const std::vector<EpisodeStat>& curve,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write reward curve: " + path.string());
  out << "episode_index,mean_step_reward,moving_average_50\n";
  for (const auto& s : curve) {
    out << s.episode_index << "," << s.mean_step_reward << "," << s.moving_average_50
        << "\n";
  }
}

namespace {

json mlp_to_json(const MlpParams& p) {
  json layers = json::array();
  for (std::size_t i = 0; i < p.w.size(); ++i) {
    std::vector<double> w(p.w[i].data(), p.w[i].data() + p.w[i].size());
    std::vector<double> b(p.b[i].data(), p.b[i].data() + p.b[i].size());
    layers.push_back({{"rows", p.w[i].rows()},
                      {"cols", p.w[i].cols()},
                      {"w", w},
                      {"b", b}});
  }
  return layers;
}

MlpParams mlp_from_json(const json& layers) {
  MlpParams p;
  for (const auto& l : layers) {
    const Eigen::Index rows = l.at("rows"), cols = l.at("cols");
    MatX w(rows, cols);
    const auto wv = l.at("w").get<std::vector<double>>();
    EXITLM_CHECK(static_cast<Eigen::Index>(wv.size()) == rows * cols,
                 "policy artifact weight size mismatch");
    std::copy(wv.begin(), wv.end(), w.data());
    const auto bv = l.at("b").get<std::vector<double>>();
    EXITLM_CHECK(static_cast<Eigen::Index>(bv.size()) == rows,
                 "policy artifact bias size mismatch");
    VecX b(rows);
    std::copy(bv.begin(), bv.end(), b.data());
    p.w.push_back(std::move(w));
    p.b.push_back(std::move(b));
  }
  EXITLM_CHECK(!p.w.empty(), "policy artifact has no layers");
  return p;
}

}  // namespace

void save_agent(const PolicyNetwork& policy, const std::filesystem::path& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "exitlm-ppo-agent";
  j["input_dim"] = policy.input_dim;
  j["hidden_layers"] = policy.hidden_layers;
  j["hidden_units"] = policy.hidden_units;
  j["activation"] = "tanh";
  j["pi"] = mlp_to_json(policy.pi);
  j["vf"] = mlp_to_json(policy.vf);
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write agent: " + path.string());
  out << j.dump() << "\n";
}

PolicyNetwork load_agent(const std::filesystem::path& path) {
  std::ifstream in(path);
  EXITLM_CHECK(in.good(), "cannot open agent: " + path.string() +
                              " (run `exitlm train-rl` first)");
  json j = json::parse(in);
  EXITLM_CHECK(j.value("kind", "") == "exitlm-ppo-agent", "not an exitlm agent file");
  PolicyNetwork p;
  p.input_dim = j.at("input_dim");
  p.hidden_layers = j.at("hidden_layers");
  p.hidden_units = j.at("hidden_units");
  p.pi = mlp_from_json(j.at("pi"));
  p.vf = mlp_from_json(j.at("vf"));
  return p;
}

Eigen::Vector2d InferencePolicy::logits(const VecX& hidden) const {
  EXITLM_CHECK(hidden.size() == input_dim, "observation dimension mismatch");
  return mlp_forward_one(pi, hidden);
}

double InferencePolicy::exit_probability(const VecX& hidden, double temperature) const {
  EXITLM_CHECK(temperature > 0, "temperature must be positive");
  Eigen::Vector2d l = logits(hidden) / temperature;
  return softmax2(l)[1];
}

void export_policy(const PolicyNetwork& policy, const std::filesystem::path& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "exitlm-exit-policy";
  j["input_dim"] = policy.input_dim;
  j["activation"] = "tanh";
  j["outputs"] = {"continue", "exit"};
  j["layers"] = mlp_to_json(policy.pi);
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write policy artifact: " + path.string());
  out << j.dump() << "\n";
}

InferencePolicy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  EXITLM_CHECK(in.good(), "cannot open policy artifact: " + path.string() +
                              " (run `exitlm export-policy` first)");
  json j = json::parse(in);
  EXITLM_CHECK(j.value("kind", "") == "exitlm-exit-policy",
               "not an exitlm policy artifact");
  InferencePolicy p;
  p.input_dim = j.at("input_dim");
  p.pi = mlp_from_json(j.at("layers"));
  EXITLM_CHECK(p.pi.w.front().cols() == p.input_dim,
               "policy artifact input dimension mismatch");
  EXITLM_CHECK(p.pi.w.back().rows() == 2, "policy artifact must emit two logits");
  return p;
}

InferencePolicy constant_policy(int input_dim, double continue_logit,
                                double exit_logit) {
  InferencePolicy p;
  p.input_dim = input_dim;
  p.pi.w.push_back(MatX::Zero(2, input_dim));
  VecX b(2);
  b << continue_logit, exit_logit;
  p.pi.b.push_back(b);
  return p;
}

}  // namespace exitlm
