#include "exitlm/exitenv.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace exitlm {

double exit_reward(const RewardInput& in, const RewardConfig& cfg) {
  EXITLM_CHECK(in.n_exit_points >= 1 && in.curr_idx >= 0 &&
                   in.curr_idx < in.n_exit_points && in.opt_idx >= 0 &&
                   in.opt_idx < in.n_exit_points,
               "reward input indices out of range");
  const double divisor = std::max(1, in.n_exit_points - 1);
  double r;
  if (in.pred_matches && in.curr_idx == in.opt_idx) {
    r = 1.0;
  } else if (in.pred_matches) {
    r = -((in.curr_idx - in.opt_idx) / divisor) * cfg.alpha;
  } else if (in.curr_idx < in.opt_idx) {
    r = -((in.opt_idx - in.curr_idx) / divisor) * cfg.beta;
  } else {
    r = -cfg.epsilon;
  }
  return std::max(r, -1.0);
}

double continue_reward(const RewardInput& in, const RewardConfig& cfg) {
  EXITLM_CHECK(in.n_exit_points >= 1 && in.curr_idx >= 0 &&
                   in.curr_idx < in.n_exit_points && in.opt_idx >= 0 &&
                   in.opt_idx < in.n_exit_points,
               "reward input indices out of range");
  const double divisor = std::max(1, in.n_exit_points - 1);
  if (in.curr_idx < in.opt_idx) return 1.0;
  const int next = in.curr_idx + 1;
  const double r = -((next - in.opt_idx) / divisor) * cfg.gamma;
  return std::max(r, -1.0);
}

int optimal_exit_index(const std::vector<TokenId>& exit_predictions) {
  EXITLM_CHECK(!exit_predictions.empty(), "no exit predictions");
  const TokenId final_pred = exit_predictions.back();
  for (std::size_t i = 0; i < exit_predictions.size(); ++i) {
    if (exit_predictions[i] == final_pred) return static_cast<int>(i);
  }
  return static_cast<int>(exit_predictions.size()) - 1;
}

// -----------------------------------------------------------------------

EnvObservation EpisodeEnvBase::observation() const {
  EnvObservation obs;
  obs.hidden = episode_.hidden[token_].col(exit_idx_);
  obs.exit_point_index = exit_idx_;
  obs.token_index_in_episode = token_;
  return obs;
}

EnvObservation EpisodeEnvBase::reset() {
  episode_ = build_episode();
  EXITLM_CHECK(episode_.n_tokens() >= 1, "episode has no tokens");
  token_ = 0;
  exit_idx_ = 0;
  active_ = true;
  return observation();
}

StepResult EpisodeEnvBase::step(Action action) {
  EXITLM_CHECK(active_, "step called on a finished episode");
  RewardInput in;
  in.curr_idx = exit_idx_;
  in.opt_idx = episode_.opt_idx[token_];
  in.pred_matches = episode_.match[token_][exit_idx_] != 0;
  in.n_exit_points = n_points_;

  StepResult out;
  bool token_finished;
  if (action == Action::kExit) {
    out.reward = exit_reward(in, rewards_);
    token_finished = true;
  } else {
    out.reward = continue_reward(in, rewards_);
    // Continuing past the last exit point finalizes the token at the final
    // layer; otherwise move one exit point deeper.
    token_finished = exit_idx_ == n_points_ - 1;
  }
  if (trace_enabled_) {
    trace_.push_back({token_, exit_idx_, static_cast<int>(action), out.reward});
  }

  if (token_finished) {
    ++token_;
    exit_idx_ = 0;
    if (token_ >= episode_.n_tokens()) {
      active_ = false;
      out.done = true;
      out.observation.hidden = VecX::Zero(observation_dim());
      return out;
    }
  } else {
    ++exit_idx_;
  }
  out.observation = observation();
  return out;
}

void EpisodeEnvBase::dump_trace_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write trace: " + path.string());
  for (const auto& rec : trace_) {
    nlohmann::json j = {{"token_idx", rec.token_idx},
                        {"exit_idx", rec.exit_idx},
                        {"action", rec.action == 1 ? "exit" : "continue"},
                        {"reward", rec.reward}};
    out << j.dump() << "\n";
  }
}

// -----------------------------------------------------------------------

ExitRecordedGeneration generate_with_exit_records(const TransformerModel<Real>& model,
                                                  const ExitSchedule& sched,
                                                  const TokenSeq& context, int n_tokens) {
  EXITLM_CHECK(!context.empty(), "context must be non-empty");
  EXITLM_CHECK(static_cast<int>(context.size()) + n_tokens <= model.config.max_seq,
               "context overflow");
  const int n_points = sched.n_exit_points();

  ExitRecordedGeneration gen;
  auto cache = make_cache(model);
  append_tokens<Real>(model, cache, context);

  for (int t = 0; t < n_tokens; ++t) {
    MatX hiddens(model.config.d_model, n_points);
    std::vector<TokenId> preds(n_points);
    const int last = cache.n_positions - 1;
    for (int j = 0; j < n_points; ++j) {
      ascend(model, cache, sched.exit_layers[j]);
      hiddens.col(j) = cache.hidden.col(last);
      preds[j] = argmax_lowest(decode_head(model, VecX(hiddens.col(j))));
    }
    const TokenId next = preds.back();
    gen.records.hidden.push_back(std::move(hiddens));
    gen.records.opt_idx.push_back(optimal_exit_index(preds));
    std::vector<std::uint8_t> match(n_points);
    for (int j = 0; j < n_points; ++j) match[j] = preds[j] == next;
    gen.records.match.push_back(std::move(match));
    gen.records.preds.push_back(std::move(preds));
    gen.tokens.push_back(next);
    TokenSeq one{next};
    append_tokens<Real>(model, cache, one);
  }
  return gen;
}

ExitEnv::ExitEnv(const TransformerModel<Real>& model, const ExitSchedule& sched,
                 std::vector<const CodeSample*> samples, EpisodeConfig episode,
                 RewardConfig rewards, std::uint64_t seed)
    : EpisodeEnvBase(rewards, sched.n_exit_points()),
      model_(model),
      sched_(sched),
      samples_(std::move(samples)),
      episode_cfg_(episode),
      rng_(seed) {
  sched_.validate();
  episode_cfg_.validate();
  EXITLM_CHECK(sched_.n_layers == model_.config.n_layers,
               "schedule/model layer count mismatch");
  EXITLM_CHECK(!samples_.empty(), "environment needs a non-empty sample set");
}

EpisodeTokens ExitEnv::build_episode() {
  const int T = episode_cfg_.tokens_per_episode;
  const int cap = std::min(episode_cfg_.max_context, model_.config.max_seq - T);
  EXITLM_CHECK(cap >= 1, "episode does not fit in max_seq");
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::uniform_int_distribution<std::size_t> pick(0, samples_.size() - 1);
    const CodeSample& sample = *samples_[pick(rng_)];
    const double fraction = uniform_real(rng_, episode_cfg_.context_fraction_lo,
                                         episode_cfg_.context_fraction_hi);
    const int len = static_cast<int>(sample.token_ids.size());
    const int ctx_len = static_cast<int>(std::floor(fraction * len));
    if (ctx_len < 1) continue;
    const int begin = std::max(0, ctx_len - cap);
    TokenSeq context(sample.token_ids.begin() + begin,
                     sample.token_ids.begin() + ctx_len);
    return generate_with_exit_records(model_, sched_, context, T).records;
  }
  throw Error("could not sample a usable episode after 100 attempts");
}

// -----------------------------------------------------------------------

SyntheticExitEnv::SyntheticExitEnv(SyntheticEnvConfig cfg, RewardConfig rewards,
                                   std::uint64_t seed)
    : EpisodeEnvBase(rewards, cfg.n_exit_points), cfg_(cfg), rng_(seed) {
  cfg_.validate();
  opt_direction_ = VecX(4);
  opt_direction_ << 0.9, -0.7, 0.5, 0.3;
  curr_direction_ = VecX(4);
  curr_direction_ << -0.4, 0.8, 0.6, -0.5;
}

EpisodeTokens SyntheticExitEnv::build_episode() {
  const int n = cfg_.n_exit_points;
  const int T = cfg_.tokens_per_episode;
  EpisodeTokens ep;
  std::uniform_int_distribution<int> opt_dist(0, n - 1);
  for (int t = 0; t < T; ++t) {
    const int opt = opt_dist(rng_);
    MatX hidden(cfg_.obs_dim, n);
    std::vector<std::uint8_t> match(n);
    for (int j = 0; j < n; ++j) {
      VecX obs = VecX::Zero(cfg_.obs_dim);
      const double opt_code = static_cast<double>(opt) / (n - 1);
      const double curr_code = static_cast<double>(j) / (n - 1);
      for (int k = 0; k < 4; ++k) {
        obs[k] = opt_direction_[k] * opt_code +
                 normal_real(rng_, 0.0, cfg_.feature_noise);
        obs[4 + k] = curr_direction_[k] * curr_code +
                     normal_real(rng_, 0.0, cfg_.feature_noise);
      }
      for (int k = 8; k < cfg_.obs_dim; ++k) {
        obs[k] = normal_real(rng_, 0.0, cfg_.background_noise);
      }
      hidden.col(j) = obs;
      match[j] = j >= opt;
    }
    ep.hidden.push_back(std::move(hidden));
    ep.opt_idx.push_back(opt);
    ep.match.push_back(std::move(match));
  }
  return ep;
}

}  // namespace exitlm
