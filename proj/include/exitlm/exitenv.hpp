#pragma once

#include "exitlm/common.hpp"
#include "exitlm/corpus.hpp"
#include "exitlm/lite.hpp"
#include "exitlm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace exitlm {

// -----------------------------------------------------------------------
// Rewards

struct RewardConfig {
  double alpha = 0.5;    // late-exit penalty coefficient
  double beta = 1.0;     // early-exit penalty coefficient
  double gamma = 1.0;    // over-continue penalty coefficient
  double epsilon = 0.05; // edge-case penalty

  void validate() const {
    EXITLM_CHECK(alpha >= 0 && alpha <= 1 && beta >= 0 && beta <= 1 && gamma >= 0 &&
                     gamma <= 1,
                 "reward coefficients must lie in [0,1]");
    EXITLM_CHECK(alpha <= beta, "alpha must not exceed beta");
    EXITLM_CHECK(epsilon > 0, "epsilon must be positive");
  }
};

struct RewardInput {
  int curr_idx = 0;       // exit-point index currently under decision
  int opt_idx = 0;        // optimal exit-point index for this token
  bool pred_matches = false;  // prediction at curr equals the final layer's
  int n_exit_points = 1;
};

// Reward for taking the exit action. Distances are counted in exit-point
// steps and divided by (n_exit_points - 1); penalties are clamped into
// [-1, 0].
double exit_reward(const RewardInput& in, const RewardConfig& cfg);

// Reward for the continue action, with next = curr + 1.
double continue_reward(const RewardInput& in, const RewardConfig& cfg);

// Smallest exit-point index whose prediction equals the last entry (the
// final layer's prediction).
int optimal_exit_index(const std::vector<TokenId>& exit_predictions);

// -----------------------------------------------------------------------
// Environment interface

enum class Action { kContinue = 0, kExit = 1 };

struct EnvObservation {
  VecX hidden;
  int exit_point_index = 0;
  int token_index_in_episode = 0;
};

struct StepResult {
  EnvObservation observation;
  double reward = 0.0;
  bool done = false;
};

struct StepRecord {
  int token_idx = 0;
  int exit_idx = 0;
  int action = 0;
  double reward = 0.0;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int observation_dim() const = 0;
  virtual int n_exit_points() const = 0;
  virtual EnvObservation reset() = 0;
  virtual StepResult step(Action action) = 0;
};

struct EpisodeConfig {
  int tokens_per_episode = 16;
  double context_fraction_lo = 0.2;
  double context_fraction_hi = 0.6;
  int max_context = 256;

  void validate() const {
    EXITLM_CHECK(tokens_per_episode >= 1, "tokens_per_episode must be >= 1");
    EXITLM_CHECK(context_fraction_lo > 0 && context_fraction_hi < 1 &&
                     context_fraction_lo <= context_fraction_hi,
                 "context fraction range must lie within (0,1)");
    EXITLM_CHECK(max_context >= 1, "max_context must be positive");
  }
};

// Precomputed content of one episode: T tokens, each with its hidden state
// and prediction at every exit point plus the derived optimal exit.
struct EpisodeTokens {
  std::vector<MatX> hidden;                  // per token: d x n_exit_points
  std::vector<std::vector<TokenId>> preds;   // per token, per exit point
  std::vector<int> opt_idx;
  std::vector<std::vector<std::uint8_t>> match;  // pred == final prediction
  int n_tokens() const { return static_cast<int>(opt_idx.size()); }
};

// Common episode walker: both environments differ only in how an episode's
// content is produced. The observation carries only the hidden state and
// cursor indices; rewards never leak into it.
class EpisodeEnvBase : public Env {
 public:
  EpisodeEnvBase(RewardConfig rewards, int n_points)
      : rewards_(rewards), n_points_(n_points) {
    rewards_.validate();
  }

  int n_exit_points() const override { return n_points_; }
  EnvObservation reset() override;
  StepResult step(Action action) override;

  void enable_trace(bool on) { trace_enabled_ = on; }
  const std::vector<StepRecord>& trace() const { return trace_; }
  void dump_trace_jsonl(const std::filesystem::path& path) const;
  const EpisodeTokens& episode() const { return episode_; }

 protected:
  virtual EpisodeTokens build_episode() = 0;

 private:
  EnvObservation observation() const;

  RewardConfig rewards_;
  int n_points_;
  EpisodeTokens episode_;
  int token_ = 0;
  int exit_idx_ = 0;
  bool active_ = false;
  bool trace_enabled_ = false;
  std::vector<StepRecord> trace_;
};

// -----------------------------------------------------------------------
// Corpus-backed environment

// Per-token record of a full-depth cached generation: the hidden state and
// greedy head prediction at every exit layer. The emitted token is the
// final layer's prediction.
struct ExitRecordedGeneration {
  TokenSeq tokens;
  EpisodeTokens records;
};

ExitRecordedGeneration generate_with_exit_records(const TransformerModel<Real>& model,
                                                  const ExitSchedule& sched,
                                                  const TokenSeq& context, int n_tokens);

// Samples a code file uniformly, draws a context fraction from the
// configured interval, generates T tokens with the full model and exposes
// per-exit-point hidden states as observations.
class ExitEnv : public EpisodeEnvBase {
 public:
  ExitEnv(const TransformerModel<Real>& model, const ExitSchedule& sched,
          std::vector<const CodeSample*> samples, EpisodeConfig episode,
          RewardConfig rewards, std::uint64_t seed);

  int observation_dim() const override { return model_.config.d_model; }

 protected:
  EpisodeTokens build_episode() override;

 private:
  const TransformerModel<Real>& model_;
  ExitSchedule sched_;
  std::vector<const CodeSample*> samples_;
  EpisodeConfig episode_cfg_;
  Rng rng_;
};

// -----------------------------------------------------------------------
// Synthetic planted-feature environment

// Benchmark environment with a known answer: the optimal exit index is
// linearly encoded in the first four observation coordinates (plus noise),
// the current exit index in the next four, and the rest is noise. Used to
// verify that the PPO loop can recover a planted decision rule.
struct SyntheticEnvConfig {
  int n_exit_points = 5;
  int obs_dim = 32;
  int tokens_per_episode = 16;
  double feature_noise = 0.02;
  double background_noise = 0.3;

  void validate() const {
    EXITLM_CHECK(n_exit_points >= 2, "need at least two exit points");
    EXITLM_CHECK(obs_dim >= 8, "obs_dim must be >= 8");
    EXITLM_CHECK(tokens_per_episode >= 1, "tokens_per_episode must be >= 1");
  }
};

class SyntheticExitEnv : public EpisodeEnvBase {
 public:
  SyntheticExitEnv(SyntheticEnvConfig cfg, RewardConfig rewards, std::uint64_t seed);

  int observation_dim() const override { return cfg_.obs_dim; }

 protected:
  EpisodeTokens build_episode() override;

 private:
  SyntheticEnvConfig cfg_;
  Rng rng_;
  VecX opt_direction_;   // 4 coordinates
  VecX curr_direction_;  // 4 coordinates
};

}  // namespace exitlm
