#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitlm/exitenv.hpp"
#include "exitlm/synthcorpus.hpp"
#include "test_oracles.hpp"

using namespace exitlm;
namespace oracle = exitlm::testing;

namespace {

ModelConfig env_model_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 24;
  c.n_heads = 4;
  c.ffn_mult = 2;
  c.max_seq = 192;
  c.vocab_size = 259;
  c.seed = 9;
  return c;
}

std::vector<CodeSample> make_samples(int n) {
  ByteTokenizer tok;
  std::vector<CodeSample> out;
  for (int i = 0; i < n; ++i) {
    CodeSample s;
    s.source_path = "synthetic-" + std::to_string(i);
    s.token_ids = tok.encode(synthetic_file_text(55, i));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("reward examples from the contract") {
  RewardConfig cfg;
  cfg.alpha = 0.5;
  cfg.beta = 1.0;
  cfg.gamma = 1.0;
  cfg.epsilon = 0.05;
  const int n = 9;  // divisor 8

  CHECK(exit_reward({3, 3, true, n}, cfg) == doctest::Approx(1.0));
  CHECK(exit_reward({5, 3, true, n}, cfg) == doctest::Approx(-0.125));
  CHECK(exit_reward({1, 4, false, n}, cfg) == doctest::Approx(-0.375));
  CHECK(exit_reward({6, 3, false, n}, cfg) == doctest::Approx(-0.05));

  CHECK(continue_reward({2, 5, false, n}, cfg) == doctest::Approx(1.0));
  CHECK(continue_reward({5, 5, false, n}, cfg) == doctest::Approx(-0.125));
  RewardConfig half = cfg;
  half.gamma = 0.5;
  CHECK(continue_reward({7, 5, false, n}, half) == doctest::Approx(-0.1875));
}

TEST_CASE("exhaustive reward table matches the hand-coded oracle exactly") {
  RewardConfig cfg;
  cfg.alpha = 0.5;
  cfg.beta = 1.0;
  cfg.gamma = 0.75;
  cfg.epsilon = 0.05;
  for (int n = 2; n <= 10; ++n) {
    for (int curr = 0; curr < n; ++curr) {
      for (int opt = 0; opt < n; ++opt) {
        for (bool match : {false, true}) {
          RewardInput in{curr, opt, match, n};
          CHECK(exit_reward(in, cfg) ==
                oracle::oracle_exit_reward(curr, opt, match, cfg.alpha, cfg.beta,
                                           cfg.epsilon, n));
          CHECK(continue_reward(in, cfg) ==
                oracle::oracle_continue_reward(curr, opt, cfg.gamma, n));
        }
      }
    }
  }
}

TEST_CASE("rewards stay in [-1,1] and penalties in [-1,0]") {
  Rng rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 2 + static_cast<int>(uniform_real(rng, 0, 9));
    RewardConfig cfg;
    cfg.alpha = uniform_real(rng, 0, 1);
    cfg.beta = std::max(cfg.alpha, uniform_real(rng, 0, 1));
    cfg.gamma = uniform_real(rng, 0, 1);
    RewardInput in;
    in.n_exit_points = n;
    in.curr_idx = static_cast<int>(uniform_real(rng, 0, n));
    in.opt_idx = static_cast<int>(uniform_real(rng, 0, n));
    in.pred_matches = uniform_real(rng, 0, 1) < 0.5;
    const double re = exit_reward(in, cfg);
    const double rc = continue_reward(in, cfg);
    CHECK(re <= 1.0);
    CHECK(re >= -1.0);
    CHECK(rc <= 1.0);
    CHECK(rc >= -1.0);
    if (re != 1.0) CHECK(re <= 0.0);
    if (rc != 1.0) CHECK(rc <= 0.0);
  }
}

TEST_CASE("exit reward is uniquely maximized at the optimal exit") {
  RewardConfig cfg;
  cfg.alpha = 0.25;
  cfg.beta = 0.5;
  const int n = 7;
  for (int opt = 0; opt < n; ++opt) {
    const double best = exit_reward({opt, opt, true, n}, cfg);
    for (int curr = 0; curr < n; ++curr) {
      if (curr == opt) continue;
      // Away from opt the prediction either matches (late exit) or not.
      const bool match = curr > opt;
      CHECK(exit_reward({curr, opt, match, n}, cfg) < best);
    }
  }
}

TEST_CASE("optimal_exit_index") {
  CHECK(optimal_exit_index({7, 7, 7, 7}) == 0);
  CHECK(optimal_exit_index({1, 2, 9, 9}) == 2);
  CHECK(optimal_exit_index({5}) == 0);
  CHECK_THROWS_AS(optimal_exit_index({}), Error);
}

TEST_CASE("exit-recorded generation: histogram is reproducible and complete") {
  auto model = make_model<Real>(env_model_config());
  ExitSchedule sched = build_exit_schedule(4, 2, 2, 2);
  ByteTokenizer tok;
  TokenSeq context = tok.encode("def get_total(items):\n    total = 0\n");

  auto g1 = generate_with_exit_records(model, sched, context, 100);
  auto g2 = generate_with_exit_records(model, sched, context, 100);
  REQUIRE(g1.records.opt_idx.size() == 100);
  CHECK(g1.records.preds.size() == 100);
  for (const auto& p : g1.records.preds) CHECK(p.size() == 2);

  std::vector<long> h1(sched.n_exit_points(), 0), h2(sched.n_exit_points(), 0);
  for (int idx : g1.records.opt_idx) h1[idx]++;
  for (int idx : g2.records.opt_idx) h2[idx]++;
  CHECK(h1 == h2);
  long total = 0;
  for (long c : h1) total += c;
  CHECK(total == 100);
}

TEST_CASE("corpus environment episode semantics") {
  auto model = make_model<Real>(env_model_config());
  ExitSchedule sched = build_exit_schedule(4, 2, 2, 2);
  auto samples = make_samples(6);
  std::vector<const CodeSample*> ptrs;
  for (auto& s : samples) ptrs.push_back(&s);

  EpisodeConfig ep;
  ep.tokens_per_episode = 5;
  ep.max_context = 96;
  RewardConfig rewards;

  SUBCASE("reset starts at token 0, exit point 0, and is seed-deterministic") {
    ExitEnv env1(model, sched, ptrs, ep, rewards, 77);
    ExitEnv env2(model, sched, ptrs, ep, rewards, 77);
    EnvObservation o1 = env1.reset();
    EnvObservation o2 = env2.reset();
    CHECK(o1.exit_point_index == 0);
    CHECK(o1.token_index_in_episode == 0);
    CHECK(o1.hidden == o2.hidden);
    CHECK(env1.episode().n_tokens() == 5);
    for (int t = 0; t < 5; ++t) {
      CHECK(env1.episode().preds[t].size() == 2);
      CHECK(env1.episode().hidden[t] == env2.episode().hidden[t]);
    }
  }

  SUBCASE("stepping walks exit points then tokens; done on the last token") {
    ExitEnv env(model, sched, ptrs, ep, rewards, 3);
    env.enable_trace(true);
    env.reset();
    long steps = 0;
    bool done = false;
    while (!done) {
      // Continue once then exit, exercising both actions.
      StepResult r1 = env.step(Action::kContinue);
      ++steps;
      if (r1.done) break;
      if (r1.observation.exit_point_index == 0) continue;  // token auto-finished
      StepResult r2 = env.step(Action::kExit);
      ++steps;
      done = r2.done;
    }
    CHECK(steps == env.trace().size());
    CHECK_THROWS_AS(env.step(Action::kExit), Error);

    // Per-token step counts: exits at index j cost j+1 steps.
    long expected = 0;
    int cursor_token = 0;
    long count_this_token = 0;
    for (const auto& rec : env.trace()) {
      if (rec.token_idx != cursor_token) {
        expected += count_this_token;
        count_this_token = 0;
        cursor_token = rec.token_idx;
      }
      ++count_this_token;
    }
    expected += count_this_token;
    CHECK(expected == steps);
  }

  SUBCASE("continue at the final exit point finalizes the token") {
    ExitEnv env(model, sched, ptrs, ep, rewards, 5);
    EnvObservation obs = env.reset();
    const int n_points = env.n_exit_points();
    // Continue to the last exit point, then continue once more.
    for (int j = 0; j < n_points - 1; ++j) {
      StepResult r = env.step(Action::kContinue);
      obs = r.observation;
    }
    CHECK(obs.exit_point_index == n_points - 1);
    const int opt = env.episode().opt_idx[0];
    StepResult r = env.step(Action::kContinue);
    RewardInput expect{n_points - 1, opt, false, n_points};
    CHECK(r.reward == doctest::Approx(continue_reward(expect, rewards)));
    CHECK(r.observation.token_index_in_episode == 1);
    CHECK(r.observation.exit_point_index == 0);
  }

  SUBCASE("trace dump emits one JSON line per step") {
    ExitEnv env(model, sched, ptrs, ep, rewards, 8);
    env.enable_trace(true);
    env.reset();
    bool done = false;
    while (!done) done = env.step(Action::kExit).done;
    auto path = std::filesystem::temp_directory_path() / "exitlm_trace_test.jsonl";
    env.dump_trace_jsonl(path);
    std::ifstream in(path);
    std::string line;
    long lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == static_cast<long>(env.trace().size()));
    CHECK(lines == 5);  // one exit per token
    std::filesystem::remove(path);
  }
}

TEST_CASE("synthetic planted environment") {
  SyntheticEnvConfig cfg;
  RewardConfig rewards;
  SyntheticExitEnv env1(cfg, rewards, 21);
  SyntheticExitEnv env2(cfg, rewards, 21);
  EnvObservation o1 = env1.reset();
  EnvObservation o2 = env2.reset();
  CHECK(o1.hidden == o2.hidden);
  CHECK(env1.observation_dim() == cfg.obs_dim);
  CHECK(env1.n_exit_points() == cfg.n_exit_points);

  // Match mask must hold at and after the optimal index (final always true).
  const auto& ep = env1.episode();
  for (int t = 0; t < ep.n_tokens(); ++t) {
    for (int j = 0; j < cfg.n_exit_points; ++j) {
      CHECK(static_cast<bool>(ep.match[t][j]) == (j >= ep.opt_idx[t]));
    }
    CHECK(ep.match[t].back() == 1);
  }
}
