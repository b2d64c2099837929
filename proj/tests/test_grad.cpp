#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitlm/lite.hpp"
#include "exitlm/model.hpp"

#include <cmath>

using namespace exitlm;

namespace {

// Aggregated loss on one block, no gradients: the finite-difference target.
double loss_only(const TransformerModel<double>& model, const TokenSeq& block,
                 const ExitSchedule& sched, const WeightSchedule& ws) {
  ForwardStash<double> stash;
  forward_collect<double>(model, block, stash);
  std::map<int, double> per_layer;
  for (int layer : sched.exit_layers) {
    per_layer[layer] = head_cross_entropy<double>(model, stash.layer_output(layer),
                                                  block, ByteTokenizer::kPad, 0.0,
                                                  nullptr, nullptr);
  }
  return aggregated_loss(per_layer, ws);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_seq = 16;
  cfg.vocab_size = 32;
  cfg.seed = 7;
  auto model = make_model<double>(cfg);

  ExitSchedule sched = build_exit_schedule(2, 1, 1, 1);
  REQUIRE(sched.exit_layers == std::vector<int>{1, 2});
  WeightSchedule ws = build_weight_schedule(sched, 0.7, 0.2, 0.1, 0.9);

  // Trailing pad markers exercise the target mask; id 31 stands in for PAD
  // within this tiny vocabulary.
  const TokenId pad = 31;
  TokenSeq block = {3, 9, 1, 28, 17, 4, 4, 22, 30, 11, 2, 26, 5, 5, pad, pad};
  REQUIRE(block.size() == 16);

  auto loss_fn = [&](const TransformerModel<double>& m) {
    ForwardStash<double> stash;
    forward_collect<double>(m, block, stash);
    std::map<int, double> per_layer;
    for (int layer : sched.exit_layers) {
      per_layer[layer] = head_cross_entropy<double>(m, stash.layer_output(layer),
                                                    block, pad, 0.0, nullptr, nullptr);
    }
    return aggregated_loss(per_layer, ws);
  };

  // Analytic gradients.
  auto grads = zeros_like(model);
  {
    ForwardStash<double> stash;
    forward_collect<double>(model, block, stash);
    std::vector<MatX> d_layer_out(cfg.n_layers + 1);
    const double total_w = ws.total();
    for (int layer : sched.exit_layers) {
      head_cross_entropy<double>(model, stash.layer_output(layer), block, pad,
                                 ws.weights.at(layer) / total_w, &grads,
                                 &d_layer_out[layer]);
    }
    backward_collect<double>(model, stash, d_layer_out, grads);
  }

  // Central differences on a deterministic subsample of every tensor.
  auto pviews = param_views(model);
  auto gviews = param_views(grads);
  Rng rng(123);
  const double h = 1e-5;
  int checked = 0;
  double worst = 0.0;
  for (std::size_t t = 0; t < pviews.size(); ++t) {
    auto p = pviews[t].flat();
    auto g = gviews[t].flat();
    const int n_probe = std::min<int>(6, static_cast<int>(p.size()));
    for (int probe = 0; probe < n_probe; ++probe) {
      const Eigen::Index k =
          static_cast<Eigen::Index>(uniform_real(rng, 0, static_cast<double>(p.size())));
      const double orig = p[k];
      p[k] = orig + h;
      const double up = loss_fn(model);
      p[k] = orig - h;
      const double down = loss_fn(model);
      p[k] = orig;
      const double fd = (up - down) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(g[k]), 1e-6});
      const double rel = std::abs(fd - g[k]) / denom;
      worst = std::max(worst, rel);
      ++checked;
      if (rel >= 1e-3) {
        CAPTURE(pviews[t].name);
        CAPTURE(k);
        CAPTURE(fd);
        CAPTURE(g[k]);
      }
      CHECK(rel < 1e-3);
    }
  }
  MESSAGE("checked ", checked, " coordinates, worst relative error ", worst);
  (void)loss_only;
}
