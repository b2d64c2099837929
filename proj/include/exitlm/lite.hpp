#pragma once

#include "exitlm/common.hpp"
#include "exitlm/model.hpp"
#include "exitlm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace exitlm {

// The layers at which decoding is permitted. Strictly increasing; the final
// layer is always a member. Exits never happen off-schedule.
struct ExitSchedule {
  std::vector<int> exit_layers;
  int n_layers = 0;

  int n_exit_points() const { return static_cast<int>(exit_layers.size()); }
  int final_layer() const { return n_layers; }
  bool contains(int layer) const {
    return std::find(exit_layers.begin(), exit_layers.end(), layer) !=
           exit_layers.end();
  }
  // Exit-point index of a schedule layer.
  int index_of(int layer) const {
    auto it = std::find(exit_layers.begin(), exit_layers.end(), layer);
    EXITLM_CHECK(it != exit_layers.end(), "layer is not an exit point");
    return static_cast<int>(it - exit_layers.begin());
  }
  void validate() const;
};

struct WeightSchedule {
  std::map<int, double> weights;  // layer -> w_i
  double budget_first_half = 0.7;
  double budget_second_half = 0.2;
  double budget_final = 0.1;
  double decay = 0.9;

  double total() const {
    double s = 0;
    for (const auto& [l, w] : weights) s += w;
    return s;
  }
};

// Exit layers at earliest, earliest+stride1, ... within the first half of
// the stack, then every stride2 layers through the second half, plus the
// final layer.
ExitSchedule build_exit_schedule(int n_layers, int earliest, int first_half_stride,
                                 int second_half_stride);

// Geometric weights within each half (shallowest exit largest), normalized
// to the half's budget; the final layer takes budget_final exactly. A half
// without exits donates its budget to the other half (or, failing that, to
// the final layer).
WeightSchedule build_weight_schedule(const ExitSchedule& sched, double budget_first_half,
                                     double budget_second_half, double budget_final,
                                     double decay);

// Weighted mean of per-exit-layer losses. The denominator is computed
// explicitly even though budgets make it 1.
double aggregated_loss(const std::map<int, double>& per_layer_losses,
                       const WeightSchedule& ws);

struct TrainConfig {
  double learning_rate = 1e-4;  // from-scratch default; 1e-5 suits fine-tuning
  int batch_size = 4;
  int grad_accum_steps = 32;
  int epochs = 1;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;  // 0 disables

  void validate() const {
    EXITLM_CHECK(learning_rate > 0 && batch_size > 0 && grad_accum_steps > 0 &&
                     epochs >= 0,
                 "train config fields must be positive");
  }
};

struct LossRecord {
  int step = 0;
  double aggregated = 0.0;
  std::map<int, double> per_layer;
};

// Thrown when training hits a non-finite loss; carries the last state for a
// diagnostic dump.
struct TrainDiverged : Error {
  TrainDiverged(const std::string& msg, LossRecord snapshot_)
      : Error(msg), snapshot(std::move(snapshot_)) {}
  LossRecord snapshot;
};

template <class Scalar>
struct AdamState {
  TransformerModel<Scalar> m1, m2;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class Scalar>
AdamState<Scalar> make_adam(const TransformerModel<Scalar>& model) {
  AdamState<Scalar> s;
  s.m1 = zeros_like(model);
  s.m2 = zeros_like(model);
  return s;
}

template <class Scalar>
void adam_step(TransformerModel<Scalar>& model, TransformerModel<Scalar>& grads,
               AdamState<Scalar>& state, double lr, double clip_norm) {
  auto pviews = param_views(model);
  auto gviews = param_views(grads);
  auto m1views = param_views(state.m1);
  auto m2views = param_views(state.m2);
  if (clip_norm > 0) {
    double sq = 0;
    for (auto& g : gviews) sq += g.flat().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
      const Scalar scale = static_cast<Scalar>(clip_norm / norm);
      for (auto& g : gviews) g.flat() *= scale;
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.t);
  const double bc2 = 1.0 - std::pow(state.beta2, state.t);
  for (std::size_t i = 0; i < pviews.size(); ++i) {
    auto p = pviews[i].flat();
    auto g = gviews[i].flat();
    auto m1 = m1views[i].flat();
    auto m2 = m2views[i].flat();
    m1 = Scalar(state.beta1) * m1 + Scalar(1 - state.beta1) * g;
    m2 = Scalar(state.beta2) * m2 +
         Scalar(1 - state.beta2) * g.cwiseProduct(g);
    p -= (Scalar(lr) * (m1 / Scalar(bc1)).array() /
          ((m2 / Scalar(bc2)).array().sqrt() + Scalar(state.eps)))
             .matrix();
  }
}

// One forward/backward pass of the aggregated loss on a packed block.
// Cross-entropy is taken at every schedule layer through the shared head;
// gradients for weight * loss accumulate into `grads`.
template <class Scalar>
LossRecord lite_block_grad(const TransformerModel<Scalar>& model,
                           std::span<const TokenId> block, const ExitSchedule& sched,
                           const WeightSchedule& ws,
                           TransformerModel<Scalar>& grads) {
  const double total_w = ws.total();
  EXITLM_CHECK(total_w > 0, "weight schedule sums to zero");

  ForwardStash<Scalar> stash;
  forward_collect(model, block, stash);

  std::vector<Mat<Scalar>> d_layer_out(model.config.n_layers + 1);
  LossRecord rec;
  double agg_num = 0.0;
  for (int layer : sched.exit_layers) {
    const double w = ws.weights.at(layer);
    const Scalar scale = static_cast<Scalar>(w / total_w);
    Scalar loss = head_cross_entropy(model, stash.layer_output(layer), block,
                                     ByteTokenizer::kPad, scale, &grads,
                                     &d_layer_out[layer]);
    rec.per_layer[layer] = static_cast<double>(loss);
    agg_num += w * static_cast<double>(loss);
  }
  rec.aggregated = agg_num / total_w;
  backward_collect(model, stash, d_layer_out, grads);
  return rec;
}

// Per-exit-layer mean cross-entropy without gradients (validation).
template <class Scalar>
std::map<int, double> per_layer_eval_loss(const TransformerModel<Scalar>& model,
                                          const std::vector<TokenSeq>& blocks,
                                          const ExitSchedule& sched) {
  std::map<int, double> sums;
  for (int layer : sched.exit_layers) sums[layer] = 0.0;
  EXITLM_CHECK(!blocks.empty(), "no evaluation blocks");
  for (const auto& block : blocks) {
    ForwardStash<Scalar> stash;
    forward_collect(model, block, stash);
    for (int layer : sched.exit_layers) {
      sums[layer] += static_cast<double>(
          head_cross_entropy<Scalar>(model, stash.layer_output(layer), block,
                                     ByteTokenizer::kPad, Scalar(0), nullptr, nullptr));
    }
  }
  for (auto& [l, s] : sums) s /= static_cast<double>(blocks.size());
  return sums;
}

// Trains the model in place with the aggregated loss. One optimizer step
// consumes batch_size * grad_accum_steps blocks (mean gradient). Returns the
// per-step loss history; throws TrainDiverged on a non-finite loss.
template <class Scalar>
std::vector<LossRecord> train_lite(TransformerModel<Scalar>& model,
                                   const std::vector<TokenSeq>& blocks,
                                   const ExitSchedule& sched, const WeightSchedule& ws,
                                   const TrainConfig& cfg) {
  cfg.validate();
  sched.validate();
  EXITLM_CHECK(sched.n_layers == model.config.n_layers,
               "schedule/model layer count mismatch");
  EXITLM_CHECK(!blocks.empty(), "no training blocks");

  std::vector<LossRecord> history;
  if (cfg.epochs == 0) return history;

  AdamState<Scalar> adam = make_adam(model);
  TransformerModel<Scalar> grads = zeros_like(model);
  Rng rng(cfg.seed);
  const int blocks_per_step = cfg.batch_size * cfg.grad_accum_steps;
  int step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(blocks.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t cursor = 0;
    while (cursor < order.size()) {
      const int take = static_cast<int>(
          std::min<std::size_t>(blocks_per_step, order.size() - cursor));
      for (auto& g : param_views(grads)) g.flat().setZero();

      LossRecord rec;
      rec.step = step;
      double agg = 0.0;
      for (int i = 0; i < take; ++i) {
        LossRecord r = lite_block_grad(model, blocks[order[cursor + i]], sched, ws, grads);
        agg += r.aggregated;
        for (const auto& [l, v] : r.per_layer) rec.per_layer[l] += v;
      }
      rec.aggregated = agg / take;
      for (auto& [l, v] : rec.per_layer) v /= take;
      if (!std::isfinite(rec.aggregated)) {
        throw TrainDiverged("training loss is not finite at step " +
                                std::to_string(step),
                            rec);
      }
      const Scalar inv_take = Scalar(1) / Scalar(take);
      for (auto& g : param_views(grads)) g.flat() *= inv_take;
      adam_step(model, grads, adam, cfg.learning_rate, cfg.grad_clip_norm);

      history.push_back(std::move(rec));
      cursor += take;
      ++step;
    }
  }
  return history;
}

void write_loss_history_csv(const std::vector<LossRecord>& history,
                            const ExitSchedule& sched, const std::string& path);

}  // namespace exitlm
