#include "exitlm/lite.hpp"

#include <fstream>

namespace exitlm {

void ExitSchedule::validate() const {
  EXITLM_CHECK(!exit_layers.empty(), "exit schedule is empty");
  EXITLM_CHECK(exit_layers.back() == n_layers,
               "final layer must be the last exit point");
  for (std::size_t i = 0; i < exit_layers.size(); ++i) {
    EXITLM_CHECK(exit_layers[i] >= 1 && exit_layers[i] <= n_layers,
                 "exit layer out of range");
    if (i > 0) {
      EXITLM_CHECK(exit_layers[i] > exit_layers[i - 1],
                   "exit layers must be strictly increasing");
    }
  }
}

ExitSchedule build_exit_schedule(int n_layers, int earliest, int first_half_stride,
                                 int second_half_stride) {
  EXITLM_CHECK(n_layers >= 1, "n_layers must be positive");
  EXITLM_CHECK(earliest >= 1 && earliest <= n_layers,
               "earliest exit must lie within the stack");
  EXITLM_CHECK(first_half_stride >= 1 && second_half_stride >= 1,
               "strides must be >= 1");
  const int half = n_layers / 2;
  ExitSchedule sched;
  sched.n_layers = n_layers;
  int last_first_half = half;
  for (int l = earliest; l <= half; l += first_half_stride) {
    sched.exit_layers.push_back(l);
    last_first_half = l;
  }
  for (int l = last_first_half + second_half_stride; l < n_layers;
       l += second_half_stride) {
    if (l > half && l >= earliest) sched.exit_layers.push_back(l);
  }
  if (sched.exit_layers.empty() || sched.exit_layers.back() != n_layers) {
    sched.exit_layers.push_back(n_layers);
  }
  sched.validate();
  return sched;
}

WeightSchedule build_weight_schedule(const ExitSchedule& sched, double budget_first_half,
                                     double budget_second_half, double budget_final,
                                     double decay) {
  sched.validate();
  EXITLM_CHECK(std::abs(budget_first_half + budget_second_half + budget_final - 1.0) <=
                   1e-9,
               "budgets must sum to 1");
  EXITLM_CHECK(budget_first_half >= 0 && budget_second_half >= 0 && budget_final >= 0,
               "budgets must be non-negative");
  EXITLM_CHECK(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");

  const int half = sched.n_layers / 2;
  std::vector<int> first, second;
  for (int l : sched.exit_layers) {
    if (l == sched.n_layers) continue;  // final layer budgeted separately
    (l <= half ? first : second).push_back(l);
  }

  WeightSchedule ws;
  ws.budget_first_half = budget_first_half;
  ws.budget_second_half = budget_second_half;
  ws.budget_final = budget_final;
  ws.decay = decay;

  // An empty half donates its budget to the other; with no intermediate
  // exits at all, everything lands on the final layer.
  double b_first = budget_first_half, b_second = budget_second_half,
         b_final = budget_final;
  if (first.empty() && second.empty()) {
    b_final += b_first + b_second;
    b_first = b_second = 0.0;
  } else if (first.empty()) {
    b_second += b_first;
    b_first = 0.0;
  } else if (second.empty()) {
    b_first += b_second;
    b_second = 0.0;
  }

  auto assign = [&](const std::vector<int>& layers, double budget) {
    if (layers.empty()) return;
    double norm = 0.0, ratio = 1.0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      norm += ratio;
      ratio *= decay;
    }
    ratio = 1.0;
    for (int l : layers) {
      ws.weights[l] = budget * ratio / norm;
      ratio *= decay;
    }
  };
  assign(first, b_first);
  assign(second, b_second);
  ws.weights[sched.n_layers] = b_final;
  return ws;
}

double aggregated_loss(const std::map<int, double>& per_layer_losses,
                       const WeightSchedule& ws) {
  EXITLM_CHECK(per_layer_losses.size() == ws.weights.size(),
               "per-layer losses must cover exactly the schedule layers");
  double num = 0.0, den = 0.0;
  for (const auto& [layer, w] : ws.weights) {
    auto it = per_layer_losses.find(layer);
    EXITLM_CHECK(it != per_layer_losses.end(),
                 "missing loss for exit layer " + std::to_string(layer));
    EXITLM_CHECK(std::isfinite(it->second), "per-layer loss is not finite");
    num += w * it->second;
    den += w;
  }
  EXITLM_CHECK(den > 0.0, "weight schedule sums to zero");
  return num / den;
}

void write_loss_history_csv(const std::vector<LossRecord>& history,
                            const ExitSchedule& sched, const std::string& path) {
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write loss history: " + path);
  out << "step,aggregated_loss";
  for (int l : sched.exit_layers) out << ",loss_layer_" << l;
  out << "\n";
  for (const auto& rec : history) {
    out << rec.step << "," << rec.aggregated;
    for (int l : sched.exit_layers) {
      auto it = rec.per_layer.find(l);
      out << "," << (it == rec.per_layer.end() ? 0.0 : it->second);
    }
    out << "\n";
  }
}

}  // namespace exitlm
