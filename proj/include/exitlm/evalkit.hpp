#pragma once

#include "exitlm/common.hpp"
#include "exitlm/controller.hpp"
#include "exitlm/corpus.hpp"
#include "exitlm/lite.hpp"
#include "exitlm/metrics.hpp"
#include "exitlm/model.hpp"
#include "exitlm/ppo.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace exitlm {

struct EvalConfig {
  int n_samples = 1000;  // desk runs use 200
  double context_fraction = 0.2;
  int max_new = 15;
  int max_context = 512;
  std::vector<double> thresholds{0.6, 0.8, 0.9, 0.91, 0.92};
  std::uint64_t seed = 0;
  bool kv_cache = false;
  int n_threads = 2;
  int warmup = 3;  // warmup generations before timing-sensitive runs

  void validate() const {
    EXITLM_CHECK(n_samples >= 1, "n_samples must be positive");
    EXITLM_CHECK(context_fraction > 0 && context_fraction < 1,
                 "context_fraction must lie in (0,1)");
    EXITLM_CHECK(max_new >= 1 && max_context >= 1, "invalid eval config");
    for (double t : thresholds) {
      EXITLM_CHECK(t > 0 && t < 1, "thresholds must lie in (0,1)");
    }
  }
};

struct EvalRow {
  std::string label;
  std::optional<double> threshold;  // empty for baselines / fixed exits
  std::optional<int> fixed_exit_layer;
  double rouge_l = 0.0;
  double bleu = 0.0;
  double codebleu_lite = 0.0;
  double energy_proxy_total = 0.0;
  std::optional<double> wall_energy_joules;  // platform counter, when exposed
  double latency_mean = 0.0;
  double throughput = 0.0;  // tokens/second, per-request mean
  double mean_layers_used = 0.0;
  double layers_skipped_fraction = 0.0;
  long total_tokens = 0;
  long total_layer_executions = 0;
  long total_consults = 0;
};

struct EvalReport {
  int report_version = 1;
  std::vector<EvalRow> rows;
};

// Context/target pairs drawn from a split (seeded, size n_samples).
std::vector<ContextTarget> draw_eval_set(const std::vector<const CodeSample*>& samples,
                                         const EvalConfig& cfg);

// Scores one generation strategy over the eval set. `mode` selects dynamic
// (policy + threshold) or fixed-exit decoding.
struct RunSpec {
  std::string label;
  const InferencePolicy* policy = nullptr;  // dynamic when set
  double threshold = 0.9;
  int fixed_exit_layer = 0;  // used when policy == nullptr
};

EvalRow evaluate_run(const TransformerModel<Real>& model, const ExitSchedule& sched,
                     const std::vector<ContextTarget>& eval_set, const RunSpec& spec,
                     const EvalConfig& cfg, const EnergyCosts& costs,
                     const std::set<std::string>& keywords);

// Baselines (full base model, full LITE model) followed by one row per
// threshold, mirroring the benchmark table layout.
EvalReport run_benchmark(const TransformerModel<Real>& lite_model,
                         const TransformerModel<Real>& base_model,
                         const ExitSchedule& sched, const InferencePolicy& policy,
                         const std::vector<const CodeSample*>& samples,
                         const EvalConfig& cfg, const EnergyCosts& costs,
                         const std::set<std::string>& keywords);

// One row per schedule layer with every token decoded there.
EvalReport fixed_exit_sweep(const TransformerModel<Real>& model,
                            const ExitSchedule& sched,
                            const std::vector<const CodeSample*>& samples,
                            const EvalConfig& cfg, const EnergyCosts& costs,
                            const std::set<std::string>& keywords);

struct OverheadRow {
  double threshold = 0.0;
  long consults = 0;
  double per_consult_seconds = 0.0;   // isolated microbenchmark
  double ee_run_seconds = 0.0;        // end-to-end dynamic generation
  double full_run_seconds = 0.0;      // full-model generation, same samples
  // Isolated controller time over the full-model runtime (fixed
  // denominator, so the threshold trend reflects consult counts alone) and
  // over the dynamic run's own runtime.
  double controller_time_fraction = 0.0;
  double controller_time_fraction_of_run = 0.0;
  double controller_energy_fraction = 0.0;         // proxy units vs full model
  double controller_energy_fraction_of_run = 0.0;  // proxy units vs own run
};

// Single-stream isolated overhead measurement: the per-consult cost comes
// from a dedicated microbenchmark rather than nested timers.
std::vector<OverheadRow> overhead_harness(const TransformerModel<Real>& model,
                                          const ExitSchedule& sched,
                                          const InferencePolicy& policy,
                                          const std::vector<const CodeSample*>& samples,
                                          const EvalConfig& cfg,
                                          const EnergyCosts& costs);

// Histogram of optimal exit indices over generated tokens of the eval set.
std::vector<long> optimal_exit_histogram(const TransformerModel<Real>& model,
                                         const ExitSchedule& sched,
                                         const std::vector<const CodeSample*>& samples,
                                         const EvalConfig& cfg);

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
void write_report_json(const EvalReport& report, const std::filesystem::path& path);
void write_overhead_csv(const std::vector<OverheadRow>& rows,
                        const std::filesystem::path& path);
void write_histogram_csv(const std::vector<long>& counts, const ExitSchedule& sched,
                         const std::filesystem::path& path);

// Minimal SVG line chart (score/energy vs threshold plots).
struct Series {
  std::string name;
  std::vector<double> y;
};
void write_svg_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<double>& x, const std::vector<Series>& series);

// Reads the platform energy counter (RAPL) when exposed; nullopt otherwise.
std::optional<double> read_energy_counter_joules();

}  // namespace exitlm
