#include "exitlm/evalkit.hpp"

#include "exitlm/exitenv.hpp"
#include "exitlm/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>

namespace exitlm {

using nlohmann::json;

std::vector<ContextTarget> draw_eval_set(const std::vector<const CodeSample*>& samples,
                                         const EvalConfig& cfg) {
  cfg.validate();
  EXITLM_CHECK(!samples.empty(), "evaluation split is empty");
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<ContextTarget> out;
  out.reserve(cfg.n_samples);
  int guard = 0;
  while (static_cast<int>(out.size()) < cfg.n_samples) {
    EXITLM_CHECK(++guard < cfg.n_samples * 100 + 1000,
                 "could not draw enough evaluation samples");
    const CodeSample& s = *samples[pick(rng)];
    try {
      ContextTarget ct =
          make_context_target(s, cfg.context_fraction, cfg.max_new, cfg.max_context);
      if (ct.target.empty()) continue;
      out.push_back(std::move(ct));
    } catch (const Error&) {
      continue;  // sample too short for this fraction; redraw
    }
  }
  return out;
}

namespace {

WordSeq to_words(const TokenSeq& ids) {
  ByteTokenizer tok;
  return split_words(tok.decode(ids));
}

GenerationResult run_one(const TransformerModel<Real>& model, const ExitSchedule& sched,
                         const ContextTarget& ct, const RunSpec& spec,
                         const EvalConfig& cfg, const EnergyCosts& costs) {
  ControllerConfig ctrl;
  ctrl.threshold = spec.policy ? spec.threshold : 0.9;
  ctrl.max_new = static_cast<int>(ct.target.size());
  ctrl.kv_cache = cfg.kv_cache;
  if (spec.policy) {
    return generate(model, *spec.policy, ct.context, sched, ctrl, costs);
  }
  return fixed_exit_generate(model, ct.context, spec.fixed_exit_layer, sched, ctrl,
                             costs);
}

}  // namespace

EvalRow evaluate_run(const TransformerModel<Real>& model, const ExitSchedule& sched,
                     const std::vector<ContextTarget>& eval_set, const RunSpec& spec,
                     const EvalConfig& cfg, const EnergyCosts& costs,
                     const std::set<std::string>& keywords) {
  const int n = static_cast<int>(eval_set.size());
  EXITLM_CHECK(n > 0, "empty evaluation set");

  struct SampleOut {
    double rouge = 0, bleu_v = 0, codebleu = 0, energy = 0, latency = 0, tokens = 0;
    long layers = 0, consults = 0;
  };
  std::vector<SampleOut> outs(n);

  const auto wall_before = read_energy_counter_joules();
  parallel_for(n, cfg.n_threads, [&](int i) {
    const ContextTarget& ct = eval_set[i];
    GenerationResult gen = run_one(model, sched, ct, spec, cfg, costs);
    WordSeq cand = to_words(gen.token_ids);
    WordSeq ref = to_words(ct.target);
    SampleOut& o = outs[i];
    o.rouge = ref.empty() ? 0.0 : rouge_l(cand, ref);
    o.bleu_v = ref.empty() ? 0.0 : bleu(cand, ref);
    o.codebleu = ref.empty() ? 0.0 : codebleu_lite(cand, ref, keywords);
    o.energy = gen.energy_proxy;
    o.latency = gen.latency_seconds;
    o.tokens = static_cast<double>(gen.token_ids.size());
    o.layers = gen.layers_executed_total;
    for (int c : gen.per_token_consults) o.consults += c;
  });
  const auto wall_after = read_energy_counter_joules();

  EvalRow row;
  row.label = spec.label;
  if (spec.policy) {
    row.threshold = spec.threshold;
  } else {
    row.fixed_exit_layer = spec.fixed_exit_layer;
  }
  double thr_sum = 0;
  for (const auto& o : outs) {
    row.rouge_l += o.rouge;
    row.bleu += o.bleu_v;
    row.codebleu_lite += o.codebleu;
    row.energy_proxy_total += o.energy;
    row.latency_mean += o.latency;
    row.total_tokens += static_cast<long>(o.tokens);
    row.total_layer_executions += o.layers;
    row.total_consults += o.consults;
    thr_sum += o.tokens > 0 && o.latency > 0 ? o.tokens / o.latency : 0.0;
  }
  row.rouge_l /= n;
  row.bleu /= n;
  row.codebleu_lite /= n;
  row.latency_mean /= n;
  row.throughput = thr_sum / n;
  row.mean_layers_used = row.total_tokens > 0
                             ? static_cast<double>(row.total_layer_executions) /
                                   static_cast<double>(row.total_tokens)
                             : 0.0;
  row.layers_skipped_fraction =
      1.0 - row.mean_layers_used / static_cast<double>(model.config.n_layers);
  if (wall_before && wall_after && *wall_after >= *wall_before) {
    row.wall_energy_joules = *wall_after - *wall_before;
  }
  return row;
}

EvalReport run_benchmark(const TransformerModel<Real>& lite_model,
                         const TransformerModel<Real>& base_model,
                         const ExitSchedule& sched, const InferencePolicy& policy,
                         const std::vector<const CodeSample*>& samples,
                         const EvalConfig& cfg, const EnergyCosts& costs,
                         const std::set<std::string>& keywords) {
  cfg.validate();
  auto eval_set = draw_eval_set(samples, cfg);

  EvalReport report;
  RunSpec base_spec{"base-full", nullptr, 0.0, sched.final_layer()};
  report.rows.push_back(
      evaluate_run(base_model, sched, eval_set, base_spec, cfg, costs, keywords));
  RunSpec lite_spec{"lite-full", nullptr, 0.0, sched.final_layer()};
  report.rows.push_back(
      evaluate_run(lite_model, sched, eval_set, lite_spec, cfg, costs, keywords));
  for (double t : cfg.thresholds) {
    RunSpec spec;
    spec.label = "gc@" + std::to_string(t).substr(0, 4);
    spec.policy = &policy;
    spec.threshold = t;
    report.rows.push_back(
        evaluate_run(lite_model, sched, eval_set, spec, cfg, costs, keywords));
  }
  return report;
}

EvalReport fixed_exit_sweep(const TransformerModel<Real>& model,
                            const ExitSchedule& sched,
                            const std::vector<const CodeSample*>& samples,
                            const EvalConfig& cfg, const EnergyCosts& costs,
                            const std::set<std::string>& keywords) {
  cfg.validate();
  auto eval_set = draw_eval_set(samples, cfg);
  EvalReport report;
  for (int layer : sched.exit_layers) {
    RunSpec spec{"fixed@" + std::to_string(layer), nullptr, 0.0, layer};
    report.rows.push_back(
        evaluate_run(model, sched, eval_set, spec, cfg, costs, keywords));
  }
  return report;
}

std::vector<OverheadRow> overhead_harness(const TransformerModel<Real>& model,
                                          const ExitSchedule& sched,
                                          const InferencePolicy& policy,
                                          const std::vector<const CodeSample*>& samples,
                                          const EvalConfig& cfg,
                                          const EnergyCosts& costs) {
  cfg.validate();
  auto eval_set = draw_eval_set(samples, cfg);

  // Isolated per-consult cost: policy forward + softmax + compare on
  // representative hidden vectors.
  Rng rng(cfg.seed + 17);
  const int probe_count = 256;
  MatX probes(model.config.d_model, probe_count);
  for (Eigen::Index k = 0; k < probes.size(); ++k) {
    probes.data()[k] = normal_real(rng, 0.0, 1.0);
  }
  ControllerConfig probe_cfg;
  probe_cfg.threshold = 0.9;
  volatile bool sink = false;
  for (int w = 0; w < cfg.warmup * probe_count; ++w) {
    sink = decide(policy, probes.col(w % probe_count), probe_cfg);
  }
  const int reps = 50;
  const auto c0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) {
    for (int k = 0; k < probe_count; ++k) {
      sink = decide(policy, probes.col(k), probe_cfg);
    }
  }
  const double per_consult =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - c0).count() /
      (static_cast<double>(reps) * probe_count);
  (void)sink;

  EvalConfig single = cfg;
  single.n_threads = 1;  // timing runs are single-stream

  auto run_total = [&](const RunSpec& spec, long* consults_out, double* proxy_out) {
    double seconds = 0.0, proxy = 0.0;
    long consults = 0;
    for (int w = 0; w < std::min<int>(cfg.warmup, static_cast<int>(eval_set.size()));
         ++w) {
      run_one(model, sched, eval_set[w], spec, single, costs);
    }
    for (const auto& ct : eval_set) {
      GenerationResult gen = run_one(model, sched, ct, spec, single, costs);
      seconds += gen.latency_seconds;
      proxy += gen.energy_proxy;
      for (int c : gen.per_token_consults) consults += c;
    }
    if (consults_out) *consults_out = consults;
    if (proxy_out) *proxy_out = proxy;
    return seconds;
  };

  RunSpec full_spec{"full", nullptr, 0.0, sched.final_layer()};
  double full_proxy = 0.0;
  const double full_seconds = run_total(full_spec, nullptr, &full_proxy);

  std::vector<OverheadRow> rows;
  for (double t : cfg.thresholds) {
    RunSpec spec{"gc", &policy, t, 0};
    OverheadRow row;
    row.threshold = t;
    double ee_proxy = 0.0;
    row.ee_run_seconds = run_total(spec, &row.consults, &ee_proxy);
    row.full_run_seconds = full_seconds;
    row.per_consult_seconds = per_consult;
    const double controller_time = per_consult * static_cast<double>(row.consults);
    row.controller_time_fraction = controller_time / full_seconds;
    row.controller_time_fraction_of_run = controller_time / row.ee_run_seconds;
    const double controller_energy = costs.controller * static_cast<double>(row.consults);
    row.controller_energy_fraction = controller_energy / full_proxy;
    row.controller_energy_fraction_of_run =
        ee_proxy > 0 ? controller_energy / ee_proxy : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::vector<long> optimal_exit_histogram(const TransformerModel<Real>& model,
                                         const ExitSchedule& sched,
                                         const std::vector<const CodeSample*>& samples,
                                         const EvalConfig& cfg) {
  cfg.validate();
  auto eval_set = draw_eval_set(samples, cfg);
  std::vector<long> counts(sched.n_exit_points(), 0);
  std::mutex mu;
  parallel_for(static_cast<int>(eval_set.size()), cfg.n_threads, [&](int i) {
    const auto& ct = eval_set[i];
    auto gen = generate_with_exit_records(model, sched, ct.context,
                                          static_cast<int>(ct.target.size()));
    std::lock_guard<std::mutex> lock(mu);
    for (int idx : gen.records.opt_idx) counts[idx] += 1;
  });
  return counts;
}

namespace {
std::string opt_str(const std::optional<double>& v) {
  return v ? std::to_string(*v) : "";
}
}  // namespace

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write report: " + path.string());
  out << "report_version,label,threshold,fixed_exit_layer,rouge_l,bleu,codebleu_lite,"
         "energy_proxy_total,wall_energy_joules,latency_mean_s,throughput_tok_s,"
         "mean_layers_used,layers_skipped_fraction,total_tokens,"
         "total_layer_executions,total_consults\n";
  for (const auto& r : report.rows) {
    out << report.report_version << "," << r.label << "," << opt_str(r.threshold) << ","
        << (r.fixed_exit_layer ? std::to_string(*r.fixed_exit_layer) : "") << ","
        << r.rouge_l << "," << r.bleu << "," << r.codebleu_lite << ","
        << r.energy_proxy_total << "," << opt_str(r.wall_energy_joules) << ","
        << r.latency_mean << "," << r.throughput << "," << r.mean_layers_used << ","
        << r.layers_skipped_fraction << "," << r.total_tokens << ","
        << r.total_layer_executions << "," << r.total_consults << "\n";
  }
}

void write_report_json(const EvalReport& report, const std::filesystem::path& path) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    json j = {{"label", r.label},
              {"rouge_l", r.rouge_l},
              {"bleu", r.bleu},
              {"codebleu_lite", r.codebleu_lite},
              {"energy_proxy_total", r.energy_proxy_total},
              {"latency_mean_s", r.latency_mean},
              {"throughput_tok_s", r.throughput},
              {"mean_layers_used", r.mean_layers_used},
              {"layers_skipped_fraction", r.layers_skipped_fraction},
              {"total_tokens", r.total_tokens},
              {"total_layer_executions", r.total_layer_executions},
              {"total_consults", r.total_consults}};
    if (r.threshold) j["threshold"] = *r.threshold;
    if (r.fixed_exit_layer) j["fixed_exit_layer"] = *r.fixed_exit_layer;
    if (r.wall_energy_joules) j["wall_energy_joules"] = *r.wall_energy_joules;
    rows.push_back(std::move(j));
  }
  json j = {{"report_version", report.report_version}, {"rows", rows}};
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

void write_overhead_csv(const std::vector<OverheadRow>& rows,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write overhead report: " + path.string());
  out << "threshold,consults,per_consult_seconds,ee_run_seconds,full_run_seconds,"
         "controller_time_fraction,controller_time_fraction_of_run,"
         "controller_energy_fraction,controller_energy_fraction_of_run\n";
  for (const auto& r : rows) {
    out << r.threshold << "," << r.consults << "," << r.per_consult_seconds << ","
        << r.ee_run_seconds << "," << r.full_run_seconds << ","
        << r.controller_time_fraction << "," << r.controller_time_fraction_of_run << ","
        << r.controller_energy_fraction << "," << r.controller_energy_fraction_of_run
        << "\n";
  }
}

void write_histogram_csv(const std::vector<long>& counts, const ExitSchedule& sched,
                         const std::filesystem::path& path) {
  EXITLM_CHECK(counts.size() == static_cast<std::size_t>(sched.n_exit_points()),
               "histogram size mismatch");
  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write histogram: " + path.string());
  out << "exit_index,exit_layer,count\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out << i << "," << sched.exit_layers[i] << "," << counts[i] << "\n";
  }
}

void write_svg_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<double>& x, const std::vector<Series>& series) {
  EXITLM_CHECK(!x.empty() && !series.empty(), "empty chart data");
  const double width = 640, height = 400, ml = 70, mr = 20, mt = 40, mb = 50;
  double ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    EXITLM_CHECK(s.y.size() == x.size(), "series length mismatch");
    for (double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (ymax <= ymin) ymax = ymin + 1.0;
  const double xmin = x.front(), xmax = x.back() > x.front() ? x.back() : x.front() + 1;
  auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto py = [&](double v) {
    return height - mb - (v - ymin) / (ymax - ymin) * (height - mt - mb);
  };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ofstream out(path);
  EXITLM_CHECK(out.good(), "cannot write chart: " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
      << height << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='16'>"
      << title << "</text>\n";
  out << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr
      << "' y2='" << height - mb << "' stroke='black'/>\n";
  out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='"
      << height - mb << "' stroke='black'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = ymin + (ymax - ymin) * k / 4;
    out << "<text x='" << ml - 8 << "' y='" << py(yv) + 4
        << "' text-anchor='end' font-size='11'>" << yv << "</text>\n";
  }
  for (double xv : x) {
    out << "<text x='" << px(xv) << "' y='" << height - mb + 18
        << "' text-anchor='middle' font-size='11'>" << xv << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    out << "<polyline fill='none' stroke='" << colors[s % 5] << "' stroke-width='2' points='";
    for (std::size_t i = 0; i < x.size(); ++i) {
      out << px(x[i]) << "," << py(series[s].y[i]) << " ";
    }
    out << "'/>\n";
    out << "<text x='" << width - mr - 4 << "' y='" << mt + 16 * s + 4
        << "' text-anchor='end' font-size='12' fill='" << colors[s % 5] << "'>"
        << series[s].name << "</text>\n";
  }
  out << "</svg>\n";
}

std::optional<double> read_energy_counter_joules() {
  std::ifstream in("/sys/class/powercap/intel-rapl:0/energy_uj");
  if (!in.good()) return std::nullopt;
  long long uj = 0;
  in >> uj;
  if (!in.good() && !in.eof()) return std::nullopt;
  return static_cast<double>(uj) / 1e6;
}

}  // namespace exitlm
