#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "tree/cache.hpp"
#include "tree/trace_io.hpp"

namespace tree::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

EvalReport evaluate_traces(std::span<const PipelineTrace> traces, const std::string& dataset,
                           std::optional<MetricKind> metric, VqaVariant variant,
                           std::optional<DatasetFormat> format) {
  if (!metric && format == DatasetFormat::gqa) metric = MetricKind::exact_match;
  if (!metric) {
    for (const auto& trace : traces) {
      if (std::holds_alternative<MatrixIqInstance>(trace.instance)) {
        metric = MetricKind::multiple_choice;
        break;
      }
      if (const auto& qa = std::get<QaInstance>(trace.instance);
          !qa.gold_answers.empty() || qa.gold_choice_index) {
        metric = default_metric(qa);
        break;
      }
    }
  }
  ReportMetadata metadata{dataset, metric.value_or(MetricKind::vqa_soft_accuracy), std::nullopt, 0, 0};
  if (metadata.metric == MetricKind::vqa_soft_accuracy) metadata.vqa_variant = variant;

  std::map<std::string, double> scores;
  for (const auto& trace : traces) {
    if (!trace.succeeded()) {
      ++metadata.failed;
      continue;
    }
    std::optional<double> score;
    if (const auto* qa = std::get_if<QaInstance>(&trace.instance)) {
      score = score_qa(*qa, *trace.final, metadata.metric, variant);
    } else {
      const auto& matrix = std::get<MatrixIqInstance>(trace.instance);
      if (matrix.gold_candidate_index && trace.final->chosen_index) {
        score = *trace.final->chosen_index == *matrix.gold_candidate_index ? 1.0 : 0.0;
      }
    }
    if (score) {
      scores[trace.instance_id] = *score;
    } else {
      ++metadata.skipped;
    }
  }
  if (scores.empty()) throw Error(ErrorKind::empty_report, "no scored instances in " + dataset);
  return aggregate(scores, metadata);
}

std::string report_json(const std::string& label, std::span<const EvalReport> reports) {
  ordered_json j;
  j["label"] = label;
  j["reports"] = ordered_json::array();
  for (const auto& report : reports) {
    ordered_json r;
    r["dataset"] = report.dataset;
    r["metric"] = to_string(report.metric);
    if (report.vqa_variant) r["vqa_variant"] = to_string(*report.vqa_variant);
    r["aggregate"] = report.aggregate;
    r["aggregate_text"] = format_percent(report.aggregate);
    r["evaluated"] = report.counts.evaluated;
    r["failed"] = report.counts.failed;
    r["skipped"] = report.counts.skipped;
    r["scores"] = ordered_json::object();
    for (const auto& [id, score] : report.scores) r["scores"][id] = score;
    j["reports"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::size_t> limit;
  std::optional<std::uint64_t> seed;
  std::optional<int> concurrency;
  bool no_cache = false;
  std::string out = "out";
};

struct RunSession {
  CliConfig config;
  std::shared_ptr<CallCache> cache;
  std::unique_ptr<Pipeline> pipeline;
};

RunSession open_session(const GlobalOptions& options) {
  if (options.config.empty()) throw Error(ErrorKind::configuration, "--config is required");
  RunSession session;
  session.config = load_config(options.config);
  auto& run = session.config.run;
  if (options.concurrency) run.concurrency_limit = *options.concurrency;
  if (options.no_cache) run.cache_enabled = false;
  for (auto& spec : session.config.datasets) {
    if (options.limit) spec.manifest.limit = options.limit;
    if (options.seed) spec.manifest.seed = options.seed;
  }
  if (session.config.datasets.empty()) throw Error(ErrorKind::configuration, "config names no dataset");
  if (run.concurrency_limit < 1) throw Error(ErrorKind::configuration, "--concurrency must be >= 1");
  if (run.cache_enabled) session.cache = std::make_shared<CallCache>(*run.cache_dir);
  std::vector<Demonstration> demos;
  if (run.demo_source && run.demo_count > 0) demos = load_demonstrations(*run.demo_source, run.demo_count);
  session.pipeline = std::make_unique<Pipeline>(run, make_backends(run, session.cache), std::move(demos));
  return session;
}

void record_cache_run(const RunSession& session) {
  if (!session.cache) return;
  append_run_stats(session.cache->dir(), {session.config.run.label, session.pipeline->digest(),
                                          utc_timestamp(), session.cache->hits(), session.cache->misses()});
}

std::vector<Instance> load_instances(const DatasetSpec& spec, std::ostream& err) {
  std::vector<Instance> instances;
  std::vector<std::string> warnings;
  if (spec.manifest.format == DatasetFormat::matrix_dir) {
    auto loaded = load_matrix(spec.manifest);
    instances.assign(loaded.instances.begin(), loaded.instances.end());
    warnings = std::move(loaded.warnings);
  } else {
    auto loaded = load_qa(spec.manifest);
    instances.assign(loaded.instances.begin(), loaded.instances.end());
    warnings = std::move(loaded.warnings);
  }
  for (const auto& w : warnings) err << "warning: " << spec.manifest.name << ": " << w << "\n";
  return instances;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::output_error, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::output_error, "failed writing " + path.string());
}

void report_failures(std::span<const PipelineTrace> traces, std::ostream& err) {
  for (const auto& trace : traces) {
    if (trace.failure) {
      err << "warning: instance " << trace.instance_id << " failed at " << trace.failure->stage << " ("
          << to_string(trace.failure->kind) << "): " << trace.failure->message << "\n";
    }
  }
}

int cmd_run(const GlobalOptions& options, std::ostream& out, std::ostream& err) {
  auto session = open_session(options);
  const fs::path out_dir = options.out;
  ReportTable table;
  table.columns.clear();
  ReportTable::Row row{session.config.run.label, {}};
  std::vector<EvalReport> reports;
  bool any_failure = false;

  for (const auto& spec : session.config.datasets) {
    const auto instances = load_instances(spec, err);
    const auto traces = run_dataset(*session.pipeline, instances, session.config.run.concurrency_limit);
    const auto trace_dir = out_dir / "traces" / spec.manifest.name;
    for (const auto& trace : traces) write_trace_file(trace_dir, trace);
    report_failures(traces, err);
    any_failure = any_failure || std::any_of(traces.begin(), traces.end(),
                                             [](const PipelineTrace& t) { return t.failure.has_value(); });
    table.columns.push_back(spec.manifest.name);
    try {
      reports.push_back(evaluate_traces(traces, spec.manifest.name, spec.metric,
                                        session.config.vqa_variant, spec.manifest.format));
      row.values.push_back(reports.back().aggregate);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::empty_report) throw;
      err << "warning: " << e.what() << "\n";
      row.values.push_back(std::nullopt);
    }
  }
  table.rows.push_back(row);
  record_cache_run(session);

  const auto rendered = table.render();
  std::string details;
  for (const auto& report : reports) {
    details += report.dataset + ": " + std::string(to_string(report.metric)) +
               (report.vqa_variant ? " (" + std::string(to_string(*report.vqa_variant)) + ")" : "") +
               ", evaluated " + std::to_string(report.counts.evaluated) + ", failed " +
               std::to_string(report.counts.failed) + ", skipped " + std::to_string(report.counts.skipped) +
               "\n";
  }
  write_text(out_dir / "report.txt", rendered + details);
  write_text(out_dir / "report.json", report_json(session.config.run.label, reports));
  out << rendered << details;
  return any_failure ? kExitPartial : kExitOk;
}

struct IqOptions {
  bool with_random_baseline = false;
  std::size_t repetitions = 1000;
};

int cmd_iq(const GlobalOptions& options, const IqOptions& iq, std::ostream& out, std::ostream& err) {
  auto session = open_session(options);
  const fs::path out_dir = options.out;
  ReportTable table;
  table.label_header = "Method";
  ReportTable::Row random_row{"Random", {}};
  ReportTable::Row model_row{session.config.run.label, {}};
  std::vector<EvalReport> reports;
  bool any_failure = false;
  bool any_labeled = false;
  std::string predictions;

  for (const auto& spec : session.config.datasets) {
    if (spec.manifest.format != DatasetFormat::matrix_dir) {
      throw Error(ErrorKind::configuration, "iq needs matrix_dir datasets; '" + spec.manifest.name +
                                                "' is " + std::string(to_string(spec.manifest.format)));
    }
    const auto instances = load_instances(spec, err);
    const auto traces = run_dataset(*session.pipeline, instances, session.config.run.concurrency_limit);
    const auto trace_dir = out_dir / "traces" / spec.manifest.name;
    for (const auto& trace : traces) write_trace_file(trace_dir, trace);
    report_failures(traces, err);
    any_failure = any_failure || std::any_of(traces.begin(), traces.end(),
                                             [](const PipelineTrace& t) { return t.failure.has_value(); });
    for (const auto& trace : traces) {
      predictions += trace.instance_id + "\t" +
                     (trace.final && trace.final->chosen_index
                          ? "a" + std::to_string(*trace.final->chosen_index + 1)
                          : std::string("-")) +
                     "\n";
    }

    table.columns.push_back(spec.manifest.name + "(%)");
    std::vector<std::size_t> counts;
    std::vector<std::size_t> golds;
    for (const auto& instance : instances) {
      const auto& m = std::get<MatrixIqInstance>(instance);
      if (m.gold_candidate_index) {
        counts.push_back(m.candidate_images.size());
        golds.push_back(*m.gold_candidate_index);
      }
    }
    any_labeled = any_labeled || !golds.empty();
    if (iq.with_random_baseline && !golds.empty()) {
      const auto seed = spec.manifest.seed.value_or(options.seed.value_or(0));
      random_row.values.push_back(random_baseline_accuracy(counts, golds, iq.repetitions, seed));
    } else {
      random_row.values.push_back(std::nullopt);
    }
    try {
      reports.push_back(evaluate_traces(traces, spec.manifest.name, MetricKind::multiple_choice,
                                        session.config.vqa_variant));
      model_row.values.push_back(reports.back().aggregate);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::empty_report) throw;
      model_row.values.push_back(std::nullopt);
    }
  }
  record_cache_run(session);
  write_text(out_dir / "predictions.tsv", predictions);
  write_text(out_dir / "report.json", report_json(session.config.run.label, reports));
  if (!any_labeled) {
    out << predictions;
    return any_failure ? kExitPartial : kExitOk;
  }
  if (iq.with_random_baseline) table.rows.push_back(random_row);
  table.rows.push_back(model_row);
  const auto rendered = table.render();
  write_text(out_dir / "report.txt", rendered);
  out << rendered;
  return any_failure ? kExitPartial : kExitOk;
}

struct EvalOptions {
  std::string traces;
  std::string name;
  std::string metric = "auto";
  std::string vqa_variant = "simple";
};

int cmd_eval(const EvalOptions& eval, const GlobalOptions& options, std::ostream& out) {
  const auto traces = read_trace_dir(eval.traces);
  if (traces.empty()) throw Error(ErrorKind::configuration, "no traces under " + eval.traces);
  std::optional<MetricKind> metric;
  if (eval.metric != "auto") {
    metric = parse_metric_kind(eval.metric);
    if (!metric) throw Error(ErrorKind::configuration, "unknown metric " + eval.metric);
  }
  const auto variant = parse_vqa_variant(eval.vqa_variant);
  if (!variant) throw Error(ErrorKind::configuration, "unknown vqa variant " + eval.vqa_variant);
  const auto name = eval.name.empty() ? fs::path(eval.traces).filename().string() : eval.name;
  const std::vector<EvalReport> reports{evaluate_traces(traces, name, metric, *variant)};
  ReportTable table;
  table.columns = {name};
  table.rows.push_back({"traces", {reports.front().aggregate}});
  out << table.render();
  const auto& counts = reports.front().counts;
  out << name << ": " << to_string(reports.front().metric) << ", evaluated " << counts.evaluated
      << ", failed " << counts.failed << ", skipped " << counts.skipped << "\n";
  if (options.out != "out") write_text(fs::path(options.out) / "report.json", report_json("traces", reports));
  return kExitOk;
}

int cmd_export(const std::string& trace_dir, const std::string& out_path, std::ostream& out) {
  if (!fs::is_directory(trace_dir)) throw Error(ErrorKind::configuration, "not a directory: " + trace_dir);
  const auto traces = read_trace_dir(trace_dir);
  if (traces.empty()) throw Error(ErrorKind::configuration, "no traces under " + trace_dir);
  std::map<std::string, double> scores;
  for (const auto& trace : traces) {
    const auto* qa = std::get_if<QaInstance>(&trace.instance);
    if (qa == nullptr || !trace.succeeded()) continue;
    if (auto score = score_qa(*qa, *trace.final, default_metric(*qa))) scores[trace.instance_id] = *score;
  }
  const auto result = export_rationales(traces, fs::path(out_path), scores);
  out << "exported " << result.written << " rationale records to " << out_path << " (skipped "
      << result.skipped << ")\n";
  return kExitOk;
}

int cmd_cache_stats(const GlobalOptions& options, const std::string& cache_dir_flag, bool compact,
                    std::ostream& out) {
  fs::path dir = cache_dir_flag;
  if (dir.empty()) {
    if (options.config.empty()) throw Error(ErrorKind::configuration, "give --cache-dir or --config");
    dir = *load_config(options.config).run.cache_dir;
  }
  if (!fs::is_directory(dir)) throw Error(ErrorKind::configuration, "no cache at " + dir.string());
  CallCache cache(dir);
  if (compact) cache.compact();
  std::error_code ec;
  const auto bytes = fs::file_size(cache.log_path(), ec);
  out << "cache: " << dir.string() << "\n";
  out << "entries: " << cache.size() << "\n";
  out << "log bytes: " << (ec ? 0 : bytes) << (compact ? " (compacted)" : "") << "\n";
  const auto runs = read_run_stats(dir);
  out << "runs: " << runs.size() << "\n";
  for (const auto& run : runs) {
    out << "  " << run.finished_at << "  " << run.run_label << "  hits " << run.hits << "  misses "
        << run.misses << "  config " << run.config_digest.substr(0, 12) << "\n";
  }
  return kExitOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  const auto trace = read_trace_file(path);
  out << "instance: " << trace.instance_id << "\n";
  out << "config: " << trace.config_digest << "\n";
  for (const auto& record : trace.records) {
    out << "[" << to_string(record.stage) << "] " << record.backend_id;
    if (record.image_id) out << " image=" << *record.image_id;
    out << (record.cache_hit ? " (cached)" : "") << " " << record.latency_ms << "ms\n";
    out << "  prompt: " << nlohmann::json(record.prompt.rendered).dump() << "\n";
    out << "  completion: " << nlohmann::json(record.completion).dump() << "\n";
    if (record.error) out << "  error: " << *record.error << "\n";
  }
  if (trace.rationale) out << "rationale: " << trace.rationale->text << "\n";
  if (trace.final) {
    out << "final: " << trace.final->raw << " (normalized: " << trace.final->normalized << ")";
    if (trace.final->chosen_index) out << " choice " << *trace.final->chosen_index;
    out << "\n";
  }
  if (trace.failure) {
    out << "failure: " << trace.failure->stage << " " << to_string(trace.failure->kind) << ": "
        << trace.failure->message << "\n";
  }
  for (const auto& flag : trace.flags) out << "flag: " << flag << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Observe / think / re-think pipeline runner", "treectl"};
  app.require_subcommand(1, 1);
  GlobalOptions options;
  app.add_option("--config", options.config, "TOML run configuration");
  app.add_option("--limit", options.limit, "Evaluate a seeded subsample of N instances")
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", options.seed, "Seed for subsampling and random baselines");
  app.add_option("--concurrency", options.concurrency, "Instances processed in parallel")
      ->check(CLI::PositiveNumber);
  app.add_flag("--no-cache", options.no_cache, "Bypass the call cache");
  app.add_option("--out", options.out, "Output directory (or file for export-rationales)");

  auto* run = app.add_subcommand("run", "Run the pipeline over the configured datasets");
  auto* eval = app.add_subcommand("eval", "Score an existing trace directory");
  auto* iq = app.add_subcommand("iq", "Run matrix reasoning tasks");
  auto* exporter = app.add_subcommand("export-rationales", "Export rationale JSONL from traces");
  auto* stats = app.add_subcommand("cache-stats", "Report cache entries and per-run hit counts");
  auto* inspect = app.add_subcommand("inspect-trace", "Print one trace file");
  for (auto* sub : {run, eval, iq, exporter, stats, inspect}) sub->fallthrough();

  EvalOptions eval_options;
  eval->add_option("traces", eval_options.traces, "Trace directory")->required();
  eval->add_option("--name", eval_options.name, "Dataset column name");
  eval->add_option("--metric", eval_options.metric, "auto|vqa_soft_accuracy|exact_match|multiple_choice");
  eval->add_option("--vqa-variant", eval_options.vqa_variant, "simple|subset_averaged");

  IqOptions iq_options;
  iq->add_flag("--with-random-baseline", iq_options.with_random_baseline, "Add a uniform-random row");
  iq->add_option("--baseline-repetitions", iq_options.repetitions, "Random draws per task")
      ->check(CLI::PositiveNumber);

  std::string export_traces;
  exporter->add_option("--traces", export_traces, "Trace directory")->required();

  std::string cache_dir;
  bool compact = false;
  stats->add_option("--cache-dir", cache_dir, "Cache directory (default: from --config)");
  stats->add_flag("--compact", compact, "Rewrite the log with one record per key");

  std::string trace_path;
  inspect->add_option("trace", trace_path, "Trace JSON file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (run->parsed()) return cmd_run(options, out, err);
    if (iq->parsed()) return cmd_iq(options, iq_options, out, err);
    if (eval->parsed()) return cmd_eval(eval_options, options, out);
    if (exporter->parsed()) {
      if (options.out == "out") throw Error(ErrorKind::configuration, "--out <file.jsonl> is required");
      return cmd_export(export_traces, options.out, out);
    }
    if (stats->parsed()) return cmd_cache_stats(options, cache_dir, compact, out);
    if (inspect->parsed()) return cmd_inspect(trace_path, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return e.kind() == ErrorKind::stage_failure ? kExitPartial : kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace tree::cli
