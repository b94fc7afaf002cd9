#include "cmitune/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmitune/checkpoint.hpp"
#include "cmitune/config.hpp"
#include "cmitune/distiller.hpp"
#include "cmitune/report_io.hpp"

namespace cmitune {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint_path;
  std::string run_dir;
  int jobs = 1;
  std::optional<uint64_t> seed_override;
};

fs::path resolve_out_dir(const CliOptions& opts, const RunConfigFile& cfg) {
  if (!opts.out_dir.empty()) return opts.out_dir;
  if (cfg.output_dir) return *cfg.output_dir;
  if (const char* env = std::getenv("CMI_TUNE_OUT")) {
    if (*env != '\0') return fs::path(env);
  }
  throw ConfigError("no output directory: pass --out, set output.dir, or export CMI_TUNE_OUT");
}

json config_echo(const RunConfigFile& cfg, const std::string& command, uint64_t effective_seed) {
  return json{{"file", cfg.raw}, {"command", command}, {"seed", effective_seed}};
}

std::string num_tag(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CliOptions& opts) {
  RunConfigFile cfg = load_config(opts.config_path);
  if (!cfg.model || !cfg.data || !cfg.train) {
    throw ConfigError("train: config needs model, data and train sections");
  }
  TrainConfig train_cfg = cfg.train->config;
  if (opts.seed_override) train_cfg.seed = *opts.seed_override;
  train_cfg.eval_metric = cfg.data->metric;
  train_cfg.validate();
  const fs::path out = resolve_out_dir(opts, cfg);
  fs::create_directories(out);

  BuiltData data = build_data(*cfg.data, *cfg.model);
  if (data.vocab && !cfg.data->vocab_path) save_vocab(*data.vocab, out / "vocab.txt");

  const json echo = config_echo(cfg, "train", train_cfg.seed);
  try {
    FitResult result = fit(*cfg.model, data.train, data.dev, train_cfg);
    write_run_artifacts(result.report, echo, out);
    save_checkpoint(result.params, out / "checkpoint.ckpt");
    std::cout << "train: best epoch " << result.report.best_epoch << ", "
              << result.report.metric << " " << csv_double(result.report.best_metric) << "\n";
    return 0;
  } catch (const TrainingDivergedError& e) {
    if (e.last_good) save_checkpoint(*e.last_good, out / "checkpoint.last_good.ckpt");
    json err{{"error", e.what()}, {"epoch", e.epoch}, {"step", e.step}};
    write_text_file(out / "error.json", err.dump(2) + "\n");
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 4;
  }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fs::path sweep_cell_dir(const fs::path& out, double lambda, int run_index) {
  return out / "cells" / ("lambda_" + num_tag(lambda) + "_run" + std::to_string(run_index));
}

uint64_t sweep_cell_fingerprint(const RunConfigFile& cfg, double lambda, uint64_t seed) {
  json cell{{"model", cfg.raw.value("model", json::object())},
            {"data", cfg.raw.value("data", json::object())},
            {"train", cfg.raw.value("train", json::object())},
            {"lambda", lambda},
            {"seed", seed}};
  cell["train"].erase("lambda_grid");
  cell["train"].erase("lambda");
  cell["train"].erase("seed");
  return json_fingerprint(cell);
}

int cmd_sweep(const CliOptions& opts) {
  RunConfigFile cfg = load_config(opts.config_path);
  if (!cfg.model || !cfg.data || !cfg.train) {
    throw ConfigError("sweep: config needs model, data and train sections");
  }
  if (cfg.train->lambda_grid.empty()) {
    throw ConfigError("sweep: train.lambda_grid must be a nonempty array");
  }
  TrainConfig base = cfg.train->config;
  if (opts.seed_override) base.seed = *opts.seed_override;
  base.eval_metric = cfg.data->metric;
  if (base.cmi_sign == CmiSign::off) {
    throw ConfigError("sweep: cmi_sign must be 'min' or 'max' to sweep lambda");
  }
  const fs::path out = resolve_out_dir(opts, cfg);
  fs::create_directories(out / "cells");

  BuiltData data = build_data(*cfg.data, *cfg.model);

  char hexbuf[17];
  SweepHooks hooks;
  hooks.lookup = [&](double lambda, int run_index) -> std::optional<SweepRun> {
    const fs::path dir = sweep_cell_dir(out, lambda, run_index);
    const fs::path marker = dir / "cell.json";
    const fs::path report_path = dir / "report.json";
    if (!fs::exists(marker) || !fs::exists(report_path)) return std::nullopt;
    try {
      json cell = json::parse(read_text_file(marker));
      const uint64_t seed = base.seed + static_cast<uint64_t>(run_index);
      std::snprintf(hexbuf, sizeof(hexbuf), "%016llx",
                    static_cast<unsigned long long>(sweep_cell_fingerprint(cfg, lambda, seed)));
      if (cell.value("fingerprint", "") != hexbuf || cell.value("status", "") != "ok") {
        return std::nullopt;
      }
      SweepRun cached;
      cached.lambda = lambda;
      cached.run_index = run_index;
      cached.seed = seed;
      cached.report = run_report_from_json(json::parse(read_text_file(report_path)));
      return cached;
    } catch (const Error&) {
      return std::nullopt;
    } catch (const json::exception&) {
      return std::nullopt;
    }
  };
  hooks.persist = [&](const SweepRun& run) {
    const fs::path dir = sweep_cell_dir(out, run.lambda, run.run_index);
    fs::create_directories(dir);
    std::snprintf(hexbuf, sizeof(hexbuf), "%016llx",
                  static_cast<unsigned long long>(sweep_cell_fingerprint(cfg, run.lambda, run.seed)));
    json cell{{"lambda", run.lambda},
              {"run_index", run.run_index},
              {"seed", run.seed},
              {"status", run.failed ? "failed" : "ok"},
              {"fingerprint", hexbuf}};
    if (run.failed) {
      cell["error"] = run.error;
      write_text_file(dir / "cell.json", cell.dump(2) + "\n");
      return;
    }
    write_run_artifacts(run.report, config_echo(cfg, "sweep", run.seed), dir);
    save_checkpoint(run.params, dir / "checkpoint.ckpt");
    write_text_file(dir / "cell.json", cell.dump(2) + "\n");
  };

  SweepResult result = sweep(*cfg.model, data.train, data.dev, base, cfg.train->lambda_grid,
                             cfg.train->runs_per_config, &hooks, opts.jobs);

  // summary.csv: one row per run, λ-major; the metric/CMI ratio feeds
  // teacher selection.
  std::ostringstream csv;
  csv << "lambda,run_index,seed,status,metric,cmi,best_epoch,objective,ratio,is_median,checkpoint\n";
  std::vector<bool> is_median(result.runs.size(), false);
  for (int64_t mi : result.median_index) {
    if (mi >= 0) is_median[static_cast<size_t>(mi)] = true;
  }
  for (size_t i = 0; i < result.runs.size(); ++i) {
    const SweepRun& run = result.runs[i];
    csv << num_tag(run.lambda) << "," << run.run_index << "," << run.seed << ",";
    if (run.failed) {
      csv << "failed,,,,,," << 0 << ",\n";
      continue;
    }
    const double cmi = run.report.final_cmi_train.value_or(0.0);
    const double objective = run.report.epochs.empty() ? 0.0 : run.report.epochs.back().objective;
    csv << "ok," << csv_double(run.report.best_metric) << "," << csv_double(cmi) << ","
        << run.report.best_epoch << "," << csv_double(objective) << ",";
    if (cmi > 0) csv << csv_double(run.report.best_metric / cmi);
    csv << "," << (is_median[i] ? 1 : 0) << ","
        << (sweep_cell_dir(out, run.lambda, run.run_index) / "checkpoint.ckpt").lexically_relative(out).generic_string()
        << "\n";
  }
  write_text_file(out / "summary.csv", csv.str());
  std::cout << "sweep: " << result.runs.size() << " runs, summary at "
            << (out / "summary.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

struct SummaryRow {
  double lambda = 0;
  int run_index = 0;
  double metric = 0;
  double cmi = 0;
  bool is_median = false;
  std::string checkpoint;
};

std::vector<SummaryRow> parse_sweep_summary(const fs::path& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("sweep summary is empty: " + path.string());
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() >= 4 && fields[3] != "ok") continue;  // failed runs are recorded, not used
    if (fields.size() < 11) throw DataError("sweep summary row has too few columns: " + line);
    SummaryRow row;
    row.lambda = std::stod(fields[0]);
    row.run_index = std::stoi(fields[1]);
    row.metric = std::stod(fields[4]);
    row.cmi = fields[5].empty() ? 0.0 : std::stod(fields[5]);
    row.is_median = fields[9] == "1";
    row.checkpoint = fields[10];
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_distill(const CliOptions& opts) {
  RunConfigFile cfg = load_config(opts.config_path);
  if (!cfg.data || !cfg.distill) {
    throw ConfigError("distill: config needs data and distill sections");
  }
  DistillSection section = *cfg.distill;
  if (opts.seed_override) section.options.seed = *opts.seed_override;
  section.options.eval_metric = cfg.data->metric;
  const fs::path out = resolve_out_dir(opts, cfg);
  fs::create_directories(out / "cells");

  // Resolve the teacher.
  fs::path teacher_path;
  json teacher_info;
  if (section.teacher.checkpoint) {
    teacher_path = *section.teacher.checkpoint;
    teacher_info = json{{"source", "checkpoint"}, {"path", teacher_path.string()}};
  } else if (section.teacher.sweep_summary) {
    const fs::path summary_path = *section.teacher.sweep_summary;
    if (!fs::exists(summary_path)) {
      throw DataError("distill: sweep summary not found: " + summary_path.string());
    }
    auto rows = parse_sweep_summary(summary_path);
    std::vector<TeacherCandidate> candidates;
    std::vector<const SummaryRow*> median_rows;
    for (const SummaryRow& row : rows) {
      if (!row.is_median) continue;
      candidates.push_back({row.lambda, row.metric, row.cmi});
      median_rows.push_back(&row);
    }
    if (candidates.empty()) throw DataError("distill: sweep summary holds no median rows");
    TeacherChoice choice = select_teacher(candidates);
    const SummaryRow& chosen = *median_rows[choice.index];
    teacher_path = summary_path.parent_path() / chosen.checkpoint;
    teacher_info = json{{"source", "sweep_summary"},
                        {"summary", summary_path.string()},
                        {"chosen_lambda", chosen.lambda},
                        {"chosen_metric", chosen.metric},
                        {"chosen_cmi", chosen.cmi},
                        {"metric_cmi_ratio", choice.ratio},
                        {"zero_cmi_warning", choice.zero_cmi_warning}};
    std::cout << "distill: selected teacher lambda " << chosen.lambda << " (metric/CMI ratio "
              << csv_double(choice.ratio) << ")\n";
  } else {
    throw ConfigError("distill: distill.teacher must name a checkpoint or a sweep_summary");
  }
  if (!fs::exists(teacher_path)) {
    throw DataError("distill: teacher checkpoint not found: " + teacher_path.string());
  }
  ModelParams teacher = load_checkpoint(teacher_path);
  if (cfg.model && !(*cfg.model == teacher.config)) {
    throw ConfigError("distill: config.model disagrees with the teacher checkpoint");
  }

  BuiltData data = build_data(*cfg.data, teacher.config);
  DistillGrid grid{section.alpha_grid, section.temperature_grid};
  DistillResult result = distill(teacher, data.train, data.dev, grid, section.options, opts.jobs);

  // per-run artifacts
  for (const DistillCell& cell : result.cells) {
    const fs::path dir = out / "cells" /
                         ("alpha" + num_tag(cell.alpha) + "_T" + num_tag(cell.temperature) +
                          "_run" + std::to_string(cell.run_index));
    fs::create_directories(dir);
    if (cell.failed) {
      write_text_file(dir / "error.json", json{{"error", cell.error}}.dump(2) + "\n");
      continue;
    }
    write_run_artifacts(cell.report, config_echo(cfg, "distill", cell.seed), dir);
  }

  // grid.csv
  std::ostringstream csv;
  csv << "alpha,temperature,run_index,seed,status,metric,best_epoch,is_median,is_best_cell\n";
  std::vector<bool> is_median(result.cells.size(), false);
  for (int64_t mi : result.median_index) {
    if (mi >= 0) is_median[static_cast<size_t>(mi)] = true;
  }
  const int64_t per_cell = section.options.runs_per_cell;
  for (size_t i = 0; i < result.cells.size(); ++i) {
    const DistillCell& cell = result.cells[i];
    const int64_t cell_index = static_cast<int64_t>(i) / per_cell;
    csv << num_tag(cell.alpha) << "," << num_tag(cell.temperature) << "," << cell.run_index << ","
        << cell.seed << ",";
    if (cell.failed) {
      csv << "failed,,,0,0\n";
      continue;
    }
    csv << "ok," << csv_double(cell.report.best_metric) << "," << cell.report.best_epoch << ","
        << (is_median[i] ? 1 : 0) << "," << (cell_index == result.best_cell ? 1 : 0) << "\n";
  }
  write_text_file(out / "grid.csv", csv.str());

  json best{{"alpha", result.best_alpha},
            {"temperature", result.best_temperature},
            {"teacher", teacher_info},
            {"student_checkpoint", "student.ckpt"}};
  const int64_t best_median = result.median_index[static_cast<size_t>(result.best_cell)];
  best["metric"] = result.cells[static_cast<size_t>(best_median)].report.best_metric;
  write_text_file(out / "best.json", best.dump(2) + "\n");
  save_checkpoint(result.best_student, out / "student.ckpt");
  std::cout << "distill: best cell alpha " << result.best_alpha << ", T " << result.best_temperature
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CliOptions& opts) {
  RunConfigFile cfg = load_config(opts.config_path);
  if (!cfg.data) throw ConfigError("eval: config needs a data section");
  if (opts.checkpoint_path.empty()) throw ConfigError("eval: --checkpoint is required");
  if (!fs::exists(opts.checkpoint_path)) {
    throw DataError("eval: checkpoint not found: " + opts.checkpoint_path);
  }
  ModelParams params = load_checkpoint(opts.checkpoint_path);
  // The checkpoint defines the architecture; the config only has to agree on
  // the data contract.
  if (cfg.model && (cfg.model->vocab_size != params.config.vocab_size ||
                    cfg.model->num_classes != params.config.num_classes)) {
    throw ConfigError("eval: config.model vocab/class shape disagrees with the checkpoint");
  }
  const fs::path out = resolve_out_dir(opts, cfg);
  fs::create_directories(out);

  BuiltData data = build_data(*cfg.data, params.config);
  DatasetEval dev_eval = evaluate_dataset(params, data.dev, cfg.data->metric, false, opts.jobs);

  std::vector<int> labels;
  for (const Sample& s : data.dev.samples) labels.push_back(s.label);
  json metrics{{"split", "dev"},
               {"n_samples", data.dev.samples.size()},
               {"metric_name", metric_name(cfg.data->metric)},
               {"value", dev_eval.metric},
               {"accuracy", accuracy(dev_eval.preds, labels)}};
  if (data.dev.num_classes == 2) {
    metrics["f1"] = f1_binary(dev_eval.preds, labels);
    metrics["mcc"] = matthews_corr(dev_eval.preds, labels);
  }
  const std::string payload = metrics.dump(2) + "\n";
  write_text_file(out / "metrics.json", payload);
  std::cout << payload;
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string label;
  std::string kind;
  std::string sign;
  double lambda = 0;
  std::string metric_name;
  double metric = 0;
  std::optional<double> cmi;
  std::string fingerprint;
};

int cmd_report(const CliOptions& opts) {
  if (opts.run_dir.empty()) throw ConfigError("report: --run-dir is required");
  const fs::path root = opts.run_dir;
  if (!fs::exists(root)) throw DataError("report: run dir not found: " + root.string());
  const fs::path out = opts.out_dir.empty() ? root : fs::path(opts.out_dir);
  fs::create_directories(out);

  std::vector<ReportRow> rows;
  std::vector<fs::path> report_files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "report.json") {
      report_files.push_back(entry.path());
    }
  }
  std::sort(report_files.begin(), report_files.end());
  for (const fs::path& path : report_files) {
    try {
      json doc = json::parse(read_text_file(path));
      RunReport r = run_report_from_json(doc);
      ReportRow row;
      row.label = path.parent_path().lexically_relative(root).generic_string();
      if (row.label == ".") row.label = "run";
      row.kind = r.kind;
      row.sign = cmi_sign_name(r.cmi_sign);
      row.lambda = r.lambda;
      row.metric_name = r.metric;
      row.metric = r.best_metric;
      row.cmi = r.final_cmi_train;
      char buf[17];
      std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(r.train_fingerprint));
      row.fingerprint = buf;
      rows.push_back(std::move(row));
    } catch (const json::exception&) {
      // not a run report; skip
    } catch (const Error&) {
    }
  }
  if (rows.empty()) throw DataError("report: no run reports under " + root.string());

  // Group by dataset fingerprint; baseline = the cmi=off run of the group.
  std::map<std::string, std::vector<const ReportRow*>> groups;
  for (const ReportRow& row : rows) groups[row.fingerprint].push_back(&row);

  std::ostringstream md, csv;
  csv << "dataset,run,cmi_sign,lambda,metric_name,metric,final_cmi_train,delta_vs_baseline\n";
  md << "# Run comparison\n";
  for (const auto& [fingerprint, group] : groups) {
    double baseline_metric = 0.0;
    int n_baselines = 0;
    for (const ReportRow* row : group) {
      if (row->kind == "train" && row->sign == "off") {
        baseline_metric = row->metric;
        ++n_baselines;
      }
    }
    const bool baseline = n_baselines == 1;
    md << "\n## dataset " << fingerprint << "\n\n";
    md << "| run | mode | lambda | " << group.front()->metric_name << " | CMI | delta |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const ReportRow* row : group) {
      const bool is_baseline = row->kind == "train" && row->sign == "off";
      const std::string mode = row->kind == "distill" ? "distill" : row->sign;
      const bool show_lambda = !is_baseline && row->kind != "distill" && row->sign != "off";
      std::string delta = "-";
      if (baseline && !is_baseline) {
        const double d = row->metric - baseline_metric;
        delta = (d >= 0 ? "+" : "") + csv_double(d);
      }
      md << "| " << row->label << " | " << mode << " | "
         << (show_lambda ? num_tag(row->lambda) : std::string("-")) << " | "
         << csv_double(row->metric) << " | " << (row->cmi ? csv_double(*row->cmi) : std::string("-"))
         << " | " << delta << " |\n";
      csv << fingerprint << "," << row->label << "," << mode << ","
          << (show_lambda ? num_tag(row->lambda) : std::string()) << "," << row->metric_name << ","
          << csv_double(row->metric) << "," << (row->cmi ? csv_double(*row->cmi) : std::string())
          << ","
          << (baseline && !is_baseline ? csv_double(row->metric - baseline_metric) : std::string())
          << "\n";
    }
  }
  write_text_file(out / "report_table.md", md.str());
  write_text_file(out / "report_table.csv", csv.str());
  std::cout << md.str();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"CMI-constrained fine-tuning and distillation engine"};
  app.require_subcommand(1);

  CliOptions opts;
  int64_t seed_flag = -1;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* config_opt = cmd->add_option("--config", opts.config_path, "run configuration JSON");
    if (needs_config) config_opt->required();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--jobs", opts.jobs, "parallel workers for grid cells")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed_flag, "override the configured seed");
  };

  CLI::App* train = app.add_subcommand("train", "single fine-tuning run");
  add_common(train, true);
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "lambda grid with seeded repeats");
  add_common(sweep_cmd, true);
  CLI::App* distill_cmd = app.add_subcommand("distill", "teacher-to-student distillation grid");
  add_common(distill_cmd, true);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", opts.checkpoint_path, "model checkpoint")->required();
  CLI::App* report_cmd = app.add_subcommand("report", "consolidate run reports into a table");
  add_common(report_cmd, false);
  report_cmd->add_option("--run-dir", opts.run_dir, "directory holding run reports")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }
  if (seed_flag >= 0) opts.seed_override = static_cast<uint64_t>(seed_flag);

  try {
    if (train->parsed()) return cmd_train(opts);
    if (sweep_cmd->parsed()) return cmd_sweep(opts);
    if (distill_cmd->parsed()) return cmd_distill(opts);
    if (eval_cmd->parsed()) return cmd_eval(opts);
    if (report_cmd->parsed()) return cmd_report(opts);
    std::cerr << "usage error: no subcommand\n";
    return 2;
  } catch (const TrainingDivergedError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cmitune
