// nbnlab command-line front end: synth, train, gradcheck, analyze, sweep.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nbnlab/checkpoint.hpp"
#include "nbnlab/experiment.hpp"
#include "nbnlab/gradcheck.hpp"
#include "nbnlab/report.hpp"
#include "nbnlab/session.hpp"
#include "nbnlab/simd/kernels.hpp"
#include "nbnlab/sweep.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace nbnlab;

namespace {

struct ConfigFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string policy, loss, scope;
  double var_reg = 0.0;
  std::size_t iterations = 0;
  bool two_stage = false, update_g = false, freeze_g = false, logit_rectifier = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* var_reg_opt = nullptr;
  CLI::Option* iterations_opt = nullptr;

  void add_to(CLI::App& app, bool model_flags) {
    app.add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    seed_opt = app.add_option("--seed", seed, "experiment seed");
    if (!model_flags) return;
    app.add_option("--policy", policy, "none, baseline-bn, ours, typeA, typeB, typeC or wn");
    app.add_option("--loss", loss, "ce or bsm");
    app.add_option("--scope", scope, "magnitude sharing: per-layer, per-block or global");
    var_reg_opt = app.add_option("--var-reg", var_reg, "variance-regularization strength");
    iterations_opt = app.add_option("--iterations", iterations, "stage-1 iterations");
    app.add_flag("--two-stage", two_stage, "classifier retraining stage after joint training");
    app.add_flag("--update-g-stage2", update_g, "also update the NBN magnitude in stage 2");
    app.add_flag("--freeze-g", freeze_g, "keep the NBN magnitude at its initial value");
    app.add_flag("--logit-rectifier", logit_rectifier, "standardize logits per class");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed_opt && *seed_opt) c.seed = seed;
    if (!policy.empty()) c.model.norm_policy = norm_policy_from_string(policy);
    if (!loss.empty()) c.model.loss_kind = loss_kind_from_string(loss);
    if (!scope.empty()) c.model.magnitude_scope = share_scope_from_string(scope);
    if (var_reg_opt && *var_reg_opt) c.model.var_reg_strength = var_reg;
    if (iterations_opt && *iterations_opt) {
      c.optimizer.total_iterations = iterations;
      if (c.optimizer.warmup_iterations >= iterations) c.optimizer.warmup_iterations = iterations / 10;
    }
    if (two_stage || update_g) {
      if (!c.two_stage) c.two_stage = TwoStageConfig{};
      if (update_g) c.two_stage->stage2_update_g = true;
    }
    if (freeze_g) c.freeze_g = true;
    if (logit_rectifier) c.model.use_logit_rectifier = true;
    c.validate();
    return c;
  }
};

json config_json(const ExperimentConfig& c) { return json::parse(serialize_config(c)); }

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const std::vector<std::string>& args, json body) {
  json m;
  m["command"] = command;
  m["arguments"] = args;
  m["kernels"] = std::string(simd::active_kernels().name);
  for (auto it = body.begin(); it != body.end(); ++it) m[it.key()] = it.value();
  std::ofstream(out_dir / "manifest.json") << m.dump(2) << "\n";
}

fs::path find_split(const fs::path& dir, const std::string& stem, TableFormat& format) {
  if (fs::exists(dir / (stem + ".ltd"))) {
    format = TableFormat::binary;
    return dir / (stem + ".ltd");
  }
  if (fs::exists(dir / (stem + ".csv"))) {
    format = TableFormat::csv;
    return dir / (stem + ".csv");
  }
  throw std::runtime_error(dir.string() + ": no " + stem + ".ltd or " + stem + ".csv");
}

// Data from a directory written by `synth` (or any train/test pair), or
// synthesized from the config when no directory is given. External data
// overrides the config's class count and dimension.
PreparedData load_data(const std::string& data_dir, ExperimentConfig& config) {
  if (data_dir.empty()) return prepare_synthetic(config);
  if (!fs::is_directory(data_dir)) throw std::runtime_error(data_dir + ": data directory not found");
  TableFormat tf, vf;
  const fs::path train_path = find_split(data_dir, "train", tf);
  const fs::path test_path = find_split(data_dir, "test", vf);
  IngestOptions raw;
  raw.standardize = false;
  Dataset train = ingest_table(train_path, tf, raw);
  Dataset test = ingest_table(test_path, vf, raw);
  const std::size_t k = std::max(train.num_classes, test.num_classes);
  config.data.num_classes = config.model.num_classes = k;
  config.data.input_dim = config.model.input_dim = train.num_features;
  const GroupThresholds t{config.groups.tail_max, config.groups.head_min};
  return prepare_data(std::move(train), std::move(test), t);
}

json report_json(const GroupReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"overall", num(r.overall)}, {"tail", num(r.tail)}, {"medium", num(r.medium)},
          {"head", num(r.head)}};
}

int cmd_synth(const ConfigFlags& flags, const fs::path& out, const std::string& format,
              const std::vector<std::string>& args) {
  const ExperimentConfig config = flags.resolve();
  const SplitDataset split = synthesize(config.data_spec());
  fs::create_directories(out);
  const bool csv = format == "csv";
  const std::string ext = csv ? ".csv" : ".ltd";
  for (const auto& [name, data] : {std::pair{"train", &split.train}, std::pair{"test", &split.test}}) {
    const fs::path p = out / (std::string(name) + ext);
    if (csv) write_csv(*data, p);
    else write_binary(*data, p);
  }
  const auto counts = split.train.per_class_counts();
  const double realized_if = static_cast<double>(counts.front()) / static_cast<double>(counts.back());
  write_manifest(out, "synth", args,
                 {{"config", config_json(config)},
                  {"class_counts", counts},
                  {"requested_imbalance_factor", config.data.imbalance_factor},
                  {"realized_imbalance_factor", realized_if},
                  {"train_size", split.train.size()},
                  {"test_size", split.test.size()},
                  {"outputs", {"train" + ext, "test" + ext}}});
  std::printf("wrote %zu train / %zu test samples to %s (IF %.2f)\n", split.train.size(),
              split.test.size(), out.string().c_str(), realized_if);
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& data_dir, const fs::path& out,
              const std::string& resume, std::size_t ckpt_every, std::size_t stop_after,
              std::size_t eval_every, const std::vector<std::string>& args) {
  ExperimentConfig config = flags.resolve();
  if (ckpt_every > 0) config.checkpoint_every = ckpt_every;
  if (eval_every > 0) config.eval_every = eval_every;
  const PreparedData data = load_data(data_dir, config);
  config.validate();
  SessionOptions opt;
  opt.out_dir = out;
  if (!resume.empty()) opt.resume = resume;
  opt.stop_after = stop_after;
  try {
    const SessionResult s = run_session(config, data, opt);
    json body{{"config", config_json(config)},
              {"data", data_dir.empty() ? json("synthetic") : json(data_dir)},
              {"resumed_from", resume.empty() ? json(nullptr) : json(resume)},
              {"steps_done", s.steps_done},
              {"finished", s.finished},
              {"last_checkpoint", s.last_checkpoint.string()}};
    if (s.finished) {
      const RunResult& r = *s.result;
      body["report"] = report_json(r.report);
      body["outputs"] = {"final.ckpt", "runlog.csv", "eval.csv", "report.csv"};
      std::printf("overall %.4f  tail %.4f  medium %.4f  head %.4f\n", r.report.overall,
                  r.report.tail, r.report.medium, r.report.head);
      if (std::isfinite(r.g_initial))
        std::printf("g %.4f -> %.4f, pattern A fraction %.3f\n", r.g_initial, r.g_final,
                    r.pattern_a_fraction);
    } else {
      std::printf("stopped after %zu steps; checkpoint %s\n", s.steps_done,
                  s.last_checkpoint.string().c_str());
    }
    write_manifest(out, "train", args, std::move(body));
  } catch (const TrainingAborted& e) {
    fs::create_directories(out);
    e.log().write_csv(out / "aborted_runlog.csv");
    CsvTable norms{{"parameter", "l2_norm"}, {}};
    for (const auto& [name, v] : e.parameter_norms()) norms.add_row({name, format_number(v)});
    norms.write(out / "aborted_norms.csv");
    write_manifest(out, "train", args,
                   {{"config", config_json(config)}, {"aborted", e.what()},
                    {"outputs", {"aborted_runlog.csv", "aborted_norms.csv"}}});
    std::fprintf(stderr, "training aborted: %s (diagnostics in %s)\n", e.what(), out.string().c_str());
    return 3;
  }
  return 0;
}

int cmd_gradcheck(const GradcheckOptions& opt, const std::string& out,
                  const std::vector<std::string>& args) {
  const auto results = run_gradcheck(opt);
  CsvTable t{{"check", "family", "cases", "max_error", "tolerance", "passed"}, {}};
  for (const GradcheckResult& r : results) {
    std::printf("%-20s %-10s cases %-4zu max error %.3e (tol %.0e)  %s\n", r.name.c_str(),
                r.family.c_str(), r.cases, r.max_error, r.tolerance, r.passed() ? "ok" : "FAIL");
    t.add_row({r.name, r.family, std::to_string(r.cases), format_number(r.max_error),
               format_number(r.tolerance), r.passed() ? "true" : "false"});
  }
  const bool ok = all_passed(results);
  if (!out.empty()) {
    fs::create_directories(out);
    t.write(fs::path(out) / "gradcheck.csv");
    write_manifest(out, "gradcheck", args,
                   {{"families", opt.families}, {"cases", opt.cases}, {"seed", opt.seed},
                    {"fault", opt.inject_fault_op}, {"passed", ok}, {"outputs", {"gradcheck.csv"}}});
  }
  std::printf("%s\n", ok ? "all gradient checks passed" : "gradient checks FAILED");
  return ok ? 0 : 1;
}

int cmd_analyze(const std::vector<std::string>& checkpoints, const std::string& data_dir,
                const fs::path& out, double quantile, const std::vector<std::string>& args) {
  std::vector<Checkpoint> loaded;
  std::vector<std::string> labels;
  for (const std::string& spec : checkpoints) {
    // "label=path" or just a path
    const auto eq = spec.find('=');
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    labels.push_back(eq == std::string::npos ? fs::path(path).parent_path().filename().string()
                                             : spec.substr(0, eq));
    if (labels.back().empty()) labels.back() = "model" + std::to_string(labels.size());
    loaded.push_back(load_checkpoint(path));
  }
  ExperimentConfig config;
  if (!loaded.front().experiment.empty()) config = parse_config(loaded.front().experiment);
  const PreparedData data = load_data(data_dir, config);
  std::vector<LabeledModel> models;
  for (std::size_t i = 0; i < loaded.size(); ++i) models.push_back({labels[i], &*loaded[i].model});
  const AnalysisSummary s = write_analysis(models, data, out, quantile);
  json outputs = json::array();
  for (const fs::path& p : s.files) outputs.push_back(p.filename().string());
  write_manifest(out, "analyze", args,
                 {{"checkpoints", checkpoints}, {"config", config_json(config)},
                  {"quantile", quantile}, {"outputs", outputs}});
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    std::printf("%-16s Var(mean) %.5f  Var(std) %.5f  weight CV %.4f\n", s.labels[i].c_str(),
                s.feature_stats[i].var_mean, s.feature_stats[i].var_std, s.balance_cv[i]);
  return 0;
}

int cmd_sweep(const fs::path& spec_path, const fs::path& out, std::size_t workers,
              const std::vector<std::string>& args) {
  const SweepSpec spec = load_sweep_spec(spec_path);
  SweepOptions opt;
  opt.out_dir = out;
  opt.workers = workers;
  opt.progress = [](const SweepRun& r, std::size_t done, std::size_t total) {
    if (r.ok)
      std::printf("[%zu/%zu] %s seed %llu: overall %.4f tail %.4f\n", done, total, r.cell.c_str(),
                  static_cast<unsigned long long>(r.seed), r.overall, r.tail);
    else
      std::printf("[%zu/%zu] %s seed %llu FAILED: %s\n", done, total, r.cell.c_str(),
                  static_cast<unsigned long long>(r.seed), r.error.c_str());
    std::fflush(stdout);
  };
  const SweepResult result = run_sweep(spec, opt);
  std::printf("\n%-40s %4s  %-15s %-15s %-15s %-15s %s\n", "cell", "runs", "overall", "tail",
              "medium", "head", "weight CV");
  for (const CellSummary& c : result.cells) {
    auto ms = [&](const char* m) {
      char buf[40];
      const auto& [mean, sd] = c.stats.at(m);
      std::snprintf(buf, sizeof buf, "%.4f+-%.4f", mean, sd);
      return std::string(buf);
    };
    std::printf("%-40s %4zu  %-15s %-15s %-15s %-15s %s%s\n", c.cell.c_str(), c.runs,
                ms("overall").c_str(), ms("tail").c_str(), ms("medium").c_str(), ms("head").c_str(),
                ms("balance_cv").c_str(), c.failed ? "  (failures)" : "");
  }
  std::size_t failed = 0;
  for (const CellSummary& c : result.cells) failed += c.failed;
  write_manifest(out, "sweep", args,
                 {{"spec", json::parse(std::ifstream(out / "spec.json"))},
                  {"executed", result.executed},
                  {"workers", effective_workers(workers)},
                  {"failed_runs", failed},
                  {"outputs", {"spec.json", "ledger.jsonl", "summary.csv"}}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Normalized batch normalization experiments for long-tailed recognition"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "write a synthetic long-tailed dataset");
  ConfigFlags synth_flags;
  synth_flags.add_to(*synth, false);
  std::string synth_out, synth_format = "binary";
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--format", synth_format, "binary or csv")->check(CLI::IsMember({"binary", "csv"}));

  auto* train = app.add_subcommand("train", "train one model (optionally two-stage)");
  ConfigFlags train_flags;
  train_flags.add_to(*train, true);
  std::string train_data, train_out, resume;
  std::size_t ckpt_every = 0, stop_after = SIZE_MAX, eval_every = 0;
  train->add_option("--data", train_data, "directory with train/test files (default: synthesize)");
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--checkpoint-every", ckpt_every, "periodic checkpoint cadence in steps");
  train->add_option("--eval-every", eval_every, "test evaluation cadence in steps");
  train->add_option("--stop-after", stop_after, "stop with a checkpoint after this many steps");

  auto* grad = app.add_subcommand("gradcheck", "verify gradients of every layer type");
  GradcheckOptions gopt;
  std::string gout;
  grad->add_option("--layers", gopt.families, "families: linear, bn, nbn, wn, rectifier, loss, model")
      ->delimiter(',');
  grad->add_option("--cases", gopt.cases, "random cases per check");
  grad->add_option("--seed", gopt.seed, "seed");
  grad->add_option("--inject-fault", gopt.inject_fault_op,
                   "corrupt the backward rule of this op (tests the checker)");
  grad->add_option("--out", gout, "write gradcheck.csv and a manifest here");

  auto* analyze = app.add_subcommand("analyze", "weight curves, feature statistics, channel probes");
  std::vector<std::string> ckpts;
  std::string analyze_data, analyze_out;
  double quantile = 0.6;
  analyze->add_option("--checkpoint", ckpts, "checkpoint (label=path allowed), repeatable")->required();
  analyze->add_option("--data", analyze_data, "data directory (default: the checkpoint's synthetic set)");
  analyze->add_option("--out", analyze_out, "output directory")->required();
  analyze->add_option("--quantile", quantile, "channel-importance percentile")->check(CLI::Range(0.0, 1.0));

  auto* sweep = app.add_subcommand("sweep", "run an ablation grid");
  std::string sweep_spec, sweep_out;
  std::size_t workers = 1;
  sweep->add_option("--spec", sweep_spec, "sweep spec (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--workers", workers, "parallel runs (capped by NBNLAB_THREADS)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(synth_flags, synth_out, synth_format, args);
    if (*train)
      return cmd_train(train_flags, train_data, train_out, resume, ckpt_every, stop_after, eval_every, args);
    if (*grad) return cmd_gradcheck(gopt, gout, args);
    if (*analyze) return cmd_analyze(ckpts, analyze_data, analyze_out, quantile, args);
    if (*sweep) return cmd_sweep(sweep_spec, sweep_out, workers, args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
