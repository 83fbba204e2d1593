#include "nbnlab/session.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace nbnlab {
namespace {

std::filesystem::path sibling(const std::filesystem::path& ckpt, const char* suffix) {
  return ckpt.string() + suffix;
}

void save_with_log(const std::filesystem::path& path, Model& model, const Trainer& trainer,
                   const RunLog& log, const std::string& experiment) {
  std::filesystem::create_directories(path.parent_path());
  TrainerSnapshot snap{trainer.phase().stage, trainer.state()};
  save_checkpoint(path, model, &snap, experiment);
  log.write_csv(sibling(path, ".runlog.csv"));
  log.write_eval_csv(sibling(path, ".eval.csv"));
}

RunLog joined(const RunLog& before, const RunLog& current) {
  RunLog out = before;
  if (out.magnitude_names.empty()) out.magnitude_names = current.magnitude_names;
  out.steps.insert(out.steps.end(), current.steps.begin(), current.steps.end());
  out.evals.insert(out.evals.end(), current.evals.begin(), current.evals.end());
  return out;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06zu.ckpt", step);
  return out_dir / "checkpoints" / name;
}

void write_report_csv(const std::filesystem::path& path, const GroupReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "scope,accuracy\n";
  out << "overall," << fmt(report.overall) << "\n";
  out << "tail," << fmt(report.tail) << "\n";
  out << "medium," << fmt(report.medium) << "\n";
  out << "head," << fmt(report.head) << "\n";
  for (std::size_t k = 0; k < report.per_class.size(); ++k)
    out << "class_" << k << "," << fmt(report.per_class[k]) << "\n";
}

SessionResult run_session(const ExperimentConfig& config, const PreparedData& data,
                          const SessionOptions& options) {
  const std::string experiment = serialize_config(config);
  std::filesystem::create_directories(options.out_dir);

  std::optional<Model> model;
  std::optional<TrainerSnapshot> resume_state;
  RunLog log;
  if (options.resume) {
    Checkpoint ck = load_checkpoint(*options.resume);
    if (ck.experiment != experiment)
      throw std::invalid_argument(options.resume->string() +
                                  ": checkpoint was written with a different config");
    if (!ck.trainer) throw std::invalid_argument(options.resume->string() + ": no trainer state");
    model = std::move(ck.model);
    resume_state = ck.trainer;
    log = RunLog::read_csv(sibling(*options.resume, ".runlog.csv"));
    log.read_eval_csv(sibling(*options.resume, ".eval.csv"));
  } else {
    ModelConfig mc = config.model;
    mc.input_dim = data.train.num_features;
    mc.num_classes = data.train.num_classes;
    model.emplace(mc, config.model_seed());
    if (config.freeze_g) freeze_magnitude(*model);
  }
  if (model->config().input_dim != data.train.num_features)
    throw std::invalid_argument("model input dimension does not match the data");

  std::vector<PhaseConfig> phases(1);
  phases[0].optimizer = config.optimizer_config();
  if (config.two_stage) {
    if (config.two_stage->stage2_update_g && model->num_nbn_layers() == 0)
      throw std::invalid_argument("stage2_update_g requires a model with NBN layers");
    phases.push_back(stage2_phase(phases[0].optimizer, *config.two_stage));
  }

  EvalOptions eval{&data.test, data.groups, config.eval_every};
  SessionResult out;
  std::size_t global = 0;
  for (const PhaseConfig& phase : phases) {
    if (resume_state && phase.stage < resume_state->stage) {
      global = phase.step_offset + phase.optimizer.total_iterations;
      continue;
    }
    Trainer trainer(*model, data.train, phase, eval);
    if (resume_state && phase.stage == resume_state->stage) {
      trainer.restore(resume_state->state);
      resume_state.reset();
    }
    global = phase.step_offset + trainer.step();
    while (!trainer.done()) {
      if (global >= options.stop_after) {
        out.last_checkpoint = checkpoint_path(options.out_dir, global);
        save_with_log(out.last_checkpoint, *model, trainer, joined(log, trainer.log()), experiment);
        out.steps_done = global;
        return out;
      }
      trainer.step_once();
      ++global;
      if (config.checkpoint_every > 0 && global % config.checkpoint_every == 0) {
        out.last_checkpoint = checkpoint_path(options.out_dir, global);
        save_with_log(out.last_checkpoint, *model, trainer, joined(log, trainer.log()), experiment);
      }
    }
    log = joined(log, trainer.log());
    if (&phase == &phases.back()) {
      out.last_checkpoint = options.out_dir / "final.ckpt";
      save_with_log(out.last_checkpoint, *model, trainer, log, experiment);
    }
  }

  RunResult r;
  r.log = log;
  summarize(r, *model, data);
  r.log.write_csv(options.out_dir / "runlog.csv");
  r.log.write_eval_csv(options.out_dir / "eval.csv");
  write_report_csv(options.out_dir / "report.csv", r.report);
  out.finished = true;
  out.steps_done = global;
  out.result = std::move(r);
  return out;
}

}  // namespace nbnlab
