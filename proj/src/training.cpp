#include "nbnlab/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "nbnlab/ops.hpp"

namespace nbnlab {
namespace {

std::string join(const std::vector<double>& values) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ';';
    std::snprintf(buf, sizeof buf, "%.17g", values[i]);
    out += buf;
  }
  return out;
}

std::vector<double> split_doubles(const std::string& field) {
  std::vector<double> out;
  if (field.empty()) return out;
  std::istringstream ss(field);
  std::string part;
  while (std::getline(ss, part, ';')) out.push_back(std::stod(part));
  return out;
}

std::map<std::string, double> parameter_norms(Model& model) {
  std::map<std::string, double> norms;
  for (const Parameter& p : model.parameters()) {
    double ss = 0.0;
    for (double v : p.tensor.data()) ss += v * v;
    norms[p.name] = std::sqrt(ss);
  }
  return norms;
}

void set_magnitudes_trainable(Model& model, bool trainable) {
  if (model.num_nbn_layers() == 0)
    throw std::invalid_argument("model has no NBN layers, so there is no magnitude to freeze");
  for (auto& m : model.magnitudes()) m->trainable = trainable;
}

}  // namespace

std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

Schedule schedule_from_string(const std::string& text) {
  if (text == "cosine") return Schedule::cosine;
  if (text == "constant") return Schedule::constant;
  throw std::invalid_argument("unknown schedule '" + text + "' (expected cosine or constant)");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("optimizer.learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("optimizer.momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer.weight_decay must be >= 0");
  if (batch_size < 2) throw std::invalid_argument("optimizer.batch_size must be at least 2");
  if (total_iterations == 0)
    throw std::invalid_argument("optimizer.total_iterations must be positive");
  if (warmup_iterations >= total_iterations)
    throw std::invalid_argument(
        "optimizer.warmup_iterations must be smaller than optimizer.total_iterations");
}

void TwoStageConfig::validate() const {
  if (stage2_iterations == 0)
    throw std::invalid_argument("two_stage.stage2_iterations must be positive");
  if (!(stage2_lr_factor > 0.0))
    throw std::invalid_argument("two_stage.stage2_lr_factor must be positive");
}

double lr_at(std::size_t step, const OptimizerConfig& c) {
  if (step < c.warmup_iterations)
    return c.learning_rate * static_cast<double>(step) / static_cast<double>(c.warmup_iterations);
  if (c.schedule == Schedule::constant) return c.learning_rate;
  const double progress = static_cast<double>(step - c.warmup_iterations) /
                          static_cast<double>(c.total_iterations - c.warmup_iterations);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double momentum, double weight_decay, double lr) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw std::invalid_argument("sgd_step: parameter, gradient and velocity sizes differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grads[i] + weight_decay * params[i]);
    params[i] -= lr * velocity[i];
  }
}

void RunLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "step,loss,lr,g,alpha,pattern,stage\n";
  char buf[64];
  for (const StepRecord& r : steps) {
    out << r.step << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.loss);
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.lr);
    out << buf << ',' << join(r.g) << ',' << join(r.alpha) << ','
        << std::string(r.pattern.begin(), r.pattern.end()) << ',' << r.stage << '\n';
  }
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

RunLog RunLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open file");
  RunLog log;
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    while (f.size() < 7) f.emplace_back();
    try {
      StepRecord r;
      r.step = std::stoull(f[0]);
      r.loss = std::stod(f[1]);
      r.lr = std::stod(f[2]);
      r.g = split_doubles(f[3]);
      r.alpha = split_doubles(f[4]);
      r.pattern.assign(f[5].begin(), f[5].end());
      r.stage = std::stoi(f[6]);
      log.steps.push_back(std::move(r));
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                               ": malformed run-log row");
    }
  }
  return log;
}

void RunLog::write_eval_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "step,overall,tail,medium,head\n";
  char buf[160];
  for (const EvalRecord& e : evals) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.step, e.report.overall,
                  e.report.tail, e.report.medium, e.report.head);
    out << buf;
  }
}

void RunLog::read_eval_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open file");
  evals.clear();
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 5)
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                               ": expected 5 fields");
    try {
      EvalRecord e;
      e.step = std::stoull(f[0]);
      e.report.overall = std::stod(f[1]);
      e.report.tail = std::stod(f[2]);
      e.report.medium = std::stod(f[3]);
      e.report.head = std::stod(f[4]);
      evals.push_back(std::move(e));
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                               ": malformed eval row");
    }
  }
}

double RunLog::pattern_a_fraction(int stage) const {
  std::size_t a = 0, n = 0;
  for (const StepRecord& r : steps) {
    if (r.stage != stage) continue;
    for (char p : r.pattern) {
      a += p == 'A' ? 1 : 0;
      ++n;
    }
  }
  return n == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(n);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Trainer::Trainer(Model& model, const Dataset& train, PhaseConfig phase, EvalOptions eval)
    : model_(model), train_(train), phase_(std::move(phase)), eval_(std::move(eval)) {
  phase_.optimizer.validate();
  if (train_.size() == 0) throw std::invalid_argument("training set is empty");
  if (train_.num_features != model_.config().input_dim)
    throw ShapeError("training data has " + std::to_string(train_.num_features) +
                     " features, model expects " + std::to_string(model_.config().input_dim));
  const std::size_t k = model_.config().num_classes;
  by_class_.resize(k);
  for (std::size_t i = 0; i < train_.size(); ++i) {
    if (train_.labels[i] >= k)
      throw std::out_of_range("training label " + std::to_string(train_.labels[i]) +
                              " outside model classes");
    by_class_[train_.labels[i]].push_back(i);
  }
  log_priors_.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double n = std::max<double>(1.0, static_cast<double>(by_class_[c].size()));
    log_priors_[c] = std::log(n / static_cast<double>(train_.size()));
    if (!by_class_[c].empty()) nonempty_classes_.push_back(c);
  }
  rng_.seed(derive_seed(phase_.optimizer.seed, static_cast<std::uint64_t>(phase_.stage)));
  const auto params = model_.parameters();
  for (const Parameter& p : params)
    if (p.kind == ParamKind::magnitude) log_.magnitude_names.push_back(p.name);
}

std::vector<std::size_t> Trainer::sample_batch() {
  std::vector<std::size_t> idx(phase_.optimizer.batch_size);
  if (phase_.sampling == Sampling::instance) {
    std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
    for (auto& i : idx) i = pick(rng_);
  } else {
    std::uniform_int_distribution<std::size_t> pick_class(0, nonempty_classes_.size() - 1);
    for (auto& i : idx) {
      const auto& members = by_class_[nonempty_classes_[pick_class(rng_)]];
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      i = members[pick(rng_)];
    }
  }
  return idx;
}

Tensor Trainer::loss_on(const Tensor& x, std::span<const std::size_t> labels) {
  const ModelConfig& c = model_.config();
  if (phase_.classifier_only) {
    Tensor feats;
    if (phase_.update_g) {
      feats = model_.features(x, Mode::eval);
    } else {
      NoGradScope no_grad;
      feats = model_.features(x, Mode::eval);
    }
    return softmax_cross_entropy(model_.classify(feats, Mode::eval), labels);
  }
  const Tensor logits = model_.forward(x, Mode::train);
  Tensor loss = c.loss_kind == LossKind::balanced_softmax
                    ? softmax_cross_entropy(logits, labels, log_priors_)
                    : softmax_cross_entropy(logits, labels);
  if (c.var_reg_strength > 0.0) loss = add(loss, model_.variance_penalty(c.var_reg_strength));
  return loss;
}

bool Trainer::updates(const Parameter& p) const {
  if (p.kind == ParamKind::magnitude && p.magnitude && !p.magnitude->trainable) return false;
  if (!phase_.classifier_only) return true;
  if (p.kind == ParamKind::classifier_weight || p.kind == ParamKind::classifier_bias) return true;
  return phase_.update_g && p.kind == ParamKind::magnitude;
}

const StepRecord& Trainer::step_once() {
  if (done()) throw std::logic_error("Trainer::step_once called after the phase ended");
  const OptimizerConfig& opt = phase_.optimizer;
  std::vector<Parameter> params = model_.parameters();
  for (Parameter& p : params) p.tensor.zero_grad();

  const std::vector<std::size_t> idx = sample_batch();
  const std::vector<std::size_t> labels = train_.labels_at(idx);
  const Tensor x = train_.rows(idx);

  StepRecord rec;
  rec.step = phase_.step_offset + step_;
  rec.stage = phase_.stage;
  rec.lr = lr_at(step_, opt);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_on(x, labels);
    rec.loss = loss.item();
    if (!std::isfinite(rec.loss)) {
      char msg[128];
      std::snprintf(msg, sizeof msg, "non-finite loss %g at step %zu (lr %g)", rec.loss,
                    rec.step, rec.lr);
      throw TrainingAborted(msg, log_, parameter_norms(model_));
    }
    tape.backward(loss);
  }

  for (const Parameter& p : params) {
    if (p.kind != ParamKind::magnitude) continue;
    const double alpha = -p.tensor.grad()[0];
    rec.g.push_back(p.tensor.item());
    rec.alpha.push_back(alpha);
    rec.pattern.push_back(pattern_tag(pattern_classifier(alpha)));
  }

  for (Parameter& p : params) {
    if (!updates(p)) continue;
    auto [it, inserted] = velocity_.try_emplace(p.name);
    if (inserted) it->second.assign(p.tensor.numel(), 0.0);
    const double wd = weight_decayed(p.kind) ? opt.weight_decay : 0.0;
    sgd_step(p.tensor.mutable_data(), p.tensor.grad(), it->second, opt.momentum, wd, rec.lr);
  }
  for (Parameter& p : params) p.tensor.zero_grad();

  ++step_;
  log_.steps.push_back(std::move(rec));
  maybe_evaluate(done());
  return log_.steps.back();
}

void Trainer::run(std::size_t max_steps) {
  for (std::size_t n = 0; n < max_steps && !done(); ++n) step_once();
}

void Trainer::maybe_evaluate(bool final_step) {
  if (eval_.test == nullptr) return;
  const std::size_t global = phase_.step_offset + step_;
  if (!final_step && (eval_.every == 0 || global % eval_.every != 0)) return;
  log_.evals.push_back({global, evaluate(model_, *eval_.test, eval_.groups)});
}

TrainerState Trainer::state() const {
  TrainerState s;
  s.step = step_;
  s.velocity = velocity_;
  std::ostringstream os;
  os << rng_;
  s.rng = os.str();
  return s;
}

void Trainer::restore(const TrainerState& s) {
  if (s.step > phase_.optimizer.total_iterations)
    throw std::invalid_argument("trainer state step beyond the phase length");
  step_ = s.step;
  velocity_ = s.velocity;
  std::istringstream is(s.rng);
  is >> rng_;
  if (!is) throw std::invalid_argument("trainer state has a malformed RNG state");
}

RunLog train(Model& model, const Dataset& train, const OptimizerConfig& config,
             const EvalOptions& eval) {
  PhaseConfig phase;
  phase.optimizer = config;
  Trainer trainer(model, train, phase, eval);
  trainer.run();
  return trainer.log();
}

PhaseConfig stage2_phase(const OptimizerConfig& stage1, const TwoStageConfig& config) {
  config.validate();
  PhaseConfig phase;
  phase.optimizer = stage1;
  phase.optimizer.learning_rate = stage1.learning_rate * config.stage2_lr_factor;
  phase.optimizer.schedule = Schedule::constant;
  phase.optimizer.warmup_iterations = 0;
  phase.optimizer.total_iterations = config.stage2_iterations;
  phase.sampling = Sampling::class_balanced;
  phase.stage = 2;
  phase.classifier_only = true;
  phase.update_g = config.stage2_update_g;
  phase.step_offset = stage1.total_iterations;
  return phase;
}

RunLog two_stage_train(Model& model, const Dataset& train, const OptimizerConfig& stage1,
                       const TwoStageConfig& config, const EvalOptions& eval) {
  if (config.stage2_update_g && model.num_nbn_layers() == 0)
    throw std::invalid_argument("stage2_update_g requires a model with NBN layers");
  RunLog log = nbnlab::train(model, train, stage1, eval);
  Trainer second(model, train, stage2_phase(stage1, config), eval);
  second.run();
  const RunLog& tail = second.log();
  log.steps.insert(log.steps.end(), tail.steps.begin(), tail.steps.end());
  log.evals.insert(log.evals.end(), tail.evals.begin(), tail.evals.end());
  return log;
}

void freeze_magnitude(Model& model) { set_magnitudes_trainable(model, false); }
void unfreeze_magnitude(Model& model) { set_magnitudes_trainable(model, true); }

}  // namespace nbnlab
