#include "nbnlab/experiment.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace nbnlab {
namespace {

using json = nlohmann::ordered_json;

// Reads typed fields out of one JSON object and rejects whatever is left.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": wrong type");
    }
  }

  template <class E, class Parse>
  void read_enum(const char* key, E& out, Parse parse) {
    std::string text;
    bool present = node_.contains(key);
    read(key, text);
    if (!present) return;
    try {
      out = parse(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it)
      if (seen_.count(it.key()) == 0) throw ConfigError("unknown config key '" + where(it.key()) + "'");
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  const LongTailSpec& d = c.data;
  j["data"] = {{"num_classes", d.num_classes},
               {"n_max", d.n_max},
               {"imbalance_factor", d.imbalance_factor},
               {"profile", to_string(d.profile)},
               {"input_dim", d.input_dim},
               {"separation", d.separation},
               {"test_per_class", d.test_per_class}};
  j["groups"] = {{"tail_max", c.groups.tail_max},
                 {"head_min", c.groups.head_min},
                 {"scale_with_n_max", c.groups.scale_with_n_max}};
  const ModelConfig& m = c.model;
  j["model"] = {{"widths", m.widths},
                {"blocks", m.blocks},
                {"norm_policy", to_string(m.norm_policy)},
                {"magnitude_scope", to_string(m.magnitude_scope)},
                {"use_logit_rectifier", m.use_logit_rectifier},
                {"loss", to_string(m.loss_kind)},
                {"var_reg_strength", m.var_reg_strength},
                {"nbn_normalize", m.nbn_normalize}};
  const OptimizerConfig& o = c.optimizer;
  j["optimizer"] = {{"learning_rate", o.learning_rate},
                    {"momentum", o.momentum},
                    {"weight_decay", o.weight_decay},
                    {"batch_size", o.batch_size},
                    {"total_iterations", o.total_iterations},
                    {"warmup_iterations", o.warmup_iterations},
                    {"schedule", to_string(o.schedule)}};
  if (c.two_stage) {
    j["two_stage"] = {{"stage2_iterations", c.two_stage->stage2_iterations},
                      {"stage2_update_g", c.two_stage->stage2_update_g},
                      {"stage2_lr_factor", c.two_stage->stage2_lr_factor}};
  } else {
    j["two_stage"] = nullptr;
  }
  j["freeze_g"] = c.freeze_g;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

ExperimentConfig from_json(const json& root) {
  ExperimentConfig c;
  Section top(root, "");
  top.read("seed", c.seed);
  if (const json* node = top.child("data")) {
    Section s(*node, "data");
    LongTailSpec& d = c.data;
    s.read("num_classes", d.num_classes);
    s.read("n_max", d.n_max);
    s.read("imbalance_factor", d.imbalance_factor);
    s.read_enum("profile", d.profile, count_profile_from_string);
    s.read("input_dim", d.input_dim);
    s.read("separation", d.separation);
    s.read("test_per_class", d.test_per_class);
    s.finish();
  }
  if (const json* node = top.child("groups")) {
    Section s(*node, "groups");
    s.read("tail_max", c.groups.tail_max);
    s.read("head_min", c.groups.head_min);
    s.read("scale_with_n_max", c.groups.scale_with_n_max);
    s.finish();
  }
  if (const json* node = top.child("model")) {
    Section s(*node, "model");
    ModelConfig& m = c.model;
    s.read("widths", m.widths);
    s.read("blocks", m.blocks);
    s.read_enum("norm_policy", m.norm_policy, norm_policy_from_string);
    s.read_enum("magnitude_scope", m.magnitude_scope, share_scope_from_string);
    s.read("use_logit_rectifier", m.use_logit_rectifier);
    s.read_enum("loss", m.loss_kind, loss_kind_from_string);
    s.read("var_reg_strength", m.var_reg_strength);
    s.read("nbn_normalize", m.nbn_normalize);
    s.finish();
  }
  if (const json* node = top.child("optimizer")) {
    Section s(*node, "optimizer");
    OptimizerConfig& o = c.optimizer;
    s.read("learning_rate", o.learning_rate);
    s.read("momentum", o.momentum);
    s.read("weight_decay", o.weight_decay);
    s.read("batch_size", o.batch_size);
    s.read("total_iterations", o.total_iterations);
    s.read("warmup_iterations", o.warmup_iterations);
    s.read_enum("schedule", o.schedule, schedule_from_string);
    s.finish();
  }
  if (const json* node = top.child("two_stage"); node && !node->is_null()) {
    Section s(*node, "two_stage");
    TwoStageConfig t;
    s.read("stage2_iterations", t.stage2_iterations);
    s.read("stage2_update_g", t.stage2_update_g);
    s.read("stage2_lr_factor", t.stage2_lr_factor);
    s.finish();
    c.two_stage = t;
  }
  top.read("freeze_g", c.freeze_g);
  top.read("eval_every", c.eval_every);
  top.read("checkpoint_every", c.checkpoint_every);
  top.finish();
  c.model.input_dim = c.data.input_dim;
  c.model.num_classes = c.data.num_classes;
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  data.validate();
  model.validate();
  optimizer.validate();
  if (two_stage) two_stage->validate();
  thresholds_for(groups, data.n_max).validate();
  if (model.input_dim != data.input_dim)
    throw std::invalid_argument("model.input_dim must equal data.input_dim");
  if (model.num_classes != data.num_classes)
    throw std::invalid_argument("model.num_classes must equal data.num_classes");
  const bool has_nbn = !insertion_positions(model.norm_policy, model).empty();
  if (freeze_g && !has_nbn)
    throw std::invalid_argument("freeze_g needs a norm_policy with NBN layers");
  if (two_stage && two_stage->stage2_update_g && !has_nbn)
    throw std::invalid_argument("two_stage.stage2_update_g needs a norm_policy with NBN layers");
}

LongTailSpec ExperimentConfig::data_spec() const {
  LongTailSpec spec = data;
  spec.seed = seed;
  return spec;
}

std::uint64_t ExperimentConfig::model_seed() const { return derive_seed(seed, 101); }

OptimizerConfig ExperimentConfig::optimizer_config() const {
  OptimizerConfig o = optimizer;
  o.seed = derive_seed(seed, 202);
  return o;
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(root);
}

std::string serialize_config(const ExperimentConfig& config) {
  return to_json(config).dump(2) + "\n";
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open config");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

GroupThresholds thresholds_for(const GroupConfig& groups, std::size_t n_max) {
  GroupThresholds t{groups.tail_max, groups.head_min};
  if (groups.scale_with_n_max) {
    const double s = static_cast<double>(n_max) / 1280.0;
    t.tail_max *= s;
    t.head_min *= s;
  }
  return t;
}

PreparedData prepare_data(Dataset train, Dataset test, const GroupThresholds& thresholds) {
  if (train.size() == 0) throw std::invalid_argument("training split is empty");
  if (test.size() == 0) throw std::invalid_argument("test split is empty");
  if (train.num_features != test.num_features)
    throw std::invalid_argument("train and test splits differ in feature dimension");
  const std::size_t k = std::max(train.num_classes, test.num_classes);
  train.num_classes = test.num_classes = k;
  PreparedData out;
  out.scaler = FeatureScaler::fit(train);
  out.scaler.apply(train);
  out.scaler.apply(test);
  out.groups = group_assignment(train.per_class_counts(), thresholds);
  out.train = std::move(train);
  out.test = std::move(test);
  return out;
}

PreparedData prepare_synthetic(const ExperimentConfig& config) {
  SplitDataset split = synthesize(config.data_spec());
  return prepare_data(std::move(split.train), std::move(split.test),
                      thresholds_for(config.groups, config.data.n_max));
}

void summarize(RunResult& r, Model& model, const PreparedData& data) {
  r.report = evaluate(model, data.test, data.groups);
  if (!model.final_norm().is_identity()) r.balance_cv = bn_weight_curve(model).cv;
  r.feature_stats = feature_stat_variance(extract_features(model, data.test));
  r.pattern_a_fraction = r.log.pattern_a_fraction(1);
  if (!r.log.steps.empty() && !r.log.steps.front().g.empty()) {
    r.g_initial = r.log.steps.front().g.front();
    const auto mags = model.magnitudes();
    r.g_final = mags.front()->value.item();
  }
}

RunResult run_experiment(const ExperimentConfig& config, const PreparedData& data,
                         std::optional<Model>* trained) {
  ModelConfig mc = config.model;
  mc.input_dim = data.train.num_features;
  mc.num_classes = data.train.num_classes;
  Model model(mc, config.model_seed());
  if (config.freeze_g) freeze_magnitude(model);
  EvalOptions eval{&data.test, data.groups, config.eval_every};
  RunResult r;
  const OptimizerConfig opt = config.optimizer_config();
  r.log = config.two_stage ? two_stage_train(model, data.train, opt, *config.two_stage, eval)
                           : train(model, data.train, opt, eval);
  summarize(r, model, data);
  if (trained != nullptr) trained->emplace(std::move(model));
  return r;
}

}  // namespace nbnlab
