#include "nbnlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "nbnlab/ops.hpp"

namespace nbnlab {
namespace {

constexpr std::size_t kRequiredLastStageBlocks = 3;

std::size_t block_input_width(const ModelConfig& c, std::size_t stage, std::size_t block) {
  if (block > 0) return c.widths[stage];
  return stage == 0 ? c.widths[0] : c.widths[stage - 1];
}

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage) + ".b" + std::to_string(block);
}

LinearLayer make_linear(std::size_t in, std::size_t out, bool with_bias,
                        std::mt19937_64& rng) {
  // He-normal for layers followed by a ReLU path.
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  std::vector<double> w(in * out);
  for (double& v : w) v = dist(rng);
  LinearLayer layer;
  layer.weight = Tensor::from({out, in}, std::move(w), true);
  if (with_bias) layer.bias = Tensor::zeros({out}, true);
  return layer;
}

LinearLayer make_classifier(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out), b(out);
  for (double& v : w) v = dist(rng);
  for (double& v : b) v = dist(rng);
  LinearLayer layer;
  layer.weight = Tensor::from({out, in}, std::move(w), true);
  layer.bias = Tensor::from({out}, std::move(b), true);
  return layer;
}

void convert_to_wn(LinearLayer& layer) {
  const std::size_t out = layer.weight.dim(0), in = layer.weight.dim(1);
  std::vector<double> g(out);
  auto w = layer.weight.data();
  for (std::size_t i = 0; i < out; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < in; ++j) ss += w[i * in + j] * w[i * in + j];
    g[i] = std::sqrt(ss);
  }
  layer.wn_magnitude = Tensor::from({out}, std::move(g), true);
}

void add_linear_params(std::vector<Parameter>& out, const std::string& name,
                       const LinearLayer& layer) {
  out.push_back({name + ".weight", layer.weight,
                 layer.is_wn() ? ParamKind::wn_direction : ParamKind::linear_weight, nullptr});
  if (layer.is_wn())
    out.push_back({name + ".wn_magnitude", layer.wn_magnitude, ParamKind::wn_magnitude, nullptr});
  if (layer.bias.defined())
    out.push_back({name + ".bias", layer.bias, ParamKind::linear_bias, nullptr});
}

void add_norm_params(std::vector<Parameter>& out, const NormLayer& norm) {
  if (norm.is_bn()) {
    out.push_back({norm.name() + ".gamma", norm.bn().gamma, ParamKind::norm_affine, nullptr});
    out.push_back({norm.name() + ".beta", norm.bn().beta, ParamKind::norm_affine, nullptr});
  } else if (norm.is_nbn()) {
    out.push_back({norm.name() + ".gamma_dir", norm.nbn().gamma_dir, ParamKind::nbn_direction,
                   nullptr});
    out.push_back({norm.name() + ".beta_dir", norm.nbn().beta_dir, ParamKind::nbn_direction,
                   nullptr});
  }
}

}  // namespace

std::string to_string(NormPolicy policy) {
  switch (policy) {
    case NormPolicy::none: return "none";
    case NormPolicy::baseline_bn: return "baseline-bn";
    case NormPolicy::ours: return "ours";
    case NormPolicy::type_a: return "typeA";
    case NormPolicy::type_b: return "typeB";
    case NormPolicy::type_c: return "typeC";
    case NormPolicy::wn: return "wn";
  }
  return "ours";
}

NormPolicy norm_policy_from_string(const std::string& text) {
  for (NormPolicy p : {NormPolicy::none, NormPolicy::baseline_bn, NormPolicy::ours,
                       NormPolicy::type_a, NormPolicy::type_b, NormPolicy::type_c,
                       NormPolicy::wn})
    if (to_string(p) == text) return p;
  throw std::invalid_argument("unknown norm policy '" + text +
                              "' (expected none, baseline-bn, ours, typeA, typeB, typeC or wn)");
}

std::string to_string(LossKind kind) {
  return kind == LossKind::ce ? "ce" : "bsm";
}

LossKind loss_kind_from_string(const std::string& text) {
  if (text == "ce") return LossKind::ce;
  if (text == "bsm") return LossKind::balanced_softmax;
  throw std::invalid_argument("unknown loss '" + text + "' (expected ce or bsm)");
}

void ModelConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("model.input_dim must be positive");
  if (widths.empty()) throw std::invalid_argument("model.widths must not be empty");
  if (widths.size() != blocks.size())
    throw std::invalid_argument("model.widths and model.blocks must have equal length");
  for (std::size_t w : widths)
    if (w == 0) throw std::invalid_argument("model.widths entries must be positive");
  for (std::size_t b : blocks)
    if (b == 0) throw std::invalid_argument("model.blocks entries must be positive");
  if (blocks.back() != kRequiredLastStageBlocks)
    throw std::invalid_argument("model.blocks: the last stage must have exactly 3 blocks");
  if (num_classes < 2) throw std::invalid_argument("model.num_classes must be at least 2");
  if (var_reg_strength < 0.0)
    throw std::invalid_argument("model.var_reg_strength must be non-negative");
}

std::vector<SlotInfo> enumerate_slots(const ModelConfig& c) {
  std::vector<SlotInfo> slots;
  slots.push_back({"stem.norm", SlotKind::stem, 0, 0, c.widths[0]});
  for (std::size_t s = 0; s < c.widths.size(); ++s) {
    for (std::size_t b = 0; b < c.blocks[s]; ++b) {
      const std::string prefix = block_prefix(s, b);
      slots.push_back({prefix + ".norm1", SlotKind::norm1, s, b, c.widths[s]});
      slots.push_back({prefix + ".norm2", SlotKind::norm2, s, b, c.widths[s]});
      if (b == 0 && block_input_width(c, s, b) != c.widths[s])
        slots.push_back({prefix + ".ds.norm", SlotKind::downsample, s, b, c.widths[s]});
    }
  }
  return slots;
}

std::set<std::string> insertion_positions(NormPolicy policy, const ModelConfig& c) {
  if (c.widths.empty() || c.blocks.size() != c.widths.size() ||
      c.blocks.back() != kRequiredLastStageBlocks)
    throw std::invalid_argument(
        "insertion_positions: the last stage must have exactly 3 residual blocks");
  const std::size_t last = c.widths.size() - 1;
  std::set<std::string> ours, all_last, all;
  for (const SlotInfo& slot : enumerate_slots(c)) {
    all.insert(slot.name);
    if (slot.kind == SlotKind::stem || slot.stage != last) continue;
    all_last.insert(slot.name);
    if (slot.kind == SlotKind::norm2 || slot.kind == SlotKind::downsample)
      ours.insert(slot.name);
  }
  switch (policy) {
    case NormPolicy::none:
    case NormPolicy::baseline_bn:
    case NormPolicy::wn: return {};
    case NormPolicy::ours: return ours;
    case NormPolicy::type_a: return all_last;
    case NormPolicy::type_b: {
      std::set<std::string> out;
      std::set_difference(all_last.begin(), all_last.end(), ours.begin(), ours.end(),
                          std::inserter(out, out.begin()));
      return out;
    }
    case NormPolicy::type_c: return all;
  }
  throw std::invalid_argument("insertion_positions: unknown policy");
}

Tensor LinearLayer::effective_weight() const {
  return is_wn() ? scale_rows_to_norm(weight, wn_magnitude) : weight;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (is_wn()) return wn_linear_forward(x, weight, wn_magnitude, bias);
  return linear(x, weight, bias);
}

Tensor NormLayer::forward(const Tensor& x, Mode mode) {
  return std::visit(
      [&](auto& s) -> Tensor {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, std::monostate>) return x;
        else if constexpr (std::is_same_v<T, BnState>) return bn_forward(x, s, mode);
        else return nbn_forward(x, s, mode);
      },
      state_);
}

RunningStats* NormLayer::stats() {
  if (is_bn()) return &bn().stats;
  if (is_nbn()) return &nbn().stats;
  return nullptr;
}

Tensor NormLayer::effective_gamma() const {
  if (is_bn()) return bn().gamma;
  if (is_nbn()) return nbn_effective_gamma(nbn());
  throw std::logic_error("norm slot " + name() + " has no affine parameters");
}

Tensor NormLayer::effective_beta() const {
  if (is_bn()) return bn().beta;
  if (is_nbn()) return nbn_effective_beta(nbn());
  throw std::logic_error("norm slot " + name() + " has no affine parameters");
}

bool weight_decayed(ParamKind kind) {
  return kind == ParamKind::linear_weight || kind == ParamKind::wn_direction ||
         kind == ParamKind::classifier_weight;
}

bool is_backbone(ParamKind kind) {
  return kind != ParamKind::classifier_weight && kind != ParamKind::classifier_bias;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  const bool has_norm = c.norm_policy != NormPolicy::none;
  const std::set<std::string> nbn_slots = insertion_positions(c.norm_policy, c);

  std::mt19937_64 rng(seed);
  stem_fc_ = make_linear(c.input_dim, c.widths[0], !has_norm, rng);
  for (std::size_t s = 0; s < c.widths.size(); ++s) {
    for (std::size_t b = 0; b < c.blocks[s]; ++b) {
      ResidualBlock block;
      block.stage = s;
      block.index = b;
      const std::size_t in = block_input_width(c, s, b);
      block.fc1 = make_linear(in, c.widths[s], !has_norm, rng);
      block.fc2 = make_linear(c.widths[s], c.widths[s], !has_norm, rng);
      if (b == 0 && in != c.widths[s]) block.ds_fc = make_linear(in, c.widths[s], !has_norm, rng);
      blocks_.push_back(std::move(block));
    }
  }
  classifier_ = make_classifier(c.widths.back(), c.num_classes, rng);

  if (c.norm_policy == NormPolicy::wn) {
    convert_to_wn(stem_fc_);
    for (auto& block : blocks_) {
      convert_to_wn(block.fc1);
      convert_to_wn(block.fc2);
      if (block.ds_fc) convert_to_wn(*block.ds_fc);
    }
  }

  std::map<std::string, std::shared_ptr<SharedMagnitude>> by_key;
  auto resolve_magnitude = [&](const SlotInfo& slot) {
    std::string key;
    double init = std::sqrt(static_cast<double>(slot.channels));
    switch (c.magnitude_scope) {
      case ShareScope::global:
        key = "g.global";
        init = std::sqrt(static_cast<double>(c.widths.back()));
        break;
      case ShareScope::per_block:
        key = slot.kind == SlotKind::stem ? "g.stem" : "g." + block_prefix(slot.stage, slot.block);
        break;
      case ShareScope::per_layer: key = "g." + slot.name; break;
    }
    auto it = by_key.find(key);
    if (it != by_key.end()) return it->second;
    auto m = SharedMagnitude::make(init, c.magnitude_scope);
    by_key.emplace(key, m);
    magnitudes_.push_back(m);
    magnitude_names_.push_back(key);
    return m;
  };
  auto make_norm = [&](const SlotInfo& slot) -> NormLayer {
    if (!has_norm) return NormLayer(slot, std::monostate{});
    if (nbn_slots.count(slot.name) != 0) {
      NbnState state = NbnState::make(slot.channels, resolve_magnitude(slot));
      state.normalize_direction = c.nbn_normalize;
      return NormLayer(slot, std::move(state));
    }
    return NormLayer(slot, BnState::make(slot.channels));
  };

  const std::vector<SlotInfo> slots = enumerate_slots(c);
  std::map<std::string, SlotInfo> slot_by_name;
  for (const SlotInfo& slot : slots) slot_by_name.emplace(slot.name, slot);
  stem_norm_ = make_norm(slot_by_name.at("stem.norm"));
  for (auto& block : blocks_) {
    const std::string prefix = block_prefix(block.stage, block.index);
    block.norm1 = make_norm(slot_by_name.at(prefix + ".norm1"));
    block.norm2 = make_norm(slot_by_name.at(prefix + ".norm2"));
    if (block.ds_fc) block.ds_norm = make_norm(slot_by_name.at(prefix + ".ds.norm"));
  }
  if (c.use_logit_rectifier) rectifier_ = LogitRectifierState::make(c.num_classes);
}

Tensor Model::features(const Tensor& x, Mode mode) {
  if (x.ndim() != 2 || x.dim(1) != config_.input_dim)
    throw ShapeError("model input", x.shape(), Shape{x.ndim() == 2 ? x.dim(0) : 0,
                                                      config_.input_dim});
  Tensor h = relu(stem_norm_.forward(stem_fc_.forward(x), mode));
  for (auto& block : blocks_) {
    Tensor t = relu(block.norm1.forward(block.fc1.forward(h), mode));
    t = block.norm2.forward(block.fc2.forward(t), mode);
    Tensor shortcut = h;
    if (block.ds_fc) shortcut = block.ds_norm->forward(block.ds_fc->forward(h), mode);
    h = relu(add(t, shortcut));
  }
  return h;
}

Tensor Model::classify(const Tensor& feats, Mode mode) {
  Tensor logits = classifier_.forward(feats);
  if (rectifier_) logits = logit_rectify(logits, *rectifier_, mode);
  return logits;
}

Tensor Model::forward(const Tensor& x, Mode mode) { return classify(features(x, mode), mode); }

std::vector<Parameter> Model::parameters() {
  std::vector<Parameter> out;
  add_linear_params(out, "stem.fc", stem_fc_);
  add_norm_params(out, stem_norm_);
  for (const auto& block : blocks_) {
    const std::string prefix = block_prefix(block.stage, block.index);
    add_linear_params(out, prefix + ".fc1", block.fc1);
    add_norm_params(out, block.norm1);
    add_linear_params(out, prefix + ".fc2", block.fc2);
    add_norm_params(out, block.norm2);
    if (block.ds_fc) {
      add_linear_params(out, prefix + ".ds.fc", *block.ds_fc);
      add_norm_params(out, *block.ds_norm);
    }
  }
  out.push_back({"classifier.weight", classifier_.weight, ParamKind::classifier_weight, nullptr});
  out.push_back({"classifier.bias", classifier_.bias, ParamKind::classifier_bias, nullptr});
  for (std::size_t i = 0; i < magnitudes_.size(); ++i)
    out.push_back({magnitude_names_[i], magnitudes_[i]->value, ParamKind::magnitude,
                   magnitudes_[i]});
  return out;
}

std::vector<Buffer> Model::buffers() {
  std::vector<Buffer> out;
  for (NormLayer* norm : norm_layers()) {
    RunningStats* s = norm->stats();
    if (s == nullptr) continue;
    out.push_back({norm->name() + ".running_mean", &s->mean});
    out.push_back({norm->name() + ".running_var", &s->var});
  }
  if (rectifier_) {
    out.push_back({"rectifier.running_mean", &rectifier_->stats.mean});
    out.push_back({"rectifier.running_var", &rectifier_->stats.var});
  }
  return out;
}

std::vector<std::shared_ptr<SharedMagnitude>> Model::magnitudes() const { return magnitudes_; }

std::vector<NormLayer*> Model::norm_layers() {
  std::vector<NormLayer*> out{&stem_norm_};
  for (auto& block : blocks_) {
    out.push_back(&block.norm1);
    out.push_back(&block.norm2);
    if (block.ds_norm) out.push_back(&*block.ds_norm);
  }
  return out;
}

std::vector<const NormLayer*> Model::norm_layers() const {
  std::vector<const NormLayer*> out;
  for (NormLayer* n : const_cast<Model*>(this)->norm_layers()) out.push_back(n);
  return out;
}

NormLayer* Model::find_norm(const std::string& name) {
  for (NormLayer* n : norm_layers())
    if (n->name() == name) return n;
  return nullptr;
}

const NormLayer& Model::final_norm() const { return blocks_.back().norm2; }

Tensor Model::variance_penalty(double strength) const {
  if (strength == 0.0) return Tensor::scalar(0.0);
  const std::set<std::string> slots = insertion_positions(NormPolicy::ours, config_);
  Tensor total;
  for (const NormLayer* norm : norm_layers()) {
    if (norm->is_identity() || slots.count(norm->name()) == 0) continue;
    Tensor term = nbnlab::variance_penalty(norm->effective_gamma(), norm->effective_beta(),
                                           strength);
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

std::size_t Model::num_nbn_layers() const {
  std::size_t n = 0;
  for (const NormLayer* norm : norm_layers()) n += norm->is_nbn() ? 1 : 0;
  return n;
}

std::size_t Model::num_learnable_scalars() {
  std::size_t n = 0;
  for (const Parameter& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace nbnlab
