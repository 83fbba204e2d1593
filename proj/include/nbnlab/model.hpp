#pragma once

// Residual MLP classifiers with configurable normalization insertion.
//
// Layout (default widths 32/64/128, blocks 1/1/3):
//
//   stem:  fc -> norm -> relu
//   block: fc1 -> norm1 -> relu -> fc2 -> norm2 ; shortcut ; add ; relu
//   shortcut is identity, or fc -> norm ("ds") when the width changes
//   head:  linear classifier (+ optional logit rectifier)
//
// Norm slots are named "stem.norm", "s<stage>.b<block>.norm1",
// "s<stage>.b<block>.norm2" and "s<stage>.b<block>.ds.norm".

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "nbnlab/normalization.hpp"
#include "nbnlab/tensor.hpp"

namespace nbnlab {

enum class NormPolicy { none, baseline_bn, ours, type_a, type_b, type_c, wn };
enum class LossKind { ce, balanced_softmax };

std::string to_string(NormPolicy policy);
NormPolicy norm_policy_from_string(const std::string& text);
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& text);

struct ModelConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> widths{32, 64, 128};
  std::vector<std::size_t> blocks{1, 1, 3};
  std::size_t num_classes = 10;
  NormPolicy norm_policy = NormPolicy::ours;
  ShareScope magnitude_scope = ShareScope::global;
  bool use_logit_rectifier = false;
  LossKind loss_kind = LossKind::ce;
  double var_reg_strength = 0.0;
  // false: NBN slots keep magnitude and direction but skip the normalization.
  bool nbn_normalize = true;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class SlotKind { stem, norm1, norm2, downsample };

struct SlotInfo {
  std::string name;
  SlotKind kind;
  std::size_t stage = 0;  // unused for the stem
  std::size_t block = 0;
  std::size_t channels = 0;
};

// Every norm slot of the architecture described by `config`, in forward order.
std::vector<SlotInfo> enumerate_slots(const ModelConfig& config);

// Slots that receive NBN under `policy`. Throws for an architecture whose
// last stage does not have exactly 3 blocks.
std::set<std::string> insertion_positions(NormPolicy policy, const ModelConfig& config);

struct LinearLayer {
  Tensor weight;        // [out x in]; the direction under WN
  Tensor bias;          // [out] or undefined
  Tensor wn_magnitude;  // [out] under WN, otherwise undefined

  Tensor forward(const Tensor& x) const;
  Tensor effective_weight() const;
  bool is_wn() const { return wn_magnitude.defined(); }
};

class NormLayer {
 public:
  using State = std::variant<std::monostate, BnState, NbnState>;

  NormLayer() = default;
  NormLayer(SlotInfo slot, State state) : slot_(std::move(slot)), state_(std::move(state)) {}

  Tensor forward(const Tensor& x, Mode mode);

  const SlotInfo& slot() const { return slot_; }
  const std::string& name() const { return slot_.name; }
  bool is_identity() const { return std::holds_alternative<std::monostate>(state_); }
  bool is_bn() const { return std::holds_alternative<BnState>(state_); }
  bool is_nbn() const { return std::holds_alternative<NbnState>(state_); }
  BnState& bn() { return std::get<BnState>(state_); }
  const BnState& bn() const { return std::get<BnState>(state_); }
  NbnState& nbn() { return std::get<NbnState>(state_); }
  const NbnState& nbn() const { return std::get<NbnState>(state_); }
  RunningStats* stats();

  // Effective per-channel weight and bias (differentiable).
  Tensor effective_gamma() const;
  Tensor effective_beta() const;

 private:
  SlotInfo slot_;
  State state_;
};

struct ResidualBlock {
  std::size_t stage = 0;
  std::size_t index = 0;
  LinearLayer fc1;
  NormLayer norm1;
  LinearLayer fc2;
  NormLayer norm2;
  std::optional<LinearLayer> ds_fc;
  std::optional<NormLayer> ds_norm;
};

enum class ParamKind {
  linear_weight,
  linear_bias,
  norm_affine,
  nbn_direction,
  magnitude,
  wn_direction,
  wn_magnitude,
  classifier_weight,
  classifier_bias,
};

bool weight_decayed(ParamKind kind);
bool is_backbone(ParamKind kind);

struct Parameter {
  std::string name;
  Tensor tensor;
  ParamKind kind;
  std::shared_ptr<SharedMagnitude> magnitude;  // set for ParamKind::magnitude
};

// Mutable non-learnable state, exposed for checkpointing.
struct Buffer {
  std::string name;
  std::vector<double>* values;
};

class Model {
 public:
  // Linear weights are drawn from `seed` in an order that does not depend on
  // the normalization policy, so models built with one seed start from the
  // same backbone weights.
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  std::size_t feature_dim() const { return config_.widths.back(); }

  Tensor forward(const Tensor& x, Mode mode);
  // Input of the classifier (the last-layer features).
  Tensor features(const Tensor& x, Mode mode);
  // Classifier plus the optional logit rectifier.
  Tensor classify(const Tensor& features, Mode mode);

  std::vector<Parameter> parameters();
  std::vector<Buffer> buffers();
  std::vector<std::shared_ptr<SharedMagnitude>> magnitudes() const;
  std::vector<NormLayer*> norm_layers();
  std::vector<const NormLayer*> norm_layers() const;
  NormLayer* find_norm(const std::string& name);

  // The norm slot that feeds the last residual sum.
  const NormLayer& final_norm() const;
  LinearLayer& classifier() { return classifier_; }
  const LinearLayer& classifier() const { return classifier_; }
  std::optional<LogitRectifierState>& rectifier() { return rectifier_; }

  // Sum of variance penalties over the slots NBN would occupy under `ours`.
  Tensor variance_penalty(double strength) const;

  std::size_t num_nbn_layers() const;
  std::size_t num_learnable_scalars();

 private:
  ModelConfig config_;
  LinearLayer stem_fc_;
  NormLayer stem_norm_;
  std::vector<ResidualBlock> blocks_;
  LinearLayer classifier_;
  std::optional<LogitRectifierState> rectifier_;
  std::vector<std::shared_ptr<SharedMagnitude>> magnitudes_;
  std::vector<std::string> magnitude_names_;
};

}  // namespace nbnlab
