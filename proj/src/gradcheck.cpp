#include "nbnlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "nbnlab/finite_diff.hpp"
#include "nbnlab/model.hpp"
#include "nbnlab/normalization.hpp"
#include "nbnlab/ops.hpp"
#include "nbnlab/training.hpp"

namespace nbnlab {
namespace {

using Build = std::function<Tensor(const std::vector<Tensor>&)>;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  std::size_t size(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  Tensor normal(Shape shape, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = d(rng_);
    return Tensor::from(std::move(shape), std::move(v));
  }
  Tensor positive(Shape shape, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
  }
  std::vector<std::size_t> labels(std::size_t n, std::size_t k) {
    std::vector<std::size_t> out(n);
    for (auto& l : out) l = size(0, k - 1);
    return out;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

void inject_fault(Tape& tape, const std::string& op) {
  if (op.empty()) return;
  for (Tape::Node& node : tape.nodes()) {
    if (node.op != op) continue;
    node.backward = [inner = std::move(node.backward)](std::span<const double> g) {
      std::vector<double> doubled(g.begin(), g.end());
      for (double& v : doubled) v *= 2.0;
      inner(doubled);
    };
  }
}

// Compares tape gradients of sum(weights * build(inputs)) (or of the scalar
// output itself when `weights` is undefined) against central differences.
double fd_case(const Build& build, const std::vector<Tensor>& inputs, const Tensor& weights,
               const GradcheckOptions& opt) {
  auto objective = [&](const std::vector<Tensor>& in) {
    Tensor y = build(in);
    return weights.defined() ? sum(mul(y, weights)) : y;
  };
  std::vector<Tensor> leaves;
  for (const Tensor& t : inputs) {
    Tensor leaf = t.detach();
    leaf.set_requires_grad(true);
    leaves.push_back(leaf);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor f = objective(leaves);
    inject_fault(tape, opt.inject_fault_op);
    tape.backward(f);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Tensor> frozen;
    for (const Tensor& t : inputs) frozen.push_back(t.detach());
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& probe) {
          frozen[i] = probe;
          return objective(frozen).item();
        },
        inputs[i], opt.step);
    worst = std::max(worst, max_relative_error(leaves[i].grad(), numeric.data()));
  }
  return worst;
}

struct Check {
  std::string name;
  std::string family;
  // Returns the error of one random case.
  std::function<double(Gen&, const GradcheckOptions&, std::size_t)> run;
  bool identity = false;
  // Model-level checks are costly; they run a tenth of the cases.
  bool reduced = false;
};

double linear_case(Gen& gen, const GradcheckOptions& opt, std::size_t) {
  const std::size_t b = gen.size(1, 5), in = gen.size(1, 6), out = gen.size(1, 6);
  const bool with_bias = gen.size(0, 1) == 1;
  std::vector<Tensor> inputs{gen.normal({b, in}), gen.normal({out, in})};
  if (with_bias) inputs.push_back(gen.normal({out}));
  const Tensor w = gen.normal({b, out});
  return fd_case(
      [&](const std::vector<Tensor>& t) { return linear(t[0], t[1], with_bias ? t[2] : Tensor{}); },
      inputs, w, opt);
}

double bn_case(Gen& gen, const GradcheckOptions& opt, Mode mode) {
  const std::size_t b = gen.size(2, 6), c = gen.size(1, 6);
  RunningStats stats = RunningStats::make(c);
  if (mode == Mode::eval) {
    stats.mean = gen.normal({c}).to_vector();
    stats.var = gen.positive({c}, 0.2, 3.0).to_vector();
  }
  const std::vector<Tensor> inputs{gen.normal({b, c}, 2.0), gen.normal({c}), gen.normal({c})};
  const Tensor w = gen.normal({b, c});
  return fd_case(
      [&](const std::vector<Tensor>& t) {
        BnState s{t[1], t[2], stats};
        return bn_forward(t[0], s, mode);
      },
      inputs, w, opt);
}

double nbn_case(Gen& gen, const GradcheckOptions& opt, Mode mode) {
  const std::size_t b = gen.size(2, 6), c = gen.size(1, 6);
  RunningStats stats = RunningStats::make(c);
  if (mode == Mode::eval) {
    stats.mean = gen.normal({c}).to_vector();
    stats.var = gen.positive({c}, 0.2, 3.0).to_vector();
  }
  const std::vector<Tensor> inputs{gen.normal({b, c}, 2.0), gen.normal({c}), gen.normal({c}),
                                   gen.positive({1}, 0.5, 3.0)};
  const Tensor w = gen.normal({b, c});
  return fd_case(
      [&](const std::vector<Tensor>& t) {
        auto g = std::make_shared<SharedMagnitude>();
        g->value = t[3];
        NbnState s;
        s.gamma_dir = t[1];
        s.beta_dir = t[2];
        s.weight_magnitude = g;
        s.bias_magnitude = g;
        s.stats = stats;
        return nbn_forward(t[0], s, mode);
      },
      inputs, w, opt);
}

double wn_case(Gen& gen, const GradcheckOptions& opt, std::size_t) {
  const std::size_t b = gen.size(1, 5), in = gen.size(1, 6), out = gen.size(1, 6);
  const std::vector<Tensor> inputs{gen.normal({b, in}), gen.normal({out, in}),
                                   gen.positive({out}, 0.3, 2.0), gen.normal({out})};
  const Tensor w = gen.normal({b, out});
  return fd_case(
      [&](const std::vector<Tensor>& t) { return wn_linear_forward(t[0], t[1], t[2], t[3]); },
      inputs, w, opt);
}

double rectifier_case(Gen& gen, const GradcheckOptions& opt, Mode mode) {
  const std::size_t b = gen.size(2, 6), k = gen.size(1, 6);
  LogitRectifierState base = LogitRectifierState::make(k);
  if (mode == Mode::eval) {
    base.stats.mean = gen.normal({k}).to_vector();
    base.stats.var = gen.positive({k}, 0.2, 3.0).to_vector();
  }
  const Tensor w = gen.normal({b, k});
  return fd_case(
      [&](const std::vector<Tensor>& t) {
        LogitRectifierState s = base;
        return logit_rectify(t[0], s, mode);
      },
      {gen.normal({b, k}, 2.0)}, w, opt);
}

double cross_entropy_case(Gen& gen, const GradcheckOptions& opt, bool balanced) {
  const std::size_t b = gen.size(1, 6), k = gen.size(2, 6);
  const auto labels = gen.labels(b, k);
  std::vector<double> adjustment;
  if (balanced) {
    std::vector<double> priors = gen.positive({k}, 0.05, 1.0).to_vector();
    double total = 0.0;
    for (double p : priors) total += p;
    for (double p : priors) adjustment.push_back(std::log(p / total));
  }
  return fd_case(
      [&](const std::vector<Tensor>& t) { return softmax_cross_entropy(t[0], labels, adjustment); },
      {gen.normal({b, k}, 2.0)}, Tensor{}, opt);
}

double variance_penalty_case(Gen& gen, const GradcheckOptions& opt, std::size_t) {
  const std::size_t c = gen.size(2, 8);
  const double strength = gen.uniform(0.05, 2.0);
  return fd_case(
      [&](const std::vector<Tensor>& t) { return variance_penalty(t[0], t[1], strength); },
      {gen.normal({c}), gen.normal({c})}, Tensor{}, opt);
}

// A whole small network: gradients of the training loss with respect to every
// parameter, across normalization policies.
double model_case(Gen& gen, const GradcheckOptions& opt, std::size_t index) {
  static const NormPolicy policies[] = {NormPolicy::ours, NormPolicy::type_c, NormPolicy::wn,
                                        NormPolicy::none, NormPolicy::baseline_bn};
  ModelConfig mc;
  mc.input_dim = gen.size(2, 4);
  mc.widths = {3, 4, 5};
  mc.blocks = {1, 1, 3};
  mc.num_classes = gen.size(2, 4);
  mc.norm_policy = policies[index % std::size(policies)];
  mc.use_logit_rectifier = index % 2 == 1;
  mc.magnitude_scope = static_cast<ShareScope>(index % 3);
  mc.var_reg_strength = index % 4 == 3 ? 0.3 : 0.0;
  Model model(mc, gen.engine()());
  const std::size_t b = gen.size(3, 6);
  const Tensor x = gen.normal({b, mc.input_dim});
  const auto labels = gen.labels(b, mc.num_classes);

  std::vector<Parameter> params = model.parameters();
  // The initialization is a degenerate point for central differences (zero
  // biases put ReLU inputs exactly on the kink, 1e-3 bias directions make the
  // normalization very curved), so move to a generic point first.
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (Parameter& p : params) {
    if (p.kind == ParamKind::magnitude || p.kind == ParamKind::wn_magnitude) continue;
    for (double& v : p.tensor.mutable_data()) v += jitter(gen.engine());
  }
  auto loss_of = [&]() {
    Tensor loss = softmax_cross_entropy(model.forward(x, Mode::train), labels);
    if (mc.var_reg_strength > 0.0) loss = add(loss, model.variance_penalty(mc.var_reg_strength));
    return loss;
  };
  for (Parameter& p : params) p.tensor.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_of();
    inject_fault(tape, opt.inject_fault_op);
    tape.backward(loss);
  }
  double worst = 0.0;
  NoGradScope no_grad;
  for (Parameter& p : params) {
    const std::vector<double> analytic = p.tensor.grad_vector();
    auto values = p.tensor.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + opt.step;
      const double up = loss_of().item();
      values[i] = original - opt.step;
      const double down = loss_of().item();
      values[i] = original;
      numeric[i] = (up - down) / (2.0 * opt.step);
    }
    worst = std::max(worst, max_relative_error(analytic, numeric));
    p.tensor.zero_grad();
  }
  return worst;
}

double decomposition_case(Gen& gen, const GradcheckOptions&, std::size_t index) {
  static const std::size_t widths[] = {2, 8, 64};
  const std::size_t c = widths[index % 3];
  const std::size_t b = gen.size(4, 16);
  const Tensor x = gen.normal({b, c}, 2.0);
  auto g = SharedMagnitude::make(gen.uniform(0.5, 4.0), ShareScope::per_layer);
  NbnState state = NbnState::make(c, g);
  state.gamma_dir = gen.normal({c});
  state.beta_dir = gen.normal({c});

  OutputLossFn loss;
  if ((index / 3) % 2 == 0) {
    const Tensor target = gen.normal({b, c});
    const Tensor weight = gen.positive({b, c}, 0.1, 2.0);
    loss = [target, weight](const Tensor& y) { return scale(sum(mul(weight, square(sub(y, target)))), 0.5); };
  } else {
    const auto labels = gen.labels(b, c);
    loss = [labels](const Tensor& y) { return softmax_cross_entropy(y, labels); };
  }
  return grad_decomposition_check(state, x, loss).residual;
}

std::vector<Check> all_checks() {
  using std::placeholders::_1;
  using std::placeholders::_2;
  return {
      {"linear", "linear", linear_case},
      {"bn-train", "bn", [](Gen& g, const GradcheckOptions& o, std::size_t) { return bn_case(g, o, Mode::train); }},
      {"bn-eval", "bn", [](Gen& g, const GradcheckOptions& o, std::size_t) { return bn_case(g, o, Mode::eval); }},
      {"nbn-train", "nbn", [](Gen& g, const GradcheckOptions& o, std::size_t) { return nbn_case(g, o, Mode::train); }},
      {"nbn-eval", "nbn", [](Gen& g, const GradcheckOptions& o, std::size_t) { return nbn_case(g, o, Mode::eval); }},
      {"nbn-decomposition", "nbn", decomposition_case, true},
      {"wn-linear", "wn", wn_case},
      {"rectifier-train", "rectifier", [](Gen& g, const GradcheckOptions& o, std::size_t) { return rectifier_case(g, o, Mode::train); }},
      {"rectifier-eval", "rectifier", [](Gen& g, const GradcheckOptions& o, std::size_t) { return rectifier_case(g, o, Mode::eval); }},
      {"cross-entropy", "loss", [](Gen& g, const GradcheckOptions& o, std::size_t) { return cross_entropy_case(g, o, false); }},
      {"balanced-softmax", "loss", [](Gen& g, const GradcheckOptions& o, std::size_t) { return cross_entropy_case(g, o, true); }},
      {"variance-penalty", "loss", variance_penalty_case},
      {"residual-model", "model", model_case, false, true},
  };
}

}  // namespace

std::vector<std::string> gradcheck_families() {
  return {"linear", "bn", "nbn", "wn", "rectifier", "loss", "model"};
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt) {
  const auto known = gradcheck_families();
  for (const std::string& f : opt.families)
    if (std::find(known.begin(), known.end(), f) == known.end())
      throw std::invalid_argument("unknown gradcheck family '" + f + "'");
  std::vector<GradcheckResult> results;
  std::uint64_t stream = 0;
  for (const Check& check : all_checks()) {
    ++stream;
    if (!opt.families.empty() &&
        std::find(opt.families.begin(), opt.families.end(), check.family) == opt.families.end())
      continue;
    Gen gen(derive_seed(opt.seed, stream));
    GradcheckResult r;
    r.name = check.name;
    r.family = check.family;
    r.tolerance = check.identity ? opt.identity_tolerance : opt.fd_tolerance;
    r.cases = check.reduced ? std::max<std::size_t>(1, opt.cases / 10) : opt.cases;
    for (std::size_t i = 0; i < r.cases; ++i) {
      const double e = check.run(gen, opt, i);
      r.max_error = std::max(r.max_error, std::isnan(e) ? INFINITY : e);
    }
    results.push_back(r);
  }
  return results;
}

bool all_passed(const std::vector<GradcheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const GradcheckResult& r) { return r.passed(); });
}

}  // namespace nbnlab
