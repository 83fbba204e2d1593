#include "nbnlab/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace nbnlab {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs,
                       const Shape& rhs)
    : std::invalid_argument(op + ": shape mismatch " + shape_to_string(lhs) +
                            " vs " + shape_to_string(rhs)) {}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " +
                                 shape_to_string(shape));
}

thread_local Tape* t_active_tape = nullptr;

}  // namespace

Tensor make_tensor(std::shared_ptr<TensorImpl> impl) {
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor of shape " + shape_to_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(impl_->shape));
  return impl_->shape[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return impl_->data[row * impl_->shape.back() + col];
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() needs a single-element tensor, got " +
                     shape_to_string(shape()));
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::vector<double> Tensor::grad_vector() const {
  auto g = grad();
  return {g.begin(), g.end()};
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

void accumulate_grad(TensorImpl& impl, std::span<const double> values) {
  if (impl.grad.empty()) {
    impl.grad.assign(values.begin(), values.end());
    return;
  }
  for (std::size_t i = 0; i < values.size(); ++i) impl.grad[i] += values[i];
}

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got " +
                     shape_to_string(loss.shape()));
  if (!loss.requires_grad()) return;
  const double one = 1.0;
  accumulate_grad(*loss.impl(), std::span<const double>(&one, 1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
}

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) {
  t_active_tape = &tape;
}

TapeScope::~TapeScope() { t_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(t_active_tape) {
  t_active_tape = nullptr;
}

NoGradScope::~NoGradScope() { t_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr)
    throw std::logic_error("backward() called without an active tape");
  tape->backward(loss);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (t_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
    return t != nullptr && t->defined() && t->requires_grad();
  });
}

Tensor record_op(std::string op, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> values, Tape::BackwardFn rule) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  Tape* tape = t_active_tape;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return t.defined() && t.requires_grad();
  });
  if (tape == nullptr || !any) return out;
  out.set_requires_grad(true);
  Tape::Node node;
  node.op = std::move(op);
  for (const Tensor& t : inputs)
    if (t.defined()) node.inputs.push_back(t.impl());
  node.output = out.impl();
  node.backward = std::move(rule);
  tape->record(std::move(node));
  return out;
}

}  // namespace nbnlab
