#pragma once

// Dense double-precision tensors with a tape-based reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same buffer, which is what
// lets a model, its optimizer, and the tape refer to one parameter. Use
// clone() for an independent copy.
//
// Operations record onto the tape of the innermost live TapeScope on the
// current thread, and only when at least one input requires a gradient.
// Without an active tape every op is forward-only.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nbnlab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;
  std::vector<double> to_vector() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::vector<double> grad_vector() const;
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  // Independent copy that does not require a gradient.
  Tensor detach() const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(std::shared_ptr<TensorImpl>);

  std::shared_ptr<TensorImpl> impl_;
};

Tensor make_tensor(std::shared_ptr<TensorImpl> impl);

// Adds `values` into the gradient slot of `impl`, allocating it on first use.
void accumulate_grad(TensorImpl& impl, std::span<const double> values);

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_output)>;

  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<Node>& nodes() { return nodes_; }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  // Gradients accumulate into requires_grad leaves.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Convenience: runs backward on the tape active for this thread.
void backward(const Tensor& loss);

// True when any input requires a gradient and a tape is active. Ops call this
// to decide whether to record.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Creates an op output and, when recording, registers `rule` on the tape.
// The output requires a gradient exactly when the node was recorded.
Tensor record_op(std::string op, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> values, Tape::BackwardFn rule);

}  // namespace nbnlab
