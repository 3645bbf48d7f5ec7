#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bkd {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // For leaves: user-set. For op results: true iff some input needs a grad.
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::shared_ptr<Node> node;
  std::string name;
};

// One recorded operation. `backward` receives the gradient of the op's
// output and accumulates into the gradient buffers of its inputs; an entry of
// `input_grads` is null when that input does not need a gradient.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double> out_grad,
                     std::span<std::vector<double>* const> input_grads)>
      backward;
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// Tensor is a handle: copies share storage and tape identity. Use clone()
/// for an independent copy and detach() to cut the tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access for optimizers and initializers. Mutating a tensor that
  /// a live tape still references invalidates that tape's backward pass.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  const std::string& name() const;
  Tensor& set_name(std::string name);

  /// Same values, no tape, no grad requirement.
  Tensor detach() const;
  /// Independent leaf copy that keeps requires_grad and name.
  Tensor clone() const;

  /// Reverse pass from a scalar. Gradients land on leaf tensors with
  /// requires_grad set and accumulate across calls until zero_grad().
  void backward() const;

  bool same_as(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables tape recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

// Builds an op result and, when recording is on and an input needs a grad,
// attaches a tape node.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(std::span<const double>,
                                      std::span<std::vector<double>* const>)>
                       backward);

}  // namespace detail

}  // namespace bkd
