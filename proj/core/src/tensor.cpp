#include "blockkd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include "blockkd/errors.hpp"

namespace bkd {

namespace {

thread_local bool g_grad_enabled = true;

detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw UsageError("operation on an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }

std::span<const double> Tensor::data() const { return checked(impl_).data; }

std::span<double> Tensor::mutable_data() { return checked(impl_).data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& impl = checked(impl_);
  if (impl.node) throw UsageError("requires_grad can only be set on leaf tensors");
  impl.requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).node == nullptr; }

bool Tensor::has_grad() const { return checked(impl_).grad.has_value(); }

std::span<const double> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (!impl.grad) throw UsageError("tensor '" + impl.name + "' has no gradient");
  return *impl.grad;
}

void Tensor::zero_grad() { checked(impl_).grad.reset(); }

const std::string& Tensor::name() const { return checked(impl_).name; }

Tensor& Tensor::set_name(std::string name) {
  checked(impl_).name = std::move(name);
  return *this;
}

Tensor Tensor::detach() const {
  const auto& impl = checked(impl_);
  Tensor out = from(impl.shape, impl.data);
  out.impl_->name = impl.name;
  return out;
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = impl_->requires_grad && impl_->node == nullptr;
  return out;
}

void Tensor::backward() const {
  const auto& root = checked(impl_);
  if (root.data.size() != 1 || !root.shape.empty()) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::TensorImpl*> order;
  std::unordered_map<detail::TensorImpl*, std::size_t> index;
  {
    std::unordered_map<detail::TensorImpl*, bool> visited;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited[impl_.get()] = true;
    while (!stack.empty()) {
      auto& [node_impl, next] = stack.back();
      const auto* node = node_impl->node.get();
      if (node && next < node->inputs.size()) {
        detail::TensorImpl* child = node->inputs[next++].get();
        if (child->requires_grad && !visited[child]) {
          visited[child] = true;
          stack.emplace_back(child, 0);
        }
        continue;
      }
      index[node_impl] = order.size();
      order.push_back(node_impl);
      stack.pop_back();
    }
  }

  std::vector<std::vector<double>> grads(order.size());
  grads.back().assign(1, 1.0);

  std::vector<std::vector<double>*> input_grads;
  for (std::size_t k = order.size(); k-- > 0;) {
    detail::TensorImpl* t = order[k];
    if (!t->node || grads[k].empty()) continue;
    input_grads.clear();
    for (const auto& in : t->node->inputs) {
      if (!in->requires_grad) {
        input_grads.push_back(nullptr);
        continue;
      }
      auto& g = grads[index.at(in.get())];
      if (g.empty()) g.assign(in->data.size(), 0.0);
      input_grads.push_back(&g);
    }
    t->node->backward(grads[k], input_grads);
    // Interior buffers are not needed once consumed.
    std::vector<double>().swap(grads[k]);
  }

  for (std::size_t k = 0; k < order.size(); ++k) {
    detail::TensorImpl* t = order[k];
    if (t->node || !t->requires_grad || grads[k].empty()) continue;
    if (!t->grad) {
      t->grad = std::move(grads[k]);
    } else {
      auto& acc = *t->grad;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grads[k][i];
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(std::span<const double>,
                                      std::span<std::vector<double>* const>)>
                       backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

}  // namespace detail

}  // namespace bkd
