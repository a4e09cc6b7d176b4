#include "cdlab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include "cdlab/errors.hpp"

namespace cdlab {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor() : Tensor(Shape{1}, {0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (data.size() != numel_of(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  node_->id = next_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
  auto n = data.size();
  return Tensor(Shape{n}, std::move(data), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor(Shape{n, n}, std::move(d));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= ndim()) throw IndexError("axis " + std::to_string(axis) + " out of range for " +
                                       shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::rows() const { return ndim() == 1 ? 1 : node_->shape[0]; }

std::size_t Tensor::cols() const { return node_->shape.back(); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * cols() + c];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->value, node_->requires_grad); }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(value), false);
  if (!t_grad_enabled) return out;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Tape Tape::record(const Tensor& root) {
  Tape tape;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    tape.order_.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(tape.order_.begin(), tape.order_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id < b->id; });
  return tape;
}

void Tape::run_backward(detail::Node& root) {
  root.grad_buffer()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      // interior gradients are consumed exactly once
      if (!n->parents.empty()) std::vector<double>().swap(n->grad);
    }
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  auto tape = Tape::record(loss);
  tape.run_backward(*loss.node());
}

}  // namespace cdlab
