#include "vea/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace vea {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace autograd {

double* Node::grad_buffer() {
  if (grad.empty()) grad.assign(static_cast<size_t>(numel), 0.0);
  return grad.data();
}

}  // namespace autograd

namespace {

std::atomic<bool> g_finite_checks{true};

std::shared_ptr<autograd::Node> new_node(Shape shape,
                                         std::shared_ptr<std::vector<double>> value) {
  auto node = std::make_shared<autograd::Node>();
  node->numel = shape_numel(shape);
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (static_cast<int64_t>(node->value->size()) != node->numel) {
    throw ShapeError("value size does not match shape " + shape_str(node->shape));
  }
  return node;
}

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

void check_finite(const double* data, int64_t n, const char* where) {
  if (!g_finite_checks) return;
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) {
      throw InvariantError(std::string("non-finite value in ") + where);
    }
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  auto node = new_node(std::move(shape),
                       std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto n = shape_numel(shape);
  check_finite(&fill, 1, "full");
  auto node = new_node(std::move(shape),
                       std::make_shared<std::vector<double>>(static_cast<size_t>(n), fill));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  check_finite(values.data(), static_cast<int64_t>(values.size()), "from_vector");
  auto node = new_node(std::move(shape),
                       std::make_shared<std::vector<double>>(std::move(values)));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_vector({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("empty tensor");
  return node_->shape;
}

int64_t Tensor::numel() const {
  if (!node_) throw ContractError("empty tensor");
  return node_->numel;
}

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis out of range for shape " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

const double* Tensor::data() const {
  if (!node_) throw ContractError("empty tensor");
  return node_->value->data();
}

double* Tensor::mutable_data() {
  if (!node_) throw ContractError("empty tensor");
  return node_->value->data();
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor with numel " + std::to_string(numel()));
  return data()[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch");
  int64_t flat = 0;
  size_t d = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= s[d]) throw ShapeError("index out of bounds");
    flat = flat * s[d] + i;
    ++d;
  }
  return data()[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw ContractError("empty tensor");
  if (flag && !node_->is_leaf()) {
    throw ContractError("requires_grad can only be set on leaf tensors");
  }
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw ContractError("no gradient materialized");
  return from_vector(node_->shape, node_->grad);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto node = new_node(node_->shape, node_->value);
  return wrap(std::move(node));
}

Tensor Tensor::clone() const {
  if (!node_) return {};
  auto node = new_node(node_->shape, std::make_shared<std::vector<double>>(*node_->value));
  return wrap(std::move(node));
}

Tensor Tensor::wrap(std::shared_ptr<autograd::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

namespace detail {

Tensor make_op_result(Shape shape, std::shared_ptr<std::vector<double>> value,
                      std::vector<std::shared_ptr<autograd::Node>> parents,
                      std::function<void(const double*)> backprop,
                      const char* op_name) {
  check_finite(value->data(), static_cast<int64_t>(value->size()), op_name);
  auto node = new_node(std::move(shape), std::move(value));
  bool needs_grad = false;
  for (const auto& p : parents) {
    if (p && p->requires_grad) {
      needs_grad = true;
      break;
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on empty tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward on a tensor that is not connected to any requires_grad leaf");
  }
  if (root->consumed) throw ContractError("backward called twice; the tape is consumed");

  // Iterative DFS postorder over the requires_grad subgraph.
  std::vector<autograd::Node*> order;
  std::unordered_set<autograd::Node*> visited;
  std::vector<std::pair<autograd::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      autograd::Node* parent = node->parents[next_child].get();
      ++next_child;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    autograd::Node* node = *it;
    if (node->backprop && !node->grad.empty()) {
      node->backprop(node->grad.data());
    }
  }
  // Consume the tape: free interior state, keep leaf gradients.
  for (autograd::Node* node : order) {
    if (!node->is_leaf()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->backprop = nullptr;
      node->parents.clear();
      node->consumed = true;
    }
  }
}

}  // namespace vea
