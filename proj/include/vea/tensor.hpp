#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "vea/errors.hpp"

namespace vea {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace autograd {

struct Node {
  Shape shape;
  int64_t numel = 0;
  std::shared_ptr<std::vector<double>> value;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<double> grad;  // allocated lazily; persists on leaves after backward
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(loss)/d(parent) into each parent's grad buffer given this
  // node's grad. Released once backward has run.
  std::function<void(const double*)> backprop;

  bool is_leaf() const { return parents.empty(); }
  double* grad_buffer();  // allocates zeros on first use
};

}  // namespace autograd

/// Dense n-dimensional float64 array with optional participation in a
/// per-forward reverse-mode tape. Values are immutable once a tensor has
/// entered an op; grad is the only mutable field.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;

  const double* data() const;
  /// Mutable access to the raw buffer. Only meaningful on freshly created
  /// leaves (before the tensor is fed to any op); the buffer may be shared
  /// with views otherwise.
  double* mutable_data();

  double item() const;
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  Tensor grad() const;
  void clear_grad();

  /// Same storage, detached from the tape.
  Tensor detach() const;
  /// Deep copy, off-tape leaf.
  Tensor clone() const;

  const std::shared_ptr<autograd::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<autograd::Node> node);

 private:
  std::shared_ptr<autograd::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss. Gradients are
/// materialized on every requires_grad leaf reachable from `loss`; the tape
/// is consumed (interior buffers freed, a second call throws).
void backward(const Tensor& loss);

/// Toggle finite-value checking at op boundaries (default on).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void check_finite(const double* data, int64_t n, const char* where);

namespace detail {

/// Creates an op result. `parents`/`backprop` are recorded only when some
/// input requires grad; otherwise the result is a plain value.
Tensor make_op_result(Shape shape, std::shared_ptr<std::vector<double>> value,
                      std::vector<std::shared_ptr<autograd::Node>> parents,
                      std::function<void(const double*)> backprop,
                      const char* op_name);

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

}  // namespace vea
