#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace relreason {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixX<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Raised for shape mismatches and other contract violations inside ops.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

/// One value in the compute graph. Non-leaf nodes keep their inputs and an
/// adjoint closure until backward() consumes them.
template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> adjoint;

  // Zero-initialized on first use.
  std::span<Scalar> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Scalar(0));
    return grad;
  }
};

}  // namespace detail

/// Gradient recording is on by default; NoGradGuard disables it for the
/// lifetime of the guard on the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major n-d array with an optional gradient. Copies share storage
/// (handle semantics); use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using NodeType = detail::Node<Scalar>;
  using NodePtr = std::shared_ptr<NodeType>;

  Tensor();
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> values);

  static Tensor scalar(Scalar value) { return Tensor(Shape{1}, std::vector<Scalar>{value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<Scalar> data() { return node_->data; }
  std::span<const Scalar> data() const { return node_->data; }
  Scalar item() const;

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  /// Row-major 2-D view; rank must be 2.
  MatrixMap<Scalar> matrix();
  ConstMatrixMap<Scalar> matrix() const;

  /// Reverse-mode sweep from this scalar. Populates grad of every leaf that
  /// requires it, then releases the graph. Calling it again on a consumed
  /// graph throws.
  void backward();

  /// Leaf copy of the values without graph history.
  Tensor detach() const;
  Tensor clone() const;

  NodePtr node() const { return node_; }

  /// Builds the result of an op. When any input requires grad, the node keeps
  /// `inputs` and `adjoint`, which must accumulate into the inputs' grads.
  static Tensor make_result(Shape shape, std::vector<Scalar> data,
                            std::vector<Tensor> inputs, const char* op,
                            std::function<void(NodeType&)> adjoint);

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

/// Value copy into another scalar type (no graph history).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& source) {
  std::vector<To> values(source.data().begin(), source.data().end());
  return Tensor<To>(source.shape(), std::move(values));
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace relreason
