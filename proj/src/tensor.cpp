#include "relreason/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace relreason {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar>::Tensor() : node_(std::make_shared<NodeType>()) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : node_(std::make_shared<NodeType>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<NodeType>()) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename Scalar>
std::size_t Tensor<Scalar>::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  if (!node_->leaf) throw std::logic_error("set_requires_grad: only leaf tensors can be toggled");
  node_->requires_grad = on;
  return *this;
}

template <typename Scalar>
MatrixMap<Scalar> Tensor<Scalar>::matrix() {
  if (rank() != 2) throw ShapeError("matrix: tensor " + shape_str(shape()) + " is not 2-D");
  return MatrixMap<Scalar>(node_->data.data(), static_cast<Eigen::Index>(node_->shape[0]),
                           static_cast<Eigen::Index>(node_->shape[1]));
}

template <typename Scalar>
ConstMatrixMap<Scalar> Tensor<Scalar>::matrix() const {
  if (rank() != 2) throw ShapeError("matrix: tensor " + shape_str(shape()) + " is not 2-D");
  return ConstMatrixMap<Scalar>(node_->data.data(), static_cast<Eigen::Index>(node_->shape[0]),
                                static_cast<Eigen::Index>(node_->shape[1]));
}

template <typename Scalar>
void Tensor<Scalar>::backward() {
  if (size() != 1) throw ShapeError("backward: loss " + shape_str(shape()) + " is not a scalar");
  if (node_->consumed) throw std::logic_error("backward: graph already consumed by a previous backward()");
  if (!node_->requires_grad) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");

  // Iterative DFS post-order gives a topological order of the non-leaf nodes.
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeType* child = node->inputs[next++].get();
      if (child->leaf || !child->requires_grad || visited.count(child)) continue;
      if (child->consumed) throw std::logic_error("backward: graph already consumed by a previous backward()");
      visited.insert(child);
      stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] = Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (node->adjoint) node->adjoint(*node);
    node->adjoint = nullptr;
    node->consumed = true;
    if (node != node_.get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
  // Children precede parents in `order`, so a node is only released by its
  // last parent after it has been visited here.
  for (NodeType* node : order) node->inputs.clear();
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  Tensor copy(node_->shape, node_->data);
  copy.node_->requires_grad = node_->leaf && node_->requires_grad;
  return copy;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::make_result(Shape shape, std::vector<Scalar> data,
                                           std::vector<Tensor> inputs, const char* op,
                                           std::function<void(NodeType&)> adjoint) {
  Tensor out(std::move(shape), std::move(data));
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node_->leaf = false;
  out.node_->requires_grad = true;
  out.node_->adjoint = std::move(adjoint);
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace relreason
