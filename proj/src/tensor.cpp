#include "xmreid/tensor.hpp"

#include "xmreid/errors.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace xmreid {

namespace detail {

struct Node {
  Shape shape;
  Buffer values;
  Buffer grad;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn rule;

  Buffer& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

namespace {
thread_local std::uint64_t next_sequence = 1;
}

std::uint64_t new_sequence() { return next_sequence++; }

}  // namespace detail

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, Buffer values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (values.size() != numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->sequence = detail::new_sequence();
  return node;
}

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw UsageError("operation on an undefined tensor");
  return *node;
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad)
    : node_(make_leaf(shape, Buffer(numel(shape), 0.0), requires_grad)) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(make_leaf(std::move(shape), Buffer(values.begin(), values.end()), requires_grad)) {}



Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return checked(node_).values.size(); }

std::span<double> Tensor::values() { return checked(node_).values; }
std::span<const double> Tensor::values() const { return checked(node_).values; }
std::span<double> Tensor::grad() { return checked(node_).grad_buffer(); }
std::span<const double> Tensor::grad() const { return checked(node_).grad_buffer(); }

double Tensor::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return node_->values[0];
}

VectorMap Tensor::vec() { return VectorMap(values().data(), static_cast<Eigen::Index>(size())); }
ConstVectorMap Tensor::vec() const {
  return ConstVectorMap(values().data(), static_cast<Eigen::Index>(size()));
}
ConstVectorMap Tensor::grad_vec() const {
  auto g = grad();
  return ConstVectorMap(g.data(), static_cast<Eigen::Index>(g.size()));
}

MatrixMap Tensor::matrix() {
  if (rank() != 2) throw DimensionError("matrix view needs rank 2, got " + to_string(shape()));
  return MatrixMap(values().data(), static_cast<Eigen::Index>(dim(0)),
                   static_cast<Eigen::Index>(dim(1)));
}

ConstMatrixMap Tensor::matrix() const {
  if (rank() != 2) throw DimensionError("matrix view needs rank 2, got " + to_string(shape()));
  return ConstMatrixMap(values().data(), static_cast<Eigen::Index>(dim(0)),
                        static_cast<Eigen::Index>(dim(1)));
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& node = checked(node_);
  if (!node.inputs.empty()) throw UsageError("requires_grad can only be toggled on leaf tensors");
  node.requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).inputs.empty(); }
const std::string& Tensor::op() const { return checked(node_).op; }
std::uint64_t Tensor::sequence() const { return checked(node_).sequence; }

void Tensor::zero_grad() {
  auto& node = checked(node_);
  node.grad.assign(node.values.size(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(shape(), node_->values, false));
}

Tensor Tensor::clone() const {
  Tensor copy(make_leaf(shape(), node_->values, node_->requires_grad));
  if (!node_->grad.empty()) copy.node_->grad = node_->grad;
  return copy;
}

Tensor make_op_result(std::string op, Shape shape, Buffer values, std::vector<Tensor> inputs,
                      BackwardFn rule) {
  auto node = make_leaf(std::move(shape), std::move(values), false);
  node->op = std::move(op);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->rule = std::move(rule);
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
  }
  return Tensor(std::move(node));
}

namespace {

// Reachable gradient-carrying nodes, sorted by creation order.
std::vector<detail::Node*> reachable(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->sequence < b->sequence; });
  return order;
}

}  // namespace

void backward(const Tensor& root) {
  auto& r = checked(root.node_);
  if (r.values.size() != 1) {
    throw UsageError("backward() needs a scalar root, got shape " + to_string(r.shape));
  }
  if (!r.requires_grad) throw UsageError("backward() root is not attached to any trainable tensor");

  auto nodes = reachable(&r);
  for (auto* n : nodes) {
    if (!n->inputs.empty()) n->grad.assign(n->values.size(), 0.0);
  }
  r.grad_buffer()[0] += 1.0;

  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* n = *it;
    if (!n->rule) continue;
    BackwardContext ctx{n->values, n->grad_buffer(), {}};
    ctx.input_grads.reserve(n->inputs.size());
    for (auto& in : n->inputs) {
      if (in->requires_grad) {
        ctx.input_grads.emplace_back(in->grad_buffer());
      } else {
        ctx.input_grads.emplace_back();
      }
    }
    n->rule(ctx);
  }
}

ComputationGraph ComputationGraph::of(const Tensor& root) {
  ComputationGraph g;
  auto& r = checked(root.node_);
  if (!r.requires_grad) return g;
  for (auto* n : reachable(&r)) {
    Entry e{n->op, n->sequence, {}};
    for (auto& in : n->inputs) {
      if (in->requires_grad) e.inputs.push_back(in->sequence);
    }
    g.nodes.push_back(std::move(e));
  }
  return g;
}

void zero_grad(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace xmreid
