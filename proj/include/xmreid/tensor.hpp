#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xmreid {

using Shape = std::vector<std::size_t>;
/// Tensor storage. Eigen picks its vectorised reduction split from the buffer
/// address, so storage is over-aligned to keep results independent of where
/// an allocation lands.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Handed to a backward rule: the op's forward output, the gradient flowing
/// into it, and one gradient buffer per input (empty when that input does not
/// require a gradient). Rules accumulate into the input buffers.
struct BackwardContext {
  std::span<const double> output;
  std::span<const double> grad;
  std::vector<std::span<double>> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

namespace detail {
struct Node;
}

/// Dense row-major float64 array with an accumulated gradient. Copies share
/// storage: a Tensor is a handle onto a node of the computation graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  template <typename Derived>
  static Tensor from_matrix(const Eigen::DenseBase<Derived>& m, bool requires_grad = false) {
    RowMatrix tmp = m;
    std::vector<double> values(tmp.data(), tmp.data() + tmp.size());
    return Tensor({static_cast<std::size_t>(tmp.rows()), static_cast<std::size_t>(tmp.cols())},
                  std::move(values), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<double> values();
  std::span<const double> values() const;
  /// Gradient buffer, sized like values(); zero until a backward pass reaches it.
  std::span<double> grad();
  std::span<const double> grad() const;
  double item() const;

  VectorMap vec();
  ConstVectorMap vec() const;
  /// Rank-2 view; throws DimensionError for other ranks.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;
  ConstVectorMap grad_vec() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  const std::string& op() const;
  std::uint64_t sequence() const;

  void zero_grad();
  /// Leaf copy of the current values, disconnected from the graph.
  Tensor detach() const;
  /// Shares nothing with *this.
  Tensor clone() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(std::string, Shape, Buffer, std::vector<Tensor>, BackwardFn);
  friend void backward(const Tensor&);
  friend struct ComputationGraph;

  std::shared_ptr<detail::Node> node_;
};

/// Builds the output of a differentiable operation. When no input requires a
/// gradient the result is a constant and `rule` is dropped.
Tensor make_op_result(std::string op, Shape shape, Buffer values,
                      std::vector<Tensor> inputs, BackwardFn rule);

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls (call twice without zeroing and they double); intermediate gradients
/// are reset at the start of each sweep.
void backward(const Tensor& root);

/// Nodes reachable from a root through gradient-carrying edges, in creation
/// order. backward() visits exactly these, in reverse.
struct ComputationGraph {
  struct Entry {
    std::string op;
    std::uint64_t sequence;
    std::vector<std::uint64_t> inputs;
  };
  std::vector<Entry> nodes;

  static ComputationGraph of(const Tensor& root);
};

void zero_grad(std::span<Tensor> tensors);

}  // namespace xmreid
