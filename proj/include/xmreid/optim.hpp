#pragma once

#include "xmreid/tensor.hpp"

#include <Eigen/Core>

#include <span>
#include <vector>

namespace xmreid {

/// v <- momentum * v + grad; p <- p - lr * v; then every grad is zeroed.
/// velocities[i] must have params[i].size() entries.
void sgd_momentum_step(std::span<Tensor> params, std::span<Eigen::VectorXd> velocities, double lr,
                       double momentum);

struct ParamGroup {
  std::vector<Tensor> params;
  double lr = 0.01;
};

/// SGD with heavy-ball momentum over groups that differ only in learning rate.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<ParamGroup> groups, double momentum);

  void step();
  void zero_grad();

  std::size_t group_count() const { return groups_.size(); }
  const ParamGroup& group(std::size_t i) const { return groups_.at(i); }
  std::vector<Eigen::VectorXd>& velocities(std::size_t group) { return velocities_.at(group); }
  const std::vector<Eigen::VectorXd>& velocities(std::size_t group) const {
    return velocities_.at(group);
  }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<Eigen::VectorXd>> velocities_;
  double momentum_;
};

}  // namespace xmreid
