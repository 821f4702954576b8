#include "xmreid/optim.hpp"

#include "xmreid/errors.hpp"

namespace xmreid {

void sgd_momentum_step(std::span<Tensor> params, std::span<Eigen::VectorXd> velocities, double lr,
                       double momentum) {
  if (params.size() != velocities.size()) {
    throw UsageError("sgd_momentum_step: one velocity buffer per parameter required");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = velocities[i];
    if (static_cast<std::size_t>(v.size()) != params[i].size()) {
      throw DimensionError("sgd_momentum_step: velocity size does not match parameter " +
                           to_string(params[i].shape()));
    }
    v = momentum * v + params[i].grad_vec();
    params[i].vec() -= lr * v;
    params[i].zero_grad();
  }
}

SgdMomentum::SgdMomentum(std::vector<ParamGroup> groups, double momentum)
    : groups_(std::move(groups)), momentum_(momentum) {
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  for (const auto& g : groups_) {
    if (!(g.lr > 0.0)) throw ConfigError("learning rate must be positive");
    std::vector<Eigen::VectorXd> v;
    v.reserve(g.params.size());
    for (const auto& p : g.params) v.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
    velocities_.push_back(std::move(v));
  }
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    sgd_momentum_step(groups_[i].params, velocities_[i], groups_[i].lr, momentum_);
  }
}

void SgdMomentum::zero_grad() {
  for (auto& g : groups_) xmreid::zero_grad(std::span<Tensor>(g.params));
}

}  // namespace xmreid
