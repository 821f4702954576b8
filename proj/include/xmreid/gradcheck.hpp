#pragma once

#include "xmreid/rng.hpp"
#include "xmreid/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace xmreid {

/// A differentiable function of some leaf tensors. `build` is re-run for
/// every perturbed evaluation, so it must read the inputs it is handed.
struct GradProblem {
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> build;
};

using ProblemFactory = std::function<GradProblem(Rng&)>;

/// Compares backward() against central differences for
/// L = sum(R * build(inputs)) with a random Gaussian projection R.
/// Returns max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)
/// over every input element.
double gradient_relative_error(const GradProblem& problem, Rng& rng, double step = 1e-5);

struct GradCheckReport {
  std::string op;
  std::size_t cases = 0;
  double worst_relative_error = 0.0;
  bool passed = false;
};

class GradCheckSuite {
 public:
  void register_op(std::string op, ProblemFactory factory);
  std::vector<std::string> ops() const;
  std::vector<GradCheckReport> run(std::size_t cases, std::uint64_t seed,
                                   double tolerance = 1e-5) const;

  /// Every differentiable primitive in ops.hpp plus a random composite graph.
  static GradCheckSuite builtin();

 private:
  std::vector<std::pair<std::string, ProblemFactory>> entries_;
};

}  // namespace xmreid
