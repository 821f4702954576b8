#include "xmreid/gradcheck.hpp"

#include "xmreid/errors.hpp"
#include "xmreid/ops.hpp"

#include <algorithm>
#include <cmath>

namespace xmreid {

namespace {

double reduce(const Tensor& out, std::span<const double> projection) {
  return out.vec().dot(ConstVectorMap(projection.data(), static_cast<Eigen::Index>(projection.size())));
}

}  // namespace

double gradient_relative_error(const GradProblem& problem, Rng& rng, double step) {
  std::vector<Tensor> inputs = problem.inputs;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out = problem.build(inputs);
  std::vector<double> projection(out.size());
  for (auto& r : projection) r = normal(rng);

  Tensor weights(out.shape(), projection);
  backward(sum(mul(out, weights)));

  double max_diff = 0.0, max_analytic = 0.0, max_numeric = 0.0;
  for (auto& t : inputs) {
    auto values = t.values();
    auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = reduce(problem.build(inputs), projection);
      values[i] = saved - step;
      const double down = reduce(problem.build(inputs), projection);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      max_diff = std::max(max_diff, std::abs(numeric - grad[i]));
      max_analytic = std::max(max_analytic, std::abs(grad[i]));
      max_numeric = std::max(max_numeric, std::abs(numeric));
    }
  }
  return max_diff / std::max({max_analytic, max_numeric, 1e-6});
}

void GradCheckSuite::register_op(std::string op, ProblemFactory factory) {
  entries_.emplace_back(std::move(op), std::move(factory));
}

std::vector<std::string> GradCheckSuite::ops() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : entries_) names.push_back(name);
  return names;
}

std::vector<GradCheckReport> GradCheckSuite::run(std::size_t cases, std::uint64_t seed,
                                                 double tolerance) const {
  std::vector<GradCheckReport> reports;
  for (std::size_t e = 0; e < entries_.size(); ++e) {
    const auto& [name, factory] = entries_[e];
    Rng rng = make_rng(seed, e);
    GradCheckReport report{name, cases, 0.0, true};
    for (std::size_t c = 0; c < cases; ++c) {
      GradProblem problem = factory(rng);
      const double err = gradient_relative_error(problem, rng);
      if (!(err <= report.worst_relative_error)) report.worst_relative_error = err;
    }
    report.passed = report.worst_relative_error < tolerance;
    reports.push_back(report);
  }
  return reports;
}

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(rng, hi - lo + 1);
}

Tensor gaussian(Rng& rng, Shape shape, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sd * normal(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Shape matrix_shape(Rng& rng) { return {pick(rng, 1, 5), pick(rng, 1, 6)}; }

// Values bounded away from zero so ReLU's kink is never straddled by the
// finite-difference step.
Tensor away_from_zero(Rng& rng, Shape shape) {
  Tensor t = gaussian(rng, std::move(shape));
  for (auto& x : t.values()) x += (x >= 0 ? 0.05 : -0.05);
  return t;
}

GradProblem unary_problem(Tensor x, Tensor (*op)(const Tensor&)) {
  return {{std::move(x)}, [op](const std::vector<Tensor>& in) { return op(in[0]); }};
}

GradProblem composite_problem(Rng& rng) {
  const Shape shape = {pick(rng, 2, 4), pick(rng, 2, 5)};
  struct Step {
    std::size_t op, a, b;
  };
  std::vector<Step> plan;
  for (std::size_t s = 0; s < 5; ++s) {
    const std::size_t available = 2 + s;
    Step step{uniform_index(rng, 7), uniform_index(rng, available), uniform_index(rng, available)};
    // a - a is identically zero and would feed l2_normalize a zero row.
    if (step.op == 2 && step.a == step.b) step.b = (step.a + 1) % available;
    plan.push_back(step);
  }
  return {{gaussian(rng, shape), gaussian(rng, shape)}, [plan](const std::vector<Tensor>& in) {
            std::vector<Tensor> nodes = in;
            for (const auto& s : plan) {
              const Tensor& a = nodes[s.a];
              const Tensor& b = nodes[s.b];
              switch (s.op) {
                case 0: nodes.push_back(add(a, b)); break;
                case 1: nodes.push_back(mul(a, b)); break;
                case 2: nodes.push_back(sub(a, b)); break;
                case 3: nodes.push_back(sigmoid(a)); break;
                case 4: nodes.push_back(softmax(a)); break;
                case 5: nodes.push_back(l2_normalize(a)); break;
                default: nodes.push_back(scale(a, 1.7)); break;
              }
            }
            return nodes.back();
          }};
}

}  // namespace

GradCheckSuite GradCheckSuite::builtin() {
  GradCheckSuite suite;
  suite.register_op("matmul", [](Rng& rng) {
    const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), p = pick(rng, 1, 5);
    return GradProblem{{gaussian(rng, {m, k}), gaussian(rng, {k, p})},
                       [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }};
  });
  suite.register_op("add", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    return GradProblem{{gaussian(rng, s), gaussian(rng, s)},
                       [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }};
  });
  suite.register_op("sub", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    return GradProblem{{gaussian(rng, s), gaussian(rng, s)},
                       [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }};
  });
  suite.register_op("mul", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    return GradProblem{{gaussian(rng, s), gaussian(rng, s)},
                       [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }};
  });
  suite.register_op("scale", [](Rng& rng) {
    const double f = uniform(rng, -3.0, 3.0);
    return GradProblem{{gaussian(rng, matrix_shape(rng))},
                       [f](const std::vector<Tensor>& in) { return scale(in[0], f); }};
  });
  suite.register_op("add_scalar", [](Rng& rng) {
    const double c = uniform(rng, -3.0, 3.0);
    return GradProblem{{gaussian(rng, matrix_shape(rng))},
                       [c](const std::vector<Tensor>& in) { return add_scalar(in[0], c); }};
  });
  suite.register_op("add_bias", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    return GradProblem{{gaussian(rng, s), gaussian(rng, {s[1]})},
                       [](const std::vector<Tensor>& in) { return add_bias(in[0], in[1]); }};
  });
  suite.register_op("relu", [](Rng& rng) { return unary_problem(away_from_zero(rng, matrix_shape(rng)), relu); });
  suite.register_op("sigmoid", [](Rng& rng) { return unary_problem(gaussian(rng, matrix_shape(rng), 2.0), sigmoid); });
  suite.register_op("log", [](Rng& rng) {
    return unary_problem(uniform_tensor(rng, matrix_shape(rng), 0.05, 3.0), log_clamped);
  });
  suite.register_op("softmax", [](Rng& rng) {
    Shape s = uniform_index(rng, 2) ? matrix_shape(rng) : Shape{pick(rng, 1, 6)};
    return unary_problem(gaussian(rng, s, 2.0), softmax);
  });
  suite.register_op("sum", [](Rng& rng) { return unary_problem(gaussian(rng, matrix_shape(rng)), sum); });
  suite.register_op("mean", [](Rng& rng) { return unary_problem(gaussian(rng, matrix_shape(rng)), mean); });
  suite.register_op("global_avg_pool", [](Rng& rng) {
    Shape s = {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    if (uniform_index(rng, 2)) s.insert(s.begin(), pick(rng, 1, 3));
    return unary_problem(gaussian(rng, s), global_avg_pool);
  });
  suite.register_op("l2_normalize", [](Rng& rng) {
    Shape s = uniform_index(rng, 2) ? matrix_shape(rng) : Shape{pick(rng, 1, 6)};
    return unary_problem(away_from_zero(rng, s), l2_normalize);
  });
  suite.register_op("concat", [](Rng& rng) {
    Shape s = {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
    const std::size_t axis = uniform_index(rng, 3);
    Shape s2 = s;
    s2[axis] = pick(rng, 1, 3);
    return GradProblem{{gaussian(rng, s), gaussian(rng, s2)}, [axis](const std::vector<Tensor>& in) {
                         return concat(std::span<const Tensor>(in), axis);
                       }};
  });
  suite.register_op("slice", [](Rng& rng) {
    Shape s = {pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 1, 3)};
    const std::size_t axis = uniform_index(rng, 3);
    const std::size_t begin = uniform_index(rng, s[axis]);
    const std::size_t end = pick(rng, begin + 1, s[axis]);
    return GradProblem{{gaussian(rng, s)}, [axis, begin, end](const std::vector<Tensor>& in) {
                         return slice(in[0], axis, begin, end);
                       }};
  });
  suite.register_op("gather_rows", [](Rng& rng) {
    const Shape s = {pick(rng, 1, 5), pick(rng, 1, 4)};
    std::vector<std::size_t> rows(pick(rng, 1, 7));
    for (auto& r : rows) r = uniform_index(rng, s[0]);
    return GradProblem{{gaussian(rng, s)}, [rows](const std::vector<Tensor>& in) {
                         return gather_rows(in[0], rows);
                       }};
  });
  suite.register_op("reshape", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    return GradProblem{{gaussian(rng, s)}, [s](const std::vector<Tensor>& in) {
                         return reshape(in[0], {s[1], s[0]});
                       }};
  });
  suite.register_op("take", [](Rng& rng) {
    const Shape s = matrix_shape(rng);
    std::vector<std::size_t> idx(pick(rng, 1, 8));
    for (auto& i : idx) i = uniform_index(rng, numel(s));
    return GradProblem{{gaussian(rng, s)}, [idx](const std::vector<Tensor>& in) { return take(in[0], idx); }};
  });
  suite.register_op("conv2d", [](Rng& rng) {
    const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    const std::size_t k = uniform_index(rng, 2) ? 3 : 1;
    const std::size_t c = pick(rng, 1, 3), o = pick(rng, 1, 3);
    Shape xs = {c, pick(rng, 3, 6), pick(rng, 3, 6)};
    if (uniform_index(rng, 2)) xs.insert(xs.begin(), pick(rng, 1, 2));
    return GradProblem{{gaussian(rng, xs), gaussian(rng, {o, c, k, k})},
                       [stride, pad](const std::vector<Tensor>& in) {
                         return conv2d(in[0], in[1], stride, pad);
                       }};
  });
  for (const auto mode : {BatchNormMode::train, BatchNormMode::eval}) {
    const std::string name = mode == BatchNormMode::train ? "batch_norm" : "batch_norm_eval";
    suite.register_op(name, [mode](Rng& rng) {
      const std::size_t c = pick(rng, 1, 3);
      Shape xs = uniform_index(rng, 2) ? Shape{pick(rng, 2, 4), c, pick(rng, 1, 3), pick(rng, 1, 3)}
                                       : Shape{pick(rng, 3, 6), c};
      Tensor rm = gaussian(rng, {c}, 0.3);
      Tensor rv = uniform_tensor(rng, {c}, 0.5, 2.0);
      return GradProblem{
          {gaussian(rng, xs), uniform_tensor(rng, {c}, 0.5, 1.5), gaussian(rng, {c})},
          [mode, rm, rv](const std::vector<Tensor>& in) mutable {
            return batch_norm(in[0], in[1], in[2], rm, rv,
                              mode == BatchNormMode::train ? BatchNormMode::train_frozen : mode);
          }};
    });
  }
  suite.register_op("cross_entropy", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), c = pick(rng, 2, 6);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(uniform_index(rng, c));
    return GradProblem{{gaussian(rng, {n, c}, 2.0)}, [labels](const std::vector<Tensor>& in) {
                         return cross_entropy(in[0], labels);
                       }};
  });
  suite.register_op("pairwise_distances", [](Rng& rng) {
    return unary_problem(gaussian(rng, {pick(rng, 2, 5), pick(rng, 1, 4)}), pairwise_distances);
  });
  suite.register_op("composite", composite_problem);
  return suite;
}

}  // namespace xmreid
