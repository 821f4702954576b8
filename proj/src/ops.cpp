#include "xmreid/ops.hpp"

#include "xmreid/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xmreid {

namespace {

using Index = Eigen::Index;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
  }
}

void require_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

VectorMap as_vec(std::span<double> s) { return VectorMap(s.data(), static_cast<Index>(s.size())); }
ConstVectorMap as_vec(std::span<const double> s) {
  return ConstVectorMap(s.data(), static_cast<Index>(s.size()));
}
MatrixMap as_mat(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MatrixMap(s.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}
ConstMatrixMap as_mat(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(s.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}

// Rows x columns view of a rank-1 or rank-2 tensor (rank 1 is one row).
std::pair<std::size_t, std::size_t> row_layout(const char* op, const Tensor& x) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + to_string(x.shape()));
}

template <typename F, typename D>
Tensor unary(const char* name, const Tensor& x, F forward, D derivative) {
  Buffer out(x.size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_op_result(name, x.shape(), std::move(out), {x},
                        [x, derivative](const BackwardContext& ctx) {
                          auto in = x.values();
                          auto& gx = ctx.input_grads[0];
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += ctx.grad[i] * derivative(in[i], ctx.output[i]);
                          }
                        });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Buffer out(m * p);
  as_mat(std::span<double>(out), m, p).noalias() = a.matrix() * b.matrix();
  return make_op_result("matmul", {m, p}, std::move(out), {a, b},
                        [a, b, m, k, p](const BackwardContext& ctx) {
                          auto g = as_mat(ctx.grad, m, p);
                          if (!ctx.input_grads[0].empty()) {
                            as_mat(ctx.input_grads[0], m, k).noalias() += g * b.matrix().transpose();
                          }
                          if (!ctx.input_grads[1].empty()) {
                            as_mat(ctx.input_grads[1], k, p).noalias() += a.matrix().transpose() * g;
                          }
                        });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Buffer out(a.size());
  as_vec(std::span<double>(out)) = a.vec() + b.vec();
  return make_op_result("add", a.shape(), std::move(out), {a, b}, [](const BackwardContext& ctx) {
    for (auto& gi : ctx.input_grads) {
      if (!gi.empty()) as_vec(gi) += as_vec(ctx.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Buffer out(a.size());
  as_vec(std::span<double>(out)) = a.vec() - b.vec();
  return make_op_result("sub", a.shape(), std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (!ctx.input_grads[0].empty()) as_vec(ctx.input_grads[0]) += as_vec(ctx.grad);
    if (!ctx.input_grads[1].empty()) as_vec(ctx.input_grads[1]) -= as_vec(ctx.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Buffer out(a.size());
  as_vec(std::span<double>(out)) = a.vec().cwiseProduct(b.vec());
  return make_op_result("mul", a.shape(), std::move(out), {a, b},
                        [a, b](const BackwardContext& ctx) {
                          auto g = as_vec(ctx.grad);
                          if (!ctx.input_grads[0].empty()) {
                            as_vec(ctx.input_grads[0]) += g.cwiseProduct(b.vec());
                          }
                          if (!ctx.input_grads[1].empty()) {
                            as_vec(ctx.input_grads[1]) += g.cwiseProduct(a.vec());
                          }
                        });
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.size());
  as_vec(std::span<double>(out)) = x.vec() * factor;
  return make_op_result("scale", x.shape(), std::move(out), {x},
                        [factor](const BackwardContext& ctx) {
                          as_vec(ctx.input_grads[0]) += factor * as_vec(ctx.grad);
                        });
}

Tensor add_scalar(const Tensor& x, double offset) {
  Buffer out(x.size());
  as_vec(std::span<double>(out)) = x.vec().array() + offset;
  return make_op_result("add_scalar", x.shape(), std::move(out), {x},
                        [](const BackwardContext& ctx) {
                          as_vec(ctx.input_grads[0]) += as_vec(ctx.grad);
                        });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", bias, 1);
  if (bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not fit " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), f = x.dim(1);
  Buffer out(x.size());
  as_mat(std::span<double>(out), n, f) = x.matrix().rowwise() + bias.vec().transpose();
  return make_op_result("add_bias", x.shape(), std::move(out), {x, bias},
                        [n, f](const BackwardContext& ctx) {
                          auto g = as_mat(ctx.grad, n, f);
                          if (!ctx.input_grads[0].empty()) as_vec(ctx.input_grads[0]) += as_vec(ctx.grad);
                          if (!ctx.input_grads[1].empty()) {
                            as_vec(ctx.input_grads[1]) += g.colwise().sum().transpose();
                          }
                        });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_clamped(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(std::max(v, kLogClamp)); },
      [](double in, double) { return in > kLogClamp ? 1.0 / in : 0.0; });
}

Tensor softmax(const Tensor& logits) {
  const auto [rows, cols] = row_layout("softmax", logits);
  require_finite("softmax", logits.values());
  Buffer out(logits.size());
  auto in = as_mat(logits.values(), rows, cols);
  auto y = as_mat(std::span<double>(out), rows, cols);
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const double mx = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_op_result("softmax", logits.shape(), std::move(out), {logits},
                        [rows, cols](const BackwardContext& ctx) {
                          auto y = as_mat(ctx.output, rows, cols);
                          auto g = as_mat(ctx.grad, rows, cols);
                          auto gx = as_mat(ctx.input_grads[0], rows, cols);
                          for (Index r = 0; r < static_cast<Index>(rows); ++r) {
                            const double dot = y.row(r).dot(g.row(r));
                            gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
                          }
                        });
}

Tensor sum(const Tensor& x) {
  return make_op_result("sum", {1}, {x.vec().sum()}, {x}, [](const BackwardContext& ctx) {
    as_vec(ctx.input_grads[0]).array() += ctx.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  return make_op_result("mean", {1}, {x.vec().mean()}, {x}, [n](const BackwardContext& ctx) {
    as_vec(ctx.input_grads[0]).array() += ctx.grad[0] / n;
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("global_avg_pool: expected [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  }
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t spatial = x.size() / (n * c);
  Buffer out(n * c);
  as_vec(std::span<double>(out)) = as_mat(x.values(), n * c, spatial).rowwise().mean();
  Shape shape = batched ? Shape{n, c} : Shape{c};
  return make_op_result("global_avg_pool", std::move(shape), std::move(out), {x},
                        [n, c, spatial](const BackwardContext& ctx) {
                          auto gx = as_mat(ctx.input_grads[0], n * c, spatial);
                          gx.colwise() += as_vec(ctx.grad) / static_cast<double>(spatial);
                        });
}

Tensor l2_normalize(const Tensor& x) {
  const auto [rows, cols] = row_layout("l2_normalize", x);
  Buffer out(x.size());
  Buffer norms(rows);
  auto in = as_mat(x.values(), rows, cols);
  auto y = as_mat(std::span<double>(out), rows, cols);
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    norms[r] = std::max(in.row(r).norm(), 1e-12);
    y.row(r) = in.row(r) / norms[r];
  }
  return make_op_result("l2_normalize", x.shape(), std::move(out), {x},
                        [rows, cols, norms](const BackwardContext& ctx) {
                          auto y = as_mat(ctx.output, rows, cols);
                          auto g = as_mat(ctx.grad, rows, cols);
                          auto gx = as_mat(ctx.input_grads[0], rows, cols);
                          for (Index r = 0; r < static_cast<Index>(rows); ++r) {
                            const double dot = y.row(r).dot(g.row(r));
                            gx.row(r) += (g.row(r) - dot * y.row(r)) / norms[r];
                          }
                        });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = s.size() == first.size();
    for (std::size_t d = 0; compatible && d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) compatible = false;
    }
    if (!compatible) {
      throw DimensionError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + axis));
  const std::size_t inner = numel(Shape(first.begin() + axis + 1, first.end()));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;

  Buffer out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto src = parts[i].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * widths[i], widths[i], out.begin() + o * row + offset);
    }
    offset += widths[i];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op_result("concat", std::move(out_shape), std::move(out), inputs,
                        [outer, row, widths](const BackwardContext& ctx) {
                          std::size_t offset = 0;
                          for (std::size_t i = 0; i < widths.size(); ++i) {
                            auto& gi = ctx.input_grads[i];
                            if (!gi.empty()) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t k = 0; k < widths[i]; ++k) {
                                  gi[o * widths[i] + k] += ctx.grad[o * row + offset + k];
                                }
                              }
                            }
                            offset += widths[i];
                          }
                        });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + to_string(s));
  if (begin >= end || end > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for axis of length " + std::to_string(s[axis]));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t in_row = s[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Buffer out(outer * width);
  auto src = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * in_row + start, width, out.begin() + o * width);
  }
  return make_op_result("slice", std::move(out_shape), std::move(out), {x},
                        [outer, in_row, width, start](const BackwardContext& ctx) {
                          auto& gx = ctx.input_grads[0];
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t k = 0; k < width; ++k) {
                              gx[o * in_row + start + k] += ctx.grad[o * width + k];
                            }
                          }
                        });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw UsageError("gather_rows: empty index list");
  const std::size_t n = x.dim(0);
  const std::size_t width = x.size() / n;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (auto r : idx) {
    if (r >= n) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range");
  }
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  Buffer out(idx.size() * width);
  auto src = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.begin() + idx[i] * width, width, out.begin() + i * width);
  }
  return make_op_result("gather_rows", std::move(out_shape), std::move(out), {x},
                        [idx, width](const BackwardContext& ctx) {
                          auto& gx = ctx.input_grads[0];
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            for (std::size_t k = 0; k < width; ++k) {
                              gx[idx[i] * width + k] += ctx.grad[i * width + k];
                            }
                          }
                        });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Buffer out(x.values().begin(), x.values().end());
  return make_op_result("reshape", std::move(shape), std::move(out), {x},
                        [](const BackwardContext& ctx) {
                          as_vec(ctx.input_grads[0]) += as_vec(ctx.grad);
                        });
}

Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw UsageError("take: empty index list");
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  Buffer out(idx.size());
  auto src = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= src.size()) throw DimensionError("take: index out of range");
    out[i] = src[idx[i]];
  }
  return make_op_result("take", {idx.size()}, std::move(out), {x},
                        [idx](const BackwardContext& ctx) {
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            ctx.input_grads[0][idx[i]] += ctx.grad[i];
                          }
                        });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, out_c, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* dst = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          double* row = dst + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(row, g.ow, 0.0);
            continue;
          }
          const double* src = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t p = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = cols + ((ch * g.kh + i) * g.kw + j) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* row = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("conv2d: input must be [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  }
  require_rank("conv2d", w, 4);
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  const bool batched = x.rank() == 4;
  const std::size_t off = batched ? 1 : 0;
  ConvGeometry g{};
  g.n = batched ? x.dim(0) : 1;
  g.c = x.dim(off);
  g.h = x.dim(off + 1);
  g.w = x.dim(off + 2);
  g.out_c = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.c) {
    throw DimensionError("conv2d: kernel " + to_string(w.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                         to_string(x.shape()));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t in_size = g.c * g.h * g.w;
  const std::size_t out_size = g.out_c * g.pixels();
  Buffer out(g.n * out_size);
  Buffer cols(g.pointwise() ? 0 : g.patch() * g.pixels());
  auto kernel = as_mat(w.values(), g.out_c, g.patch());
  for (std::size_t b = 0; b < g.n; ++b) {
    const double* img = x.values().data() + b * in_size;
    if (!g.pointwise()) im2col(img, g, cols.data());
    const double* col_ptr = g.pointwise() ? img : cols.data();
    as_mat(std::span<double>(out.data() + b * out_size, out_size), g.out_c, g.pixels()).noalias() =
        kernel * ConstMatrixMap(col_ptr, static_cast<Index>(g.patch()), static_cast<Index>(g.pixels()));
  }

  Shape shape = batched ? Shape{g.n, g.out_c, g.oh, g.ow} : Shape{g.out_c, g.oh, g.ow};
  return make_op_result(
      "conv2d", std::move(shape), std::move(out), {x, w}, [x, w, g](const BackwardContext& ctx) {
        const std::size_t in_size = g.c * g.h * g.w;
        const std::size_t out_size = g.out_c * g.pixels();
        auto kernel = as_mat(w.values(), g.out_c, g.patch());
        Buffer cols(g.pointwise() ? 0 : g.patch() * g.pixels());
        Buffer dcols(cols.size());
        auto& gx = ctx.input_grads[0];
        auto& gw = ctx.input_grads[1];
        for (std::size_t b = 0; b < g.n; ++b) {
          auto dy = as_mat(ctx.grad.subspan(b * out_size, out_size), g.out_c, g.pixels());
          const double* img = x.values().data() + b * in_size;
          if (!gw.empty()) {
            if (!g.pointwise()) im2col(img, g, cols.data());
            const double* col_ptr = g.pointwise() ? img : cols.data();
            as_mat(gw, g.out_c, g.patch()).noalias() +=
                dy * ConstMatrixMap(col_ptr, static_cast<Index>(g.patch()),
                                    static_cast<Index>(g.pixels()))
                         .transpose();
          }
          if (!gx.empty()) {
            if (g.pointwise()) {
              as_mat(gx.subspan(b * in_size, in_size), g.patch(), g.pixels()).noalias() +=
                  kernel.transpose() * dy;
            } else {
              as_mat(std::span<double>(dcols), g.patch(), g.pixels()).noalias() = kernel.transpose() * dy;
              col2im_add(dcols.data(), g, gx.data() + b * in_size);
            }
          }
        }
      });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BatchNormMode mode, double momentum, double eps) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("batch_norm: expected [N,C] or [N,C,H,W], got " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.size() / (n * c);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean), static_cast<const Tensor*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError("batch_norm: per-channel tensor " + to_string(t->shape()) +
                           " does not match " + to_string(x.shape()));
    }
  }
  const std::size_t count = n * spatial;
  auto in = x.values();
  Eigen::VectorXd mu(c), inv_std(c);
  if (mode == BatchNormMode::eval) {
    mu = running_mean.vec();
    inv_std = (running_var.vec().array() + eps).rsqrt();
  } else {
    Eigen::VectorXd var(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        s += as_vec(in.subspan((b * c + ch) * spatial, spatial)).sum();
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        ss += (as_vec(in.subspan((b * c + ch) * spatial, spatial)).array() - m).square().sum();
      }
      mu[ch] = m;
      var[ch] = ss / static_cast<double>(count);
    }
    inv_std = (var.array() + eps).rsqrt();
    if (mode == BatchNormMode::train) {
      const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      running_mean.vec() = (1.0 - momentum) * running_mean.vec() + momentum * mu;
      running_var.vec() = (1.0 - momentum) * running_var.vec() + momentum * unbias * var;
    }
  }

  Buffer xhat(x.size());
  Buffer out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t o = (b * c + ch) * spatial;
      auto xh = as_vec(std::span<double>(xhat).subspan(o, spatial));
      xh = (as_vec(in.subspan(o, spatial)).array() - mu[ch]) * inv_std[ch];
      as_vec(std::span<double>(out).subspan(o, spatial)) =
          xh.array() * gamma.values()[ch] + beta.values()[ch];
    }
  }

  const bool batch_stats = mode != BatchNormMode::eval;
  return make_op_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std, n, c, spatial, count,
       batch_stats](const BackwardContext& ctx) {
        auto& gx = ctx.input_grads[0];
        auto& gg = ctx.input_grads[1];
        auto& gb = ctx.input_grads[2];
        const std::span<const double> xh(xhat);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t o = (b * c + ch) * spatial;
            auto g = as_vec(ctx.grad.subspan(o, spatial));
            sum_g += g.sum();
            sum_gx += g.dot(as_vec(xh.subspan(o, spatial)));
          }
          if (!gg.empty()) gg[ch] += sum_gx;
          if (!gb.empty()) gb[ch] += sum_g;
          if (gx.empty()) continue;
          const double k = gamma.values()[ch] * inv_std[ch];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t o = (b * c + ch) * spatial;
            auto g = as_vec(ctx.grad.subspan(o, spatial));
            auto dst = as_vec(gx.subspan(o, spatial));
            if (batch_stats) {
              dst.array() += (k / m) * (m * g.array() - sum_g -
                                        as_vec(xh.subspan(o, spatial)).array() * sum_gx);
            } else {
              dst += k * g;
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto [rows, cols] = row_layout("cross_entropy", logits);
  if (labels.size() != rows) {
    throw UsageError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cols) {
      throw UsageError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                       std::to_string(cols) + ")");
    }
  }
  require_finite("cross_entropy", logits.values());
  auto in = as_mat(logits.values(), rows, cols);
  RowMatrix probs(rows, cols);
  double total = 0.0;
  for (Index r = 0; r < static_cast<Index>(rows); ++r) {
    const double mx = in.row(r).maxCoeff();
    const double lse = mx + std::log((in.row(r).array() - mx).exp().sum());
    total += lse - in(r, labels[r]);
    probs.row(r) = (in.row(r).array() - lse).exp().matrix();
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const double inv_n = 1.0 / static_cast<double>(rows);
  return make_op_result("cross_entropy", {1}, {total * inv_n}, {logits},
                        [probs = std::move(probs), lab, inv_n](const BackwardContext& ctx) {
                          auto gx = as_mat(ctx.input_grads[0], probs.rows(), probs.cols());
                          const double s = ctx.grad[0] * inv_n;
                          gx += s * probs;
                          for (std::size_t r = 0; r < lab.size(); ++r) gx(r, lab[r]) -= s;
                        });
}

Tensor pairwise_distances(const Tensor& x) {
  require_rank("pairwise_distances", x, 2);
  const std::size_t m = x.dim(0), d = x.dim(1);
  auto in = x.matrix();
  Buffer out(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double dist = (in.row(i) - in.row(j)).norm();
      out[i * m + j] = dist;
      out[j * m + i] = dist;
    }
  }
  return make_op_result("pairwise_distances", {m, m}, std::move(out), {x},
                        [x, m, d](const BackwardContext& ctx) {
                          auto in = x.matrix();
                          auto gx = as_mat(ctx.input_grads[0], m, d);
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < m; ++j) {
                              const double dist = ctx.output[i * m + j];
                              if (i == j || dist == 0.0) continue;
                              const double s = (ctx.grad[i * m + j] + ctx.grad[j * m + i]) / dist;
                              gx.row(i) += s * (in.row(i) - in.row(j));
                            }
                          }
                        });
}

}  // namespace xmreid
