#include "relreason/ops.hpp"

#include <algorithm>
#include <initializer_list>
#include <cmath>
#include <limits>
#include <string>

namespace relreason {

namespace {

using Index = Eigen::Index;

template <typename S>
using Node = detail::Node<S>;

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename S>
void require_rank(const char* op, const Tensor<S>& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename S>
Node<S>& input(Node<S>& self, std::size_t i) {
  return *self.inputs[i];
}

template <typename S>
std::vector<S> copy_data(const Tensor<S>& x) {
  return {x.data().begin(), x.data().end()};
}

// Applies f elementwise and g'(x, y) in backward: dx += dy * g'(x, y).
template <typename S, typename F, typename D>
Tensor<S> unary(const char* op, const Tensor<S>& x, F f, D df) {
  std::vector<S> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor<S>::make_result(x.shape(), std::move(out), {x}, op, [df](Node<S>& self) {
    Node<S>& a = input(self, 0);
    if (!a.requires_grad) return;
    S* __restrict ga = a.grad_buffer().data();
    const S* __restrict gy = self.grad.data();
    const S* __restrict xa = a.data.data();
    const S* __restrict ya = self.data.data();
    const std::size_t n = a.data.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i] * df(xa[i], ya[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Kink probe

namespace {
thread_local KinkProbe* g_probe = nullptr;
}

KinkProbe::Scope::Scope(KinkProbe& probe) : previous_(g_probe) {
  probe.min_margin = std::numeric_limits<double>::infinity();
  probe.signature = 1469598103934665603ULL;
  probe.count = 0;
  g_probe = &probe;
}

KinkProbe::Scope::~Scope() { g_probe = previous_; }

KinkProbe* KinkProbe::active() { return g_probe; }

void KinkProbe::record(double margin, bool positive_side) {
  min_margin = std::min(min_margin, margin);
  signature = (signature ^ (positive_side ? 0x9eULL : 0x3bULL)) * 1099511628211ULL;
  ++count;
}

namespace {
// Fixed-order reduction over 8 interleaved lanes. Eigen's reductions on
// mapped memory peel to the pointer's alignment, which makes the summation
// order (and the rounding) vary between otherwise identical runs.
template <typename S, typename F>
S lane_sum(std::size_t n, F term) {
  S acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += term(i + l);
  S tail = 0;
  for (; i < n; ++i) tail += term(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename S>
void probe_kinks(std::span<const S> values) {
  if (KinkProbe* probe = KinkProbe::active()) {
    for (S v : values) probe->record(std::abs(static_cast<double>(v)), v > S(0));
  }
}
}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, "add", [](Node<S>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node<S>& in = input(self, k);
      if (!in.requires_grad) continue;
      auto g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, "sub", [](Node<S>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node<S>& in = input(self, k);
      if (!in.requires_grad) continue;
      const S sign = k == 0 ? S(1) : S(-1);
      auto g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node<S>& self) {
    Node<S>& x = input(self, 0);
    Node<S>& y = input(self, 1);
    if (x.requires_grad) {
      auto g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("maximum", a, b);
  std::vector<S> out(a.size());
  std::vector<S> diff(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::max(a.data()[i], b.data()[i]);
    diff[i] = a.data()[i] - b.data()[i];
  }
  probe_kinks<S>(diff);
  // Ties route the gradient to the first operand.
  return Tensor<S>::make_result(a.shape(), std::move(out), {a, b}, "maximum", [](Node<S>& self) {
    Node<S>& x = input(self, 0);
    Node<S>& y = input(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool first = x.data[i] >= y.data[i];
      if (first && x.requires_grad) x.grad_buffer()[i] += self.grad[i];
      if (!first && y.requires_grad) y.grad_buffer()[i] += self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return unary<S>("scale", x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S offset) {
  return unary<S>("add_scalar", x, [offset](S v) { return v + offset; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  probe_kinks<S>(x.data());
  return unary<S>("relu", x, [](S v) { return v > S(0) ? v : S(0); },
                  [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  probe_kinks<S>(x.data());
  return unary<S>("leaky_relu", x, [slope](S v) { return v > S(0) ? v : slope * v; },
                  [slope](S v, S) { return v > S(0) ? S(1) : slope; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary<S>(
      "sigmoid", x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary<S>("log", x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = 0;
  for (S v : x.data()) total += v;
  return Tensor<S>::make_result(Shape{1}, {total}, {x}, "sum", [](Node<S>& self) {
    Node<S>& a = input(self, 0);
    auto g = a.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  S total = 0;
  for (S v : x.data()) total += v;
  const S n = static_cast<S>(x.size());
  return Tensor<S>::make_result(Shape{1}, {total / n}, {x}, "mean", [n](Node<S>& self) {
    Node<S>& a = input(self, 0);
    auto g = a.grad_buffer();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return Tensor<S>::make_result(std::move(shape), copy_data(x), {x}, "reshape", [](Node<S>& self) {
    Node<S>& a = input(self, 0);
    auto g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat: operand " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts.front().shape()));
    }
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<S> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.begin() + r * widths[k], widths[k], out.begin() + r * total + offset);
    }
    offset += widths[k];
  }
  return Tensor<S>::make_result(Shape{rows, total}, std::move(out), parts, "concat",
                                [widths, rows, total](Node<S>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    Node<S>& in = input(self, k);
                                    if (in.requires_grad) {
                                      auto g = in.grad_buffer();
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t c = 0; c < widths[k]; ++c)
                                          g[r * widths[k] + c] += self.grad[r * total + off + c];
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", x, 2);
  if (begin >= end || end > x.dim(1)) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1), width = end - begin;
  std::vector<S> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().begin() + r * cols + begin, width, out.begin() + r * width);
  return Tensor<S>::make_result(Shape{rows, width}, std::move(out), {x}, "slice_cols",
                                [rows, cols, width, begin](Node<S>& self) {
                                  auto g = input(self, 0).grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t c = 0; c < width; ++c)
                                      g[r * cols + begin + c] += self.grad[r * width + c];
                                });
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows: scalar input");
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t n = x.dim(0);
  const std::size_t stride = x.size() / n;
  std::vector<std::size_t> index(rows.begin(), rows.end());
  std::vector<S> out(index.size() * stride);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + index[i] * stride, stride, out.begin() + i * stride);
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  return Tensor<S>::make_result(std::move(shape), std::move(out), {x}, "gather_rows",
                                [index = std::move(index), stride](Node<S>& self) {
                                  auto g = input(self, 0).grad_buffer();
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    for (std::size_t c = 0; c < stride; ++c)
                                      g[index[i] * stride + c] += self.grad[i * stride + c];
                                });
}

// ---------------------------------------------------------------------------
// Dense layers

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = b.dim(1);
  std::vector<S> out(m * n);
  MatrixMap<S>(out.data(), Index(m), Index(n)).noalias() = a.matrix() * b.matrix();
  return Tensor<S>::make_result(Shape{m, n}, std::move(out), {a, b}, "matmul", [](Node<S>& self) {
    Node<S>& x = input(self, 0);
    Node<S>& y = input(self, 1);
    const Index m = Index(x.shape[0]), k = Index(x.shape[1]), n = Index(y.shape[1]);
    ConstMatrixMap<S> dy(self.grad.data(), m, n);
    if (x.requires_grad) {
      MatrixMap<S>(x.grad_buffer().data(), m, k).noalias() += dy * ConstMatrixMap<S>(y.data.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      MatrixMap<S>(y.grad_buffer().data(), k, n).noalias() += ConstMatrixMap<S>(x.data.data(), m, k).transpose() * dy;
    }
  });
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  if (x.dim(1) != weight.dim(1) || bias.size() != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), out_features = weight.dim(0);
  std::vector<S> out(n * out_features);
  MatrixMap<S> y(out.data(), Index(n), Index(out_features));
  y.noalias() = x.matrix() * weight.matrix().transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.data().data(), Index(out_features));
  return Tensor<S>::make_result(Shape{n, out_features}, std::move(out), {x, weight, bias}, "linear",
                                [](Node<S>& self) {
                                  Node<S>& xi = input(self, 0);
                                  Node<S>& w = input(self, 1);
                                  Node<S>& b = input(self, 2);
                                  const Index n = Index(xi.shape[0]), in = Index(xi.shape[1]),
                                              out = Index(w.shape[0]);
                                  ConstMatrixMap<S> dy(self.grad.data(), n, out);
                                  if (xi.requires_grad)
                                    MatrixMap<S>(xi.grad_buffer().data(), n, in).noalias() +=
                                        dy * ConstMatrixMap<S>(w.data.data(), out, in);
                                  if (w.requires_grad)
                                    MatrixMap<S>(w.grad_buffer().data(), out, in).noalias() +=
                                        dy.transpose() * ConstMatrixMap<S>(xi.data.data(), n, in);
                                  if (b.requires_grad) {
                                    auto gb = b.grad_buffer();
                                    for (Index o = 0; o < out; ++o) {
                                      const S* g = self.grad.data() + o;
                                      gb[std::size_t(o)] +=
                                          lane_sum<S>(std::size_t(n), [g, out](std::size_t k) { return g[k * std::size_t(out)]; });
                                    }
                                  }
                                });
}

template <typename S>
Tensor<S> rowwise_dot(const Tensor<S>& a, const Tensor<S>& b) {
  require_rank("rowwise_dot", a, 2);
  require_same_shape("rowwise_dot", a, b);
  const std::size_t n = a.dim(0);
  std::vector<S> out(n);
  const std::size_t d = a.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    const S* pa = a.data().data() + r * d;
    const S* pb = b.data().data() + r * d;
    out[r] = lane_sum<S>(d, [pa, pb](std::size_t k) { return pa[k] * pb[k]; });
  }
  return Tensor<S>::make_result(Shape{n, 1}, std::move(out), {a, b}, "rowwise_dot", [](Node<S>& self) {
    Node<S>& x = input(self, 0);
    Node<S>& y = input(self, 1);
    const Index n = Index(x.shape[0]), d = Index(x.shape[1]);
    Eigen::Map<const VectorX<S>> dy(self.grad.data(), n);
    if (x.requires_grad)
      MatrixMap<S>(x.grad_buffer().data(), n, d) += dy.asDiagonal() * ConstMatrixMap<S>(y.data.data(), n, d);
    if (y.requires_grad)
      MatrixMap<S>(y.grad_buffer().data(), n, d) += dy.asDiagonal() * ConstMatrixMap<S>(x.data.data(), n, d);
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

// Target GEMM width when batching im2col columns across images.
constexpr std::size_t kConvChunkColumns = 1024;

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

// `ld` is the row stride of `col`, so several images can share one matrix.
template <typename S>
void im2col(const S* image, const ConvGeometry& g, S* col, std::size_t ld) {
  const std::size_t cols = ld;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const S* plane = image + ch * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        S* row = col + ((ch * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.pad);
          S* dst = row + oy * g.ow;
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) {
            std::fill_n(dst, g.ow, S(0));
            continue;
          }
          const S* src = plane + std::size_t(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pad);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.w)) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, const ConvGeometry& g, S* image, std::size_t ld) {
  const std::size_t cols = ld;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    S* plane = image + ch * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const S* row = col + ((ch * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          S* dst = plane + std::size_t(iy) * g.w;
          const S* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pad);
            if (ix >= 0 && ix < std::ptrdiff_t(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Conv2dOptions options) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (weight.dim(1) != x.dim(1) || bias.size() != weight.dim(0)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = options.stride;
  g.pad = options.padding;
  g.oh = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.ow = conv_output_size(g.w, g.kw, g.stride, g.pad);

  // Images are processed in chunks whose columns share one GEMM; chunk c
  // occupies a contiguous rows x (chunk * cols) block of `columns`.
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const std::size_t chunk = std::max<std::size_t>(1, kConvChunkColumns / cols);
  std::vector<S> columns(rows * g.n * cols);
  std::vector<S> out(g.n * g.o * cols);
  ConstMatrixMap<S> w(weight.data().data(), Index(g.o), Index(rows));
  auto b = bias.data();
  MatrixX<S> y;
  for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
    const std::size_t count = std::min(chunk, g.n - s0), wide = count * cols;
    S* block = columns.data() + s0 * rows * cols;
    for (std::size_t i = 0; i < count; ++i) im2col(x.data().data() + (s0 + i) * g.c * g.h * g.w, g, block + i * cols, wide);
    y.noalias() = w * ConstMatrixMap<S>(block, Index(rows), Index(wide));
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t o = 0; o < g.o; ++o) {
        const S* src = y.data() + o * wide + i * cols;
        S* dst = out.data() + ((s0 + i) * g.o + o) * cols;
        for (std::size_t k = 0; k < cols; ++k) dst[k] = src[k] + b[o];
      }
  }
  if (!grad_enabled() || !weight.requires_grad()) columns.clear();
  return Tensor<S>::make_result(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), {x, weight, bias}, "conv2d",
      [g, chunk, columns = std::move(columns)](Node<S>& self) {
        Node<S>& xi = input(self, 0);
        Node<S>& wi = input(self, 1);
        Node<S>& bi = input(self, 2);
        const std::size_t rows = g.col_rows(), cols = g.col_cols();
        ConstMatrixMap<S> w(wi.data.data(), Index(g.o), Index(rows));
        MatrixX<S> dy, dcol;
        for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
          const std::size_t count = std::min(chunk, g.n - s0), wide = count * cols;
          dy.resize(Index(g.o), Index(wide));
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t o = 0; o < g.o; ++o)
              std::copy_n(self.grad.data() + ((s0 + i) * g.o + o) * cols, cols, dy.data() + o * wide + i * cols);
          if (wi.requires_grad) {
            ConstMatrixMap<S> col(columns.data() + s0 * rows * cols, Index(rows), Index(wide));
            MatrixMap<S>(wi.grad_buffer().data(), Index(g.o), Index(rows)).noalias() += dy * col.transpose();
          }
          if (bi.requires_grad) Eigen::Map<VectorX<S>>(bi.grad_buffer().data(), Index(g.o)) += dy.rowwise().sum();
          if (xi.requires_grad) {
            dcol.noalias() = w.transpose() * dy;
            auto gx = xi.grad_buffer();
            for (std::size_t i = 0; i < count; ++i)
              col2im_add(dcol.data() + i * cols, g, gx.data() + (s0 + i) * g.c * g.h * g.w, wide);
          }
        }
      });
}

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, std::size_t kernel, std::size_t stride) {
  require_rank("avg_pool2d", x, 4);
  if (kernel == 0) throw ShapeError("avg_pool2d: kernel must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_output_size(h, kernel, stride, 0), ow = conv_output_size(w, kernel, stride, 0);
  const S norm = S(1) / static_cast<S>(kernel * kernel);
  std::vector<S> out(planes * oh * ow);
  auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        S acc = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += in[(p * h + oy * stride + ky) * w + ox * stride + kx];
        out[(p * oh + oy) * ow + ox] = acc * norm;
      }
  return Tensor<S>::make_result(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, "avg_pool2d",
                                [planes, h, w, oh, ow, kernel, stride, norm](Node<S>& self) {
                                  auto g = input(self, 0).grad_buffer();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t oy = 0; oy < oh; ++oy)
                                      for (std::size_t ox = 0; ox < ow; ++ox) {
                                        const S d = self.grad[(p * oh + oy) * ow + ox] * norm;
                                        for (std::size_t ky = 0; ky < kernel; ++ky)
                                          for (std::size_t kx = 0; kx < kernel; ++kx)
                                            g[(p * h + oy * stride + ky) * w + ox * stride + kx] += d;
                                      }
                                });
}

template <typename S>
Tensor<S> adaptive_avg_pool(const Tensor<S>& x) {
  require_rank("adaptive_avg_pool", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<S> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    S acc = 0;
    for (std::size_t i = 0; i < area; ++i) acc += x.data()[p * area + i];
    out[p] = acc / static_cast<S>(area);
  }
  return Tensor<S>::make_result(Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), {x}, "adaptive_avg_pool",
                                [planes, area](Node<S>& self) {
                                  auto g = input(self, 0).grad_buffer();
                                  const S norm = S(1) / static_cast<S>(area);
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t i = 0; i < area; ++i) g[p * area + i] += self.grad[p] * norm;
                                });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, BatchNormOptions options) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batch_norm: expected N x C or N x C x H x W, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t area = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor<S>* t : std::initializer_list<const Tensor<S>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->size() != c) {
      throw ShapeError("batch_norm: parameter " + shape_str(t->shape()) + " does not match " +
                       std::to_string(c) + " channels of " + shape_str(x.shape()));
    }
  }
  if (options.training && n < 2) {
    throw ShapeError("batch_norm: training mode needs batch size >= 2, got " + shape_str(x.shape()));
  }
  const S eps = static_cast<S>(options.eps);
  const auto at = [c, area](std::size_t b, std::size_t ch, std::size_t s) { return (b * c + ch) * area + s; };
  auto in = x.data();
  std::vector<S> out(x.size());

  if (!options.training) {
    std::vector<S> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      inv_std[ch] = S(1) / std::sqrt(running_var.data()[ch] + eps);
      const S m = running_mean.data()[ch], gm = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < area; ++s) out[at(b, ch, s)] = gm * (in[at(b, ch, s)] - m) * inv_std[ch] + bt;
    }
    std::vector<S> mean_copy(running_mean.data().begin(), running_mean.data().end());
    return Tensor<S>::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "batch_norm_eval",
        [n, c, area, at, inv_std = std::move(inv_std), mean_copy = std::move(mean_copy)](Node<S>& self) {
          Node<S>& xi = input(self, 0);
          Node<S>& gi = input(self, 1);
          Node<S>& bi = input(self, 2);
          for (std::size_t ch = 0; ch < c; ++ch) {
            S dgamma = 0, dbeta = 0;
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t s = 0; s < area; ++s) {
                const std::size_t idx = at(b, ch, s);
                const S dy = self.grad[idx];
                dbeta += dy;
                dgamma += dy * (xi.data[idx] - mean_copy[ch]) * inv_std[ch];
                if (xi.requires_grad) xi.grad_buffer()[idx] += dy * gi.data[ch] * inv_std[ch];
              }
            if (gi.requires_grad) gi.grad_buffer()[ch] += dgamma;
            if (bi.requires_grad) bi.grad_buffer()[ch] += dbeta;
          }
        });
  }

  using Row = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
  using MutRow = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  const std::size_t count = n * area;
  std::vector<S> xhat(x.size());
  std::vector<S> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const S* row = in.data() + at(b, ch, 0);
      acc += double(lane_sum<S>(area, [row](std::size_t k) { return row[k]; }));
    }
    const S m = static_cast<S>(acc / double(count));
    double sq = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const S* row = in.data() + at(b, ch, 0);
      sq += double(lane_sum<S>(area, [row, m](std::size_t k) { return (row[k] - m) * (row[k] - m); }));
    }
    const S var = static_cast<S>(sq / double(count));
    inv_std[ch] = S(1) / std::sqrt(var + eps);
    const S gm = gamma.data()[ch], bt = beta.data()[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = at(b, ch, 0);
      MutRow xh(xhat.data() + base, Index(area));
      xh = (Row(in.data() + base, Index(area)) - m) * inv_std[ch];
      MutRow(out.data() + base, Index(area)) = gm * xh + bt;
    }
    const S mom = static_cast<S>(options.momentum);
    const S unbiased = static_cast<S>(sq / double(count - 1));
    running_mean.data()[ch] = (S(1) - mom) * running_mean.data()[ch] + mom * m;
    running_var.data()[ch] = (S(1) - mom) * running_var.data()[ch] + mom * unbiased;
  }
  return Tensor<S>::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [n, c, area, count, at, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
        Node<S>& xi = input(self, 0);
        Node<S>& gi = input(self, 1);
        Node<S>& bi = input(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          S dgamma = 0, dbeta = 0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = at(b, ch, 0);
            const S* dy = self.grad.data() + base;
            const S* xh = xhat.data() + base;
            dbeta += lane_sum<S>(area, [dy](std::size_t k) { return dy[k]; });
            dgamma += lane_sum<S>(area, [dy, xh](std::size_t k) { return dy[k] * xh[k]; });
          }
          if (gi.requires_grad) gi.grad_buffer()[ch] += dgamma;
          if (bi.requires_grad) bi.grad_buffer()[ch] += dbeta;
          if (xi.requires_grad) {
            auto g = xi.grad_buffer();
            // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
            const S k = gi.data[ch] * inv_std[ch] / static_cast<S>(count);
            const S m = static_cast<S>(count);
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t base = at(b, ch, 0);
              MutRow(g.data() + base, Index(area)) +=
                  k * (m * Row(self.grad.data() + base, Index(area)) - dbeta - Row(xhat.data() + base, Index(area)) * dgamma);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification

template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<S> probs(n * c);
  double loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const S* row = logits.data().data() + r * c;
    const S top = *std::max_element(row, row + c);
    S z = 0;
    for (std::size_t k = 0; k < c; ++k) z += (probs[r * c + k] = std::exp(row[k] - top));
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] /= z;
    loss += double(std::log(z) + top - row[labels[r]]);
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return Tensor<S>::make_result(Shape{1}, {static_cast<S>(loss / double(n))}, {logits}, "softmax_cross_entropy",
                                [n, c, probs = std::move(probs), targets = std::move(targets)](Node<S>& self) {
                                  auto g = input(self, 0).grad_buffer();
                                  const S k = self.grad[0] / static_cast<S>(n);
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t j = 0; j < c; ++j)
                                      g[r * c + j] += k * (probs[r * c + j] - (int(j) == targets[r] ? S(1) : S(0)));
                                });
}

template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& x) {
  require_rank("argmax_rows", x, 2);
  std::vector<int> out(x.dim(0));
  const std::size_t c = x.dim(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const S* row = x.data().data() + r * c;
    out[r] = int(std::max_element(row, row + c) - row);
  }
  return out;
}

#define RELREASON_INSTANTIATE_OPS(S)                                                                   \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> maximum(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> scale(const Tensor<S>&, S);                                                       \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                  \
  template Tensor<S> relu(const Tensor<S>&);                                                           \
  template Tensor<S> leaky_relu(const Tensor<S>&, S);                                                  \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                        \
  template Tensor<S> log(const Tensor<S>&);                                                            \
  template Tensor<S> sum(const Tensor<S>&);                                                            \
  template Tensor<S> mean(const Tensor<S>&);                                                           \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                 \
  template Tensor<S> concat(const std::vector<Tensor<S>>&);                                            \
  template Tensor<S> slice_cols(const Tensor<S>&, std::size_t, std::size_t);                           \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const std::size_t>);                      \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> rowwise_dot(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Conv2dOptions);      \
  template Tensor<S> avg_pool2d(const Tensor<S>&, std::size_t, std::size_t);                           \
  template Tensor<S> adaptive_avg_pool(const Tensor<S>&);                                              \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>&,      \
                                Tensor<S>&, BatchNormOptions);                                         \
  template Tensor<S> softmax_cross_entropy(const Tensor<S>&, std::span<const int>);                    \
  template std::vector<int> argmax_rows(const Tensor<S>&);

RELREASON_INSTANTIATE_OPS(float)
RELREASON_INSTANTIATE_OPS(double)

}  // namespace relreason
