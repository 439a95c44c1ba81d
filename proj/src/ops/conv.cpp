#include <algorithm>
#include <string>

#include <Eigen/Core>

#include "densemapnet/ops.hpp"

namespace dmn::ops {
namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajor<T>>;

// Upper bound on partial buffers used by the kernel-gradient reduction. The
// chunking depends only on the tensor shape.
constexpr int kMaxReduceChunks = 32;

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t bias_size,
                     int dilation, const char* op) {
  const Shape& ks = kernel.shape();
  if (dilation < 1) {
    throw ShapeError(std::string(op) + ": dilation must be >= 1, got " + std::to_string(dilation));
  }
  if (ks.n != ks.h || ks.n % 2 == 0) {
    throw ShapeError(std::string(op) + ": kernel must be [k,k,Cin,Cout] with odd k, got " +
                     ks.str());
  }
  if (ks.w != input.shape().c) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(input.shape().c) +
                     " channels but kernel " + ks.str() + " expects " + std::to_string(ks.w));
  }
  if (bias_size != static_cast<std::size_t>(ks.c)) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias_size) +
                     " entries, kernel " + ks.str() + " has " + std::to_string(ks.c) +
                     " output channels");
  }
}

// Columns x in [x0, x1) of an output row read input columns x + dx.
struct Span1D {
  int x0;
  int x1;
};

inline Span1D valid_columns(int width, int dx) {
  return {std::max(0, -dx), std::min(width, width - dx)};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 int dilation) {
  check_conv_args(input, kernel, bias.size(), dilation, "conv2d");
  const Shape in = input.shape();
  const int k = kernel.shape().n;
  const int half = k / 2;
  const int cin = in.c;
  const int cout = kernel.shape().c;
  Tensor<T> out(Shape{in.n, in.h, in.w, cout});
  const int rows = in.n * in.h;

#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int n = r / in.h;
    const int y = r % in.h;
    T* orow = out.row(n, y);
    for (int x = 0; x < in.w; ++x) {
      std::copy(bias.begin(), bias.end(), orow + static_cast<std::ptrdiff_t>(x) * cout);
    }
    MatMap<T> o(orow, in.w, cout);
    for (int i = 0; i < k; ++i) {
      const int sy = y + (i - half) * dilation;
      if (sy < 0 || sy >= in.h) continue;
      for (int j = 0; j < k; ++j) {
        const int dx = (j - half) * dilation;
        const Span1D cols = valid_columns(in.w, dx);
        if (cols.x0 >= cols.x1) continue;
        const int len = cols.x1 - cols.x0;
        ConstMatMap<T> src(input.row(n, sy) + static_cast<std::ptrdiff_t>(cols.x0 + dx) * cin,
                           len, cin);
        ConstMatMap<T> tap(kernel.ptr() + static_cast<std::ptrdiff_t>(i * k + j) * cin * cout,
                           cin, cout);
        o.middleRows(cols.x0, len).noalias() += src * tap;
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                             const Tensor<T>& grad_out, int dilation) {
  check_conv_args(input, kernel, static_cast<std::size_t>(kernel.shape().c), dilation,
                  "conv2d_backward");
  const Shape in = input.shape();
  const int k = kernel.shape().n;
  const int half = k / 2;
  const int cin = in.c;
  const int cout = kernel.shape().c;
  require_same_shape(grad_out.shape(), Shape{in.n, in.h, in.w, cout}, "conv2d_backward grad");

  ConvGrads<T> g{Tensor<T>(in), Tensor<T>(kernel.shape()), Tensor<T>(Shape{1, 1, 1, cout})};
  const int rows = in.n * in.h;

  // Input gradient, gathered per input row so rows never race.
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int n = r / in.h;
    const int sy = r % in.h;
    MatMap<T> gi(g.input.row(n, sy), in.w, cin);
    for (int i = 0; i < k; ++i) {
      const int y = sy - (i - half) * dilation;
      if (y < 0 || y >= in.h) continue;
      for (int j = 0; j < k; ++j) {
        const int dx = (j - half) * dilation;
        const Span1D cols = valid_columns(in.w, dx);
        if (cols.x0 >= cols.x1) continue;
        const int len = cols.x1 - cols.x0;
        ConstMatMap<T> go(grad_out.row(n, y) + static_cast<std::ptrdiff_t>(cols.x0) * cout, len,
                          cout);
        ConstMatMap<T> tap(kernel.ptr() + static_cast<std::ptrdiff_t>(i * k + j) * cin * cout,
                           cin, cout);
        gi.middleRows(cols.x0 + dx, len).noalias() += go * tap.transpose();
      }
    }
  }

  // Kernel and bias gradients: fixed row chunks, reduced in chunk order.
  const int rows_per_chunk = (rows + kMaxReduceChunks - 1) / kMaxReduceChunks;
  const int chunks = rows_per_chunk == 0 ? 0 : (rows + rows_per_chunk - 1) / rows_per_chunk;
  const std::int64_t ksize = kernel.size();
  std::vector<T> partial(static_cast<std::size_t>(chunks) * (ksize + cout), T{});

#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < chunks; ++ch) {
    T* gk = partial.data() + static_cast<std::ptrdiff_t>(ch) * (ksize + cout);
    T* gb = gk + ksize;
    const int r_end = std::min(rows, (ch + 1) * rows_per_chunk);
    for (int r = ch * rows_per_chunk; r < r_end; ++r) {
      const int n = r / in.h;
      const int y = r % in.h;
      const T* gorow = grad_out.row(n, y);
      for (int x = 0; x < in.w; ++x) {
        for (int co = 0; co < cout; ++co) gb[co] += gorow[x * cout + co];
      }
      for (int i = 0; i < k; ++i) {
        const int sy = y + (i - half) * dilation;
        if (sy < 0 || sy >= in.h) continue;
        for (int j = 0; j < k; ++j) {
          const int dx = (j - half) * dilation;
          const Span1D cols = valid_columns(in.w, dx);
          if (cols.x0 >= cols.x1) continue;
          const int len = cols.x1 - cols.x0;
          ConstMatMap<T> src(
              input.row(n, sy) + static_cast<std::ptrdiff_t>(cols.x0 + dx) * cin, len, cin);
          ConstMatMap<T> go(gorow + static_cast<std::ptrdiff_t>(cols.x0) * cout, len, cout);
          MatMap<T> tap(gk + static_cast<std::ptrdiff_t>(i * k + j) * cin * cout, cin, cout);
          tap.noalias() += src.transpose() * go;
        }
      }
    }
  }
  for (int ch = 0; ch < chunks; ++ch) {
    const T* gk = partial.data() + static_cast<std::ptrdiff_t>(ch) * (ksize + cout);
    T* dk = g.kernel.ptr();
    for (std::int64_t e = 0; e < ksize; ++e) dk[e] += gk[e];
    T* db = g.bias.ptr();
    for (int co = 0; co < cout; ++co) db[co] += gk[ksize + co];
  }
  return g;
}

template <typename T>
Tensor<T> flip_kernel(const Tensor<T>& kernel) {
  const Shape ks = kernel.shape();
  Tensor<T> out(ks);
  const std::int64_t block = static_cast<std::int64_t>(ks.w) * ks.c;
  for (int i = 0; i < ks.n; ++i) {
    for (int j = 0; j < ks.h; ++j) {
      const T* src = kernel.ptr() + (static_cast<std::int64_t>(i) * ks.h + j) * block;
      T* dst = out.ptr() +
               (static_cast<std::int64_t>(ks.n - 1 - i) * ks.h + (ks.h - 1 - j)) * block;
      std::copy(src, src + block, dst);
    }
  }
  return out;
}

// For odd k and stride 1 the scatter form equals a correlation with the
// spatially flipped kernel.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernel,
                           std::span<const T> bias) {
  check_conv_args(input, kernel, bias.size(), 1, "conv2d_transpose");
  return conv2d(input, flip_kernel(kernel), bias, 1);
}

template <typename T>
ConvGrads<T> conv2d_transpose_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                                       const Tensor<T>& grad_out) {
  check_conv_args(input, kernel, static_cast<std::size_t>(kernel.shape().c), 1,
                  "conv2d_transpose_backward");
  ConvGrads<T> g = conv2d_backward(input, flip_kernel(kernel), grad_out, 1);
  g.kernel = flip_kernel(g.kernel);
  return g;
}

#define DMN_INSTANTIATE_CONV(T)                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::span<const T>, int);     \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                        int);                                                 \
  template Tensor<T> conv2d_transpose(const Tensor<T>&, const Tensor<T>&, std::span<const T>); \
  template ConvGrads<T> conv2d_transpose_backward(const Tensor<T>&, const Tensor<T>&,         \
                                                  const Tensor<T>&);                          \
  template Tensor<T> flip_kernel(const Tensor<T>&);

DMN_INSTANTIATE_CONV(float)
DMN_INSTANTIATE_CONV(double)

}  // namespace dmn::ops
