#include "reference.hpp"

#include <limits>

namespace dmn::reference {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 int dilation) {
  const Shape s = input.shape();
  const int k = kernel.shape().n;
  const int cout = kernel.shape().c;
  const int half = k / 2;
  Tensor<T> out(Shape{s.n, s.h, s.w, cout});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int co = 0; co < cout; ++co) {
          double acc = bias[co];
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
              for (int ci = 0; ci < s.c; ++ci) {
                const int sy = y + (i - half) * dilation;
                const int sx = x + (j - half) * dilation;
                if (sy < 0 || sy >= s.h || sx < 0 || sx >= s.w) continue;
                acc += static_cast<double>(input(n, sy, sx, ci)) * kernel(i, j, ci, co);
              }
          out(n, y, x, co) = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernel,
                           std::span<const T> bias) {
  const Shape s = input.shape();
  const int k = kernel.shape().n;
  const int cout = kernel.shape().c;
  const int half = k / 2;
  Tensor<double> acc(Shape{s.n, s.h, s.w, cout});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int ci = 0; ci < s.c; ++ci)
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const int ty = y + i - half;
              const int tx = x + j - half;
              if (ty < 0 || ty >= s.h || tx < 0 || tx >= s.w) continue;
              for (int co = 0; co < cout; ++co) {
                acc(n, ty, tx, co) += static_cast<double>(input(n, y, x, ci)) * kernel(i, j, ci, co);
              }
            }
  Tensor<T> out(acc.shape());
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int co = 0; co < cout; ++co) out(n, y, x, co) = static_cast<T>(acc(n, y, x, co) + bias[co]);
  return out;
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& input, int pool) {
  const Shape s = input.shape();
  Tensor<T> out(Shape{s.n, s.h / pool, s.w / pool, s.c});
  for (int n = 0; n < s.n; ++n)
    for (int py = 0; py < s.h / pool; ++py)
      for (int px = 0; px < s.w / pool; ++px)
        for (int c = 0; c < s.c; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          for (int y = py * pool; y < (py + 1) * pool; ++y)
            for (int x = px * pool; x < (px + 1) * pool; ++x)
              if (input(n, y, x, c) > best) best = input(n, y, x, c);
          out(n, py, px, c) = best;
        }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  const Shape s = input.shape();
  Tensor<T> out(Shape{s.n, s.h * factor, s.w * factor, s.c});
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h * factor; ++y)
      for (int x = 0; x < s.w * factor; ++x)
        for (int c = 0; c < s.c; ++c) out(n, y, x, c) = input(n, y / factor, x / factor, c);
  return out;
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, std::span<const float>, int);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, std::span<const double>, int);
template Tensor<float> conv2d_transpose(const Tensor<float>&, const Tensor<float>&, std::span<const float>);
template Tensor<double> conv2d_transpose(const Tensor<double>&, const Tensor<double>&, std::span<const double>);
template Tensor<float> max_pool(const Tensor<float>&, int);
template Tensor<double> max_pool(const Tensor<double>&, int);
template Tensor<float> upsample_nearest(const Tensor<float>&, int);
template Tensor<double> upsample_nearest(const Tensor<double>&, int);

}  // namespace dmn::reference
