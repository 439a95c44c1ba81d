// Max pooling, nearest upsampling, zero padding and channel concatenation.

#include <algorithm>
#include <string>

#include "densemapnet/ops.hpp"

namespace dmn::ops {

template <typename T>
PoolResult<T> max_pool(const Tensor<T>& input, int pool) {
  const Shape in = input.shape();
  if (pool < 1) throw ShapeError("max_pool: pool size must be >= 1");
  if (in.h < pool || in.w < pool) {
    throw ShapeError("max_pool: input " + in.str() + " is smaller than the " +
                     std::to_string(pool) + "x" + std::to_string(pool) + " window");
  }
  const Shape os{in.n, in.h / pool, in.w / pool, in.c};
  PoolResult<T> res{Tensor<T>(os), PoolIndexCache{in, os, {}}};
  res.indices.argmax.resize(static_cast<std::size_t>(os.numel()));
  const int rows = os.n * os.h;

#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int n = r / os.h;
    const int py = r % os.h;
    for (int px = 0; px < os.w; ++px) {
      for (int c = 0; c < in.c; ++c) {
        std::int64_t best = input.offset(n, py * pool, px * pool, c);
        T best_val = input.ptr()[best];
        for (int dy = 0; dy < pool; ++dy) {
          for (int dx = 0; dx < pool; ++dx) {
            const std::int64_t idx = input.offset(n, py * pool + dy, px * pool + dx, c);
            if (input.ptr()[idx] > best_val) {
              best_val = input.ptr()[idx];
              best = idx;
            }
          }
        }
        const std::int64_t o = res.output.offset(n, py, px, c);
        res.output.ptr()[o] = best_val;
        res.indices.argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return res;
}

template <typename T>
Tensor<T> max_pool_backward(const Tensor<T>& grad_out, const PoolIndexCache& indices) {
  require_same_shape(grad_out.shape(), indices.output_shape, "max_pool_backward");
  Tensor<T> gin(indices.input_shape);
  // Windows are disjoint, so each input element receives at most one write.
  const std::int64_t count = grad_out.size();
#pragma omp parallel for schedule(static)
  for (std::int64_t o = 0; o < count; ++o) {
    gin.ptr()[indices.argmax[static_cast<std::size_t>(o)]] += grad_out.ptr()[o];
  }
  return gin;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const Shape in = input.shape();
  Tensor<T> out(Shape{in.n, in.h * factor, in.w * factor, in.c});
  const int rows = in.n * in.h * factor;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int n = r / (in.h * factor);
    const int y = r % (in.h * factor);
    const T* src = input.row(n, y / factor);
    T* dst = out.row(n, y);
    for (int x = 0; x < in.w * factor; ++x) {
      std::copy(src + static_cast<std::ptrdiff_t>(x / factor) * in.c,
                src + static_cast<std::ptrdiff_t>(x / factor + 1) * in.c,
                dst + static_cast<std::ptrdiff_t>(x) * in.c);
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out, int factor) {
  if (factor < 1) throw ShapeError("upsample_nearest_backward: factor must be >= 1");
  const Shape gs = grad_out.shape();
  if (gs.h % factor != 0 || gs.w % factor != 0) {
    throw ShapeError("upsample_nearest_backward: gradient " + gs.str() +
                     " is not a multiple of the factor");
  }
  Tensor<T> gin(Shape{gs.n, gs.h / factor, gs.w / factor, gs.c});
  const int rows = gs.n * gin.shape().h;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int n = r / gin.shape().h;
    const int y = r % gin.shape().h;
    T* dst = gin.row(n, y);
    for (int dy = 0; dy < factor; ++dy) {
      const T* src = grad_out.row(n, y * factor + dy);
      for (int x = 0; x < gs.w; ++x) {
        T* d = dst + static_cast<std::ptrdiff_t>(x / factor) * gs.c;
        const T* s = src + static_cast<std::ptrdiff_t>(x) * gs.c;
        for (int c = 0; c < gs.c; ++c) d[c] += s[c];
      }
    }
  }
  return gin;
}

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& input, int target_h, int target_w) {
  const Shape in = input.shape();
  if (target_h < in.h || target_w < in.w) {
    throw ShapeError("zero_pad: target " + std::to_string(target_h) + "x" +
                     std::to_string(target_w) + " is smaller than input " + in.str());
  }
  Tensor<T> out(Shape{in.n, target_h, target_w, in.c});
  for (int n = 0; n < in.n; ++n) {
    for (int y = 0; y < in.h; ++y) {
      std::copy(input.row(n, y), input.row(n, y) + static_cast<std::ptrdiff_t>(in.w) * in.c,
                out.row(n, y));
    }
  }
  return out;
}

template <typename T>
Tensor<T> zero_pad_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  const Shape gs = grad_out.shape();
  if (gs.n != input_shape.n || gs.c != input_shape.c || gs.h < input_shape.h ||
      gs.w < input_shape.w) {
    throw ShapeError("zero_pad_backward: gradient " + gs.str() + " cannot be cropped to " +
                     input_shape.str());
  }
  Tensor<T> gin(input_shape);
  for (int n = 0; n < gs.n; ++n) {
    for (int y = 0; y < input_shape.h; ++y) {
      const T* src = grad_out.row(n, y);
      std::copy(src, src + static_cast<std::ptrdiff_t>(input_shape.w) * gs.c, gin.row(n, y));
    }
  }
  return gin;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = inputs.front()->shape();
  int total = 0;
  for (const Tensor<T>* t : inputs) {
    const Shape s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: input " + s.str() + " does not match " + first.str() +
                       " in batch/height/width");
    }
    total += s.c;
  }
  Tensor<T> out(Shape{first.n, first.h, first.w, total});
  const std::int64_t pixels = static_cast<std::int64_t>(first.n) * first.h * first.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    T* dst = out.ptr() + p * total;
    for (const Tensor<T>* t : inputs) {
      const int c = t->shape().c;
      const T* src = t->ptr() + p * c;
      dst = std::copy(src, src + c, dst);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> concat_channels_backward(const Tensor<T>& grad_out,
                                                std::span<const int> channels) {
  const Shape gs = grad_out.shape();
  int total = 0;
  for (int c : channels) total += c;
  if (total != gs.c) {
    throw ShapeError("concat_channels_backward: pieces sum to " + std::to_string(total) +
                     " channels, gradient has " + std::to_string(gs.c));
  }
  std::vector<Tensor<T>> pieces;
  pieces.reserve(channels.size());
  for (int c : channels) pieces.emplace_back(Shape{gs.n, gs.h, gs.w, c});
  const std::int64_t pixels = static_cast<std::int64_t>(gs.n) * gs.h * gs.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    const T* src = grad_out.ptr() + p * gs.c;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      const int c = channels[i];
      std::copy(src, src + c, pieces[i].ptr() + p * c);
      src += c;
    }
  }
  return pieces;
}

#define DMN_INSTANTIATE_RESAMPLE(T)                                                          \
  template PoolResult<T> max_pool(const Tensor<T>&, int);                                   \
  template Tensor<T> max_pool_backward(const Tensor<T>&, const PoolIndexCache&);            \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                               \
  template Tensor<T> upsample_nearest_backward(const Tensor<T>&, int);                      \
  template Tensor<T> zero_pad(const Tensor<T>&, int, int);                                  \
  template Tensor<T> zero_pad_backward(const Tensor<T>&, const Shape&);                     \
  template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);                    \
  template std::vector<Tensor<T>> concat_channels_backward(const Tensor<T>&,                \
                                                           std::span<const int>);

DMN_INSTANTIATE_RESAMPLE(float)
DMN_INSTANTIATE_RESAMPLE(double)

}  // namespace dmn::ops
