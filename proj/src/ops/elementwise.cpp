// Batch normalization, activations and dropout.

#include <algorithm>
#include <cmath>
#include <string>

#include "densemapnet/ops.hpp"

namespace dmn::ops {
namespace {

constexpr int kStatChunks = 32;

// Per-channel sums over all pixels, accumulated in f64 over fixed chunks so
// the result is independent of the thread count.
template <typename T, typename F>
std::vector<double> channel_sums(std::int64_t pixels, int channels, F&& value) {
  const std::int64_t per_chunk = std::max<std::int64_t>(1, (pixels + kStatChunks - 1) / kStatChunks);
  const int chunks = static_cast<int>((pixels + per_chunk - 1) / per_chunk);
  std::vector<double> partial(static_cast<std::size_t>(chunks) * channels, 0.0);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < chunks; ++ch) {
    double* acc = partial.data() + static_cast<std::ptrdiff_t>(ch) * channels;
    const std::int64_t end = std::min(pixels, (ch + 1) * per_chunk);
    for (std::int64_t p = ch * per_chunk; p < end; ++p) {
      for (int c = 0; c < channels; ++c) acc[c] += value(p, c);
    }
  }
  std::vector<double> total(static_cast<std::size_t>(channels), 0.0);
  for (int ch = 0; ch < chunks; ++ch) {
    for (int c = 0; c < channels; ++c) total[c] += partial[static_cast<std::size_t>(ch) * channels + c];
  }
  return total;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ShapeError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
}

}  // namespace

template <typename T>
BatchNormResult<T> batch_norm(const Tensor<T>& input, std::span<const T> gamma,
                              std::span<const T> beta, std::span<T> running_mean,
                              std::span<T> running_var, double momentum, double epsilon,
                              const OpContext& ctx) {
  const Shape s = input.shape();
  const auto channels = static_cast<std::size_t>(s.c);
  if (gamma.size() != channels || beta.size() != channels || running_mean.size() != channels ||
      running_var.size() != channels) {
    throw ShapeError("batch_norm: parameter vectors must have " + std::to_string(s.c) +
                     " entries (input " + s.str() + ")");
  }
  const std::int64_t pixels = static_cast<std::int64_t>(s.n) * s.h * s.w;
  const T* x = input.ptr();
  std::vector<double> mean(channels);
  std::vector<double> var(channels);

  if (ctx.mode == Mode::train) {
    if (pixels == 0) throw ShapeError("batch_norm: empty batch in train mode");
    const std::vector<double> sum = channel_sums<T>(
        pixels, s.c, [&](std::int64_t p, int c) { return static_cast<double>(x[p * s.c + c]); });
    for (std::size_t c = 0; c < channels; ++c) mean[c] = sum[c] / static_cast<double>(pixels);
    const std::vector<double> sq = channel_sums<T>(pixels, s.c, [&](std::int64_t p, int c) {
      const double d = static_cast<double>(x[p * s.c + c]) - mean[c];
      return d * d;
    });
    for (std::size_t c = 0; c < channels; ++c) {
      var[c] = sq[c] / static_cast<double>(pixels);
      running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1.0 - momentum) * mean[c]);
      running_var[c] = static_cast<T>(momentum * running_var[c] + (1.0 - momentum) * var[c]);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  BatchNormResult<T> res{Tensor<T>(s), BatchNormCache<T>{ctx.mode, Tensor<T>(s), {}}};
  res.cache.inv_std.resize(channels);
  std::vector<T> mu(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    res.cache.inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + epsilon));
    mu[c] = static_cast<T>(mean[c]);
  }
  T* xh = res.cache.normalized.ptr();
  T* out = res.output.ptr();
  const T* inv = res.cache.inv_std.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t e = p * s.c + c;
      xh[e] = (x[e] - mu[c]) * inv[c];
      out[e] = gamma[c] * xh[e] + beta[c];
    }
  }
  return res;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                      std::span<const T> gamma) {
  const Shape s = grad_out.shape();
  require_same_shape(s, cache.normalized.shape(), "batch_norm_backward");
  if (gamma.size() != static_cast<std::size_t>(s.c)) {
    throw ShapeError("batch_norm_backward: gamma has " + std::to_string(gamma.size()) +
                     " entries, expected " + std::to_string(s.c));
  }
  const std::int64_t pixels = static_cast<std::int64_t>(s.n) * s.h * s.w;
  const T* dy = grad_out.ptr();
  const T* xh = cache.normalized.ptr();
  const std::vector<double> sum_dy = channel_sums<T>(
      pixels, s.c, [&](std::int64_t p, int c) { return static_cast<double>(dy[p * s.c + c]); });
  const std::vector<double> sum_dy_xh = channel_sums<T>(pixels, s.c, [&](std::int64_t p, int c) {
    const std::int64_t e = p * s.c + c;
    return static_cast<double>(dy[e]) * static_cast<double>(xh[e]);
  });

  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{1, 1, 1, s.c}), Tensor<T>(Shape{1, 1, 1, s.c})};
  for (int c = 0; c < s.c; ++c) {
    g.gamma.ptr()[c] = static_cast<T>(sum_dy_xh[c]);
    g.beta.ptr()[c] = static_cast<T>(sum_dy[c]);
  }
  T* dx = g.input.ptr();
  const T* inv = cache.inv_std.data();
  if (cache.mode == Mode::train) {
    const double m = static_cast<double>(pixels);
    std::vector<T> mean_dy(static_cast<std::size_t>(s.c));
    std::vector<T> mean_dy_xh(static_cast<std::size_t>(s.c));
    for (int c = 0; c < s.c; ++c) {
      mean_dy[c] = static_cast<T>(sum_dy[c] / m);
      mean_dy_xh[c] = static_cast<T>(sum_dy_xh[c] / m);
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < pixels; ++p) {
      for (int c = 0; c < s.c; ++c) {
        const std::int64_t e = p * s.c + c;
        dx[e] = gamma[c] * inv[c] * (dy[e] - mean_dy[c] - xh[e] * mean_dy_xh[c]);
      }
    }
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < pixels; ++p) {
      for (int c = 0; c < s.c; ++c) {
        const std::int64_t e = p * s.c + c;
        dx[e] = gamma[c] * inv[c] * dy[e];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const std::int64_t n = input.size();
  const T* x = input.ptr();
  T* y = out.ptr();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  require_same_shape(grad_out.shape(), input.shape(), "relu_backward");
  Tensor<T> gin(input.shape());
  const std::int64_t n = input.size();
  const T* x = input.ptr();
  const T* dy = grad_out.ptr();
  T* dx = gin.ptr();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return gin;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const std::int64_t n = input.size();
  const T* x = input.ptr();
  T* y = out.ptr();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    if (x[i] >= T{0}) {
      y[i] = T{1} / (T{1} + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T{1} + e);
    }
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& grad_out) {
  require_same_shape(grad_out.shape(), output.shape(), "sigmoid_backward");
  Tensor<T> gin(output.shape());
  const std::int64_t n = output.size();
  const T* y = output.ptr();
  const T* dy = grad_out.ptr();
  T* dx = gin.ptr();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) dx[i] = dy[i] * y[i] * (T{1} - y[i]);
  return gin;
}

double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  const std::uint64_t key = splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
  const std::uint64_t bits = splitmix64(key ^ (index * 0xD1B54A32D192ED03ULL));
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, const OpContext& ctx) {
  check_rate(rate);
  if (ctx.mode == Mode::inference || rate == 0.0) return input;
  Tensor<T> out(input.shape());
  const std::int64_t n = input.size();
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  const T* x = input.ptr();
  T* y = out.ptr();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const bool keep = counter_uniform(ctx.rng_seed, ctx.rng_stream_id, static_cast<std::uint64_t>(i)) >= rate;
    y[i] = keep ? x[i] * scale : T{0};
  }
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double rate, const OpContext& ctx) {
  // Same mask and scale as forward.
  return dropout(grad_out, rate, ctx);
}

#define DMN_INSTANTIATE_ELEMENTWISE(T)                                                         \
  template BatchNormResult<T> batch_norm(const Tensor<T>&, std::span<const T>,                \
                                         std::span<const T>, std::span<T>, std::span<T>,      \
                                         double, double, const OpContext&);                   \
  template BatchNormGrads<T> batch_norm_backward(const Tensor<T>&, const BatchNormCache<T>&,  \
                                                 std::span<const T>);                         \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> dropout(const Tensor<T>&, double, const OpContext&);                     \
  template Tensor<T> dropout_backward(const Tensor<T>&, double, const OpContext&);

DMN_INSTANTIATE_ELEMENTWISE(float)
DMN_INSTANTIATE_ELEMENTWISE(double)

}  // namespace dmn::ops
