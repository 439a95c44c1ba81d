#pragma once

// Forward and backward kernels for every operator in the DenseMapNet graph.
// All functions are pure: outputs are freshly allocated, inputs untouched
// (batch_norm additionally updates the caller's running statistics in train
// mode). Kernels are OpenMP-parallel over image rows; every reduction runs in
// a fixed chunk order so results do not depend on the thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "densemapnet/tensor.hpp"

namespace dmn {

enum class Mode { train, inference };

struct OpContext {
  Mode mode = Mode::inference;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_stream_id = 0;
};

inline constexpr double kBnMomentum = 0.99;
inline constexpr double kBnEpsilon = 1e-3;
inline constexpr double kDropoutRate = 0.2;
inline constexpr int kPoolFactor = 8;

namespace ops {

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;  // [1,1,1,Cout]
};

/// Stride-1 "same" convolution. `kernel` is [k,k,Cin,Cout] with k odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 int dilation);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                             const Tensor<T>& grad_out, int dilation);

/// Stride-1 "same" transposed convolution (scatter form):
/// out[y+i-c, x+j-c, co] += in[y, x, ci] * kernel[i, j, ci, co].
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernel,
                           std::span<const T> bias);

template <typename T>
ConvGrads<T> conv2d_transpose_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                                       const Tensor<T>& grad_out);

/// Argmax positions of a max-pool, as flat offsets into the pre-pool input.
struct PoolIndexCache {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::int64_t> argmax;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  PoolIndexCache indices;
};

/// Non-overlapping pool x pool max; trailing rows/cols that do not fill a
/// window are dropped.
template <typename T>
PoolResult<T> max_pool(const Tensor<T>& input, int pool = kPoolFactor);

template <typename T>
Tensor<T> max_pool_backward(const Tensor<T>& grad_out, const PoolIndexCache& indices);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor = kPoolFactor);

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out, int factor = kPoolFactor);

/// Zero rows appended at the bottom, zero columns on the right.
template <typename T>
Tensor<T> zero_pad(const Tensor<T>& input, int target_h, int target_w);

template <typename T>
Tensor<T> zero_pad_backward(const Tensor<T>& grad_out, const Shape& input_shape);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs);

/// Splits grad_out back into pieces with the given channel counts.
template <typename T>
std::vector<Tensor<T>> concat_channels_backward(const Tensor<T>& grad_out,
                                                std::span<const int> channels);

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::inference;
  Tensor<T> normalized;     // x-hat
  std::vector<T> inv_std;   // per channel
};

template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  BatchNormCache<T> cache;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Train mode normalizes with biased batch statistics over N,H,W and folds
/// them into the running statistics with `momentum`; inference mode uses the
/// running statistics only.
template <typename T>
BatchNormResult<T> batch_norm(const Tensor<T>& input, std::span<const T> gamma,
                              std::span<const T> beta, std::span<T> running_mean,
                              std::span<T> running_var, double momentum, double epsilon,
                              const OpContext& ctx);

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                      std::span<const T> gamma);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& grad_out);

/// Inverted dropout. The mask is a pure function of (seed, stream id,
/// element index), so backward regenerates it instead of storing it.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, const OpContext& ctx);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double rate, const OpContext& ctx);

/// Uniform [0,1) draw for element `index` of stream (seed, stream).
double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

/// Kernel flipped 180 degrees in its two spatial axes.
template <typename T>
Tensor<T> flip_kernel(const Tensor<T>& kernel);

}  // namespace ops
}  // namespace dmn
