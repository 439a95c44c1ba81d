#pragma once

// Serial loop-nest versions of the hot kernels. Used as test oracles and as
// the baseline in the kernel benchmark; never linked into the library.

#include <span>

#include "densemapnet/tensor.hpp"

namespace dmn::reference {

/// Direct six-loop correlation with zero "same" padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 int dilation);

/// Scatter loop: every input pixel adds kernel-weighted copies of itself.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernel,
                           std::span<const T> bias);

/// Per-window scan.
template <typename T>
Tensor<T> max_pool(const Tensor<T>& input, int pool);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor);

}  // namespace dmn::reference
