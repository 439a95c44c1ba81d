#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "densemapnet/tensor.hpp"

namespace dmn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t worst_index = -1;
  bool finite = true;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double max_rel_error() const;
  /// One `key=value` line per checked input.
  std::string to_text() const;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Relative error is |a-n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-3;
  std::uint64_t weight_seed = 7;
};

/// Forward maps the inputs to one output tensor.
using GradCheckForward = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
/// Backward returns d(loss)/d(input) for every input given d(loss)/d(output).
using GradCheckBackward = std::function<std::vector<Tensor<double>>(
    const std::vector<Tensor<double>>&, const Tensor<double>&)>;

/// Compares analytic input gradients with central differences of the
/// scalar loss L = sum_i w_i * out_i, w_i fixed pseudo-random in [0.5, 1.5].
GradCheckReport grad_check(const GradCheckForward& forward, const GradCheckBackward& backward,
                           const std::vector<Tensor<double>>& inputs,
                           const std::vector<std::string>& names,
                           const GradCheckOptions& options = {});

}  // namespace dmn
