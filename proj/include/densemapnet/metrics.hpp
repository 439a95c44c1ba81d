#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "densemapnet/data_io.hpp"
#include "densemapnet/model.hpp"

namespace dmn {

/// Masked mean absolute disparity error in pixels, accumulated in f64.
double epe(const Tensor<float>& pred_px, const Tensor<float>& gt_px, const Tensor<float>& mask);

/// z = f * B / d.
double depth_from_disparity(double disparity_px, double focal_px, double baseline_m);

enum class PngMode { gray16, colormap };

/// round(d * 256) clamped to u16.
std::vector<std::uint16_t> encode_gray16(const Tensor<float>& pred_px);

/// Piecewise-linear blue -> green -> red over [0, dmax]: t = d / dmax,
/// t < 0.5: (0, 2t, 1-2t); t >= 0.5: (2t-1, 2-2t, 0).
std::array<std::uint8_t, 3> disparity_color(double disparity_px, double dmax);

void emit_disparity_png(const Tensor<float>& pred_px, const std::filesystem::path& path,
                        PngMode mode, double dmax = 0.0);

struct EvalReport {
  double epe = 0.0;
  std::int64_t valid_pixel_count = 0;
  std::int64_t samples_evaluated = 0;
  double throughput = 0.0;  // images / second
  double wall_seconds = 0.0;

  /// Flat key=value lines; timing fields dropped when `timing` is false.
  std::string to_text(bool timing = true) const;
};

/// Inference-mode predictions over `samples`, EPE pooled over all valid
/// pixels.
EvalReport evaluate(Model& model, const std::vector<StereoSample>& samples, double dmax);

struct BenchResult {
  double images_per_second = 0.0;
  double median_seconds = 0.0;
  int iterations = 0;
  std::uint32_t checksum = 0;
  bool outputs_identical = true;
};

/// Times `iterations` inference passes on a seeded random pair of `shape`
/// after `warmup` discarded passes; throughput comes from the median pass.
BenchResult benchmark_throughput(Model& model, const Shape& shape, int iterations,
                                 std::uint64_t seed = 1, int warmup = 2);

std::uint32_t tensor_checksum(const Tensor<float>& t);

}  // namespace dmn
