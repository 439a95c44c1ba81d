#include "densemapnet/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include <zlib.h>

#include "densemapnet/image_io.hpp"

namespace dmn {

double epe(const Tensor<float>& pred_px, const Tensor<float>& gt_px, const Tensor<float>& mask) {
  require_same_shape(gt_px.shape(), pred_px.shape(), "epe ground truth");
  require_same_shape(mask.shape(), pred_px.shape(), "epe mask");
  double err = 0.0;
  double valid = 0.0;
  for (std::int64_t i = 0; i < pred_px.size(); ++i) {
    const double m = mask.ptr()[i];
    if (m == 0.0) continue;
    err += m * std::abs(static_cast<double>(pred_px.ptr()[i]) - static_cast<double>(gt_px.ptr()[i]));
    valid += m;
  }
  if (!(valid > 0.0)) throw ShapeError("epe: mask selects no pixels");
  return err / valid;
}

double depth_from_disparity(double disparity_px, double focal_px, double baseline_m) {
  if (!(disparity_px > 0.0)) {
    throw ShapeError("depth_from_disparity: disparity must be > 0 (got " +
                     std::to_string(disparity_px) + ")");
  }
  return focal_px * baseline_m / disparity_px;
}

std::vector<std::uint16_t> encode_gray16(const Tensor<float>& pred_px) {
  std::vector<std::uint16_t> out(static_cast<std::size_t>(pred_px.size()));
  for (std::int64_t i = 0; i < pred_px.size(); ++i) {
    const double v = std::round(static_cast<double>(pred_px.ptr()[i]) * 256.0);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
  }
  return out;
}

std::array<std::uint8_t, 3> disparity_color(double disparity_px, double dmax) {
  const double t = dmax > 0.0 ? std::clamp(disparity_px / dmax, 0.0, 1.0) : 0.0;
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
  if (t < 0.5) {
    g = 2.0 * t;
    b = 1.0 - 2.0 * t;
  } else {
    r = 2.0 * t - 1.0;
    g = 2.0 - 2.0 * t;
  }
  auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  return {byte(r), byte(g), byte(b)};
}

void emit_disparity_png(const Tensor<float>& pred_px, const std::filesystem::path& path,
                        PngMode mode, double dmax) {
  const Shape s = pred_px.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("emit_disparity_png: expected [1,H,W,1], got " + s.str());
  for (const float d : pred_px.data()) {
    if (!std::isfinite(d) || d < 0.0f) {
      throw ShapeError("emit_disparity_png: disparities must be finite and >= 0");
    }
  }
  if (mode == PngMode::gray16) {
    write_png16(path, s.w, s.h, encode_gray16(pred_px));
    return;
  }
  if (!(dmax > 0.0)) throw ShapeError("emit_disparity_png: colormap needs dmax > 0");
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(s.h) * s.w * 3);
  for (std::int64_t i = 0; i < pred_px.size(); ++i) {
    const auto c = disparity_color(pred_px.ptr()[i], dmax);
    std::copy(c.begin(), c.end(), rgb.begin() + i * 3);
  }
  write_png8(path, s.w, s.h, 3, rgb);
}

std::string EvalReport::to_text(bool timing) const {
  std::ostringstream os;
  os.precision(9);
  os << "epe=" << epe << '\n'
     << "valid_pixel_count=" << valid_pixel_count << '\n'
     << "samples_evaluated=" << samples_evaluated << '\n';
  if (timing) {
    os << "throughput=" << throughput << '\n' << "wall_seconds=" << wall_seconds << '\n';
  }
  return os.str();
}

EvalReport evaluate(Model& model, const std::vector<StereoSample>& samples, double dmax) {
  if (samples.empty()) throw ShapeError("evaluate: no samples");
  EvalReport report;
  double err = 0.0;
  double valid = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (const StereoSample& s : samples) {
    const Tensor<float> pred = model.forward(s.left, s.right, OpContext{Mode::inference, 0, 0});
    const Tensor<float> pred_px = denormalize_disparity(pred, dmax);
    for (std::int64_t i = 0; i < pred_px.size(); ++i) {
      const double m = s.valid_mask.ptr()[i];
      if (m == 0.0) continue;
      err += m * std::abs(static_cast<double>(pred_px.ptr()[i]) - s.disparity.ptr()[i]);
      valid += m;
    }
    ++report.samples_evaluated;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!(valid > 0.0)) throw ShapeError("evaluate: no valid ground-truth pixels");
  report.epe = err / valid;
  report.valid_pixel_count = static_cast<std::int64_t>(valid);
  report.throughput = report.wall_seconds > 0.0
                          ? static_cast<double>(report.samples_evaluated) / report.wall_seconds
                          : 0.0;
  return report;
}

std::uint32_t tensor_checksum(const Tensor<float>& t) {
  const auto* bytes = reinterpret_cast<const Bytef*>(t.ptr());
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes, static_cast<uInt>(t.size() * sizeof(float))));
}

BenchResult benchmark_throughput(Model& model, const Shape& shape, int iterations,
                                 std::uint64_t seed, int warmup) {
  if (iterations < 10) throw ShapeError("benchmark_throughput: need at least 10 iterations");
  if (warmup < 2) throw ShapeError("benchmark_throughput: need at least 2 warmup passes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> left(shape);
  Tensor<float> right(shape);
  for (auto& v : left.data()) v = dist(rng);
  for (auto& v : right.data()) v = dist(rng);
  const OpContext ctx{Mode::inference, seed, 0};

  for (int i = 0; i < warmup; ++i) model.forward(left, right, ctx);
  BenchResult res;
  res.iterations = iterations;
  std::vector<double> seconds;
  for (int i = 0; i < iterations; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const Tensor<float> out = model.forward(left, right, ctx);
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    const std::uint32_t sum = tensor_checksum(out);
    if (i == 0) {
      res.checksum = sum;
    } else if (sum != res.checksum) {
      res.outputs_identical = false;
    }
  }
  std::sort(seconds.begin(), seconds.end());
  const std::size_t mid = seconds.size() / 2;
  res.median_seconds = seconds.size() % 2 ? seconds[mid] : 0.5 * (seconds[mid - 1] + seconds[mid]);
  res.images_per_second = static_cast<double>(shape.n) / res.median_seconds;
  return res;
}

}  // namespace dmn
