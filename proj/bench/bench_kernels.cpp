// Times the OpenMP/Eigen kernels against the serial reference loops on
// DenseMapNet-sized feature maps and reports the largest output difference.
//
//   bench_kernels [repeats] [height] [width]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <vector>

#include <omp.h>

#include "densemapnet/ops.hpp"
#include "reference.hpp"

using namespace dmn;

namespace {

Tensor<float> random_map(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  Tensor<float> t(s);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

double median_seconds(int repeats, const std::function<void()>& fn) {
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

double max_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.ptr()[i]) - b.ptr()[i]));
  }
  return m;
}

void row(const char* name, double fast, double slow, double diff) {
  std::printf("%-34s %10.4f %10.4f %8.2fx %10.3g\n", name, fast * 1e3, slow * 1e3, slow / fast, diff);
}

}  // namespace

int main(int argc, char** argv) {
  const int repeats = argc > 1 ? std::max(1, std::atoi(argv[1])) : 3;
  const int h = argc > 2 ? std::atoi(argv[2]) : 96;
  const int w = argc > 3 ? std::atoi(argv[3]) : 128;
  std::printf("threads=%d repeats=%d size=%dx%d\n", omp_get_max_threads(), repeats, h, w);
  std::printf("%-34s %10s %10s %9s %10s\n", "kernel", "fast_ms", "serial_ms", "speedup", "max_diff");

  {
    // correspondence layer at 1/8 resolution, Conv2D_C3
    const auto in = random_map(Shape{1, h / 8, w / 8, 32}, 1);
    const auto k = random_map(Shape{5, 5, 32, 32}, 2);
    const std::vector<float> b(32, 0.1f);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::conv2d<float>(in, k, b, 3); });
    const double ts = median_seconds(repeats, [&] { s = reference::conv2d<float>(in, k, b, 3); });
    row("conv 5x5 d3 32->32 (1/8 res)", tf, ts, max_diff(f, s));
  }
  {
    // full-resolution stem, Conv2D_1
    const auto in = random_map(Shape{1, h, w, 6}, 3);
    const auto k = random_map(Shape{5, 5, 6, 32}, 4);
    const std::vector<float> b(32, 0.0f);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::conv2d<float>(in, k, b, 1); });
    const double ts = median_seconds(repeats, [&] { s = reference::conv2d<float>(in, k, b, 1); });
    row("conv 5x5 d1 6->32 (full res)", tf, ts, max_diff(f, s));
  }
  {
    // Conv2D_5
    const auto in = random_map(Shape{1, h, w, 33}, 5);
    const auto k = random_map(Shape{5, 5, 33, 16}, 6);
    const std::vector<float> b(16, 0.0f);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::conv2d<float>(in, k, b, 1); });
    const double ts = median_seconds(repeats, [&] { s = reference::conv2d<float>(in, k, b, 1); });
    row("conv 5x5 d1 33->16 (full res)", tf, ts, max_diff(f, s));
  }
  {
    // Conv2DT_1
    const auto in = random_map(Shape{1, h, w, 49}, 7);
    const auto k = random_map(Shape{9, 9, 49, 1}, 8);
    const std::vector<float> b(1, 0.0f);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::conv2d_transpose<float>(in, k, b); });
    const double ts = median_seconds(repeats, [&] { s = reference::conv2d_transpose<float>(in, k, b); });
    row("conv_transpose 9x9 49->1", tf, ts, max_diff(f, s));
  }
  {
    const auto in = random_map(Shape{1, h, w, 32}, 9);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::max_pool(in).output; });
    const double ts = median_seconds(repeats, [&] { s = reference::max_pool<float>(in, 8); });
    row("max_pool 8 (32 ch)", tf, ts, max_diff(f, s));
  }
  {
    const auto in = random_map(Shape{1, h / 8, w / 8, 32}, 10);
    Tensor<float> f, s;
    const double tf = median_seconds(repeats, [&] { f = ops::upsample_nearest(in); });
    const double ts = median_seconds(repeats, [&] { s = reference::upsample_nearest<float>(in, 8); });
    row("upsample_nearest 8 (32 ch)", tf, ts, max_diff(f, s));
  }
  return 0;
}
