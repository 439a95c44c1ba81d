#include <doctest.h>

#include <omp.h>

#include <vector>

#include "densemapnet/grad_check.hpp"
#include "densemapnet/ops.hpp"
#include "op_grad_suite.hpp"
#include "reference.hpp"
#include "test_util.hpp"

using namespace dmn;
using dmn::testing::bit_equal;
using dmn::testing::random_tensor;

namespace {

using Ts = std::vector<Tensor<double>>;

std::span<const double> span_of(const Tensor<double>& t) { return {t.ptr(), t.data().size()}; }

void require_pass(const GradCheckReport& report) {
  INFO(report.to_text());
  CHECK(report.passed());
  CHECK(report.max_rel_error() < 1e-4);
}

GradCheckReport check_conv(int k, int dilation, Shape in_shape, int cout) {
  const Ts inputs{random_tensor<double>(in_shape, 100 + k + dilation),
                  random_tensor<double>(Shape{k, k, in_shape.c, cout}, 200 + k + dilation),
                  random_tensor<double>(Shape{1, 1, 1, cout}, 300 + k)};
  auto fwd = [dilation](const Ts& in) { return ops::conv2d<double>(in[0], in[1], span_of(in[2]), dilation); };
  auto bwd = [dilation](const Ts& in, const Tensor<double>& g) {
    auto r = ops::conv2d_backward<double>(in[0], in[1], g, dilation);
    return Ts{r.input, r.kernel, r.bias};
  };
  return grad_check(fwd, bwd, inputs, {"input", "kernel", "bias"});
}

}  // namespace

TEST_CASE("conv2d gradients") {
  for (int d = 1; d <= 4; ++d) {
    CAPTURE(d);
    require_pass(check_conv(3, d, Shape{2, 6, 6, 2}, 2));
  }
  require_pass(check_conv(5, 2, Shape{1, 6, 6, 3}, 2));
  require_pass(check_conv(1, 1, Shape{4, 6, 6, 3}, 3));
}

TEST_CASE("conv2d_transpose gradients") {
  const Ts inputs{random_tensor<double>(Shape{2, 5, 6, 3}, 1), random_tensor<double>(Shape{9, 9, 3, 1}, 2),
                  random_tensor<double>(Shape{1, 1, 1, 1}, 3)};
  auto fwd = [](const Ts& in) { return ops::conv2d_transpose<double>(in[0], in[1], span_of(in[2])); };
  auto bwd = [](const Ts& in, const Tensor<double>& g) {
    auto r = ops::conv2d_transpose_backward<double>(in[0], in[1], g);
    return Ts{r.input, r.kernel, r.bias};
  };
  require_pass(grad_check(fwd, bwd, inputs, {"input", "kernel", "bias"}));
}

TEST_CASE("pooling, resampling and padding gradients") {
  const Ts pool_in{random_tensor<double>(Shape{2, 17, 16, 2}, 4)};
  auto pool_fwd = [](const Ts& in) { return ops::max_pool(in[0]).output; };
  auto pool_bwd = [](const Ts& in, const Tensor<double>& g) {
    return Ts{ops::max_pool_backward(g, ops::max_pool(in[0]).indices)};
  };
  require_pass(grad_check(pool_fwd, pool_bwd, pool_in, {"input"}));

  const Ts up_in{random_tensor<double>(Shape{2, 2, 3, 3}, 5)};
  auto up_fwd = [](const Ts& in) { return ops::upsample_nearest(in[0]); };
  auto up_bwd = [](const Ts&, const Tensor<double>& g) { return Ts{ops::upsample_nearest_backward(g)}; };
  require_pass(grad_check(up_fwd, up_bwd, up_in, {"input"}));

  const Ts pad_in{random_tensor<double>(Shape{2, 4, 5, 3}, 6)};
  auto pad_fwd = [](const Ts& in) { return ops::zero_pad(in[0], 6, 6); };
  auto pad_bwd = [](const Ts& in, const Tensor<double>& g) {
    return Ts{ops::zero_pad_backward(g, in[0].shape())};
  };
  require_pass(grad_check(pad_fwd, pad_bwd, pad_in, {"input"}));
}

TEST_CASE("concat gradient is exact") {
  const Ts inputs{random_tensor<double>(Shape{2, 3, 3, 2}, 7), random_tensor<double>(Shape{2, 3, 3, 3}, 8)};
  auto fwd = [](const Ts& in) {
    const Tensor<double>* p[] = {&in[0], &in[1]};
    return ops::concat_channels<double>(p);
  };
  auto bwd = [](const Ts&, const Tensor<double>& g) {
    const int c[] = {2, 3};
    return ops::concat_channels_backward(g, c);
  };
  const auto report = grad_check(fwd, bwd, inputs, {"a", "b"});
  INFO(report.to_text());
  CHECK(report.max_rel_error() < 1e-9);
}

TEST_CASE("batch_norm gradients") {
  for (Mode mode : {Mode::train, Mode::inference}) {
    const OpContext ctx{mode, 1, 0};
    const Ts inputs{random_tensor<double>(Shape{2, 4, 4, 3}, 9), random_tensor<double>(Shape{1, 1, 1, 3}, 10, 0.5, 1.5),
                    random_tensor<double>(Shape{1, 1, 1, 3}, 11)};
    const std::vector<double> mean0{0.1, -0.2, 0.3};
    const std::vector<double> var0{0.8, 1.2, 1.5};
    auto run = [&](const Ts& in) {
      std::vector<double> m = mean0, v = var0;
      return ops::batch_norm<double>(in[0], span_of(in[1]), span_of(in[2]), m, v, kBnMomentum, kBnEpsilon, ctx);
    };
    auto fwd = [&](const Ts& in) { return run(in).output; };
    auto bwd = [&](const Ts& in, const Tensor<double>& g) {
      auto r = ops::batch_norm_backward(g, run(in).cache, span_of(in[1]));
      return Ts{r.input, r.gamma, r.beta};
    };
    require_pass(grad_check(fwd, bwd, inputs, {"input", "gamma", "beta"}));
  }
}

TEST_CASE("activation and dropout gradients") {
  auto shifted = random_tensor<double>(Shape{2, 4, 4, 3}, 12);
  for (auto& v : shifted.data()) v += v >= 0 ? 0.05 : -0.05;  // keep off the kink
  const Ts in{shifted};
  auto relu_f = [](const Ts& i) { return ops::relu(i[0]); };
  auto relu_b = [](const Ts& i, const Tensor<double>& g) { return Ts{ops::relu_backward(i[0], g)}; };
  require_pass(grad_check(relu_f, relu_b, in, {"input"}));

  auto sig_f = [](const Ts& i) { return ops::sigmoid(i[0]); };
  auto sig_b = [](const Ts& i, const Tensor<double>& g) { return Ts{ops::sigmoid_backward(ops::sigmoid(i[0]), g)}; };
  require_pass(grad_check(sig_f, sig_b, in, {"input"}));

  const OpContext ctx{Mode::train, 5, 9};
  auto drop_f = [&](const Ts& i) { return ops::dropout(i[0], 0.2, ctx); };
  auto drop_b = [&](const Ts&, const Tensor<double>& g) { return Ts{ops::dropout_backward(g, 0.2, ctx)}; };
  require_pass(grad_check(drop_f, drop_b, in, {"input"}));
}

TEST_CASE("grad_check flags a corrupted gradient") {
  const Ts inputs{random_tensor<double>(Shape{1, 6, 6, 2}, 13), random_tensor<double>(Shape{3, 3, 2, 2}, 14),
                  random_tensor<double>(Shape{1, 1, 1, 2}, 15)};
  auto fwd = [](const Ts& in) { return ops::conv2d<double>(in[0], in[1], span_of(in[2]), 3); };
  auto bwd = [](const Ts& in, const Tensor<double>& g) {
    auto r = ops::conv2d_backward<double>(in[0], in[1], g, 3);
    for (auto& v : r.kernel.data()) v *= 1.01;
    return Ts{r.input, r.kernel, r.bias};
  };
  const auto report = grad_check(fwd, bwd, inputs, {"input", "kernel", "bias"});
  CHECK_FALSE(report.passed());
  CHECK(report.entries[0].max_rel_error < 1e-4);
  CHECK(report.entries[1].max_rel_error > 1e-3);
  CHECK(report.to_text().find("kernel") != std::string::npos);
}

TEST_CASE("grad_check flags non-finite values") {
  const Ts inputs{Tensor<double>(Shape{1, 1, 1, 2}, {1.0, 2.0})};
  auto fwd = [](const Ts& in) {
    Tensor<double> out = in[0];
    out.ptr()[1] = std::numeric_limits<double>::infinity();
    return out;
  };
  auto bwd = [](const Ts&, const Tensor<double>& g) { return Ts{g}; };
  const auto report = grad_check(fwd, bwd, inputs, {"x"});
  CHECK_FALSE(report.entries[0].finite);
  CHECK_FALSE(report.passed());
}

TEST_CASE("kernels give identical bits for any thread count") {
  const auto in = random_tensor<float>(Shape{2, 24, 20, 6}, 16);
  const auto k = random_tensor<float>(Shape{5, 5, 6, 4}, 17);
  const std::vector<float> bias{0.1f, 0.2f, 0.3f, 0.4f};
  const auto g = random_tensor<float>(Shape{2, 24, 20, 4}, 18);
  std::vector<float> gamma(6, 1.0f), beta(6, 0.0f);

  auto run = [&] {
    std::vector<float> m(6, 0.0f), v(6, 1.0f);
    const auto c = ops::conv2d<float>(in, k, bias, 3);
    const auto cb = ops::conv2d_backward<float>(in, k, g, 3);
    const auto bn = ops::batch_norm<float>(in, gamma, beta, m, v, kBnMomentum, kBnEpsilon, OpContext{Mode::train, 1, 2});
    const auto dr = ops::dropout(in, 0.2, OpContext{Mode::train, 1, 2});
    return std::vector<Tensor<float>>{c, cb.input, cb.kernel, cb.bias, bn.output, dr};
  };
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto one = run();
  omp_set_num_threads(4);
  const auto four = run();
  omp_set_num_threads(3);
  const auto three = run();
  omp_set_num_threads(saved);
  for (std::size_t i = 0; i < one.size(); ++i) {
    CAPTURE(i);
    CHECK(bit_equal(one[i], four[i]));
    CHECK(bit_equal(one[i], three[i]));
  }
}

TEST_CASE("operator suite") {
  for (const auto& [name, report] : oracle::operator_grad_suite()) {
    CAPTURE(name);
    require_pass(report);
  }
}
