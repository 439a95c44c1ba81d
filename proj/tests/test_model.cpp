#include <doctest.h>

#include <map>
#include <set>

#include "densemapnet/model.hpp"
#include "model_oracles.hpp"
#include "test_util.hpp"

using namespace dmn;
using dmn::testing::bit_equal;
using dmn::testing::random_tensor;

TEST_CASE("parameter count equals the symbolic counter") {
  for (int c : {1, 3}) {
    CAPTURE(c);
    const Model m = Model::build(c, 32.0);
    const auto got = m.count_parameters();
    const auto want = oracle::symbolic_parameter_count(c);
    CHECK(got.trainable == want.trainable);
    CHECK(got.non_trainable == want.non_trainable);
  }
  const auto n3 = Model::build(3, 32.0).count_parameters();
  CHECK(n3.trainable >= 285000);
  CHECK(n3.trainable <= 295000);
  CHECK(n3.non_trainable == 1090);
}

TEST_CASE("conv shapes agree with the hand-written table") {
  const Model m = Model::build(3, 32.0);
  for (const auto& row : oracle::conv_table(3)) {
    CAPTURE(row.name);
    const auto& k = m.parameter(row.name, ParamRole::kernel).value.shape();
    CHECK(k == Shape{row.k, row.k, row.cin, row.cout});
  }
  // 1x1 240 -> 32
  const auto& k4 = m.parameter("Conv2D_4", ParamRole::kernel).value;
  CHECK(k4.size() + m.parameter("Conv2D_4", ParamRole::bias).value.size() == 7712);
}

TEST_CASE("graph census") {
  const Model m = Model::build(3, 32.0);
  CHECK(m.conv_layer_count() == 18);
  CHECK(m.conv_layer_count(Partition::disparity) == 13);
  CHECK(m.conv_layer_count(Partition::correspondence) == 5);

  const std::map<std::string, int> concat = {{"Concat_2", 160},  {"Concat_D1", 176}, {"Concat_D2", 192},
                                             {"Concat_D3", 208}, {"Concat_D4", 224}, {"Concat_3", 240},
                                             {"Concat_4", 33},   {"Concat_5", 49}};
  for (const auto& [name, ch] : concat) {
    CAPTURE(name);
    CHECK(m.layer(name).kind == LayerKind::concat);
    CHECK(m.channels_of(name) == ch);
  }
  CHECK(m.layer("Concat_D1").inputs.size() == 2);
  CHECK(m.channels_of(m.layer("Concat_D1").inputs[0]) == 16);
  CHECK(m.channels_of(m.layer("Concat_2").inputs[0]) == 32);
  CHECK(m.layer("Concat_2").inputs.size() == 5);

  for (int i = 1; i <= 4; ++i) {
    CHECK(m.layer("Conv2D_C" + std::to_string(i)).dilation == i);
    CHECK(m.layer("Conv2D_n" + std::to_string(i)).dilation == i);
  }
}

TEST_CASE("layer list is topological with one sink") {
  const Model m = Model::build(3, 32.0);
  std::set<std::string> seen = {kLeftInput, kRightInput};
  std::map<std::string, int> consumers;
  for (const auto& l : m.layers()) {
    CHECK(seen.count(l.name) == 0);
    for (const auto& in : l.inputs) {
      CHECK_MESSAGE(seen.count(in) == 1, l.name, " reads ", in);
      ++consumers[in];
    }
    seen.insert(l.name);
  }
  int sinks = 0;
  for (const auto& l : m.layers()) sinks += consumers[l.name] == 0;
  CHECK(sinks == 1);
  CHECK(m.layers().back().name == "Sigmoid_1");
}

TEST_CASE("block layout") {
  const Model m = Model::build(3, 32.0);
  auto next = [&](const std::string& name) {
    for (const auto& l : m.layers())
      for (const auto& in : l.inputs)
        if (in == name) return l;
    return LayerSpec{};
  };
  for (const auto& l : m.layers()) {
    if (l.kind != LayerKind::conv) continue;
    CAPTURE(l.name);
    const auto bn = next(l.name);
    CHECK(bn.kind == LayerKind::bn);
    const auto relu = next(bn.name);
    CHECK(relu.kind == LayerKind::relu);
    const bool has_dropout = next(relu.name).kind == LayerKind::dropout;
    CHECK(has_dropout == (l.kernel != 1));
  }
  CHECK(next("Conv2DT_1").kind == LayerKind::sigmoid);
  CHECK(m.dropout_sites() == 12);  // one per 5x5 conv
}

TEST_CASE("build rejects bad arguments") {
  CHECK_THROWS_AS(Model::build(2, 32.0), ShapeError);
  CHECK_THROWS_AS(Model::build(3, 0.0), ShapeError);
}

TEST_CASE("forward contract") {
  Model m = Model::build(3, 32.0, 5);
  const OpContext inf{Mode::inference, 0, 0};

  SUBCASE("divisible shape") {
    const auto l = random_tensor<float>(Shape{1, 64, 64, 3}, 1, 0.0, 1.0);
    const auto r = random_tensor<float>(Shape{1, 64, 64, 3}, 2, 0.0, 1.0);
    const auto out = m.forward(l, r, inf);
    CHECK(out.shape() == Shape{1, 64, 64, 1});
    for (const float v : out.data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
    CHECK(bit_equal(out, m.forward(l, r, inf)));
  }
  SUBCASE("padded shape") {
    const auto l = random_tensor<float>(Shape{2, 27, 21, 3}, 3, 0.0, 1.0);
    CHECK(m.forward(l, l, inf).shape() == Shape{2, 27, 21, 1});
  }
  SUBCASE("all-zero inputs stay finite") {
    Tensor<float> z(Shape{1, 16, 16, 3});
    for (Mode mode : {Mode::inference, Mode::train}) {
      const auto out = m.forward(z, z, OpContext{mode, 1, 0});
      for (const float v : out.data()) {
        CHECK(std::isfinite(v));
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
  SUBCASE("bad inputs") {
    Tensor<float> a(Shape{1, 16, 16, 3});
    CHECK_THROWS_AS(m.forward(a, Tensor<float>(Shape{1, 16, 8, 3}), inf), ShapeError);
    CHECK_THROWS_AS(m.forward(Tensor<float>(Shape{1, 16, 16, 1}), Tensor<float>(Shape{1, 16, 16, 1}), inf),
                    ShapeError);
    CHECK_THROWS_AS(m.forward(Tensor<float>(Shape{1, 7, 16, 3}), Tensor<float>(Shape{1, 7, 16, 3}), inf),
                    ShapeError);
  }
}

TEST_CASE("backward contract") {
  Model m = Model::build(3, 32.0, 6);
  CHECK_THROWS_AS(m.backward(Tensor<float>(Shape{1, 16, 16, 1})), std::logic_error);

  const auto l = random_tensor<float>(Shape{2, 16, 16, 3}, 4, 0.0, 1.0);
  const auto r = random_tensor<float>(Shape{2, 16, 16, 3}, 5, 0.0, 1.0);
  m.forward(l, r, OpContext{Mode::inference, 0, 0});
  CHECK_FALSE(m.has_forward_record());

  m.forward(l, r, OpContext{Mode::train, 1, 0});
  CHECK(m.has_forward_record());
  const auto grads = m.backward(Tensor<float>(Shape{2, 16, 16, 1}));
  CHECK_FALSE(m.has_forward_record());
  REQUIRE(grads.size() == m.parameters().size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    CHECK(grads[i].shape() == m.parameters()[i].value.shape());
    for (const float g : grads[i].data()) REQUIRE(g == 0.0f);
  }
  CHECK_THROWS_AS(m.backward(Tensor<float>(Shape{2, 16, 16, 1})), std::logic_error);
}

TEST_CASE("train-mode forward depends on the stream id only through dropout") {
  Model m = Model::build(3, 32.0, 8);
  const auto l = random_tensor<float>(Shape{1, 16, 16, 3}, 6, 0.0, 1.0);
  Model a = m;
  Model b = m;
  const auto o1 = a.forward(l, l, OpContext{Mode::train, 3, 7});
  const auto o2 = b.forward(l, l, OpContext{Mode::train, 3, 7});
  CHECK(bit_equal(o1, o2));
  Model c = m;
  CHECK_FALSE(bit_equal(o1, c.forward(l, l, OpContext{Mode::train, 3, 8})));
}

TEST_CASE("full-graph gradients at 16x16") {
  ModelGraph<double> m = Model::build(3, 32.0, 3).cast<double>();
  const auto l = random_tensor<double>(Shape{2, 16, 16, 3}, 7, 0.0, 1.0);
  const auto r = random_tensor<double>(Shape{2, 16, 16, 3}, 8, 0.0, 1.0);
  const OpContext ctx{Mode::train, 4, 2};

  const auto sampled = oracle::full_graph_check(m, l, r, ctx, oracle::sample_trainable(m, 20, 11));
  INFO("worst ", sampled.worst, " rel ", sampled.max_rel_error);
  CHECK(sampled.sampled == 20);
  CHECK(sampled.max_rel_error < 1e-3);

  // Both feed Concat_D2 directly or through Concat_D1, so their gradients
  // are sums over several consumers.
  for (const char* layer : {"Conv2D_2", "Conv2D_n1", "Conv2D_2_BN", "Conv2D_n1_BN"}) {
    const auto targeted = oracle::full_graph_check(m, l, r, ctx, oracle::picks_on_layer(m, layer, 3, 12));
    INFO(layer, " worst ", targeted.worst, " rel ", targeted.max_rel_error);
    CHECK(targeted.max_rel_error < 1e-3);
  }
}

TEST_CASE("cast round trip keeps parameters") {
  const Model m = Model::build(1, 16.0, 9);
  const Model back = m.cast<double>().cast<float>();
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(bit_equal(back.parameters()[i].value, m.parameters()[i].value));
  }
}
