#pragma once

// Oracles shared by the model unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "densemapnet/model.hpp"

namespace dmn::oracle {

// Hand-written layer table, independent of the graph builder.
struct ConvRow {
  const char* name;
  int k;
  int cin;
  int cout;
  bool bn;
};

inline std::vector<ConvRow> conv_table(int c) {
  std::vector<ConvRow> rows = {
      {"Conv2D_1", 5, 2 * c, 32, true},   {"Conv2D_C1", 5, 32, 32, true},
      {"Conv2D_C2", 5, 32, 32, true},     {"Conv2D_C3", 5, 32, 32, true},
      {"Conv2D_C4", 5, 32, 32, true},     {"Conv2D_2", 5, c, 16, true},
      {"Conv2D_m1", 1, 176, 64, true},    {"Conv2D_n1", 5, 64, 16, true},
      {"Conv2D_m2", 1, 192, 64, true},    {"Conv2D_n2", 5, 64, 16, true},
      {"Conv2D_m3", 1, 208, 64, true},    {"Conv2D_n3", 5, 64, 16, true},
      {"Conv2D_m4", 1, 224, 64, true},    {"Conv2D_n4", 5, 64, 16, true},
      {"Conv2D_4", 1, 240, 32, true},     {"Conv2D_3", 5, c, 1, true},
      {"Conv2D_5", 5, 33, 16, true},      {"Conv2DT_1", 9, 49, 1, false},
  };
  return rows;
}

struct SymbolicCount {
  std::int64_t trainable = 0;
  std::int64_t non_trainable = 0;
};

inline SymbolicCount symbolic_parameter_count(int c) {
  SymbolicCount n;
  for (const ConvRow& r : conv_table(c)) {
    n.trainable += std::int64_t{r.k} * r.k * r.cin * r.cout + r.cout;
    if (r.bn) {
      n.trainable += 2 * r.cout;
      n.non_trainable += 2 * r.cout;
    }
  }
  return n;
}

struct FullGraphResult {
  double max_rel_error = 0.0;
  int sampled = 0;
  std::string worst;
};

struct ParamPick {
  std::size_t param;
  std::int64_t element;
};

// L = sum_i w_i * out_i with fixed w. Relative error uses the same floored
// denominator as grad_check.
inline double weighted_loss(const Tensor<double>& out, const Tensor<double>& w) {
  double s = 0.0;
  for (std::int64_t i = 0; i < out.size(); ++i) s += w.ptr()[i] * out.ptr()[i];
  return s;
}

inline FullGraphResult full_graph_check(ModelGraph<double>& model, const Tensor<double>& left,
                                        const Tensor<double>& right, const OpContext& ctx,
                                        const std::vector<ParamPick>& picks, double step = 1e-5,
                                        double floor = 1e-3) {
  Tensor<double> w(Shape{left.shape().n, left.shape().h, left.shape().w, 1});
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  for (auto& v : w.data()) v = dist(rng);

  // BN running statistics move on every train-mode forward but never feed
  // back into the train-mode output, so the loss stays a pure function.
  model.forward(left, right, ctx, true);
  const std::vector<Tensor<double>> grads = model.backward(w);

  FullGraphResult res;
  for (const ParamPick& pick : picks) {
    double& p = model.parameters()[pick.param].value.ptr()[pick.element];
    const double saved = p;
    p = saved + step;
    const double up = weighted_loss(model.forward(left, right, ctx), w);
    p = saved - step;
    const double down = weighted_loss(model.forward(left, right, ctx), w);
    p = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = grads[pick.param].ptr()[pick.element];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
    const double rel = std::abs(numeric - analytic) / denom;
    ++res.sampled;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      const auto& par = model.parameters()[pick.param];
      res.worst = par.layer + "/" + to_string(par.role) + "[" + std::to_string(pick.element) + "]";
    }
  }
  return res;
}

inline std::vector<ParamPick> sample_trainable(const ModelGraph<double>& model, int count,
                                               std::uint64_t seed) {
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    if (model.parameters()[i].trainable) trainable.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<ParamPick> picks;
  for (int i = 0; i < count; ++i) {
    const std::size_t p = trainable[rng() % trainable.size()];
    const auto n = static_cast<std::uint64_t>(model.parameters()[p].value.size());
    picks.push_back({p, static_cast<std::int64_t>(rng() % n)});
  }
  return picks;
}

inline std::vector<ParamPick> picks_on_layer(const ModelGraph<double>& model, const std::string& layer,
                                             int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ParamPick> picks;
  for (std::size_t p = 0; p < model.parameters().size(); ++p) {
    const auto& par = model.parameters()[p];
    if (par.layer != layer || !par.trainable) continue;
    for (int i = 0; i < count; ++i) {
      picks.push_back({p, static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(par.value.size()))});
    }
  }
  return picks;
}

}  // namespace dmn::oracle
