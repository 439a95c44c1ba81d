#include "densemapnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "densemapnet/checkpoint.hpp"

namespace dmn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ShapeError("learning_rate must be > 0");
  if (!(rho >= 0.0 && rho < 1.0)) throw ShapeError("rho must lie in [0,1)");
  if (!(decay >= 0.0)) throw ShapeError("decay must be >= 0");
  if (!(epsilon > 0.0)) throw ShapeError("epsilon must be > 0");
  if (batch_size < 1) throw ShapeError("batch_size must be >= 1");
  if (epochs < 0) throw ShapeError("epochs must be >= 0");
  if (!(dmax > 0.0)) throw ShapeError("dmax must be > 0");
  if (checkpoint_every < 0) throw ShapeError("checkpoint_every must be >= 0");
}

template <typename T>
BceResult<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  require_same_shape(target.shape(), pred.shape(), "bce_loss target");
  require_same_shape(mask.shape(), pred.shape(), "bce_loss mask");
  double valid = 0.0;
  for (std::int64_t i = 0; i < mask.size(); ++i) valid += mask.ptr()[i];
  if (!(valid > 0.0)) throw ShapeError("bce_loss: mask selects no pixels");

  BceResult<T> res{0.0, Tensor<T>(pred.shape())};
  double sum = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double m = mask.ptr()[i];
    if (m == 0.0) continue;
    const double p = std::clamp(static_cast<double>(pred.ptr()[i]), kBceClamp, 1.0 - kBceClamp);
    const double t = target.ptr()[i];
    sum += m * (t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    res.gradient.ptr()[i] = static_cast<T>(m * (p - t) / (p * (1.0 - p) * valid));
  }
  res.loss = -sum / valid;
  return res;
}

double rmsprop_learning_rate(const TrainConfig& cfg, std::int64_t step) {
  return cfg.learning_rate / (1.0 + cfg.decay * static_cast<double>(step));
}

template <typename T>
void rmsprop_step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& grads,
                  OptimizerState<T>& state, const TrainConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ShapeError("rmsprop_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    require_same_shape(grads[i].shape(), params[i].value.shape(),
                       "rmsprop_step gradient for " + params[i].layer);
    for (const T g : grads[i].data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("non-finite gradient for " + params[i].layer + "/" +
                             to_string(params[i].role));
      }
    }
  }
  if (state.accumulators.empty()) {
    for (const auto& p : params) state.accumulators.emplace_back(p.value.shape());
  }
  const double lr = rmsprop_learning_rate(cfg, state.step);
  const double rho = cfg.rho;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    T* p = params[i].value.ptr();
    T* v = state.accumulators[i].ptr();
    const T* g = grads[i].ptr();
    const std::int64_t n = params[i].value.size();
    for (std::int64_t e = 0; e < n; ++e) {
      const double gd = g[e];
      const double vd = rho * v[e] + (1.0 - rho) * gd * gd;
      v[e] = static_cast<T>(vd);
      p[e] = static_cast<T>(p[e] - lr * gd / (std::sqrt(vd) + cfg.epsilon));
    }
  }
  ++state.step;
}

std::string EpochRecord::to_line(bool timing) const {
  char buf[256];
  if (timing) {
    std::snprintf(buf, sizeof(buf), "epoch=%d loss=%.9g epe=%.9g lr=%.9g seconds=%.3f", epoch, loss,
                  epe, lr, seconds);
  } else {
    std::snprintf(buf, sizeof(buf), "epoch=%d loss=%.9g epe=%.9g lr=%.9g", epoch, loss, epe, lr);
  }
  return buf;
}

TrainLog fit(Model& model, const std::vector<StereoSample>& dataset, const TrainConfig& cfg,
             const FitHooks& hooks) {
  cfg.validate();
  if (dataset.empty()) throw ShapeError("fit: empty dataset");
  TrainLog log;
  OptimizerState<float> state;
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    double abs_err = 0.0;
    double valid = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> which(order.data() + first, last - first);
      const Batch batch = make_batch(dataset, which);
      const Tensor<float> target = normalize_disparity(batch.disparity, cfg.dmax).cast<float>();

      const OpContext ctx{Mode::train, cfg.seed, static_cast<std::uint64_t>(state.step)};
      const Tensor<float> pred = model.forward(batch.left, batch.right, ctx);
      BceResult<float> bce = bce_loss(pred, target, batch.valid_mask);
      if (!std::isfinite(bce.loss)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch));
      }
      const std::vector<Tensor<float>> grads = model.backward(bce.gradient);
      rmsprop_step(model.parameters(), grads, state, cfg);

      loss_sum += bce.loss * static_cast<double>(which.size());
      for (std::int64_t i = 0; i < pred.size(); ++i) {
        const double m = batch.valid_mask.ptr()[i];
        if (m == 0.0) continue;
        abs_err += m * std::abs(static_cast<double>(pred.ptr()[i]) * cfg.dmax - batch.disparity.ptr()[i]);
        valid += m;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(order.size());
    rec.epe = valid > 0.0 ? abs_err / valid : 0.0;
    rec.lr = rmsprop_learning_rate(cfg, state.step);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const bool periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
    if (!cfg.checkpoint_path.empty() && (periodic || epoch == cfg.epochs)) {
      save_checkpoint(model, cfg.checkpoint_path);
    }
  }
  return log;
}

template BceResult<float> bce_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template BceResult<double> bce_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template void rmsprop_step(std::vector<Parameter<float>>&, const std::vector<Tensor<float>>&,
                           OptimizerState<float>&, const TrainConfig&);
template void rmsprop_step(std::vector<Parameter<double>>&, const std::vector<Tensor<double>>&,
                           OptimizerState<double>&, const TrainConfig&);

}  // namespace dmn
