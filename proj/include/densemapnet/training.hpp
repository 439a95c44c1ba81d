#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "densemapnet/data_io.hpp"
#include "densemapnet/model.hpp"

namespace dmn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double decay = 1e-6;
  double rho = 0.9;
  double epsilon = 1e-7;
  int batch_size = 4;
  int epochs = 1;
  std::uint64_t seed = 1;
  double dmax = 32.0;
  int checkpoint_every = 0;               // 0: only at the end
  std::filesystem::path checkpoint_path;  // empty: no checkpoints

  void validate() const;
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> accumulators;  // one per parameter; empty until first step
  std::int64_t step = 0;
};

template <typename T>
struct BceResult {
  double loss = 0.0;
  Tensor<T> gradient;
};

inline constexpr double kBceClamp = 1e-7;

/// Masked mean binary cross-entropy on predictions clamped to
/// [1e-7, 1 - 1e-7].
template <typename T>
BceResult<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask);

/// lr / (1 + decay * step).
double rmsprop_learning_rate(const TrainConfig& cfg, std::int64_t step);

/// Plain RMSprop on the trainable parameters. Checks every gradient for
/// NaN/inf before changing anything.
template <typename T>
void rmsprop_step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& grads,
                  OptimizerState<T>& state, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double epe = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  /// `epoch=<n> loss=<f> epe=<f> lr=<f> seconds=<f>`; the seconds field is
  /// omitted when `timing` is false.
  std::string to_line(bool timing = true) const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct FitHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Seeded-shuffle minibatch loop: forward (train mode) -> BCE -> backward ->
/// RMSprop. Writes checkpoints every cfg.checkpoint_every epochs and at the
/// end. Throws NumericalError on a non-finite loss; the last checkpoint on
/// disk is left untouched in that case.
TrainLog fit(Model& model, const std::vector<StereoSample>& dataset, const TrainConfig& cfg,
             const FitHooks& hooks = {});

}  // namespace dmn
