#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "densemapnet/ops.hpp"
#include "densemapnet/tensor.hpp"

namespace dmn {

enum class LayerKind {
  conv,
  conv_transpose,
  bn,
  relu,
  dropout,
  maxpool,
  upsample,
  zeropad,
  concat,
  sigmoid
};

const char* to_string(LayerKind kind);

/// Which of the two sub-networks a layer belongs to.
enum class Partition { correspondence, disparity };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  int kernel = 0;
  int dilation = 1;
  int out_channels = 0;
  std::vector<std::string> inputs;
  Partition partition = Partition::disparity;
};

enum class ParamRole : std::uint8_t {
  kernel = 0,
  bias = 1,
  gamma = 2,
  beta = 3,
  running_mean = 4,
  running_var = 5
};

const char* to_string(ParamRole role);

template <typename T>
struct Parameter {
  std::string layer;
  ParamRole role = ParamRole::kernel;
  Tensor<T> value;
  bool trainable = true;
};

struct ParameterCount {
  std::int64_t trainable = 0;
  std::int64_t non_trainable = 0;
};

/// Graph sources.
inline constexpr const char* kLeftInput = "left";
inline constexpr const char* kRightInput = "right";

/// The DenseMapNet DAG plus its parameter store. Forward in train mode (or
/// with retain = true) keeps every intermediate for one backward call; the
/// graph is not reentrant while that record is alive.
template <typename T>
class ModelGraph {
 public:
  /// Builds the network for `channels` (1 or 3) input channels. Parameters
  /// are drawn from `init_seed`.
  static ModelGraph build(int channels, double dmax, std::uint64_t init_seed = 0);

  ModelGraph(const ModelGraph&) = default;
  ModelGraph& operator=(const ModelGraph&) = default;
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  template <typename U>
  ModelGraph<U> cast() const;

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(const std::string& name) const;
  int input_channels() const { return channels_; }
  double dmax() const { return dmax_; }

  /// Output channel count of a layer or source.
  int channels_of(const std::string& name) const;

  int conv_layer_count() const;
  int conv_layer_count(Partition partition) const;
  ParameterCount count_parameters() const;

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>& parameter(const std::string& layer, ParamRole role);
  const Parameter<T>& parameter(const std::string& layer, ParamRole role) const;

  Tensor<T> forward(const Tensor<T>& left, const Tensor<T>& right, const OpContext& ctx);
  Tensor<T> forward(const Tensor<T>& left, const Tensor<T>& right, const OpContext& ctx,
                    bool retain);

  /// Gradients aligned with parameters(); running statistics get zeros.
  /// Consumes the record left by the last retaining forward.
  std::vector<Tensor<T>> backward(const Tensor<T>& loss_gradient);

  bool has_forward_record() const { return record_ != nullptr; }

  int dropout_sites() const { return dropout_sites_; }

 private:
  template <typename U>
  friend class ModelGraph;
  struct Record;

  ModelGraph() = default;
  int index_of(const std::string& name) const;  // sources are 0 and 1

  int channels_ = 0;
  double dmax_ = 0.0;
  int dropout_sites_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<int>> layer_inputs_;  // node indices
  std::vector<int> node_channels_;              // per node, sources first
  std::vector<int> consumers_;
  std::vector<int> dropout_site_;               // per layer, -1 if none
  std::map<std::string, int> node_index_;
  std::vector<Parameter<T>> params_;
  std::map<std::pair<std::string, ParamRole>, std::size_t> param_index_;
  std::shared_ptr<Record> record_;
};

/// Single-precision alias used by training and the CLI.
using Model = ModelGraph<float>;

extern template class ModelGraph<float>;
extern template class ModelGraph<double>;

}  // namespace dmn
