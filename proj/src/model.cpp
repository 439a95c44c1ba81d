#include "densemapnet/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace dmn {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::zeropad: return "zeropad";
    case LayerKind::concat: return "concat";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::kernel: return "kernel";
    case ParamRole::bias: return "bias";
    case ParamRole::gamma: return "gamma";
    case ParamRole::beta: return "beta";
    case ParamRole::running_mean: return "running_mean";
    case ParamRole::running_var: return "running_var";
  }
  return "?";
}

namespace {

// Dropout streams per forward call: site s of step t draws from stream
// t * kStreamsPerStep + s.
constexpr std::uint64_t kStreamsPerStep = 64;

bool is_conv(LayerKind k) { return k == LayerKind::conv || k == LayerKind::conv_transpose; }

// Emits the layer list. Names follow the layer table of the original model;
// the BN/ReLU/Dropout that follow a convolution carry its name as prefix.
class Blueprint {
 public:
  std::vector<LayerSpec> layers;

  std::string add(LayerSpec spec) {
    layers.push_back(std::move(spec));
    return layers.back().name;
  }

  // conv -> BN -> ReLU (-> Dropout); returns the block's last layer.
  std::string conv_block(const std::string& name, const std::string& input, int kernel,
                         int dilation, int out, bool with_dropout, Partition part) {
    add({name, LayerKind::conv, kernel, dilation, out, {input}, part});
    std::string last = add({name + "_BN", LayerKind::bn, 0, 1, 0, {name}, part});
    last = add({name + "_ReLU", LayerKind::relu, 0, 1, 0, {last}, part});
    if (with_dropout) last = add({name + "_Dropout", LayerKind::dropout, 0, 1, 0, {last}, part});
    return last;
  }

  std::string simple(const std::string& name, LayerKind kind, std::vector<std::string> inputs,
                     Partition part) {
    return add({name, kind, 0, 1, 0, std::move(inputs), part});
  }
};

std::vector<LayerSpec> densemapnet_layers() {
  constexpr auto corr = Partition::correspondence;
  constexpr auto disp = Partition::disparity;
  Blueprint b;

  // Correspondence network.
  const std::string pair = b.simple("Concat_1", LayerKind::concat, {kLeftInput, kRightInput}, corr);
  std::string x = b.conv_block("Conv2D_1", pair, 5, 1, 32, true, corr);
  const std::string pooled = b.simple("MaxPooling_1", LayerKind::maxpool, {x}, corr);
  std::vector<std::string> corr_stack{pooled};
  x = pooled;
  for (int i = 1; i <= 4; ++i) {
    x = b.conv_block("Conv2D_C" + std::to_string(i), x, 5, i, 32, true, corr);
    corr_stack.push_back(x);
  }
  std::string stack = b.simple("Concat_2", LayerKind::concat, corr_stack, corr);

  // Disparity network: left-image features joined with the correspondence
  // stack, then four dense layers with growth 16.
  x = b.conv_block("Conv2D_2", kLeftInput, 5, 1, 16, true, disp);
  std::string newest = b.simple("MaxPooling_2", LayerKind::maxpool, {x}, disp);
  for (int i = 1; i <= 4; ++i) {
    const std::string id = std::to_string(i);
    stack = b.simple("Concat_D" + id, LayerKind::concat, {newest, stack}, disp);
    x = b.conv_block("Conv2D_m" + id, stack, 1, 1, 64, false, disp);
    newest = b.conv_block("Conv2D_n" + id, x, 5, i, 16, true, disp);
  }
  stack = b.simple("Concat_3", LayerKind::concat, {newest, stack}, disp);
  x = b.conv_block("Conv2D_4", stack, 1, 1, 32, false, disp);
  x = b.simple("UpSampling_1", LayerKind::upsample, {x}, disp);
  x = b.simple("ZeroPadding_1", LayerKind::zeropad, {x}, disp);

  const std::string full_res = b.conv_block("Conv2D_3", kLeftInput, 5, 1, 1, true, disp);
  const std::string joined = b.simple("Concat_4", LayerKind::concat, {x, full_res}, disp);
  x = b.conv_block("Conv2D_5", joined, 5, 1, 16, true, disp);
  x = b.simple("Concat_5", LayerKind::concat, {joined, x}, disp);
  b.add({"Conv2DT_1", LayerKind::conv_transpose, 9, 1, 1, {x}, disp});
  b.simple("Sigmoid_1", LayerKind::sigmoid, {"Conv2DT_1"}, disp);
  return b.layers;
}

template <typename T>
void accumulate(Tensor<T>& dst, Tensor<T>&& delta) {
  if (dst.empty() && dst.shape().numel() == 0) {
    dst = std::move(delta);
    return;
  }
  require_same_shape(dst.shape(), delta.shape(), "gradient accumulation");
  T* d = dst.ptr();
  const T* s = delta.ptr();
  const std::int64_t n = dst.size();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
struct ModelGraph<T>::Record {
  OpContext ctx;
  std::vector<Tensor<T>> values;
  std::vector<ops::PoolIndexCache> pools;
  std::vector<ops::BatchNormCache<T>> norms;
};

template <typename T>
ModelGraph<T> ModelGraph<T>::build(int channels, double dmax, std::uint64_t init_seed) {
  if (channels != 1 && channels != 3) {
    throw ShapeError("build_densemapnet: input channels must be 1 or 3, got " +
                     std::to_string(channels));
  }
  if (!(dmax > 0.0)) throw ShapeError("build_densemapnet: dmax must be positive");

  ModelGraph g;
  g.channels_ = channels;
  g.dmax_ = dmax;
  g.layers_ = densemapnet_layers();
  g.node_index_[kLeftInput] = 0;
  g.node_index_[kRightInput] = 1;
  g.node_channels_ = {channels, channels};
  g.consumers_.assign(2 + g.layers_.size(), 0);

  std::mt19937_64 rng(init_seed);
  for (std::size_t li = 0; li < g.layers_.size(); ++li) {
    LayerSpec& L = g.layers_[li];
    if (g.node_index_.count(L.name)) throw std::logic_error("duplicate layer " + L.name);
    std::vector<int> in;
    for (const auto& src : L.inputs) {
      const int idx = g.index_of(src);
      in.push_back(idx);
      ++g.consumers_[static_cast<std::size_t>(idx)];
    }
    const int cin = g.node_channels_[static_cast<std::size_t>(in.front())];
    int cout = cin;
    int site = -1;
    switch (L.kind) {
      case LayerKind::conv:
      case LayerKind::conv_transpose: {
        cout = L.out_channels;
        const Shape ks{L.kernel, L.kernel, cin, cout};
        Tensor<T> kernel(ks);
        const double bound = std::sqrt(6.0 / (static_cast<double>(L.kernel) * L.kernel * cin));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : kernel.data()) v = static_cast<T>(dist(rng));
        g.params_.push_back({L.name, ParamRole::kernel, std::move(kernel), true});
        g.params_.push_back({L.name, ParamRole::bias, Tensor<T>(Shape{1, 1, 1, cout}), true});
        break;
      }
      case LayerKind::bn:
        g.params_.push_back({L.name, ParamRole::gamma, Tensor<T>(Shape{1, 1, 1, cin}, T{1}), true});
        g.params_.push_back({L.name, ParamRole::beta, Tensor<T>(Shape{1, 1, 1, cin}), true});
        g.params_.push_back({L.name, ParamRole::running_mean, Tensor<T>(Shape{1, 1, 1, cin}), false});
        g.params_.push_back({L.name, ParamRole::running_var, Tensor<T>(Shape{1, 1, 1, cin}, T{1}), false});
        break;
      case LayerKind::concat:
        cout = 0;
        for (int idx : in) cout += g.node_channels_[static_cast<std::size_t>(idx)];
        break;
      case LayerKind::dropout:
        site = g.dropout_sites_++;
        break;
      default:
        break;
    }
    L.out_channels = cout;
    g.node_index_[L.name] = static_cast<int>(2 + li);
    g.node_channels_.push_back(cout);
    g.layer_inputs_.push_back(std::move(in));
    g.dropout_site_.push_back(site);
  }
  if (static_cast<std::uint64_t>(g.dropout_sites_) > kStreamsPerStep) {
    throw std::logic_error("too many dropout sites");
  }
  for (std::size_t i = 0; i < g.params_.size(); ++i) {
    g.param_index_[{g.params_[i].layer, g.params_[i].role}] = i;
  }
  return g;
}

template <typename T>
template <typename U>
ModelGraph<U> ModelGraph<T>::cast() const {
  ModelGraph<U> g;
  g.channels_ = channels_;
  g.dmax_ = dmax_;
  g.dropout_sites_ = dropout_sites_;
  g.layers_ = layers_;
  g.layer_inputs_ = layer_inputs_;
  g.node_channels_ = node_channels_;
  g.consumers_ = consumers_;
  g.dropout_site_ = dropout_site_;
  g.node_index_ = node_index_;
  g.param_index_ = param_index_;
  for (const auto& p : params_) {
    g.params_.push_back({p.layer, p.role, p.value.template cast<U>(), p.trainable});
  }
  return g;
}

template <typename T>
int ModelGraph<T>::index_of(const std::string& name) const {
  auto it = node_index_.find(name);
  if (it == node_index_.end()) throw ShapeError("unknown layer '" + name + "'");
  return it->second;
}

template <typename T>
const LayerSpec& ModelGraph<T>::layer(const std::string& name) const {
  const int idx = index_of(name);
  if (idx < 2) throw ShapeError("'" + name + "' is a graph source, not a layer");
  return layers_[static_cast<std::size_t>(idx - 2)];
}

template <typename T>
int ModelGraph<T>::channels_of(const std::string& name) const {
  return node_channels_[static_cast<std::size_t>(index_of(name))];
}

template <typename T>
int ModelGraph<T>::conv_layer_count() const {
  int n = 0;
  for (const auto& L : layers_) n += is_conv(L.kind) ? 1 : 0;
  return n;
}

template <typename T>
int ModelGraph<T>::conv_layer_count(Partition partition) const {
  int n = 0;
  for (const auto& L : layers_) n += (is_conv(L.kind) && L.partition == partition) ? 1 : 0;
  return n;
}

template <typename T>
ParameterCount ModelGraph<T>::count_parameters() const {
  ParameterCount c;
  for (const auto& p : params_) (p.trainable ? c.trainable : c.non_trainable) += p.value.size();
  return c;
}

template <typename T>
Parameter<T>& ModelGraph<T>::parameter(const std::string& layer, ParamRole role) {
  auto it = param_index_.find({layer, role});
  if (it == param_index_.end()) {
    throw ShapeError("no parameter " + std::string(to_string(role)) + " on layer '" + layer + "'");
  }
  return params_[it->second];
}

template <typename T>
const Parameter<T>& ModelGraph<T>::parameter(const std::string& layer, ParamRole role) const {
  return const_cast<ModelGraph*>(this)->parameter(layer, role);
}

template <typename T>
Tensor<T> ModelGraph<T>::forward(const Tensor<T>& left, const Tensor<T>& right,
                                 const OpContext& ctx) {
  return forward(left, right, ctx, ctx.mode == Mode::train);
}

template <typename T>
Tensor<T> ModelGraph<T>::forward(const Tensor<T>& left, const Tensor<T>& right,
                                 const OpContext& ctx, bool retain) {
  require_same_shape(right.shape(), left.shape(), "forward: right image vs left image");
  const Shape s = left.shape();
  if (s.c != channels_) {
    throw ShapeError("forward: model expects " + std::to_string(channels_) +
                     "-channel images, got " + s.str());
  }
  if (s.h < kPoolFactor || s.w < kPoolFactor || s.n < 1) {
    throw ShapeError("forward: images must be at least 8x8, got " + s.str());
  }
  record_.reset();

  const std::size_t nodes = 2 + layers_.size();
  auto rec = std::make_shared<Record>();
  rec->ctx = ctx;
  rec->values.resize(nodes);
  if (retain) {
    rec->pools.resize(nodes);
    rec->norms.resize(nodes);
  }
  auto& values = rec->values;
  values[0] = left;
  values[1] = right;
  std::vector<int> remaining = consumers_;

  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerSpec& L = layers_[li];
    const std::vector<int>& in = layer_inputs_[li];
    const Tensor<T>& x = values[static_cast<std::size_t>(in.front())];
    Tensor<T>& out = values[2 + li];
    switch (L.kind) {
      case LayerKind::conv: {
        const auto& k = parameter(L.name, ParamRole::kernel).value;
        const auto& b = parameter(L.name, ParamRole::bias).value;
        out = ops::conv2d(x, k, b.data(), L.dilation);
        break;
      }
      case LayerKind::conv_transpose: {
        const auto& k = parameter(L.name, ParamRole::kernel).value;
        const auto& b = parameter(L.name, ParamRole::bias).value;
        out = ops::conv2d_transpose(x, k, b.data());
        break;
      }
      case LayerKind::bn: {
        auto res = ops::batch_norm<T>(x, parameter(L.name, ParamRole::gamma).value.data(),
                                      parameter(L.name, ParamRole::beta).value.data(),
                                      parameter(L.name, ParamRole::running_mean).value.data(),
                                      parameter(L.name, ParamRole::running_var).value.data(),
                                      kBnMomentum, kBnEpsilon, ctx);
        out = std::move(res.output);
        if (retain) rec->norms[2 + li] = std::move(res.cache);
        break;
      }
      case LayerKind::relu:
        out = ops::relu(x);
        break;
      case LayerKind::dropout: {
        OpContext site = ctx;
        site.rng_stream_id = ctx.rng_stream_id * kStreamsPerStep +
                             static_cast<std::uint64_t>(dropout_site_[li]);
        out = ops::dropout(x, kDropoutRate, site);
        break;
      }
      case LayerKind::maxpool: {
        auto res = ops::max_pool(x, kPoolFactor);
        out = std::move(res.output);
        if (retain) rec->pools[2 + li] = std::move(res.indices);
        break;
      }
      case LayerKind::upsample:
        out = ops::upsample_nearest(x, kPoolFactor);
        break;
      case LayerKind::zeropad:
        out = ops::zero_pad(x, s.h, s.w);
        break;
      case LayerKind::concat: {
        std::vector<const Tensor<T>*> parts;
        for (int idx : in) parts.push_back(&values[static_cast<std::size_t>(idx)]);
        out = ops::concat_channels<T>(parts);
        break;
      }
      case LayerKind::sigmoid:
        out = ops::sigmoid(x);
        break;
    }
    if (!retain) {
      for (int idx : in) {
        if (--remaining[static_cast<std::size_t>(idx)] == 0) values[static_cast<std::size_t>(idx)] = Tensor<T>();
      }
    }
  }

  Tensor<T> result = values.back();
  if (retain) record_ = std::move(rec);
  return result;
}

template <typename T>
std::vector<Tensor<T>> ModelGraph<T>::backward(const Tensor<T>& loss_gradient) {
  if (!record_) throw std::logic_error("backward: no retained forward pass to differentiate");
  std::shared_ptr<Record> rec = std::move(record_);
  record_.reset();
  auto& values = rec->values;
  require_same_shape(loss_gradient.shape(), values.back().shape(), "backward: loss gradient");

  // Sources and the concat of the two sources need no gradient.
  std::vector<bool> needs_grad(values.size(), false);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    bool any = layers_[li].kind == LayerKind::conv || layers_[li].kind == LayerKind::conv_transpose ||
               layers_[li].kind == LayerKind::bn;
    for (int idx : layer_inputs_[li]) any = any || needs_grad[static_cast<std::size_t>(idx)];
    needs_grad[2 + li] = any;
  }

  std::vector<Tensor<T>> grads(values.size());
  grads.back() = loss_gradient;
  std::vector<Tensor<T>> pgrads;
  pgrads.reserve(params_.size());
  for (const auto& p : params_) pgrads.emplace_back(p.value.shape());
  auto set_param_grad = [&](const std::string& layer, ParamRole role, Tensor<T>&& g) {
    pgrads[param_index_.at({layer, role})] = std::move(g);
  };

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const std::size_t node = 2 + li;
    if (grads[node].empty()) continue;
    const Tensor<T> g = std::move(grads[node]);
    grads[node] = Tensor<T>();
    const LayerSpec& L = layers_[li];
    const std::vector<int>& in = layer_inputs_[li];
    const auto src = static_cast<std::size_t>(in.front());
    const Tensor<T>& x = values[src];
    auto push = [&](std::size_t target, Tensor<T>&& delta) {
      if (needs_grad[target]) accumulate(grads[target], std::move(delta));
    };
    switch (L.kind) {
      case LayerKind::conv:
      case LayerKind::conv_transpose: {
        const auto& k = parameter(L.name, ParamRole::kernel).value;
        ops::ConvGrads<T> cg = L.kind == LayerKind::conv
                                   ? ops::conv2d_backward(x, k, g, L.dilation)
                                   : ops::conv2d_transpose_backward(x, k, g);
        set_param_grad(L.name, ParamRole::kernel, std::move(cg.kernel));
        set_param_grad(L.name, ParamRole::bias, std::move(cg.bias));
        push(src, std::move(cg.input));
        break;
      }
      case LayerKind::bn: {
        auto bg = ops::batch_norm_backward<T>(g, rec->norms[node],
                                              parameter(L.name, ParamRole::gamma).value.data());
        set_param_grad(L.name, ParamRole::gamma, std::move(bg.gamma));
        set_param_grad(L.name, ParamRole::beta, std::move(bg.beta));
        push(src, std::move(bg.input));
        break;
      }
      case LayerKind::relu:
        push(src, ops::relu_backward(x, g));
        break;
      case LayerKind::dropout: {
        OpContext site = rec->ctx;
        site.rng_stream_id = rec->ctx.rng_stream_id * kStreamsPerStep +
                             static_cast<std::uint64_t>(dropout_site_[li]);
        push(src, ops::dropout_backward(g, kDropoutRate, site));
        break;
      }
      case LayerKind::maxpool:
        push(src, ops::max_pool_backward(g, rec->pools[node]));
        break;
      case LayerKind::upsample:
        push(src, ops::upsample_nearest_backward(g, kPoolFactor));
        break;
      case LayerKind::zeropad:
        push(src, ops::zero_pad_backward(g, x.shape()));
        break;
      case LayerKind::concat: {
        std::vector<int> chans;
        for (int idx : in) chans.push_back(node_channels_[static_cast<std::size_t>(idx)]);
        auto pieces = ops::concat_channels_backward<T>(g, chans);
        for (std::size_t i = 0; i < in.size(); ++i) {
          push(static_cast<std::size_t>(in[i]), std::move(pieces[i]));
        }
        break;
      }
      case LayerKind::sigmoid:
        push(src, ops::sigmoid_backward(values[node], g));
        break;
    }
  }
  return pgrads;
}

template class ModelGraph<float>;
template class ModelGraph<double>;
template ModelGraph<double> ModelGraph<float>::cast<double>() const;
template ModelGraph<float> ModelGraph<double>::cast<float>() const;
template ModelGraph<float> ModelGraph<float>::cast<float>() const;
template ModelGraph<double> ModelGraph<double>::cast<double>() const;

}  // namespace dmn
