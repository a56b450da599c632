#pragma once

// Dense feed-forward networks: forward/backward passes, Adam and SGD steps,
// parameter copies and the portable checkpoint format.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <string>
#include <variant>
#include <vector>

#include "pruneq/errors.hpp"

namespace pruneq {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;

using Rng = std::mt19937_64;

/// One affine layer. `weight` is in x out so a batch maps as X * W + b.
template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weight;
  RowVectorX<Scalar> bias;

  Index input_dim() const { return weight.rows(); }
  Index output_dim() const { return weight.cols(); }
};

/// Gradients share the layer layout of the network they belong to.
template <typename Scalar>
using LayerGradients = std::vector<DenseLayer<Scalar>>;

/// ReLU on every hidden layer, identity on the output layer.
template <typename Scalar>
class DenseNetwork {
 public:
  DenseNetwork() = default;

  explicit DenseNetwork(std::vector<DenseLayer<Scalar>> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ShapeError("network needs at least one layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& layer = layers_[k];
      if (layer.bias.size() != layer.output_dim())
        throw ShapeError("layer " + std::to_string(k) + ": bias length does not match output dim");
      if (k > 0 && layers_[k - 1].output_dim() != layer.input_dim())
        throw ShapeError("layer " + std::to_string(k) + ": input dim does not chain");
    }
  }

  /// dims = {input, hidden..., output}; all parameters zero.
  static DenseNetwork zeros(std::span<const Index> dims) {
    check_dims(dims);
    std::vector<DenseLayer<Scalar>> layers;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k)
      layers.push_back({MatrixX<Scalar>::Zero(dims[k], dims[k + 1]),
                        RowVectorX<Scalar>::Zero(dims[k + 1])});
    return DenseNetwork(std::move(layers));
  }

  /// He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
  template <typename Generator>
  static DenseNetwork he_uniform(std::span<const Index> dims, Generator& rng) {
    DenseNetwork net = zeros(dims);
    for (auto& layer : net.layers_) {
      const Scalar limit = std::sqrt(Scalar(6) / Scalar(layer.input_dim()));
      std::uniform_real_distribution<Scalar> dist(-limit, limit);
      for (Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
    }
    return net;
  }

  Index input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
  Index output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }
  std::size_t layer_count() const { return layers_.size(); }

  const std::vector<DenseLayer<Scalar>>& layers() const { return layers_; }
  std::vector<DenseLayer<Scalar>>& layers() { return layers_; }

  bool same_architecture(const DenseNetwork& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t k = 0; k < layers_.size(); ++k)
      if (layers_[k].input_dim() != other.layers_[k].input_dim() ||
          layers_[k].output_dim() != other.layers_[k].output_dim())
        return false;
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

 private:
  static void check_dims(std::span<const Index> dims) {
    if (dims.size() < 2) throw ShapeError("network dims need input and output");
    for (Index d : dims)
      if (d <= 0) throw ShapeError("network dims must be positive");
  }

  std::vector<DenseLayer<Scalar>> layers_;
};

using Network = DenseNetwork<double>;
using Gradients = LayerGradients<double>;

/// Per-layer activations kept by a forward pass so backward can reuse them.
/// activations[0] is the input, activations[k+1] the output of layer k.
template <typename Scalar>
struct ForwardTrace {
  std::vector<MatrixX<Scalar>> activations;
};

template <typename Scalar>
MatrixX<Scalar> forward(const DenseNetwork<Scalar>& net, const std::type_identity_t<MatrixX<Scalar>>& inputs,
                        ForwardTrace<Scalar>* trace = nullptr) {
  if (inputs.cols() != net.input_dim())
    throw ShapeError("forward: input has " + std::to_string(inputs.cols()) + " columns, network expects " +
                     std::to_string(net.input_dim()));
  const auto& layers = net.layers();
  if (trace) {
    trace->activations.resize(layers.size() + 1);
    trace->activations[0] = inputs;
  }
  MatrixX<Scalar> h = inputs;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    MatrixX<Scalar> z = h * layers[k].weight;
    z.rowwise() += layers[k].bias;
    if (k + 1 < layers.size()) z = z.cwiseMax(Scalar(0));
    h = std::move(z);
    if (trace) trace->activations[k + 1] = h;
  }
  return h;
}

/// Gradients of sum_ij output_gradient(i,j) * f(x)_ij with respect to every parameter.
template <typename Scalar>
LayerGradients<Scalar> backward(const DenseNetwork<Scalar>& net, const ForwardTrace<Scalar>& trace,
                                const std::type_identity_t<MatrixX<Scalar>>& output_gradient) {
  const auto& layers = net.layers();
  if (trace.activations.size() != layers.size() + 1)
    throw ShapeError("backward: trace does not belong to this network");
  const auto& out = trace.activations.back();
  if (output_gradient.rows() != out.rows() || output_gradient.cols() != out.cols())
    throw ShapeError("backward: output gradient is " + std::to_string(output_gradient.rows()) + "x" +
                     std::to_string(output_gradient.cols()) + ", forward output is " +
                     std::to_string(out.rows()) + "x" + std::to_string(out.cols()));
  LayerGradients<Scalar> grads(layers.size());
  MatrixX<Scalar> delta = output_gradient;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& input = trace.activations[k];
    grads[k].weight.noalias() = input.transpose() * delta;
    grads[k].bias = delta.colwise().sum();
    if (k == 0) break;
    MatrixX<Scalar> upstream = delta * layers[k].weight.transpose();
    // ReLU derivative from the stored post-activation.
    delta = (input.array() > Scalar(0)).select(upstream, Scalar(0));
  }
  return grads;
}

template <typename Scalar>
LayerGradients<Scalar> backward(const DenseNetwork<Scalar>& net, const std::type_identity_t<MatrixX<Scalar>>& inputs,
                                const std::type_identity_t<MatrixX<Scalar>>& output_gradient) {
  ForwardTrace<Scalar> trace;
  forward(net, inputs, &trace);
  return backward(net, trace, output_gradient);
}

template <typename Scalar>
Scalar global_norm(const LayerGradients<Scalar>& grads) {
  Scalar sq = 0;
  for (const auto& g : grads) sq += g.weight.squaredNorm() + g.bias.squaredNorm();
  return std::sqrt(sq);
}

/// Rescales in place so the global L2 norm is at most max_norm. Returns the pre-clip norm.
template <typename Scalar>
Scalar clip_global_norm(LayerGradients<Scalar>& grads, Scalar max_norm) {
  const Scalar norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = max_norm / norm;
    for (auto& g : grads) {
      g.weight *= scale;
      g.bias *= scale;
    }
  }
  return norm;
}

template <typename Scalar>
struct AdamState {
  Scalar learning_rate = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  std::int64_t step = 0;
  LayerGradients<Scalar> first_moment;
  LayerGradients<Scalar> second_moment;
};

namespace detail {

template <typename Scalar>
void check_gradient_shapes(const DenseNetwork<Scalar>& net, const LayerGradients<Scalar>& grads) {
  const auto& layers = net.layers();
  if (grads.size() != layers.size()) throw ShapeError("gradient layer count does not match network");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (grads[k].weight.rows() != layers[k].weight.rows() || grads[k].weight.cols() != layers[k].weight.cols() ||
        grads[k].bias.size() != layers[k].bias.size())
      throw ShapeError("gradient shape mismatch at layer " + std::to_string(k));
    if (!grads[k].weight.allFinite() || !grads[k].bias.allFinite())
      throw NumericalError("non-finite gradient at layer " + std::to_string(k));
  }
}

}  // namespace detail

template <typename Scalar>
void adam_step(DenseNetwork<Scalar>& net, const LayerGradients<Scalar>& grads, AdamState<Scalar>& state) {
  detail::check_gradient_shapes(net, grads);
  auto& layers = net.layers();
  if (state.first_moment.empty()) {
    for (const auto& l : layers) {
      state.first_moment.push_back({MatrixX<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                                    RowVectorX<Scalar>::Zero(l.bias.size())});
    }
    state.second_moment = state.first_moment;
  } else if (state.first_moment.size() != layers.size()) {
    throw ShapeError("Adam state does not match network");
  }
  ++state.step;
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, Scalar(state.step));
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, Scalar(state.step));
  const Scalar step_size = state.learning_rate / c1;
  const Scalar b1 = state.beta1, b2 = state.beta2;
  const Scalar eps = state.epsilon;
  const Scalar root_c2 = std::sqrt(c2);
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    if (m.rows() != param.rows() || m.cols() != param.cols()) throw ShapeError("Adam state does not match network");
    m = b1 * m + (Scalar(1) - b1) * grad;
    v = b2 * v + (Scalar(1) - b2) * grad.cwiseAbs2();
    param.array() -= step_size * m.array() / (v.array().sqrt() / root_c2 + eps);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k].weight, grads[k].weight, state.first_moment[k].weight, state.second_moment[k].weight);
    update(layers[k].bias, grads[k].bias, state.first_moment[k].bias, state.second_moment[k].bias);
  }
}

template <typename Scalar>
void sgd_step(DenseNetwork<Scalar>& net, const LayerGradients<Scalar>& grads, Scalar learning_rate) {
  detail::check_gradient_shapes(net, grads);
  auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k].weight -= learning_rate * grads[k].weight;
    layers[k].bias -= learning_rate * grads[k].bias;
  }
}

template <typename Scalar>
void copy_parameters(const DenseNetwork<Scalar>& src, DenseNetwork<Scalar>& dst) {
  if (!src.same_architecture(dst)) throw ShapeError("copy_parameters: architectures differ");
  dst.layers() = src.layers();
}

struct SgdState {
  double learning_rate = 0.1;
};

/// Optimizer used by the trainers. Adam is the default; plain SGD serves the
/// tabular (one-hot, single linear layer) checks.
class Optimizer {
 public:
  Optimizer() : state_(AdamState<double>{}) {}
  static Optimizer adam(double learning_rate) {
    AdamState<double> s;
    s.learning_rate = learning_rate;
    return Optimizer(s);
  }
  static Optimizer sgd(double learning_rate) { return Optimizer(SgdState{learning_rate}); }

  void step(Network& net, const Gradients& grads) {
    if (auto* adam = std::get_if<AdamState<double>>(&state_))
      adam_step(net, grads, *adam);
    else
      sgd_step(net, grads, std::get<SgdState>(state_).learning_rate);
  }

  bool is_adam() const { return std::holds_alternative<AdamState<double>>(state_); }
  const AdamState<double>* adam_state() const { return std::get_if<AdamState<double>>(&state_); }

 private:
  template <typename State>
  explicit Optimizer(State s) : state_(std::move(s)) {}
  std::variant<AdamState<double>, SgdState> state_;
};

// Checkpoint format (all integers and floats little-endian):
//   7 bytes  "PRUNEQ1"
//   1 byte   model kind tag
//   u32      layer count
//   u32 x 2  (input dim, output dim) per layer
//   f64 ...  per layer: weight (input x output, row-major) then bias
enum class ModelKind : std::uint8_t { kNetwork = 0, kVectorQ = 1, kBehavior = 2 };

struct Checkpoint {
  ModelKind kind = ModelKind::kNetwork;
  Network network;
};

void save_checkpoint(const std::string& path, const Network& net, ModelKind kind = ModelKind::kNetwork);
Checkpoint load_checkpoint(const std::string& path);
std::vector<std::uint8_t> serialize_checkpoint(const Network& net, ModelKind kind);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Standard MLP shape: input -> hidden x hidden_layers -> output.
std::vector<Index> mlp_dims(Index input_dim, Index hidden_width, int hidden_layers, Index output_dim);

}  // namespace pruneq
