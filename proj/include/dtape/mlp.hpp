#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dtape/errors.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

enum class Activation { relu, tanh };

inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ParameterError("unknown activation '" + s + "'");
}

struct DenseLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.shape().at(1); }
  std::size_t out_dim() const { return weight.shape().at(0); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Fully connected network: hidden layers use `activation`, the last layer is
/// affine. Gradients are stored in the same type, so every parameter tensor
/// has a matching gradient tensor by construction.
struct MlpParams {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::relu;

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Visits every parameter tensor in a fixed order (w0, b0, w1, b1, ...).
  template <class F>
  void for_each_tensor(F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      f(layers[i].weight, tensor_name(i, true));
      f(layers[i].bias, tensor_name(i, false));
    }
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      f(layers[i].weight, tensor_name(i, true));
      f(layers[i].bias, tensor_name(i, false));
    }
  }

  static std::string tensor_name(std::size_t layer, bool weight) {
    return "layer " + std::to_string(layer) + (weight ? " weight" : " bias");
  }

  /// Same architecture, all parameters zero.
  MlpParams zeros_like() const {
    MlpParams z = *this;
    z.for_each_tensor([](Tensor& t, const std::string&) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    return z;
  }

  void validate() const {
    if (layers.empty()) throw DimensionError("network has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.out_dim()) {
        throw DimensionError("layer " + std::to_string(i) + ": malformed weight " +
                             shape_string(l.weight.shape()) + " / bias " + shape_string(l.bias.shape()));
      }
      if (i > 0 && layers[i - 1].out_dim() != l.in_dim()) {
        throw DimensionError("layer " + std::to_string(i) + ": in-dim " + std::to_string(l.in_dim()) +
                             " does not chain with previous out-dim " +
                             std::to_string(layers[i - 1].out_dim()));
      }
    }
  }

  bool same_architecture(const MlpParams& o) const {
    if (layers.size() != o.layers.size() || activation != o.activation) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!layers[i].weight.same_shape(o.layers[i].weight) || !layers[i].bias.same_shape(o.layers[i].bias))
        return false;
    }
    return true;
  }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Applies `f(a_tensor, b_tensor, name)` to aligned parameter tensors of two
/// networks with identical architecture.
template <class A, class B, class F>
void zip_tensors(A& a, B& b, F&& f) {
  if (!a.same_architecture(b)) throw DimensionError("parameter sets do not share an architecture");
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    f(a.layers[i].weight, b.layers[i].weight, MlpParams::tensor_name(i, true));
    f(a.layers[i].bias, b.layers[i].bias, MlpParams::tensor_name(i, false));
  }
}

/// He-normal initialization for relu, Glorot-normal (fan-in) for tanh; zero biases.
inline MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation activation, Rng& rng) {
  if (dims.size() < 2) throw ParameterError("an MLP needs at least input and output dims");
  MlpParams p;
  p.activation = activation;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double gain = activation == Activation::relu && i + 2 < dims.size() ? 2.0 : 1.0;
    DenseLayer l{Tensor({dims[i + 1], dims[i]}), Tensor({dims[i + 1]})};
    rng.fill_normal(l.weight, std::sqrt(gain / static_cast<double>(dims[i])));
    p.layers.push_back(std::move(l));
  }
  return p;
}

namespace detail {

// relu lets NaN through so divergence is not silently masked.
inline double activate(Activation a, double z) { return a == Activation::relu ? (z < 0.0 ? 0.0 : z) : std::tanh(z); }

inline double activate_grad(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(z);
  return 1.0 - t * t;
}

// out[b, :] = bias + x[b, :] * W^T. Each output row depends only on its own
// input row with a fixed summation order, so results do not depend on how
// a batch is split.
inline Tensor affine(const DenseLayer& layer, const Tensor& x) {
  const std::size_t in = layer.in_dim(), out = layer.out_dim(), batch = x.rows();
  std::vector<double> wt(in * out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = layer.weight.at(o, i);
  Tensor y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xr = x.data().data() + b * in;
    double* yr = y.data().data() + b * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = layer.bias[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const double* w = wt.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * w[o];
    }
  }
  return y;
}

}  // namespace detail

/// Intermediate values kept for the backward pass.
struct MlpTrace {
  std::vector<Tensor> inputs;       // input to each layer, [B, in_l]
  std::vector<Tensor> preactivations;  // affine output of each layer, [B, out_l]
  Tensor output;
};

inline MlpTrace mlp_forward_trace(const MlpParams& params, const Tensor& batch) {
  params.validate();
  if (batch.cols() != params.in_dim()) {
    throw DimensionError("layer 0: expected input dim " + std::to_string(params.in_dim()) + ", got " +
                         std::to_string(batch.cols()) + " (batch shape " + shape_string(batch.shape()) + ")");
  }
  MlpTrace trace;
  Tensor a = batch.reshaped({batch.rows(), batch.cols()});
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Tensor z = detail::affine(params.layers[l], a);
    trace.inputs.push_back(std::move(a));
    if (l + 1 < params.layers.size()) {
      a = z;
      for (double& v : a.data()) v = detail::activate(params.activation, v);
    } else {
      trace.output = z;
    }
    trace.preactivations.push_back(std::move(z));
  }
  return trace;
}

/// Logits (classifier) or raw regression output (noise predictor), [B, out].
inline Tensor mlp_forward(const MlpParams& params, const Tensor& batch) {
  return mlp_forward_trace(params, batch).output;
}

struct MlpGradients {
  MlpParams params;  // dL/dparams, same shapes as the network
  Tensor input;      // dL/dinput, [B, in]
};

inline MlpGradients mlp_backward(const MlpParams& params, const MlpTrace& trace, const Tensor& upstream) {
  if (upstream.rows() != trace.output.rows() || upstream.cols() != trace.output.cols()) {
    throw DimensionError("upstream gradient shape " + shape_string(upstream.shape()) +
                         " does not match output shape " + shape_string(trace.output.shape()));
  }
  MlpGradients g{params.zeros_like(), {}};
  Tensor dz = upstream.reshaped(trace.output.shape());
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const DenseLayer& layer = params.layers[l];
    const Tensor& a = trace.inputs[l];
    const std::size_t in = layer.in_dim(), out = layer.out_dim(), batch = a.rows();
    DenseLayer& gl = g.params.layers[l];
    for (std::size_t b = 0; b < batch; ++b) {
      const double* ar = a.data().data() + b * in;
      const double* dzr = dz.data().data() + b * out;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = dzr[o];
        gl.bias[o] += d;
        if (d == 0.0) continue;
        double* gw = gl.weight.data().data() + o * in;
        for (std::size_t i = 0; i < in; ++i) gw[i] += d * ar[i];
      }
    }
    Tensor da({batch, in});
    for (std::size_t b = 0; b < batch; ++b) {
      const double* dzr = dz.data().data() + b * out;
      double* dar = da.data().data() + b * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double d = dzr[o];
        if (d == 0.0) continue;
        const double* w = layer.weight.data().data() + o * in;
        for (std::size_t i = 0; i < in; ++i) dar[i] += d * w[i];
      }
    }
    if (l > 0) {
      const Tensor& zprev = trace.preactivations[l - 1];
      for (std::size_t k = 0; k < da.size(); ++k) da[k] *= detail::activate_grad(params.activation, zprev[k]);
    }
    dz = std::move(da);
  }
  g.input = std::move(dz);
  return g;
}

/// Recomputes the forward pass and returns gradients for `upstream` = dL/doutput.
inline MlpGradients mlp_backward(const MlpParams& params, const Tensor& batch, const Tensor& upstream) {
  return mlp_backward(params, mlp_forward_trace(params, batch), upstream);
}

}  // namespace dtape
