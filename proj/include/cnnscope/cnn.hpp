#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cnnscope/error.hpp"
#include "cnnscope/rng.hpp"
#include "cnnscope/tensor.hpp"

namespace cnnscope {

// ---------------------------------------------------------------------------
// Network description
// ---------------------------------------------------------------------------

struct ConvSpec {
  std::size_t filters = 0;
  std::size_t window = 3;
  std::size_t channels = 0;  // 0: inferred from the previous layer
  bool operator==(const ConvSpec&) const = default;
};

struct PoolSpec {
  std::size_t size = 2;
  bool operator==(const PoolSpec&) const = default;
};

// Hidden fully connected layer followed by ReLU.
struct DenseSpec {
  std::size_t units = 0;
  bool operator==(const DenseSpec&) const = default;
};

// Final linear layer producing logits; softmax is applied by the loss.
struct SoftmaxSpec {
  std::size_t classes = 0;
  bool operator==(const SoftmaxSpec&) const = default;
};

using LayerSpec = std::variant<ConvSpec, PoolSpec, DenseSpec, SoftmaxSpec>;

// Shape of the activation leaving a layer. Flat layers use spatial = 1.
struct ActShape {
  std::size_t spatial = 0;
  std::size_t channels = 0;
  std::size_t flat() const { return spatial * spatial * channels; }
  bool operator==(const ActShape&) const = default;
};

struct NetworkSpec {
  std::size_t input_size = 28;  // square images
  std::size_t input_channels = 1;
  std::vector<LayerSpec> layers;

  bool operator==(const NetworkSpec&) const = default;

  // conv(16, 3x3) -> pool(2) -> conv(32, 3x3) -> pool(2) -> dense(512) -> softmax(10)
  static NetworkSpec simplified_lenet(std::size_t classes = 10) {
    NetworkSpec s;
    s.layers = {ConvSpec{16, 3, 1}, PoolSpec{2}, ConvSpec{32, 3, 16}, PoolSpec{2},
                DenseSpec{512},     SoftmaxSpec{classes}};
    return s;
  }

  /// Fills inferred conv channel counts and checks that layer shapes chain.
  /// Returns the activation shape after every layer.
  std::vector<ActShape> resolve() {
    std::vector<ActShape> shapes;
    ActShape cur{input_size, input_channels};
    bool flat = false;
    if (input_size == 0 || input_channels == 0) throw ShapeError("empty input shape");
    if (layers.empty() || !std::holds_alternative<SoftmaxSpec>(layers.back())) {
      throw ShapeError("network must end with a softmax output layer");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string where = "layer " + std::to_string(i) + ": ";
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvSpec>) {
              if (flat) throw ShapeError(where + "convolution after a dense layer");
              if (l.channels == 0) l.channels = cur.channels;
              if (l.channels != cur.channels) {
                throw ShapeError(where + "conv expects " + std::to_string(l.channels) +
                                 " channels, input has " + std::to_string(cur.channels));
              }
              if (l.filters == 0 || l.window == 0) throw ShapeError(where + "empty convolution");
              if (cur.spatial < l.window) throw ShapeError(where + "input smaller than window");
              cur = {cur.spatial - l.window + 1, l.filters};
            } else if constexpr (std::is_same_v<T, PoolSpec>) {
              if (flat) throw ShapeError(where + "pooling after a dense layer");
              if (l.size < 2 || cur.spatial < l.size) {
                throw ShapeError(where + "pool input smaller than pool size");
              }
              cur = {cur.spatial / l.size, cur.channels};
            } else if constexpr (std::is_same_v<T, DenseSpec>) {
              if (l.units == 0) throw ShapeError(where + "empty dense layer");
              flat = true;
              cur = {1, l.units};
            } else {
              if (i + 1 != layers.size()) throw ShapeError(where + "softmax must be last");
              if (l.classes < 2) throw ShapeError(where + "softmax needs >= 2 classes");
              flat = true;
              cur = {1, l.classes};
            }
          },
          layers[i]);
      shapes.push_back(cur);
    }
    return shapes;
  }

  std::vector<std::size_t> conv_layer_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (std::holds_alternative<ConvSpec>(layers[i])) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ConvParams {
  Tensor4 kernel;  // [w, w, c, f]
  Vector bias;     // [f]
  bool operator==(const ConvParams&) const = default;
};

struct DenseParams {
  Tensor2 weights;  // [inputs, units]; input index = (row * m + col) * c + channel
  Vector bias;      // [units]
  bool operator==(const DenseParams&) const = default;
};

using LayerParams = std::variant<std::monostate, ConvParams, DenseParams>;

class Network {
 public:
  Network() = default;

  /// Adopts explicit parameters; throws ShapeError if they do not match `spec`.
  Network(NetworkSpec spec, std::vector<LayerParams> params, std::int64_t step = 0)
      : spec_(std::move(spec)), params_(std::move(params)), step_(step) {
    shapes_ = spec_.resolve();
    check_params();
  }

  /// Uniform initialization in [-scale, scale] for every weight and bias,
  /// drawn layer by layer in row-major order.
  static Network initialize(NetworkSpec spec, std::uint64_t seed, double scale = 0.1) {
    const auto shapes = spec.resolve();
    Rng rng(seed);
    std::vector<LayerParams> params(spec.layers.size());
    ActShape in{spec.input_size, spec.input_channels};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      if (const auto* c = std::get_if<ConvSpec>(&spec.layers[i])) {
        ConvParams p{Tensor4({c->window, c->window, c->channels, c->filters}), Vector(c->filters)};
        for (auto& w : p.kernel.data()) w = rng.uniform(-scale, scale);
        for (auto& b : p.bias) b = rng.uniform(-scale, scale);
        params[i] = std::move(p);
      } else if (!std::holds_alternative<PoolSpec>(spec.layers[i])) {
        const std::size_t units = shapes[i].channels;
        DenseParams p{Tensor2({in.flat(), units}), Vector(units)};
        for (auto& w : p.weights.data()) w = rng.uniform(-scale, scale);
        for (auto& b : p.bias) b = rng.uniform(-scale, scale);
        params[i] = std::move(p);
      }
      in = shapes[i];
    }
    return Network(std::move(spec), std::move(params), 0);
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<ActShape>& shapes() const noexcept { return shapes_; }
  const std::vector<LayerParams>& params() const noexcept { return params_; }
  std::vector<LayerParams>& mutable_params() noexcept { return params_; }

  ActShape input_shape(std::size_t layer) const {
    return layer == 0 ? ActShape{spec_.input_size, spec_.input_channels} : shapes_[layer - 1];
  }

  std::int64_t step() const noexcept { return step_; }
  void advance_step() noexcept { ++step_; }

  std::size_t classes() const { return shapes_.back().channels; }

  /// Layer positions of the convolutional layers, in order; "conv layer id"
  /// everywhere else in the library indexes into this list.
  std::vector<std::size_t> conv_layers() const { return spec_.conv_layer_positions(); }

  const ConvParams& conv(std::size_t conv_id) const {
    const auto pos = conv_layers();
    if (conv_id >= pos.size()) throw IndexError("no conv layer " + std::to_string(conv_id));
    return std::get<ConvParams>(params_[pos[conv_id]]);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (const auto* c = std::get_if<ConvParams>(&p)) n += c->kernel.size() + c->bias.size();
      if (const auto* d = std::get_if<DenseParams>(&p)) n += d->weights.size() + d->bias.size();
    }
    return n;
  }

  bool operator==(const Network&) const = default;

 private:
  void check_params() const {
    if (params_.size() != spec_.layers.size()) throw ShapeError("parameter/layer count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const ActShape in = input_shape(i);
      const std::string where = "layer " + std::to_string(i) + ": ";
      if (const auto* c = std::get_if<ConvSpec>(&spec_.layers[i])) {
        const auto* p = std::get_if<ConvParams>(&params_[i]);
        const Tensor4::Shape want{c->window, c->window, c->channels, c->filters};
        if (!p || p->kernel.shape() != want || p->bias.size() != c->filters) {
          throw ShapeError(where + "conv parameters do not match " + shape_string(want));
        }
      } else if (std::holds_alternative<PoolSpec>(spec_.layers[i])) {
        if (!std::holds_alternative<std::monostate>(params_[i])) {
          throw ShapeError(where + "pool layer carries parameters");
        }
      } else {
        const auto* p = std::get_if<DenseParams>(&params_[i]);
        const Tensor2::Shape want{in.flat(), shapes_[i].channels};
        if (!p || p->weights.shape() != want || p->bias.size() != want[1]) {
          throw ShapeError(where + "dense parameters do not match " + shape_string(want));
        }
      }
    }
  }

  NetworkSpec spec_;
  std::vector<ActShape> shapes_;
  std::vector<LayerParams> params_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

inline double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }

template <std::size_t Rank>
Tensor<Rank> relu(Tensor<Rank> t) {
  for (auto& v : t.data()) v = relu(v);
  return t;
}

/// Valid-padding, stride-1 convolution: [b,h,h,c] * [w,w,c,f] -> [b,h-w+1,h-w+1,f].
inline Tensor4 conv2d(const Tensor4& input, const Tensor4& kernel, std::span<const double> bias) {
  const auto [b, h, hw, c] = input.shape();
  const auto [w, w2, kc, f] = kernel.shape();
  if (kc != c) {
    throw ShapeError("conv2d channel mismatch: input " + std::to_string(c) + ", kernel " +
                     std::to_string(kc));
  }
  if (h != hw || w != w2) throw ShapeError("conv2d expects square inputs and windows");
  if (h < w) throw ShapeError("conv2d input smaller than window");
  if (bias.size() != f) throw ShapeError("conv2d bias length mismatch");
  const std::size_t o = h - w + 1;
  Tensor4 out({b, o, o, f});
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  double* dst = out.data().data();
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < o; ++i) {
      for (std::size_t j = 0; j < o; ++j) {
        double* acc = dst + ((s * o + i) * o + j) * f;
        for (std::size_t k = 0; k < f; ++k) acc[k] = bias[k];
        for (std::size_t p = 0; p < w; ++p) {
          for (std::size_t q = 0; q < w; ++q) {
            const double* px = in + ((s * h + i + p) * h + j + q) * c;
            const double* kp = ker + (p * w + q) * c * f;
            for (std::size_t r = 0; r < c; ++r) {
              const double v = px[r];
              const double* kr = kp + r * f;
              for (std::size_t k = 0; k < f; ++k) acc[k] += v * kr[k];
            }
          }
        }
      }
    }
  }
  return out;
}

struct PoolResult {
  Tensor4 output;
  std::vector<std::uint32_t> argmax;  // flat input offset of each output element
};

/// Non-overlapping max pooling; a trailing partial row/column is dropped.
inline PoolResult maxpool_with_indices(const Tensor4& input, std::size_t size = 2) {
  const auto [b, h, hw, f] = input.shape();
  if (size < 2 || h < size || hw != h) throw ShapeError("maxpool input smaller than pool size");
  const std::size_t o = h / size;
  PoolResult r{Tensor4({b, o, o, f}), std::vector<std::uint32_t>(b * o * o * f)};
  const double* in = input.data().data();
  double* dst = r.output.data().data();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < o; ++i)
      for (std::size_t j = 0; j < o; ++j)
        for (std::size_t k = 0; k < f; ++k) {
          std::size_t best = ((s * h + i * size) * h + j * size) * f + k;
          for (std::size_t p = 0; p < size; ++p)
            for (std::size_t q = 0; q < size; ++q) {
              const std::size_t at = ((s * h + i * size + p) * h + j * size + q) * f + k;
              if (in[at] > in[best]) best = at;
            }
          const std::size_t out_at = ((s * o + i) * o + j) * f + k;
          dst[out_at] = in[best];
          r.argmax[out_at] = static_cast<std::uint32_t>(best);
        }
  return r;
}

inline Tensor4 maxpool(const Tensor4& input, std::size_t size = 2) {
  return maxpool_with_indices(input, size).output;
}

// Affine map of a [b, ...] activation viewed as [b, inputs] rows.
inline Tensor4 dense_forward(const Tensor4& input, const DenseParams& p) {
  const std::size_t b = input.extent(0);
  const std::size_t n = p.weights.extent(0);
  const std::size_t u = p.weights.extent(1);
  if (input.size() != b * n) throw ShapeError("dense input width mismatch");
  Tensor4 out({b, 1, 1, u});
  const double* x = input.data().data();
  const double* w = p.weights.data().data();
  double* y = out.data().data();
  for (std::size_t s = 0; s < b; ++s) {
    double* ys = y + s * u;
    for (std::size_t k = 0; k < u; ++k) ys[k] = p.bias[k];
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = x[s * n + i];
      if (xi == 0.0) continue;
      const double* wi = w + i * u;
      for (std::size_t k = 0; k < u; ++k) ys[k] += xi * wi[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct Batch {
  Tensor4 images;           // [b, h, h, c]
  std::vector<int> labels;  // [b]
  std::size_t size() const { return labels.size(); }
};

struct ForwardPass {
  std::vector<Tensor4> outputs;  // per layer; conv/dense post-ReLU, softmax layer holds logits
  std::vector<std::vector<std::uint32_t>> argmax;  // per layer, pool layers only
  Tensor2 probs;                                   // [b, classes]

  const Tensor4& logits() const { return outputs.back(); }
};

inline ForwardPass forward(const Network& net, const Tensor4& images) {
  const auto& spec = net.spec();
  if (images.extent(1) != spec.input_size || images.extent(2) != spec.input_size ||
      images.extent(3) != spec.input_channels) {
    throw ShapeError("input images " + shape_string(images.shape()) + " do not match network");
  }
  ForwardPass fp;
  fp.outputs.reserve(spec.layers.size());
  fp.argmax.resize(spec.layers.size());
  const Tensor4* cur = &images;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (std::holds_alternative<ConvSpec>(layer)) {
      const auto& p = std::get<ConvParams>(net.params()[i]);
      fp.outputs.push_back(relu(conv2d(*cur, p.kernel, p.bias)));
    } else if (const auto* pool = std::get_if<PoolSpec>(&layer)) {
      auto r = maxpool_with_indices(*cur, pool->size);
      fp.outputs.push_back(std::move(r.output));
      fp.argmax[i] = std::move(r.argmax);
    } else if (std::holds_alternative<DenseSpec>(layer)) {
      fp.outputs.push_back(relu(dense_forward(*cur, std::get<DenseParams>(net.params()[i]))));
    } else {
      fp.outputs.push_back(dense_forward(*cur, std::get<DenseParams>(net.params()[i])));
    }
    cur = &fp.outputs.back();
  }
  const Tensor4& logits = fp.outputs.back();
  const std::size_t b = logits.extent(0);
  const std::size_t k = logits.extent(3);
  fp.probs = Tensor2({b, k});
  for (std::size_t s = 0; s < b; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[s * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (fp.probs(s, j) = std::exp(logits[s * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) fp.probs(s, j) /= z;
  }
  return fp;
}

/// Logits [b, classes] for a batch of images.
inline Tensor2 predict_logits(const Network& net, const Tensor4& images) {
  auto fp = forward(net, images);
  const Tensor4& l = fp.logits();
  return Tensor2({l.extent(0), l.extent(3)}, l.values());
}

/// Mean cross-entropy computed from logits via log-sum-exp.
inline double cross_entropy(const Tensor4& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.extent(0);
  const std::size_t k = logits.extent(3);
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    const double* z = logits.data().data() + s * k;
    const double mx = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
    total += mx + std::log(sum) - z[static_cast<std::size_t>(labels[s])];
  }
  return total / static_cast<double>(b);
}

// How per-sample cross-entropies combine into the training objective. `sum`
// makes the SGD step size independent of the batch size.
enum class Reduction { sum, mean };

inline double reduce_scale(Reduction r, std::size_t batch) {
  return r == Reduction::mean ? 1.0 / static_cast<double>(batch) : 1.0;
}

inline void check_batch(const Network& net, const Batch& batch) {
  if (batch.size() == 0 || batch.images.extent(0) != batch.size()) {
    throw DomainError("empty batch");
  }
  for (int l : batch.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= net.classes()) {
      throw IndexError("label " + std::to_string(l) + " outside class range");
    }
  }
}

/// Training objective: batch cross-entropy under `reduction`.
inline double objective(const Network& net, const Batch& batch, Reduction reduction = Reduction::sum) {
  check_batch(net, batch);
  const double mean = cross_entropy(forward(net, batch.images).logits(), batch.labels);
  return mean * static_cast<double>(batch.size()) * reduce_scale(reduction, batch.size());
}

struct Gradients {
  double loss = 0.0;  // mean cross-entropy, whatever the reduction
  std::vector<LayerParams> params;  // same layout as Network::params()
  ForwardPass pass;
};

/// Full backpropagation of the batch cross-entropy objective.
inline Gradients compute_gradients(const Network& net, const Batch& batch,
                                   Reduction reduction = Reduction::sum) {
  check_batch(net, batch);
  Gradients g;
  g.pass = forward(net, batch.images);
  const auto& spec = net.spec();
  const auto& outs = g.pass.outputs;
  g.loss = cross_entropy(outs.back(), batch.labels);

  const std::size_t b = batch.size();
  const std::size_t classes = net.classes();
  const double scale = reduce_scale(reduction, b);
  Tensor4 delta({b, 1, 1, classes});  // dL/d(layer output) flowing backwards
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t j = 0; j < classes; ++j)
      delta[s * classes + j] =
          (g.pass.probs(s, j) - (static_cast<int>(j) == batch.labels[s] ? 1.0 : 0.0)) * scale;

  g.params.resize(spec.layers.size());
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const Tensor4& input = li == 0 ? batch.images : outs[li - 1];
    const bool need_input_grad = li > 0;
    const auto& layer = spec.layers[li];

    if (std::holds_alternative<DenseSpec>(layer) || std::holds_alternative<SoftmaxSpec>(layer)) {
      if (std::holds_alternative<DenseSpec>(layer)) {
        const Tensor4& out = outs[li];
        for (std::size_t i = 0; i < delta.size(); ++i)
          if (out[i] <= 0.0) delta[i] = 0.0;
      }
      const auto& p = std::get<DenseParams>(net.params()[li]);
      const std::size_t n = p.weights.extent(0);
      const std::size_t u = p.weights.extent(1);
      DenseParams gp{Tensor2({n, u}), Vector(u, 0.0)};
      Tensor4 din(input.shape());
      const double* x = input.data().data();
      const double* w = p.weights.data().data();
      double* gw = gp.weights.data().data();
      for (std::size_t s = 0; s < b; ++s) {
        const double* ds = delta.data().data() + s * u;
        for (std::size_t k = 0; k < u; ++k) gp.bias[k] += ds[k];
        for (std::size_t i = 0; i < n; ++i) {
          const double xi = x[s * n + i];
          const double* wi = w + i * u;
          if (xi != 0.0) {
            double* gwi = gw + i * u;
            for (std::size_t k = 0; k < u; ++k) gwi[k] += xi * ds[k];
          }
          if (need_input_grad) {
            double acc = 0.0;
            for (std::size_t k = 0; k < u; ++k) acc += wi[k] * ds[k];
            din[s * n + i] = acc;
          }
        }
      }
      g.params[li] = std::move(gp);
      delta = std::move(din);
    } else if (std::holds_alternative<PoolSpec>(layer)) {
      Tensor4 din(input.shape());
      const auto& idx = g.pass.argmax[li];
      for (std::size_t i = 0; i < idx.size(); ++i) din[idx[i]] += delta[i];
      delta = std::move(din);
    } else {
      const Tensor4& out = outs[li];
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (out[i] <= 0.0) delta[i] = 0.0;
      const auto& p = std::get<ConvParams>(net.params()[li]);
      const auto [w, w2, c, f] = p.kernel.shape();
      const std::size_t h = input.extent(1);
      const std::size_t o = out.extent(1);
      ConvParams gp{Tensor4(p.kernel.shape()), Vector(f, 0.0)};
      Tensor4 din(need_input_grad ? input.shape() : Tensor4::Shape{0, 0, 0, 0});
      const double* in = input.data().data();
      const double* ker = p.kernel.data().data();
      double* gk = gp.kernel.data().data();
      double* gin = din.data().data();
      for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t i = 0; i < o; ++i) {
          for (std::size_t j = 0; j < o; ++j) {
            const double* d = delta.data().data() + ((s * o + i) * o + j) * f;
            bool any = false;
            for (std::size_t k = 0; k < f; ++k) {
              gp.bias[k] += d[k];
              any = any || d[k] != 0.0;
            }
            if (!any) continue;
            for (std::size_t pp = 0; pp < w; ++pp) {
              for (std::size_t q = 0; q < w; ++q) {
                const std::size_t px = ((s * h + i + pp) * h + j + q) * c;
                const std::size_t kp = (pp * w + q) * c * f;
                for (std::size_t r = 0; r < c; ++r) {
                  const double v = in[px + r];
                  double* gkr = gk + kp + r * f;
                  for (std::size_t k = 0; k < f; ++k) gkr[k] += v * d[k];
                  if (need_input_grad) {
                    const double* kr = ker + kp + r * f;
                    double acc = 0.0;
                    for (std::size_t k = 0; k < f; ++k) acc += kr[k] * d[k];
                    gin[px + r] += acc;
                  }
                }
              }
            }
          }
        }
      }
      g.params[li] = std::move(gp);
      delta = std::move(din);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;                 // mean cross-entropy of the batch
  std::vector<Tensor4> activations;  // per conv layer, post-ReLU [b, m, m, f]
  std::vector<Tensor4> weights;      // per conv layer kernel after the update
};

/// One plain-SGD step (w <- w - lr * grad) on the batch cross-entropy.
/// The record's step is the zero-based index of this step.
inline StepRecord train_step(Network& net, const Batch& batch, double lr,
                             Reduction reduction = Reduction::sum) {
  if (!(lr >= 0.0)) throw DomainError("learning rate must be non-negative");
  auto g = compute_gradients(net, batch, reduction);
  if (!std::isfinite(g.loss)) throw DivergenceError(net.step());

  auto& params = net.mutable_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (auto* c = std::get_if<ConvParams>(&params[i])) {
      const auto& gc = std::get<ConvParams>(g.params[i]);
      auto w = c->kernel.data();
      auto gw = gc.kernel.data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j];
      for (std::size_t j = 0; j < c->bias.size(); ++j) c->bias[j] -= lr * gc.bias[j];
    } else if (auto* d = std::get_if<DenseParams>(&params[i])) {
      const auto& gd = std::get<DenseParams>(g.params[i]);
      auto w = d->weights.data();
      auto gw = gd.weights.data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j];
      for (std::size_t j = 0; j < d->bias.size(); ++j) d->bias[j] -= lr * gd.bias[j];
    }
  }

  StepRecord rec;
  rec.step = net.step();
  rec.loss = g.loss;
  for (std::size_t pos : net.conv_layers()) {
    rec.activations.push_back(std::move(g.pass.outputs[pos]));
    rec.weights.push_back(std::get<ConvParams>(params[pos]).kernel);
  }
  net.advance_step();
  return rec;
}

inline std::size_t argmax_row(const Tensor2& m, std::size_t row) {
  const std::size_t k = m.extent(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (m(row, j) > m(row, best)) best = j;
  return best;
}

/// Fraction of samples whose arg-max logit equals the label.
inline double evaluate(const Network& net, const Tensor4& images, const std::vector<int>& labels,
                       std::size_t chunk = 200) {
  const std::size_t n = labels.size();
  if (n == 0 || images.extent(0) != n) throw DomainError("empty dataset");
  const auto [_, h, w, c] = images.shape();
  const std::size_t per = h * w * c;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    const auto first = images.values().begin() + static_cast<std::ptrdiff_t>(start * per);
    Tensor4 part({len, h, w, c}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len * per)));
    const Tensor2 logits = predict_logits(net, part);
    for (std::size_t s = 0; s < len; ++s)
      if (static_cast<int>(argmax_row(logits, s)) == labels[start + s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace cnnscope
