#pragma once

#include "mad/autodiff.hpp"
#include "mad/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mad {

enum class ArchId { mlp2, convnet4 };

std::string to_string(ArchId arch);
ArchId parse_arch(const std::string& name);

struct ConvSpec {
  std::size_t c_in, c_out, kernel, stride, padding;
};
struct FcSpec {
  std::size_t n_in, n_out;
};
struct ReluSpec {};
struct FlattenSpec {};

using LayerSpec = std::variant<ConvSpec, FcSpec, ReluSpec, FlattenSpec>;

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

/// Where a parametric layer's weights and bias live in the flat vector, plus
/// the shapes needed to view them. Weight matrices are [rows, cols] with one
/// row per output channel: rows = c_out, cols = c_in*k*k (conv) or n_in (fc).
struct ParamLayer {
  std::size_t layer_index = 0;  // index into Network::layers()
  bool is_conv = false;
  Range weight;
  Range bias;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t weight_offset = 0;  // first position of this layer in weights-only indexing
  Shape weight_shape;
  Shape input_shape;   // per-sample activation entering the layer
  Shape output_shape;  // per-sample layer output z
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t layer, const std::string& what)
      : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

/// Per-parameter continuous mask in [0,1]^d. Bias entries are held at one.
struct MaskVector {
  std::vector<Real> values;
};

/// Tape handles for one parametric layer after a forward pass.
struct LayerVars {
  Var weight;       // effective weight actually used (w, or w*m)
  Var bias;
  Var raw_weight;   // leaf holding w
  Var mask;         // leaf holding the weight mask, when a trainable mask is bound
  Var input;        // activation a entering the layer, [n, ...]
  Var output;       // layer output z (pre-activation), [n, ...]
};

struct Trace {
  Var input;
  Var logits;
  std::vector<LayerVars> layers;  // one per ParamLayer
};

struct BindOptions {
  bool params_require_grad = false;
  bool input_requires_grad = false;
  /// Fixed mask multiplied into the flat vector before reshaping.
  const MaskVector* mask = nullptr;
  /// Bind the mask as a differentiable leaf instead (requires `mask`).
  bool mask_requires_grad = false;
};

class Network {
 public:
  Network(ArchId arch, Shape input_shape, std::size_t n_classes, std::uint64_t seed,
          std::vector<LayerSpec> layers);

  ArchId arch() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t n_classes() const { return n_classes_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<ParamLayer>& param_layers() const { return param_layers_; }

  std::size_t num_params() const { return params_.size(); }
  std::size_t num_weights() const { return num_weights_; }

  std::vector<Real>& params() { return params_; }
  const std::vector<Real>& params() const { return params_; }

  /// Flat parameter index of weights-only position `w`.
  std::size_t weight_flat_index(std::size_t w) const;
  /// Parametric layer owning weights-only position `w`.
  std::size_t weight_layer(std::size_t w) const;
  bool is_bias(std::size_t flat) const;

  /// Mask of all ones with the correct dimension.
  MaskVector ones_mask() const;

  /// Records the forward pass on `tape`. `x` is [n, ...input_shape].
  Trace forward(Tape& tape, const Tensor& x, const BindOptions& opts = {}) const;
  /// Inference only; returns logits [n, n_classes].
  Tensor logits(const Tensor& x, const MaskVector* mask = nullptr) const;

  /// Gradient with respect to the flat parameter vector after tape.backward().
  std::vector<Real> param_grad(const Tape& tape, const Trace& trace) const;
  /// Gradient with respect to the flat mask after tape.backward(); bias slots are zero.
  std::vector<Real> mask_grad(const Tape& tape, const Trace& trace) const;

  /// Shapes of the per-sample tensor produced by each layer.
  std::vector<Shape> layer_output_shapes() const;

  bool operator==(const Network& other) const;

 private:
  ArchId arch_;
  Shape input_shape_;
  std::size_t n_classes_;
  std::uint64_t seed_;
  std::vector<LayerSpec> layers_;
  std::vector<ParamLayer> param_layers_;
  std::vector<Real> params_;
  std::size_t num_weights_ = 0;
};

/// Builds one of the fixed desk-scale architectures with fan-in scaled
/// uniform (Kaiming) weights and zero biases.
Network make_net(ArchId arch, const Shape& input_shape, std::size_t n_classes, std::uint64_t seed);

}  // namespace mad
