#include "mad/model.hpp"

#include "mad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mad {

std::string to_string(ArchId arch) {
  switch (arch) {
    case ArchId::mlp2: return "mlp2";
    case ArchId::convnet4: return "convnet4";
  }
  return "?";
}

ArchId parse_arch(const std::string& name) {
  if (name == "mlp2") return ArchId::mlp2;
  if (name == "convnet4") return ArchId::convnet4;
  throw std::invalid_argument("unknown arch_id '" + name + "'");
}

Network::Network(ArchId arch, Shape input_shape, std::size_t n_classes, std::uint64_t seed,
                 std::vector<LayerSpec> layers)
    : arch_(arch),
      input_shape_(std::move(input_shape)),
      n_classes_(n_classes),
      seed_(seed),
      layers_(std::move(layers)) {
  Shape cur = input_shape_;
  std::size_t offset = 0;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerSpec& spec = layers_[li];
    if (const auto* conv = std::get_if<ConvSpec>(&spec)) {
      if (cur.size() != 3 || cur[0] != conv->c_in) {
        throw ShapeError("layer " + std::to_string(li) + ": conv expects [" +
                         std::to_string(conv->c_in) + ", h, w] input, got " + shape_str(cur));
      }
      ConvGeometry g{cur[0], cur[1], cur[2], conv->kernel, conv->stride, conv->padding};
      g.validate();
      ParamLayer p;
      p.layer_index = li;
      p.is_conv = true;
      p.rows = conv->c_out;
      p.cols = g.patch_size();
      p.weight_shape = {conv->c_out, conv->c_in, conv->kernel, conv->kernel};
      p.input_shape = cur;
      cur = {conv->c_out, g.out_height(), g.out_width()};
      p.output_shape = cur;
      p.weight = {offset, offset + p.rows * p.cols};
      p.bias = {p.weight.end, p.weight.end + p.rows};
      p.weight_offset = num_weights_;
      offset = p.bias.end;
      num_weights_ += p.weight.size();
      param_layers_.push_back(std::move(p));
    } else if (const auto* fc = std::get_if<FcSpec>(&spec)) {
      if (cur.size() != 1 || cur[0] != fc->n_in) {
        throw ShapeError("layer " + std::to_string(li) + ": fully-connected expects [" +
                         std::to_string(fc->n_in) + "] input, got " + shape_str(cur));
      }
      ParamLayer p;
      p.layer_index = li;
      p.rows = fc->n_out;
      p.cols = fc->n_in;
      p.weight_shape = {fc->n_out, fc->n_in};
      p.input_shape = cur;
      cur = {fc->n_out};
      p.output_shape = cur;
      p.weight = {offset, offset + p.rows * p.cols};
      p.bias = {p.weight.end, p.weight.end + p.rows};
      p.weight_offset = num_weights_;
      offset = p.bias.end;
      num_weights_ += p.weight.size();
      param_layers_.push_back(std::move(p));
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      cur = {shape_numel(cur)};
    }
  }
  if (cur.size() != 1 || cur[0] != n_classes_) {
    throw ShapeError("network output " + shape_str(cur) + " does not match n_classes " +
                     std::to_string(n_classes_));
  }
  params_.assign(offset, Real(0));
}

std::vector<Shape> Network::layer_output_shapes() const {
  std::vector<Shape> shapes;
  Shape cur = input_shape_;
  for (const auto& spec : layers_) {
    if (const auto* conv = std::get_if<ConvSpec>(&spec)) {
      ConvGeometry g{cur[0], cur[1], cur[2], conv->kernel, conv->stride, conv->padding};
      cur = {conv->c_out, g.out_height(), g.out_width()};
    } else if (const auto* fc = std::get_if<FcSpec>(&spec)) {
      cur = {fc->n_out};
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      cur = {shape_numel(cur)};
    }
    shapes.push_back(cur);
  }
  return shapes;
}

std::size_t Network::weight_layer(std::size_t w) const {
  if (w >= num_weights_) throw std::out_of_range("weight position out of range");
  auto it = std::upper_bound(param_layers_.begin(), param_layers_.end(), w,
                             [](std::size_t v, const ParamLayer& p) { return v < p.weight_offset; });
  return static_cast<std::size_t>(it - param_layers_.begin()) - 1;
}

std::size_t Network::weight_flat_index(std::size_t w) const {
  const ParamLayer& p = param_layers_[weight_layer(w)];
  return p.weight.begin + (w - p.weight_offset);
}

bool Network::is_bias(std::size_t flat) const {
  for (const auto& p : param_layers_)
    if (p.bias.contains(flat)) return true;
  return false;
}

MaskVector Network::ones_mask() const { return MaskVector{std::vector<Real>(params_.size(), 1)}; }

namespace {

Tensor slice(const std::vector<Real>& v, Range r, Shape shape) {
  return Tensor(std::move(shape), std::vector<Real>(v.begin() + r.begin, v.begin() + r.end));
}

void check_finite(const Tensor& t, std::size_t layer) {
  for (Real v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(layer, "non-finite activation at layer " + std::to_string(layer));
    }
  }
}

}  // namespace

Trace Network::forward(Tape& tape, const Tensor& x, const BindOptions& opts) const {
  if (x.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), x.shape().begin() + 1)) {
    throw ShapeError("network input must be [n] + " + shape_str(input_shape_) + ", got " +
                     shape_str(x.shape()));
  }
  if (opts.mask_requires_grad && opts.mask == nullptr) {
    throw std::invalid_argument("mask_requires_grad needs a mask");
  }
  if (opts.mask && opts.mask->values.size() != params_.size()) {
    throw ShapeError("mask dimension " + std::to_string(opts.mask->values.size()) +
                     " != parameter dimension " + std::to_string(params_.size()));
  }
  const std::size_t n = x.dim(0);
  // A fixed mask is applied on the flat vector before any reshaping.
  std::vector<Real> masked;
  const std::vector<Real>* source = &params_;
  if (opts.mask && !opts.mask_requires_grad) {
    masked = params_;
    for (const auto& p : param_layers_)
      for (std::size_t i = p.weight.begin; i < p.weight.end; ++i) masked[i] *= opts.mask->values[i];
    source = &masked;
  }

  Trace trace;
  trace.input = tape.leaf(x, opts.input_requires_grad);
  Var cur = trace.input;
  std::size_t pi = 0;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerSpec& spec = layers_[li];
    if (std::holds_alternative<ReluSpec>(spec)) {
      cur = tape.relu(cur);
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      cur = tape.reshape(cur, {n, shape_numel(tape.value(cur).shape()) / n});
    } else {
      const ParamLayer& p = param_layers_[pi++];
      LayerVars lv;
      lv.input = cur;
      lv.raw_weight = tape.leaf(slice(*source, p.weight, p.weight_shape), opts.params_require_grad);
      lv.bias = tape.leaf(slice(*source, p.bias, {p.rows}), opts.params_require_grad);
      lv.weight = lv.raw_weight;
      if (opts.mask_requires_grad) {
        lv.mask = tape.leaf(slice(opts.mask->values, p.weight, p.weight_shape), true);
        lv.weight = tape.mul(lv.raw_weight, lv.mask);
      }
      if (p.is_conv) {
        const auto& conv = std::get<ConvSpec>(spec);
        cur = tape.conv2d(cur, lv.weight, lv.bias, conv.stride, conv.padding);
      } else {
        cur = tape.linear(cur, lv.weight, lv.bias);
      }
      lv.output = cur;
      trace.layers.push_back(lv);
    }
    check_finite(tape.value(cur), li);
  }
  trace.logits = cur;
  return trace;
}

Tensor Network::logits(const Tensor& x, const MaskVector* mask) const {
  Tape tape;
  BindOptions opts;
  opts.mask = mask;
  Trace t = forward(tape, x, opts);
  return tape.value(t.logits);
}

std::vector<Real> Network::param_grad(const Tape& tape, const Trace& trace) const {
  std::vector<Real> g(params_.size(), Real(0));
  for (std::size_t i = 0; i < param_layers_.size(); ++i) {
    const ParamLayer& p = param_layers_[i];
    const Tensor gw = tape.grad(trace.layers[i].raw_weight);
    const Tensor gb = tape.grad(trace.layers[i].bias);
    std::copy(gw.data().begin(), gw.data().end(), g.begin() + p.weight.begin);
    std::copy(gb.data().begin(), gb.data().end(), g.begin() + p.bias.begin);
  }
  return g;
}

std::vector<Real> Network::mask_grad(const Tape& tape, const Trace& trace) const {
  std::vector<Real> g(params_.size(), Real(0));
  for (std::size_t i = 0; i < param_layers_.size(); ++i) {
    if (!trace.layers[i].mask.valid()) throw std::logic_error("mask_grad: no trainable mask bound");
    const Tensor gm = tape.grad(trace.layers[i].mask);
    std::copy(gm.data().begin(), gm.data().end(), g.begin() + param_layers_[i].weight.begin);
  }
  return g;
}

bool Network::operator==(const Network& other) const {
  return arch_ == other.arch_ && input_shape_ == other.input_shape_ &&
         n_classes_ == other.n_classes_ && seed_ == other.seed_ && params_ == other.params_;
}

Network make_net(ArchId arch, const Shape& input_shape, std::size_t n_classes, std::uint64_t seed) {
  std::vector<LayerSpec> layers;
  switch (arch) {
    case ArchId::mlp2: {
      const std::size_t n_in = shape_numel(input_shape);
      layers = {FlattenSpec{}, FcSpec{n_in, 256}, ReluSpec{}, FcSpec{256, n_classes}};
      break;
    }
    case ArchId::convnet4: {
      if (input_shape.size() != 3) {
        throw ShapeError("convnet4 needs a [c, h, w] input shape, got " + shape_str(input_shape));
      }
      ConvGeometry g1{input_shape[0], input_shape[1], input_shape[2], 3, 1, 0};
      g1.validate();
      ConvGeometry g2{16, g1.out_height(), g1.out_width(), 3, 2, 0};
      g2.validate();
      const std::size_t flat = 32 * g2.out_spatial();
      layers = {ConvSpec{input_shape[0], 16, 3, 1, 0}, ReluSpec{}, ConvSpec{16, 32, 3, 2, 0},
                ReluSpec{}, FlattenSpec{}, FcSpec{flat, 128}, ReluSpec{}, FcSpec{128, n_classes}};
      break;
    }
  }
  Network net(arch, input_shape, n_classes, seed, std::move(layers));
  Rng rng(derive_seed(seed, {0x1417}));
  for (const auto& p : net.param_layers()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(p.cols));
    for (std::size_t i = p.weight.begin; i < p.weight.end; ++i) {
      net.params()[i] = rng.uniform(-bound, bound);
    }
  }
  return net;
}

}  // namespace mad
