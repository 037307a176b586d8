#include "mad/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mad {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

Real Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), std::move(data_));
}

void Tensor::fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::axpy(Real scale, const Tensor& other) {
  require_same_shape(*this, other, "axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& a, Real s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

Tensor add_scalar(const Tensor& a, Real s) {
  Tensor out = a;
  for (auto& v : out.data()) v += s;
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1) throw ShapeError("bias must be rank 1, got " + shape_str(bias.shape()));
  std::size_t channel_axis = x.rank() >= 4 || x.rank() == 2 ? 1 : 0;
  if (x.rank() < 1 || x.dim(channel_axis) != bias.dim(0)) {
    throw ShapeError("add_channel_bias: channel axis " + std::to_string(channel_axis) + " of " +
                     shape_str(x.shape()) + " does not match bias " + shape_str(bias.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < channel_axis; ++i) outer *= x.dim(i);
  const std::size_t channels = bias.dim(0);
  const std::size_t inner = x.numel() / (outer * channels);
  Tensor out = x;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      Real* p = out.data().data() + (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bias[c];
    }
  return out;
}

Real sum(const Tensor& a) {
  Real s = 0;
  for (auto v : a.data()) s += v;
  return s;
}

Real dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  Real s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

Real max_abs(const Tensor& a) {
  Real m = 0;
  for (auto v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

void gemm(std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Map cm(c.data(), mi, ni);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      cm.noalias() += lhs * rhs;
    else
      cm.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) {
    run(ConstMap(a.data(), mi, ki), ConstMap(b.data(), ki, ni));
  } else if (!trans_a && trans_b) {
    run(ConstMap(a.data(), mi, ki), ConstMap(b.data(), ni, ki).transpose());
  } else if (trans_a && !trans_b) {
    run(ConstMap(a.data(), ki, mi).transpose(), ConstMap(b.data(), ki, ni));
  } else {
    run(ConstMap(a.data(), ki, mi).transpose(), ConstMap(b.data(), ni, ki).transpose());
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     " (inner axes a[1], b[0] must agree)");
  }
  Tensor out({a.dim(0), b.dim(1)});
  gemm(a.data(), false, b.data(), false, out.data(), a.dim(0), b.dim(1), a.dim(1), false);
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(a.shape()));
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out[j * a.dim(0) + i] = a[i * a.dim(1) + j];
  return out;
}

std::size_t ConvGeometry::out_height() const {
  return (height + 2 * padding - kernel) / stride + 1;
}

std::size_t ConvGeometry::out_width() const {
  return (width + 2 * padding - kernel) / stride + 1;
}

void ConvGeometry::validate() const {
  if (stride < 1) throw ShapeError("conv stride must be >= 1");
  if (kernel < 1) throw ShapeError("conv kernel must be >= 1");
  if (kernel > height + 2 * padding || kernel > width + 2 * padding) {
    throw ShapeError("conv kernel " + std::to_string(kernel) + " exceeds padded input " +
                     std::to_string(height + 2 * padding) + "x" +
                     std::to_string(width + 2 * padding));
  }
}

void im2col(std::span<const Real> image, const ConvGeometry& g, std::span<Real> cols) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), spatial = oh * ow;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const Real* plane = image.data() + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        Real* out = cols.data() + row * spatial;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            out[oy * ow + ox] = inside ? plane[iy * g.width + ix] : Real(0);
          }
        }
      }
  }
}

void col2im(std::span<const Real> cols, const ConvGeometry& g, std::span<Real> image) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), spatial = oh * ow;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    Real* plane = image.data() + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const Real* in = cols.data() + row * spatial;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            plane[iy * g.width + ix] += in[oy * ow + ox];
          }
        }
      }
  }
}

Tensor im2col(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3) throw ShapeError("im2col expects [c, h, w], got " + shape_str(input.shape()));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernel, stride, padding};
  g.validate();
  Tensor cols({g.patch_size(), g.out_spatial()});
  im2col(input.data(), g, cols.data());
  return cols;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t padding) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3) {
    throw ShapeError("conv2d input must be [c, h, w] or [n, c, h, w], got " +
                     shape_str(input.shape()));
  }
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be [c_out, c_in, k, k]");
  const std::size_t n = batched ? input.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  ConvGeometry g{input.dim(off), input.dim(off + 1), input.dim(off + 2), kernel.dim(2), stride,
                 padding};
  if (kernel.dim(1) != g.channels) {
    throw ShapeError("conv2d: kernel axis 1 (c_in=" + std::to_string(kernel.dim(1)) +
                     ") != input channel axis (" + std::to_string(g.channels) + ")");
  }
  if (kernel.dim(2) != kernel.dim(3)) throw ShapeError("conv2d: kernel axes 2 and 3 must be equal");
  const std::size_t c_out = kernel.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != c_out) {
    throw ShapeError("conv2d: bias axis 0 must equal kernel axis 0 (c_out=" +
                     std::to_string(c_out) + "), got " + shape_str(bias.shape()));
  }
  g.validate();
  const std::size_t spatial = g.out_spatial(), patch = g.patch_size();
  const std::size_t in_size = g.channels * g.height * g.width;
  Shape out_shape = {c_out, g.out_height(), g.out_width()};
  if (batched) out_shape.insert(out_shape.begin(), n);
  Tensor out(out_shape);
  std::vector<Real> cols(patch * spatial);
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.data().subspan(s * in_size, in_size), g, cols);
    std::span<Real> dst = out.data().subspan(s * c_out * spatial, c_out * spatial);
    gemm(kernel.data(), false, cols, false, dst, c_out, spatial, patch, false);
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t i = 0; i < spatial; ++i) dst[c * spatial + i] += bias[c];
  }
  return out;
}

}  // namespace mad
