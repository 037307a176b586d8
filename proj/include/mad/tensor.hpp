#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

/// Working precision, fixed for the whole library.
using Real = double;
using Shape = std::vector<std::size_t>;

/// Raised whenever two operands disagree on a dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array. Every dimension is strictly positive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value) { return Tensor({1}, value); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real item() const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(Real value);

  /// In-place `this += scale * other`; used by optimizers and gradient accumulation.
  void axpy(Real scale, const Tensor& other);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

// Elementwise arithmetic. Shapes must match exactly; the only broadcasting
// rules are scalar-with-tensor and per-channel bias (see add_channel_bias).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
Tensor add_scalar(const Tensor& a, Real s);

/// Adds bias[c] to every element of channel c. `x` is [c, ...] or [n, c, ...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Real sum(const Tensor& a);
Real dot(const Tensor& a, const Tensor& b);
Real max_abs(const Tensor& a);

/// [m, k] x [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t patch_size() const { return channels * kernel * kernel; }
  std::size_t out_spatial() const { return out_height() * out_width(); }
  void validate() const;
};

/// Lower one image [c, h, w] to the patch matrix [c*k*k, h'*w']. Column i holds
/// the receptive field of output position i, rows ordered (channel, ky, kx).
void im2col(std::span<const Real> image, const ConvGeometry& g, std::span<Real> cols);
/// Adjoint of im2col: scatter-add columns back into an image.
void col2im(std::span<const Real> cols, const ConvGeometry& g, std::span<Real> image);

Tensor im2col(const Tensor& input, std::size_t kernel, std::size_t stride,
              std::size_t padding);

/// input [c_in, h, w] or [n, c_in, h, w]; kernel [c_out, c_in, k, k]; bias [c_out].
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t padding);

/// Row-major GEMM helpers shared by the differentiable ops: C (+)= op(A) op(B).
/// A is m x k (or k x m when transposed), B is k x n (or n x k).
void gemm(std::span<const Real> a, bool trans_a, std::span<const Real> b, bool trans_b,
          std::span<Real> c, std::size_t m, std::size_t n, std::size_t k,
          bool accumulate);

}  // namespace mad
