#pragma once

#include "mad/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mad {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IdxMagicError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class IdxTruncatedError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class IdxCountMismatchError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct Batch {
  Tensor x;                         // [n, ...image_shape]
  std::vector<int> y;
  std::vector<std::uint64_t> ids;   // sample indices, used to derive per-sample RNG streams
  std::size_t size() const { return y.size(); }
};

/// Labeled images with pixels in [0, 1].
struct Dataset {
  Shape image_shape;
  std::size_t n_classes = 0;
  std::vector<Real> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return shape_numel(image_shape); }
  Batch batch(std::span<const std::size_t> indices) const;
  Batch range(std::size_t begin, std::size_t end) const;
  /// Samples [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

struct SyntheticOptions {
  std::uint64_t seed = 0;
  std::size_t n_train = 6000;
  std::size_t n_test = 1000;
  double noise_sigma = 0.15;
  std::size_t side = 16;
  double contrast = 0.45;  // amplitude of the class-specific strokes
};

/// Ten 16x16 grayscale class templates plus seeded Gaussian pixel noise,
/// clamped to [0, 1]. Sample i has label i % 10 in both splits.
DatasetSplits make_synthetic10(const SyntheticOptions& opts);

/// The template images themselves, [10, side*side].
std::vector<std::vector<Real>> synthetic10_templates(std::uint64_t seed, std::size_t side,
                                                     double contrast = 0.45);

/// Parses an IDX image file (magic 0x00000803) and label file (0x00000801).
Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Reads train-images-idx3-ubyte / train-labels-idx1-ubyte and the t10k pair.
DatasetSplits load_idx_dir(const std::filesystem::path& dir);

}  // namespace mad
